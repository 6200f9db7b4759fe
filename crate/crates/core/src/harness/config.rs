use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Exec;
use crate::inference::AblationMode;
use crate::providers::ProviderConfig;
use crate::selector::SelectionMethod;

use super::HarnessError;

/// Where a stage's model calls go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderSpec {
    /// Offline deterministic mock.
    Mock {
        #[serde(default)]
        seed: Option<u64>,
        /// JSON object of prompt hash to reply.
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        strict: bool,
    },
    /// OpenAI-compatible HTTP endpoint.
    Http(ProviderConfig),
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Mock {
            seed: None,
            fixture: None,
            strict: false,
        }
    }
}

impl ProviderSpec {
    pub fn max_in_flight(&self) -> Option<usize> {
        match self {
            ProviderSpec::Http(c) => Some(c.max_in_flight),
            ProviderSpec::Mock { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotOrder {
    /// Highest-scoring shot first.
    #[default]
    Score,
    /// Order returned by the selector.
    Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub label_column: String,
    /// Sent as the Task block; a generic sentence naming the label is used when unset.
    pub task_description: Option<String>,
    /// Whether the surrogate prompt starts with the Task block.
    pub task_header: bool,

    pub train_fraction: f64,
    /// Candidate pool size M.
    pub candidates: usize,
    /// Master seeds; one full run per seed.
    pub seeds: Vec<u64>,
    pub test_subsample: Option<usize>,

    /// Words requested per explanation (n).
    pub n_words: usize,
    /// Cumulative-importance threshold p.
    pub importance_threshold: f64,
    /// Shots per prompt (k).
    pub k: usize,
    /// Embedding dimension (u).
    pub embedding_dim: usize,
    pub method: SelectionMethod,
    /// Filter demonstrations to salient features before embedding.
    pub filter: bool,
    /// Also filter the test question before embedding.
    pub filter_query: bool,
    /// Plain top-k over cluster scores instead of one shot per cluster.
    pub cluster_literal: bool,
    /// Number of k-means centroids; defaults to k.
    pub centroids: Option<usize>,
    pub kmeans_restarts: usize,
    pub shot_order: ShotOrder,
    pub ablation: AblationMode,

    pub temperature: f64,
    pub top_p: f64,
    /// Extra surrogate queries after an unparseable reply.
    pub parse_retries: u32,

    pub explainer: ProviderSpec,
    pub surrogate: ProviderSpec,
    pub embedder: ProviderSpec,

    #[serde(skip_serializing)]
    pub exec: Exec,
    /// Worker threads for per-candidate and per-query work.
    #[serde(skip_serializing)]
    pub max_in_flight: usize,

    #[serde(skip_serializing)]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            label_column: String::new(),
            task_description: None,
            task_header: true,
            train_fraction: 0.9,
            candidates: 100,
            seeds: vec![0],
            test_subsample: None,
            n_words: 5,
            importance_threshold: 0.85,
            k: 4,
            embedding_dim: 128,
            method: SelectionMethod::Cosine,
            filter: true,
            filter_query: true,
            cluster_literal: false,
            centroids: None,
            kmeans_restarts: 10,
            shot_order: ShotOrder::Score,
            ablation: AblationMode::None,
            temperature: 0.3,
            top_p: 1.0,
            parse_retries: 0,
            explainer: ProviderSpec::default(),
            surrogate: ProviderSpec::default(),
            embedder: ProviderSpec::default(),
            exec: Exec::Parallel,
            max_in_flight: 8,
            cache_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a TOML config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.data);
            fix(&mut cfg.out_dir);
            if let Some(c) = cfg.cache_dir.as_mut() {
                fix(c);
            }
            for spec in [&mut cfg.explainer, &mut cfg.surrogate, &mut cfg.embedder] {
                if let ProviderSpec::Mock { fixture: Some(f), .. } = spec {
                    fix(f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_owned()));
        if self.label_column.is_empty() {
            return bad("label_column is required");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.candidates == 0 {
            return bad("candidates must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.n_words == 0 {
            return bad("n_words must be positive");
        }
        if !(self.importance_threshold > 0.0 && self.importance_threshold <= 1.0) {
            return bad("importance_threshold must lie in (0, 1]");
        }
        if self.k > self.candidates {
            return bad("k cannot exceed the candidate pool size");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if let Some(m) = self.centroids {
            if m == 0 || m > self.candidates {
                return bad("centroids must lie in 1..=candidates");
            }
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("temperature must lie in [0, 2] and top_p in (0, 1]");
        }
        Ok(())
    }

    /// File stem of the data path, used to name cache files.
    pub fn dataset_name(&self) -> String {
        self.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn centroid_count(&self) -> usize {
        self.centroids.unwrap_or(self.k).max(1)
    }
}

/// Independent seeds for each random stage, all derived from one master
/// seed so that changing one stage never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub master: u64,
    pub split: u64,
    pub subsample: u64,
    pub candidates: u64,
    pub kmeans: u64,
    pub random: u64,
    pub mock: u64,
}

pub(crate) fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            split: derive_seed(master, "split"),
            subsample: derive_seed(master, "subsample"),
            candidates: derive_seed(master, "candidates"),
            kmeans: derive_seed(master, "kmeans"),
            random: derive_seed(master, "random"),
            mock: derive_seed(master, "mock"),
        }
    }

    /// Seed for random shot selection of the `i`-th test sample.
    pub fn random_for(&self, i: usize) -> u64 {
        derive_seed(self.random, &i.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_method_settings() {
        let c = RunConfig::default();
        assert_eq!((c.n_words, c.k, c.candidates, c.embedding_dim), (5, 4, 100, 128));
        assert_eq!(c.importance_threshold, 0.85);
        assert_eq!((c.temperature, c.top_p), (0.3, 1.0));
        assert_eq!(c.train_fraction, 0.9);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml_str(
            r#"
            data = "heart.csv"
            label_column = "HeartDisease"
            seeds = [1, 2, 3]
            method = "manhattan"
            ablation = "no-posthoc"

            [explainer]
            kind = "http"
            endpoint_url = "http://localhost:8000/v1"
            model_id = "gpt-3.5-turbo"

            [embedder]
            kind = "mock"
            seed = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, SelectionMethod::Manhattan);
        assert_eq!(cfg.ablation, AblationMode::NoPosthoc);
        assert_eq!(cfg.seeds, [1, 2, 3]);
        assert!(matches!(cfg.explainer, ProviderSpec::Http(ref h) if h.max_retries == 3));
        assert!(matches!(cfg.embedder, ProviderSpec::Mock { seed: Some(4), .. }));
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn validation() {
        let ok = RunConfig {
            label_column: "y".into(),
            ..Default::default()
        };
        ok.validate().unwrap();
        for broken in [
            RunConfig { k: 101, ..ok.clone() },
            RunConfig { importance_threshold: 0.0, ..ok.clone() },
            RunConfig { seeds: vec![], ..ok.clone() },
            RunConfig { label_column: String::new(), ..ok.clone() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let s = SeedStreams::new(42);
        let all = [s.split, s.subsample, s.candidates, s.kmeans, s.random, s.mock];
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
        assert_eq!(s, SeedStreams::new(42));
        assert_ne!(s.random_for(0), s.random_for(1));
    }
}
