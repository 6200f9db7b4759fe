//! End-to-end runs: split, warm-up, selection, surrogate inference and
//! scoring, plus the ablation, method-comparison and sweep drivers built on
//! top of one shared [`Session`].

mod config;
mod report;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub use config::{ProviderSpec, RunConfig, SeedStreams, ShotOrder};
pub use report::{
    write_run, write_suite, FeatureScore, RunReport, SampleRecord, SeedRun, SuiteEntry, SuiteKind, SuiteReport,
    SuiteRow, WarmupSummary,
};

use crate::dataset::{load_csv, sample_indices, split_indices, DatasetError, TabularDataset};
use crate::explainer::{compute_feature_importance, explain_candidates, select_ranked_features, ExplainError, WarmupOutcome};
use crate::inference::{assemble_prompt, parse_reply, predict, AblationMode, InferenceError, ParseStatus};
use crate::providers::{
    prompt_hash, ChatClient, ChatParams, ChatProvider, EmbeddingClient, EmbeddingProvider, HttpChat, HttpEmbedder,
    JsonCache, MockChat, MockEmbedder, ProviderError, Stage, UsageMeter,
};
use crate::selector::{
    embed, order_by_score, score_cluster, score_cosine, score_euclidean, score_manhattan, select_random,
    select_top_k, EmbeddingVector, KMeansParams, SelectError, SelectionMethod,
};
use crate::serializer::{filter_serialized, serialize, SerializeError, SerializedDemonstration};

/// Threshold grid for the `p` sweep.
pub const DEFAULT_P_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Word-count grid for the `n` sweep.
pub const DEFAULT_N_GRID: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("serialization: {0}")]
    Serialize(#[from] SerializeError),
    #[error("warm-up: {0}")]
    Explain(#[from] ExplainError),
    #[error("selection: {0}")]
    Select(#[from] SelectError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("output: {0}")]
    Output(String),
}

impl HarnessError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Dataset(_) => "dataset",
            Self::Serialize(_) => "serialization",
            Self::Explain(_) => "warm-up",
            Self::Select(_) => "selection",
            Self::Inference(_) => "inference",
            Self::Provider(_) => "provider",
            Self::Output(_) => "output",
        }
    }

    /// Process exit code, distinct per stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Dataset(_) => 3,
            Self::Serialize(_) => 4,
            Self::Explain(_) => 5,
            Self::Select(_) => 6,
            Self::Inference(_) => 7,
            Self::Provider(_) => 8,
            Self::Output(_) => 9,
        }
    }
}

fn chat_backend(spec: &ProviderSpec, default_seed: u64) -> Result<Arc<dyn ChatProvider>, HarnessError> {
    Ok(match spec {
        ProviderSpec::Mock { seed, fixture, strict } => {
            let mut mock = MockChat::new(seed.unwrap_or(default_seed)).strict(*strict);
            if let Some(path) = fixture {
                mock = mock.with_fixture_file(path)?;
            }
            Arc::new(mock)
        }
        ProviderSpec::Http(cfg) => Arc::new(HttpChat::new(cfg.clone())?),
    })
}

fn embedding_backend(
    spec: &ProviderSpec,
    default_seed: u64,
    dim: usize,
) -> Result<Arc<dyn EmbeddingProvider>, HarnessError> {
    Ok(match spec {
        ProviderSpec::Mock { seed, .. } => Arc::new(MockEmbedder::new(seed.unwrap_or(default_seed), dim)),
        ProviderSpec::Http(cfg) => Arc::new(HttpEmbedder::new(cfg.clone())?),
    })
}

fn open_cache<V>(dir: Option<&Path>, dataset: &str, kind: &str) -> Result<JsonCache<V>, HarnessError>
where
    V: Clone + serde::Serialize + serde::de::DeserializeOwned,
{
    match dir {
        Some(d) => Ok(JsonCache::open(d.join(format!("{dataset}.{kind}.json")))?),
        None => Ok(JsonCache::in_memory()),
    }
}

/// Loaded data plus model clients, caches and one usage meter, shared by
/// every run started from it.
pub struct Session {
    dataset: TabularDataset,
    dataset_name: String,
    explainer: ChatClient,
    surrogate: ChatClient,
    embedder: EmbeddingClient,
    meter: Arc<UsageMeter>,
}

impl Session {
    pub fn new(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let dataset = load_csv(&cfg.data, &cfg.label_column)?;
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: &RunConfig, dataset: TabularDataset) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let name = cfg.dataset_name();
        let dir = cfg.cache_dir.as_deref();
        let mock_seed = SeedStreams::new(cfg.seeds[0]).mock;
        let meter = Arc::new(UsageMeter::default());
        let params = ChatParams {
            temperature: cfg.temperature,
            top_p: cfg.top_p,
        };
        let explainer = ChatClient::new(
            chat_backend(&cfg.explainer, mock_seed)?,
            meter.clone(),
            open_cache(dir, &name, "explanations")?,
            params,
        );
        let surrogate = ChatClient::new(
            chat_backend(&cfg.surrogate, mock_seed)?,
            meter.clone(),
            open_cache(dir, &name, "replies")?,
            params,
        );
        let embedder = EmbeddingClient::new(
            embedding_backend(&cfg.embedder, mock_seed, cfg.embedding_dim)?,
            meter.clone(),
            open_cache(dir, &name, "embeddings")?,
            cfg.embedding_dim,
        );
        Ok(Self {
            dataset,
            dataset_name: name,
            explainer,
            surrogate,
            embedder,
            meter,
        })
    }

    pub fn dataset(&self) -> &TabularDataset {
        &self.dataset
    }

    pub fn meter(&self) -> &Arc<UsageMeter> {
        &self.meter
    }

    pub fn flush(&self) -> Result<(), HarnessError> {
        self.explainer.flush()?;
        self.surrogate.flush()?;
        self.embedder.flush()?;
        Ok(())
    }

    fn task_description(&self, cfg: &RunConfig) -> String {
        cfg.task_description.clone().unwrap_or_else(|| {
            let vocab: Vec<&str> = self.dataset.label_vocabulary().iter().map(String::as_str).collect();
            format!(
                "Predict the {} of the sample described in the question. Possible answers: {}.",
                self.dataset.label_name(),
                vocab.join(", ")
            )
        })
    }

    /// One full run per configured seed. Caches are flushed even when a run
    /// fails.
    pub fn run(&self, cfg: &RunConfig) -> Result<RunReport, HarnessError> {
        cfg.validate()?;
        if cfg.embedding_dim != self.embedder.dim() {
            return Err(HarnessError::Config(format!(
                "session was opened with embedding_dim {}",
                self.embedder.dim()
            )));
        }
        let p = self.surrogate.params();
        if p.temperature != cfg.temperature || p.top_p != cfg.top_p {
            return Err(HarnessError::Config("session was opened with other sampling parameters".into()));
        }
        let before = self.meter.snapshot();
        let runs: Result<Vec<SeedRun>, HarnessError> = cfg
            .seeds
            .iter()
            .map(|&seed| cfg.exec.install(cfg.max_in_flight, || self.run_seed(cfg, seed)))
            .collect();
        self.flush()?;
        let runs = runs?;
        let usage = self.meter.snapshot() - before;
        Ok(RunReport::new(self.dataset_name.clone(), cfg.clone(), runs, usage))
    }

    fn run_seed(&self, cfg: &RunConfig, seed: u64) -> Result<SeedRun, HarnessError> {
        let streams = SeedStreams::new(seed);
        let ds = &self.dataset;
        let names = ds.feature_names();
        let idx = split_indices(ds.len(), cfg.train_fraction, streams.split)?;

        let mut test_rows = idx.test.clone();
        if let Some(c) = cfg.test_subsample.filter(|&c| c < test_rows.len()) {
            let mut picked: Vec<usize> = sample_indices(test_rows.len(), c, streams.subsample)?
                .into_iter()
                .map(|i| test_rows[i])
                .collect();
            picked.sort_unstable();
            test_rows = picked;
        }
        if test_rows.is_empty() {
            return Err(HarnessError::Config(format!("seed {seed}: the test split is empty")));
        }

        let candidate_rows: Vec<usize> = sample_indices(idx.train.len(), cfg.candidates, streams.candidates)?
            .into_iter()
            .map(|i| idx.train[i])
            .collect();
        let candidates = candidate_rows
            .iter()
            .map(|&r| serialize(ds.row(r), Some(ds.label(r)), names, r))
            .collect::<Result<Vec<_>, _>>()?;

        let guided = cfg.ablation.guided_selection() && cfg.method != SelectionMethod::Random;
        let filtering = guided && cfg.filter;
        let task = self.task_description(cfg);

        let warmup = if cfg.ablation.includes_explanations() || filtering {
            Some(explain_candidates(&candidates, names, &task, cfg.n_words, &self.explainer, cfg.exec)?)
        } else {
            None
        };
        let table = warmup
            .as_ref()
            .map(|w| compute_feature_importance(&w.explanations, cfg.n_words, names))
            .transpose()?;
        let salient = match (&table, filtering) {
            (Some(t), true) => Some(select_ranked_features(t, cfg.importance_threshold)?),
            _ => None,
        };
        let salient_set: Option<BTreeSet<String>> = salient.as_ref().map(|s| s.iter().cloned().collect());

        let embedding_text = |demo: &SerializedDemonstration, filter: bool| -> Result<String, HarnessError> {
            Ok(match (&salient_set, filter) {
                (Some(set), true) => filter_serialized(demo, set)?.flat_text(),
                _ => demo.flat_text(),
            })
        };

        let candidate_vectors: Vec<EmbeddingVector> = if guided {
            let texts = candidates
                .iter()
                .map(|c| embedding_text(c, true))
                .collect::<Result<Vec<_>, _>>()?;
            cfg.exec
                .try_map(&texts, |_, t| embed(t, &self.embedder, Stage::Warmup))?
        } else {
            Vec::new()
        };

        let fixed_choice = if guided && cfg.method == SelectionMethod::Cluster {
            let params = KMeansParams {
                restarts: cfg.kmeans_restarts,
                ..KMeansParams::default()
            };
            let cs = score_cluster(&candidate_vectors, cfg.centroid_count(), streams.kmeans, &params)?;
            let assignment = (!cfg.cluster_literal).then_some(cs.assignment.as_slice());
            let chosen = select_top_k(&cs.scores, cfg.k, assignment)?;
            Some((chosen, cs.scores))
        } else {
            None
        };

        let ctx = SeedContext {
            session: self,
            cfg,
            streams,
            candidates: &candidates,
            candidate_vectors: &candidate_vectors,
            warmup: warmup.as_ref(),
            guided,
            fixed_choice: fixed_choice.as_ref(),
            task: cfg.task_header.then_some(task.as_str()),
            embedding_text: &embedding_text,
        };
        let records = cfg.exec.try_map(&test_rows, |i, &row| ctx.sample(i, row))?;

        Ok(SeedRun::new(
            streams,
            idx.train.len(),
            candidate_rows,
            warmup.as_ref(),
            table.as_ref(),
            salient,
            records,
        ))
    }
}

type TextFn<'a> = dyn Fn(&SerializedDemonstration, bool) -> Result<String, HarnessError> + Sync + 'a;

struct SeedContext<'a> {
    session: &'a Session,
    cfg: &'a RunConfig,
    streams: SeedStreams,
    candidates: &'a [SerializedDemonstration],
    candidate_vectors: &'a [EmbeddingVector],
    warmup: Option<&'a WarmupOutcome>,
    guided: bool,
    fixed_choice: Option<&'a (Vec<usize>, Vec<f64>)>,
    task: Option<&'a str>,
    embedding_text: &'a TextFn<'a>,
}

impl SeedContext<'_> {
    fn choose(&self, i: usize, query: &SerializedDemonstration) -> Result<Vec<usize>, HarnessError> {
        let cfg = self.cfg;
        if !self.guided {
            return Ok(select_random(self.candidates.len(), cfg.k, self.streams.random_for(i))?);
        }
        let (chosen, scores) = match self.fixed_choice {
            Some((chosen, scores)) => (chosen.clone(), scores.clone()),
            None => {
                let text = (self.embedding_text)(query, cfg.filter_query)?;
                let q = embed(&text, &self.session.embedder, Stage::Inference)?;
                let scores = match cfg.method {
                    SelectionMethod::Cosine => score_cosine(&q, self.candidate_vectors)?,
                    SelectionMethod::Euclidean => score_euclidean(&q, self.candidate_vectors)?,
                    SelectionMethod::Manhattan => score_manhattan(&q, self.candidate_vectors)?,
                    SelectionMethod::Cluster | SelectionMethod::Random => unreachable!("handled above"),
                };
                (select_top_k(&scores, cfg.k, None)?, scores)
            }
        };
        Ok(match cfg.shot_order {
            ShotOrder::Score => order_by_score(&chosen, &scores),
            ShotOrder::Selection => chosen,
        })
    }

    fn sample(&self, i: usize, row: usize) -> Result<SampleRecord, HarnessError> {
        let ds = &self.session.dataset;
        let vocab = ds.label_vocabulary();
        let query = serialize(ds.row(row), None, ds.feature_names(), row)?;
        let chosen = self.choose(i, &query)?;
        let shots: Vec<SerializedDemonstration> = chosen.iter().map(|&c| self.candidates[c].clone()).collect();
        let explanations: Vec<Vec<String>> = match self.warmup {
            Some(w) => chosen.iter().map(|&c| w.explanations[c].words.clone()).collect(),
            None => vec![Vec::new(); chosen.len()],
        };
        let prompt = assemble_prompt(&shots, &explanations, &query, self.task, vocab, self.cfg.ablation)?;

        let mut attempt = 0;
        let parsed = loop {
            let completion = predict(&prompt, &self.session.surrogate, attempt)?;
            let parsed = parse_reply(&completion.reply, vocab);
            if parsed.status == ParseStatus::Ok || attempt >= self.cfg.parse_retries {
                break parsed;
            }
            attempt += 1;
        };
        let gold = ds.label(row).to_owned();
        Ok(SampleRecord {
            row,
            correct: parsed.label.as_deref() == Some(gold.as_str()),
            gold,
            predicted: parsed.label,
            status: parsed.status,
            attempts: attempt + 1,
            prompt_hash: prompt_hash(&prompt.messages()),
            shots: shots.iter().map(|s| s.source_index).collect(),
            explanation_words: parsed.explanation_words,
        })
    }
}

/// Loads the data, runs every seed, and returns the report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    Session::new(cfg)?.run(cfg)
}

/// The four component ablations on one session, so all of them reuse the
/// same warm-up explanations.
pub fn run_ablation_suite(session: &Session, cfg: &RunConfig) -> Result<SuiteReport, HarnessError> {
    let mut entries = Vec::new();
    for mode in AblationMode::ALL {
        let c = RunConfig {
            ablation: mode,
            ..cfg.clone()
        };
        entries.push(SuiteEntry::new("ablation", mode.as_str(), session.run(&c)?));
    }
    Ok(SuiteReport::new(SuiteKind::Ablation, entries))
}

/// Every guided method with and without filtering, plus the random baseline.
pub fn run_method_comparison(session: &Session, cfg: &RunConfig) -> Result<SuiteReport, HarnessError> {
    let mut entries = Vec::new();
    for method in SelectionMethod::GUIDED {
        for filter in [true, false] {
            let c = RunConfig {
                method,
                filter,
                ablation: AblationMode::None,
                ..cfg.clone()
            };
            let label = if filter { format!("{method}+filter") } else { method.to_string() };
            entries.push(SuiteEntry::new("method", &label, session.run(&c)?));
        }
    }
    let c = RunConfig {
        method: SelectionMethod::Random,
        ablation: AblationMode::None,
        ..cfg.clone()
    };
    entries.push(SuiteEntry::new("method", "random", session.run(&c)?));
    Ok(SuiteReport::new(SuiteKind::Methods, entries))
}

/// Varies `p` (reusing cached explanations) and then `n` (new prompts per
/// value), each with the other parameter at its configured value.
pub fn run_hyperparameter_sweep(
    session: &Session,
    cfg: &RunConfig,
    p_grid: &[f64],
    n_grid: &[usize],
) -> Result<SuiteReport, HarnessError> {
    let mut entries = Vec::new();
    for &p in p_grid {
        let c = RunConfig {
            importance_threshold: p,
            ..cfg.clone()
        };
        entries.push(SuiteEntry::new("p", &p.to_string(), session.run(&c)?));
    }
    for &n in n_grid {
        let c = RunConfig {
            n_words: n,
            ..cfg.clone()
        };
        entries.push(SuiteEntry::new("n", &n.to_string(), session.run(&c)?));
    }
    Ok(SuiteReport::new(SuiteKind::Sweep, entries))
}
