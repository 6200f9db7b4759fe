use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::explainer::{FeatureImportanceTable, WarmupOutcome};
use crate::inference::ParseStatus;
use crate::providers::UsageSnapshot;

use super::{HarnessError, RunConfig, SeedStreams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Row index in the loaded dataset.
    pub row: usize,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub status: ParseStatus,
    /// Surrogate calls spent on this sample, retries included.
    pub attempts: u32,
    /// SHA-256 of the surrogate prompt.
    pub prompt_hash: String,
    /// Dataset rows used as shots, in prompt order.
    pub shots: Vec<usize>,
    pub explanation_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub count: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub parse_failures: usize,
    pub dropped_words: usize,
    /// Features by descending importance.
    pub importance: Vec<FeatureScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub streams: SeedStreams,
    pub n_train: usize,
    pub n_test: usize,
    pub candidate_rows: Vec<usize>,
    pub warmup: Option<WarmupSummary>,
    /// Salient features in rank order; `None` when unfiltered.
    pub salient_features: Option<Vec<String>>,
    pub accuracy: f64,
    pub parse_failures: usize,
    pub records: Vec<SampleRecord>,
}

impl SeedRun {
    pub(super) fn new(
        streams: SeedStreams,
        n_train: usize,
        candidate_rows: Vec<usize>,
        warmup: Option<&WarmupOutcome>,
        table: Option<&FeatureImportanceTable>,
        salient_features: Option<Vec<String>>,
        records: Vec<SampleRecord>,
    ) -> Self {
        let warmup = warmup.zip(table).map(|(w, t)| WarmupSummary {
            parse_failures: w.parse_failures,
            dropped_words: w.dropped_words,
            importance: t
                .ranking()
                .into_iter()
                .map(|i| {
                    let f = &t.feature_names()[i];
                    FeatureScore {
                        feature: f.clone(),
                        count: t.count(f).unwrap_or(0),
                        score: t.score(f).unwrap_or(0.0),
                    }
                })
                .collect(),
        });
        let correct = records.iter().filter(|r| r.correct).count();
        let parse_failures = records.iter().filter(|r| r.status == ParseStatus::Failed).count();
        Self {
            streams,
            n_train,
            n_test: records.len(),
            candidate_rows,
            warmup,
            salient_features,
            accuracy: correct as f64 / records.len() as f64,
            parse_failures,
            records,
        }
    }
}

/// Result of one configuration over all its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config: RunConfig,
    pub runs: Vec<SeedRun>,
    pub accuracy_mean: f64,
    /// Population standard deviation across seeds.
    pub accuracy_std: f64,
    /// Calls made by this run alone.
    pub usage: UsageSnapshot,
}

impl RunReport {
    pub(super) fn new(dataset: String, config: RunConfig, runs: Vec<SeedRun>, usage: UsageSnapshot) -> Self {
        let (accuracy_mean, accuracy_std) = mean_std(runs.iter().map(|r| r.accuracy));
        Self {
            dataset,
            config,
            runs,
            accuracy_mean,
            accuracy_std,
            usage,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {}  method {}  filter {}  ablation {}  n {}  p {}  k {}",
            self.dataset,
            c.method,
            if c.filter { "on" } else { "off" },
            c.ablation,
            c.n_words,
            c.importance_threshold,
            c.k
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "seed {}: accuracy {:.4} ({} test, {} unparsed)",
                r.streams.master, r.accuracy, r.n_test, r.parse_failures
            );
            if let Some(f) = &r.salient_features {
                let _ = writeln!(s, "  salient features: {}", f.join(", "));
            }
        }
        let _ = writeln!(
            s,
            "accuracy {:.4} +/- {:.4} over {} seed(s)",
            self.accuracy_mean,
            self.accuracy_std,
            self.runs.len()
        );
        let u = &self.usage;
        let _ = writeln!(
            s,
            "warm-up: {} chat, {} embed, {} cached | inference: {} chat, {} embed, {} cached",
            u.warmup.chat_calls,
            u.warmup.embed_calls,
            u.warmup.cached_hits,
            u.inference.chat_calls,
            u.inference.embed_calls,
            u.inference.cached_hits
        );
        s
    }
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let xs: Vec<f64> = xs.collect();
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Ablation,
    Methods,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    /// What was varied.
    pub param: String,
    pub value: String,
    pub report: RunReport,
}

impl SuiteEntry {
    pub fn new(param: &str, value: &str, report: RunReport) -> Self {
        Self {
            param: param.to_owned(),
            value: value.to_owned(),
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub kind: SuiteKind,
    pub entries: Vec<SuiteEntry>,
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub dataset: String,
    pub param: String,
    pub value: String,
    pub method: String,
    pub filter: bool,
    pub ablation: String,
    pub n_words: usize,
    pub importance_threshold: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub seeds: usize,
    pub warmup_chat_calls: u64,
    pub inference_chat_calls: u64,
    pub embed_calls: u64,
    pub parse_failures: usize,
}

impl SuiteReport {
    pub fn new(kind: SuiteKind, entries: Vec<SuiteEntry>) -> Self {
        Self { kind, entries }
    }

    pub fn get(&self, param: &str, value: &str) -> Option<&RunReport> {
        self.entries
            .iter()
            .find(|e| e.param == param && e.value == value)
            .map(|e| &e.report)
    }

    pub fn rows(&self) -> Vec<SuiteRow> {
        self.entries
            .iter()
            .map(|e| {
                let r = &e.report;
                SuiteRow {
                    dataset: r.dataset.clone(),
                    param: e.param.clone(),
                    value: e.value.clone(),
                    method: r.config.method.to_string(),
                    filter: r.config.filter,
                    ablation: r.config.ablation.to_string(),
                    n_words: r.config.n_words,
                    importance_threshold: r.config.importance_threshold,
                    accuracy_mean: r.accuracy_mean,
                    accuracy_std: r.accuracy_std,
                    seeds: r.runs.len(),
                    warmup_chat_calls: r.usage.warmup.chat_calls,
                    inference_chat_calls: r.usage.inference.chat_calls,
                    embed_calls: r.usage.embed_calls(),
                    parse_failures: r.runs.iter().map(|s| s.parse_failures).sum(),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row).map_err(|e| HarnessError::Output(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Output(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for row in self.rows() {
            let _ = writeln!(
                s,
                "{:<10} {:<20} accuracy {:.4} +/- {:.4}  (warm-up chat {}, inference chat {})",
                row.param,
                row.value,
                row.accuracy_mean,
                row.accuracy_std,
                row.warmup_chat_calls,
                row.inference_chat_calls
            );
        }
        s
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Output(format!("{}: {e}", dir.display())))
}

/// Writes `report.json` and `summary.txt`.
pub fn write_run(out_dir: &Path, report: &RunReport) -> Result<(), HarnessError> {
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("report.json"), &report.to_json())?;
    write_file(&out_dir.join("summary.txt"), &report.summary())
}

/// Writes `report.json`, `summary.txt` and `sweep.csv`.
pub fn write_suite(out_dir: &Path, suite: &SuiteReport) -> Result<(), HarnessError> {
    ensure_dir(out_dir)?;
    let json = serde_json::to_string_pretty(suite).map_err(|e| HarnessError::Output(e.to_string()))?;
    write_file(&out_dir.join("report.json"), &json)?;
    write_file(&out_dir.join("summary.txt"), &suite.summary())?;
    write_file(&out_dir.join("sweep.csv"), &suite.to_csv()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std([0.5, 0.7].into_iter());
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std([0.8].into_iter()), (0.8, 0.0));
    }
}
