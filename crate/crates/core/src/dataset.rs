//! Tabular CSV ingestion, train/test splitting and candidate-pool sampling.
//!
//! Every cell is kept as the exact string found in the file. Values are only
//! ever interpolated into prompt text, so no numeric typing happens here.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("data file not found: {0}")]
    MissingFile(PathBuf),
    #[error("data file has no header row")]
    MissingHeader,
    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("label column `{0}` is not in the header")]
    UnknownLabelColumn(String),
    #[error("feature names must be unique and non-empty (offending name: `{0}`)")]
    BadFeatureName(String),
    #[error("dataset needs at least one feature column")]
    NoFeatures,
    #[error("labels ({labels}) and rows ({rows}) differ in length")]
    LabelCount { rows: usize, labels: usize },
    #[error("need at least 2 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("cannot sample {requested} candidates from {available} training rows")]
    PoolTooLarge { requested: usize, available: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A labelled table whose cells are raw strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularDataset {
    feature_names: Vec<String>,
    rows: Vec<Vec<String>>,
    labels: Vec<String>,
    label_vocabulary: BTreeSet<String>,
    label_name: String,
    /// Position of the label column in the source header.
    label_position: usize,
}

impl TabularDataset {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<String>>,
        labels: Vec<String>,
    ) -> Result<Self, DatasetError> {
        let label_position = feature_names.len();
        Self::with_label_column(feature_names, rows, labels, "label".into(), label_position)
    }

    fn with_label_column(
        feature_names: Vec<String>,
        rows: Vec<Vec<String>>,
        labels: Vec<String>,
        label_name: String,
        label_position: usize,
    ) -> Result<Self, DatasetError> {
        if feature_names.is_empty() {
            return Err(DatasetError::NoFeatures);
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(DatasetError::BadFeatureName(name.clone()));
            }
        }
        if rows.len() != labels.len() {
            return Err(DatasetError::LabelCount {
                rows: rows.len(),
                labels: labels.len(),
            });
        }
        if let Some((row, cells)) = rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != feature_names.len())
        {
            return Err(DatasetError::RaggedRow {
                row,
                expected: feature_names.len(),
                found: cells.len(),
            });
        }
        let label_vocabulary = labels.iter().cloned().collect();
        Ok(Self {
            feature_names,
            rows,
            labels,
            label_vocabulary,
            label_name,
            label_position,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[String] {
        &self.rows[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn label_vocabulary(&self) -> &BTreeSet<String> {
        &self.label_vocabulary
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    /// Number of rows (N).
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of feature columns (d).
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    /// Rows at `indices`, in the given order. The label vocabulary of the
    /// parent is kept so that a subset never loses classes.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            label_vocabulary: self.label_vocabulary.clone(),
            label_name: self.label_name.clone(),
            label_position: self.label_position,
        }
    }

    /// Writes the table back out with the label column in its original slot.
    pub fn to_csv_string(&self) -> Result<String, DatasetError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.insert(self.label_position, &self.label_name);
        wtr.write_record(&header)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            let mut record: Vec<&str> = row.iter().map(String::as_str).collect();
            record.insert(self.label_position, label);
            wtr.write_record(&record)?;
        }
        let bytes = wtr.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv writer emits the utf-8 it was given"))
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<TabularDataset, DatasetError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, label_column)
}

/// Parses RFC-4180 text whose first record is the header.
pub fn parse_csv(text: &str, label_column: &str) -> Result<TabularDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(DatasetError::MissingHeader),
    };
    let header: Vec<String> = header.iter().map(str::to_owned).collect();
    let label_position = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DatasetError::UnknownLabelColumn(label_column.to_owned()))?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in records.enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(DatasetError::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let mut cells: Vec<String> = record.iter().map(str::to_owned).collect();
        labels.push(cells.remove(label_position));
        rows.push(cells);
    }
    let mut feature_names = header;
    let label_name = feature_names.remove(label_position);
    TabularDataset::with_label_column(feature_names, rows, labels, label_name, label_position)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Size of the candidate-demonstration pool drawn from the training rows.
    pub candidate_pool_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            candidate_pool_size: 100,
            seed: 0,
        }
    }
}

/// Row indices of a train/test partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices, DatasetError> {
    if n < 2 {
        return Err(DatasetError::TooFewRows(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Uniform, unstratified shuffle split.
pub fn split(
    ds: &TabularDataset,
    spec: &SplitSpec,
) -> Result<(TabularDataset, TabularDataset), DatasetError> {
    let idx = split_indices(ds.len(), spec.train_fraction, spec.seed)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.test)))
}

/// Draws `m` distinct row indices of `train` without replacement.
pub fn sample_candidates(train: &TabularDataset, m: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    sample_indices(train.len(), m, seed)
}

pub(crate) fn sample_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    if m > n {
        return Err(DatasetError::PoolTooLarge {
            requested: m,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn heart_header() -> &'static str {
        "Age,Sex,ChestPainType,RestingBP,Cholesterol,FastingBS,RestingECG,MaxHR,ExerciseAngina,Oldpeak,ST_Slope,HeartDisease"
    }

    fn synthetic(n: usize) -> TabularDataset {
        let rows = (0..n).map(|i| vec![i.to_string(), format!("v{}", i % 3)]).collect();
        let labels = (0..n).map(|i| if i % 2 == 0 { "yes" } else { "no" }.to_owned()).collect();
        TabularDataset::new(vec!["a".into(), "b".into()], rows, labels).unwrap()
    }

    #[test]
    fn load_small_csv() {
        let ds = parse_csv("age,job,y\n30,teacher,yes\n41,nurse,no\n", "y").unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_names(), ["age", "job"]);
        assert_eq!(ds.labels(), ["yes", "no"]);
        assert_eq!(ds.label_vocabulary().len(), 2);
    }

    #[test]
    fn label_column_in_the_middle() {
        let ds = parse_csv("age,y,job\n30,yes,teacher\n", "y").unwrap();
        assert_eq!(ds.row(0), ["30", "teacher"]);
        assert_eq!(ds.to_csv_string().unwrap(), "age,y,job\n30,yes,teacher\n");
    }

    #[test]
    fn heart_style_file_has_eleven_features() {
        let text = format!(
            "{}\n40,M,ATA,140,289,0,Normal,172,N,0,Up,0\n",
            heart_header()
        );
        let ds = parse_csv(&text, "HeartDisease").unwrap();
        assert_eq!(ds.dim(), 11);
    }

    #[test]
    fn ragged_row_is_rejected() {
        let err = parse_csv("a,y\n1,2,3\n", "y").unwrap_err();
        assert!(matches!(err, DatasetError::RaggedRow { row: 0, expected: 2, found: 3 }));
    }

    #[test]
    fn distinct_load_errors() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", "y"),
            Err(DatasetError::MissingFile(_))
        ));
        assert!(matches!(parse_csv("", "y"), Err(DatasetError::MissingHeader)));
        assert!(matches!(
            parse_csv("a,b\n1,2\n", "y"),
            Err(DatasetError::UnknownLabelColumn(_))
        ));
        assert!(matches!(parse_csv("y\nyes\n", "y"), Err(DatasetError::NoFeatures)));
        assert!(matches!(
            parse_csv("a,a,y\n1,2,yes\n", "y"),
            Err(DatasetError::BadFeatureName(_))
        ));
    }

    #[test]
    fn empty_cells_survive() {
        let ds = parse_csv("age,job,y\n30,,yes\n", "y").unwrap();
        assert_eq!(ds.row(0), ["30", ""]);
    }

    #[test]
    fn split_sizes() {
        let (train, test) = split(&synthetic(10), &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        let idx = split_indices(1000, 0.9, 7).unwrap();
        assert_eq!((idx.train.len(), idx.test.len()), (900, 100));
    }

    #[test]
    fn split_is_seeded() {
        assert_eq!(split_indices(50, 0.9, 3).unwrap(), split_indices(50, 0.9, 3).unwrap());
        assert_ne!(split_indices(50, 0.9, 3).unwrap(), split_indices(50, 0.9, 4).unwrap());
    }

    #[test]
    fn split_needs_two_rows() {
        assert!(matches!(split_indices(1, 0.9, 0), Err(DatasetError::TooFewRows(1))));
        assert!(matches!(split_indices(5, 1.0, 0), Err(DatasetError::BadFraction(_))));
    }

    #[test]
    fn candidate_sampling() {
        let ds = synthetic(900);
        let c = sample_candidates(&ds, 100, 1).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 100);
        assert_eq!(c, sample_candidates(&ds, 100, 1).unwrap());

        let mut all = sample_candidates(&ds, 900, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..900).collect::<Vec<_>>());

        assert!(matches!(
            sample_candidates(&ds, 901, 0),
            Err(DatasetError::PoolTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..300, frac in 0.05f64..0.95, seed: u64) {
            let idx = split_indices(n, frac, seed).unwrap();
            let mut all: Vec<usize> = idx.train.iter().chain(&idx.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(idx.train.len(), (frac * n as f64).round() as usize);
        }

        #[test]
        fn sampling_never_repeats(n in 1usize..200, seed: u64, frac in 0.0f64..=1.0) {
            let m = (frac * n as f64) as usize;
            let s = sample_indices(n, m, seed).unwrap();
            prop_assert_eq!(s.iter().collect::<HashSet<_>>().len(), m);
            prop_assert!(s.iter().all(|&i| i < n));
        }

        #[test]
        fn csv_round_trip(
            cells in proptest::collection::vec(
                proptest::collection::vec("[a-z0-9 ,.\"]{0,6}", 3), 1..8),
        ) {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["f1", "label", "f2"]).unwrap();
            for r in &cells {
                wtr.write_record(r).unwrap();
            }
            let text = String::from_utf8(wtr.into_inner().unwrap()).unwrap();
            // a lone empty field serializes as an empty line, which csv readers skip
            prop_assume!(!text.contains("\n\n"));
            let ds = parse_csv(&text, "label").unwrap();
            prop_assert_eq!(ds.to_csv_string().unwrap(), text);
        }
    }
}
