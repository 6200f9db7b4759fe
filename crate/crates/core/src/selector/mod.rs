//! Demonstration scoring and top-k selection in embedding space.
//!
//! Four scorers are interchangeable: k-means diversity (`cluster`) and
//! three similarity scores against the test query (`cosine`, `euclidean`,
//! `manhattan`). Higher is always better. `random` ignores embeddings.

mod kmeans;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{EmbeddingClient, ProviderError, Stage};

pub use kmeans::{kmeans, KMeans, KMeansParams};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("cannot fit {m} centroids to {n} candidates")]
    TooManyCentroids { m: usize, n: usize },
    #[error("vector {0:?} has zero norm (None is the query)")]
    ZeroNorm(Option<usize>),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector has a non-finite entry")]
    NonFinite,
    #[error("cannot pick {k} of {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("cluster assignment covers {found} candidates, scores cover {expected}")]
    AssignmentLength { expected: usize, found: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A finite real vector of the run's embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SelectError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(SelectError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub fn embed(text: &str, client: &EmbeddingClient, stage: Stage) -> Result<EmbeddingVector, SelectError> {
    if text.is_empty() {
        return Err(SelectError::EmptyText);
    }
    EmbeddingVector::new(client.embed_text(text, stage)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Cluster,
    Cosine,
    Euclidean,
    Manhattan,
    Random,
}

impl SelectionMethod {
    pub const GUIDED: [SelectionMethod; 4] = [Self::Cluster, Self::Cosine, Self::Euclidean, Self::Manhattan];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cluster => "cluster",
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
            Self::Manhattan => "manhattan",
            Self::Random => "random",
        }
    }

    /// Whether scores depend on the test query.
    pub fn is_query_dependent(self) -> bool {
        matches!(self, Self::Cosine | Self::Euclidean | Self::Manhattan)
    }

    pub fn needs_embeddings(self) -> bool {
        self != Self::Random
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cluster" => Ok(Self::Cluster),
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "manhattan" => Ok(Self::Manhattan),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown selection method `{other}`")),
        }
    }
}

fn check_dims(query: &EmbeddingVector, candidates: &[EmbeddingVector]) -> Result<(), SelectError> {
    for c in candidates {
        if c.dim() != query.dim() {
            return Err(SelectError::DimensionMismatch {
                expected: query.dim(),
                found: c.dim(),
            });
        }
    }
    Ok(())
}

/// Normalised dot product with the query.
pub fn score_cosine(query: &EmbeddingVector, candidates: &[EmbeddingVector]) -> Result<Vec<f64>, SelectError> {
    check_dims(query, candidates)?;
    let qn = query.norm();
    if qn == 0.0 {
        return Err(SelectError::ZeroNorm(None));
    }
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cn = c.norm();
            if cn == 0.0 {
                return Err(SelectError::ZeroNorm(Some(i)));
            }
            let dot: f64 = query.0.iter().zip(&c.0).map(|(a, b)| a * b).sum();
            Ok((dot / (qn * cn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Negative squared L2 distance to the query.
pub fn score_euclidean(query: &EmbeddingVector, candidates: &[EmbeddingVector]) -> Result<Vec<f64>, SelectError> {
    check_dims(query, candidates)?;
    Ok(candidates.iter().map(|c| -kmeans::sq_dist(&query.0, &c.0)).collect())
}

/// Negative L1 distance to the query.
pub fn score_manhattan(query: &EmbeddingVector, candidates: &[EmbeddingVector]) -> Result<Vec<f64>, SelectError> {
    check_dims(query, candidates)?;
    Ok(candidates
        .iter()
        .map(|c| -query.0.iter().zip(&c.0).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScores {
    /// Negative squared distance to the nearest centroid.
    pub scores: Vec<f64>,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

pub fn score_cluster(
    candidates: &[EmbeddingVector],
    m: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<ClusterScores, SelectError> {
    let first = candidates.first().ok_or(SelectError::EmptyCandidates)?;
    check_dims(first, candidates)?;
    if m == 0 || m > candidates.len() {
        return Err(SelectError::TooManyCentroids {
            m,
            n: candidates.len(),
        });
    }
    let points: Vec<Vec<f64>> = candidates.iter().map(|c| c.0.clone()).collect();
    let km = kmeans(&points, m, seed, params);
    let scores = points
        .iter()
        .map(|p| {
            -km.centroids
                .iter()
                .map(|c| kmeans::sq_dist(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(ClusterScores {
        scores,
        assignment: km.assignment,
        centroids: km.centroids,
    })
}

/// Indices by descending score, ties to the lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Picks `k` candidates.
///
/// Without an assignment this is plain top-k by score. With one, the best
/// candidate of each cluster is taken (ordered by cluster id); if there are
/// more winners than `k` the highest-scoring `k` winners remain, and if
/// fewer, the best remaining candidates fill the gap.
pub fn select_top_k(
    scores: &[f64],
    k: usize,
    cluster_assignment: Option<&[usize]>,
) -> Result<Vec<usize>, SelectError> {
    if k > scores.len() {
        return Err(SelectError::KTooLarge { k, n: scores.len() });
    }
    let order = ranked(scores);
    let Some(assignment) = cluster_assignment else {
        return Ok(order.into_iter().take(k).collect());
    };
    if assignment.len() != scores.len() {
        return Err(SelectError::AssignmentLength {
            expected: scores.len(),
            found: assignment.len(),
        });
    }
    let clusters = assignment.iter().max().map_or(0, |m| m + 1);
    let mut winners: Vec<Option<usize>> = vec![None; clusters];
    for &i in &order {
        winners[assignment[i]].get_or_insert(i);
    }
    let mut winners: Vec<usize> = winners.into_iter().flatten().collect();
    if winners.len() > k {
        let mut by_score = winners.clone();
        by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        by_score.truncate(k);
        winners.retain(|i| by_score.contains(i));
    }
    for &i in &order {
        if winners.len() >= k {
            break;
        }
        if !winners.contains(&i) {
            winners.push(i);
        }
    }
    Ok(winners)
}

/// `k` distinct indices drawn uniformly from `0..n`.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, SelectError> {
    crate::dataset::sample_indices(n, k, seed).map_err(|_| SelectError::KTooLarge { k, n })
}

/// Reorders chosen indices by descending score (stable on ties).
pub fn order_by_score(chosen: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut out = chosen.to_vec();
    out.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    out
}

/// Everything decided for one query's demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub method: SelectionMethod,
    pub filter_enabled: bool,
    pub k: usize,
    /// Centroid count, cluster method only.
    pub m: Option<usize>,
    pub seed: u64,
    /// Per-candidate score; empty for random selection.
    pub scores: Vec<f64>,
    /// Chosen candidate positions.
    pub chosen: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(score_cosine(&v(&[1.0, 0.0]), &[v(&[1.0, 0.0])]).unwrap(), [1.0]);
        assert_eq!(score_cosine(&v(&[1.0, 0.0]), &[v(&[0.0, 1.0])]).unwrap(), [0.0]);
        let s = score_cosine(&v(&[1.0, 1.0]), &[v(&[2.0, 2.0])]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(matches!(score_cosine(&v(&[0.0, 0.0]), &[v(&[1.0, 0.0])]), Err(SelectError::ZeroNorm(None))));
        assert!(matches!(
            score_cosine(&v(&[1.0, 0.0]), &[v(&[1.0, 0.0]), v(&[0.0, 0.0])]),
            Err(SelectError::ZeroNorm(Some(1)))
        ));
    }

    #[test]
    fn distance_cases() {
        let o = v(&[0.0, 0.0]);
        assert_eq!(score_euclidean(&o, &[v(&[3.0, 4.0]), o.clone()]).unwrap(), [-25.0, 0.0]);
        assert_eq!(score_manhattan(&o, &[v(&[3.0, 4.0]), o.clone()]).unwrap(), [-7.0, 0.0]);
        assert!(matches!(
            score_euclidean(&o, &[v(&[1.0])]),
            Err(SelectError::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(score_manhattan(&o, &[v(&[1.0, 2.0, 3.0])]), Err(SelectError::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(EmbeddingVector::new(vec![f64::NAN]), Err(SelectError::NonFinite)));
    }

    #[test]
    fn top_k_ordering_and_ties() {
        assert_eq!(select_top_k(&[0.9, 0.1, 0.5], 2, None).unwrap(), [0, 2]);
        let mut s = vec![0.0; 8];
        s[3] = 0.5;
        s[7] = 0.5;
        assert_eq!(select_top_k(&s, 1, None).unwrap(), [3]);
        assert!(select_top_k(&s, 0, None).unwrap().is_empty());
        assert!(matches!(select_top_k(&s, 9, None), Err(SelectError::KTooLarge { k: 9, n: 8 })));
    }

    #[test]
    fn one_per_cluster_even_if_one_cluster_dominates() {
        // cluster 0 holds the two best scores overall
        let scores = [-0.1, -0.2, -3.0, -1.0, -1.5, -2.0];
        let assignment = [0, 0, 0, 1, 1, 1];
        assert_eq!(select_top_k(&scores, 2, None).unwrap(), [0, 1]);
        assert_eq!(select_top_k(&scores, 2, Some(&assignment)).unwrap(), [0, 3]);
    }

    #[test]
    fn cluster_fill_when_clusters_are_empty() {
        let scores = [-1.0, -2.0, -3.0];
        assert_eq!(select_top_k(&scores, 2, Some(&[1, 1, 1])).unwrap(), [0, 1]);
        assert!(matches!(
            select_top_k(&scores, 2, Some(&[0, 0])),
            Err(SelectError::AssignmentLength { .. })
        ));
    }

    #[test]
    fn cluster_scores_on_two_pairs() {
        let pts = [v(&[0.0, 0.0]), v(&[0.0, 2.0]), v(&[10.0, 0.0]), v(&[10.0, 2.0])];
        let cs = score_cluster(&pts, 2, 1, &KMeansParams::default()).unwrap();
        for s in &cs.scores {
            assert!((s + 1.0).abs() < 1e-12);
        }
        let one = score_cluster(&pts[..1], 1, 1, &KMeansParams::default()).unwrap();
        assert_eq!(one.scores, [0.0]);
        assert!(matches!(
            score_cluster(&pts, 5, 0, &KMeansParams::default()),
            Err(SelectError::TooManyCentroids { m: 5, n: 4 })
        ));
        assert!(matches!(
            score_cluster(&[], 1, 0, &KMeansParams::default()),
            Err(SelectError::EmptyCandidates)
        ));
    }

    #[test]
    fn cluster_scores_survive_duplication() {
        let base = vec![v(&[0.0, 0.0]), v(&[0.5, 0.2]), v(&[9.0, 9.0]), v(&[9.4, 8.8]), v(&[-8.0, 7.0])];
        let doubled: Vec<EmbeddingVector> = base.iter().chain(&base).cloned().collect();
        let a = score_cluster(&base, 3, 4, &KMeansParams::default()).unwrap();
        let b = score_cluster(&doubled, 3, 4, &KMeansParams::default()).unwrap();
        for (i, s) in a.scores.iter().enumerate() {
            assert!((s - b.scores[i]).abs() < 1e-9);
            assert!((s - b.scores[i + base.len()]).abs() < 1e-9);
        }
    }

    #[test]
    fn random_selection() {
        let mut all = select_random(10, 10, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(select_random(50, 4, 9).unwrap(), select_random(50, 4, 9).unwrap());
        assert!(matches!(select_random(3, 4, 0), Err(SelectError::KTooLarge { .. })));
    }

    #[test]
    fn random_selection_is_uniform() {
        let mut counts = [0usize; 10];
        for seed in 0..1000 {
            counts[select_random(10, 1, seed).unwrap()[0]] += 1;
        }
        let expected = 100.0;
        let sigma = (1000.0f64 * 0.1 * 0.9).sqrt();
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
        // chi-square, 9 degrees of freedom, 0.1% critical value
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn method_names() {
        for m in SelectionMethod::GUIDED.iter().chain([SelectionMethod::Random].iter()) {
            assert_eq!(m.as_str().parse::<SelectionMethod>().unwrap(), *m);
        }
        assert!("bm25".parse::<SelectionMethod>().is_err());
    }

    proptest! {
        #[test]
        fn score_ranges(
            q in proptest::collection::vec(-5.0f64..5.0, 4),
            cs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..10),
        ) {
            let q = v(&q);
            prop_assume!(q.norm() > 1e-6);
            let cs: Vec<EmbeddingVector> = cs.iter().map(|c| v(c)).collect();
            prop_assume!(cs.iter().all(|c| c.norm() > 1e-6));
            for s in score_cosine(&q, &cs).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
            prop_assert!(score_euclidean(&q, &cs).unwrap().iter().all(|&s| s <= 0.0));
            prop_assert!(score_manhattan(&q, &cs).unwrap().iter().all(|&s| s <= 0.0));
            // the query itself is a maximiser for every similarity score
            let mut with_self = cs.clone();
            with_self.push(q.clone());
            let last = with_self.len() - 1;
            for scores in [score_cosine(&q, &with_self).unwrap(), score_euclidean(&q, &with_self).unwrap(), score_manhattan(&q, &with_self).unwrap()] {
                prop_assert!(scores.iter().all(|&s| s <= scores[last] + 1e-12));
            }
        }

        #[test]
        fn manhattan_matches_euclidean_in_one_dimension(
            q in -10.0f64..10.0,
            cs in proptest::collection::vec(-10.0f64..10.0, 1..12),
            k in 0usize..12,
        ) {
            let k = k.min(cs.len());
            let cs: Vec<EmbeddingVector> = cs.iter().map(|&c| v(&[c])).collect();
            let a = select_top_k(&score_manhattan(&v(&[q]), &cs).unwrap(), k, None).unwrap();
            let b = select_top_k(&score_euclidean(&v(&[q]), &cs).unwrap(), k, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
