//! Row-to-text rendering in the "Q: f is v. ... A: y" form, plus the
//! sentence filter that keeps only salient features.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SerializeError {
    #[error("row has {row} cells but there are {names} feature names")]
    ArityMismatch { row: usize, names: usize },
    #[error("salient feature set is empty")]
    EmptyFeatureSet,
    #[error("no sentence survives the filter; the salient set shares no feature with the row")]
    NothingLeft,
}

/// One "f_j is x_ij." clause. The feature slot is stored separately so that
/// filtering is an exact match on the name, never a substring search.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub feature: String,
    pub value: String,
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} is {}.", self.feature, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SerializedDemonstration {
    pub question_sentences: Vec<Sentence>,
    /// `None` for a test query.
    pub answer: Option<String>,
    pub source_index: usize,
}

impl SerializedDemonstration {
    /// `"Q: f1 is v1. f2 is v2."`
    pub fn question_text(&self) -> String {
        let mut out = String::from("Q:");
        for s in &self.question_sentences {
            out.push(' ');
            out.push_str(&s.to_string());
        }
        out
    }

    /// The one-line form: question, then `A: <label>` (empty for a query).
    pub fn flat_text(&self) -> String {
        format!("{} A: {}", self.question_text(), self.answer.as_deref().unwrap_or(""))
    }

    pub fn is_query(&self) -> bool {
        self.answer.is_none()
    }
}

pub fn serialize(
    row: &[String],
    label: Option<&str>,
    feature_names: &[String],
    source_index: usize,
) -> Result<SerializedDemonstration, SerializeError> {
    if row.len() != feature_names.len() {
        return Err(SerializeError::ArityMismatch {
            row: row.len(),
            names: feature_names.len(),
        });
    }
    let question_sentences = feature_names
        .iter()
        .zip(row)
        .map(|(f, v)| Sentence {
            feature: f.clone(),
            value: v.clone(),
        })
        .collect();
    Ok(SerializedDemonstration {
        question_sentences,
        answer: label.map(str::to_owned),
        source_index,
    })
}

/// Keeps the sentences whose feature is in `salient`, in original order.
pub fn filter_serialized(
    demo: &SerializedDemonstration,
    salient: &BTreeSet<String>,
) -> Result<SerializedDemonstration, SerializeError> {
    if salient.is_empty() {
        return Err(SerializeError::EmptyFeatureSet);
    }
    let question_sentences: Vec<Sentence> = demo
        .question_sentences
        .iter()
        .filter(|s| salient.contains(&s.feature))
        .cloned()
        .collect();
    if question_sentences.is_empty() {
        return Err(SerializeError::NothingLeft);
    }
    Ok(SerializedDemonstration {
        question_sentences,
        answer: demo.answer.clone(),
        source_index: demo.source_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_feature_row() {
        let d = serialize(&names(&["30", "teacher"]), Some("yes"), &names(&["age", "job"]), 0).unwrap();
        assert_eq!(d.flat_text(), "Q: age is 30. job is teacher. A: yes");
    }

    #[test]
    fn single_feature_query() {
        let d = serialize(&names(&["5"]), None, &names(&["x"]), 0).unwrap();
        assert!(d.is_query());
        assert_eq!(d.flat_text(), "Q: x is 5. A: ");
    }

    #[test]
    fn empty_cell_kept() {
        let d = serialize(&names(&["30", ""]), Some("no"), &names(&["age", "job"]), 0).unwrap();
        assert_eq!(d.flat_text(), "Q: age is 30. job is . A: no");
    }

    #[test]
    fn arity_checked() {
        assert_eq!(
            serialize(&names(&["1"]), None, &names(&["a", "b"]), 0),
            Err(SerializeError::ArityMismatch { row: 1, names: 2 })
        );
    }

    #[test]
    fn filter_restricts_in_order() {
        let d = serialize(&names(&["30", "t", "200"]), Some("yes"), &names(&["age", "job", "chol"]), 3).unwrap();
        let f = filter_serialized(&d, &set(&["chol", "age"])).unwrap();
        assert_eq!(f.flat_text(), "Q: age is 30. chol is 200. A: yes");
        assert_eq!(f.source_index, 3);

        let same = filter_serialized(&d, &set(&["age", "job", "chol", "extra"])).unwrap();
        assert_eq!(same, d);

        assert_eq!(filter_serialized(&d, &set(&["zzz"])), Err(SerializeError::NothingLeft));
        assert_eq!(filter_serialized(&d, &set(&[])), Err(SerializeError::EmptyFeatureSet));
    }

    #[test]
    fn filter_matches_slots_not_substrings() {
        let d = serialize(&names(&["1", "2"]), None, &names(&["age", "average"]), 0).unwrap();
        let f = filter_serialized(&d, &set(&["age"])).unwrap();
        assert_eq!(f.question_sentences.len(), 1);
        assert_eq!(f.question_sentences[0].feature, "age");
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_order_preserving(
            mask in proptest::collection::vec(any::<bool>(), 6),
            keep in proptest::collection::btree_set(0usize..6, 1..6),
        ) {
            let f = names(&["a", "b", "c", "d", "e", "f"]);
            let row: Vec<String> = (0..6).map(|i| i.to_string()).collect();
            let label = if mask[0] { Some("y") } else { None };
            let d = serialize(&row, label, &f, 9).unwrap();
            let w: BTreeSet<String> = keep.iter().map(|&i| f[i].clone()).collect();
            let once = filter_serialized(&d, &w).unwrap();
            let twice = filter_serialized(&once, &w).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(&once.answer, &d.answer);
            let kept: Vec<&str> = once.question_sentences.iter().map(|s| s.feature.as_str()).collect();
            let expected: Vec<&str> = f.iter().filter(|n| w.contains(*n)).map(String::as_str).collect();
            prop_assert_eq!(kept, expected);
        }

        #[test]
        fn serialize_is_injective(
            a in proptest::collection::vec("[a-z0-9]{0,4}", 3),
            b in proptest::collection::vec("[a-z0-9]{0,4}", 3),
            la in "[a-z]{1,3}", lb in "[a-z]{1,3}",
        ) {
            let f = names(&["x", "y", "z"]);
            let sa = serialize(&a, Some(&la), &f, 0).unwrap().flat_text();
            let sb = serialize(&b, Some(&lb), &f, 0).unwrap().flat_text();
            prop_assert_eq!(sa == sb, a == b && la == lb);
        }
    }
}
