//! Warm-up stage: ask a large model which features drove each candidate's
//! label, then turn those word lists into per-feature importances and a
//! salient-feature set.

use std::collections::{BTreeSet, HashMap};

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::exec::Exec;
use crate::providers::{ChatClient, ChatMessage, Completion, ProviderError, Stage};
use crate::serializer::SerializedDemonstration;

/// Opening of the instruction line; the requested word count follows it.
pub const INSTRUCTION_PREFIX: &str = "Please provide ";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("demonstration {0} has no answer to explain")]
    MissingAnswer(usize),
    #[error("task description is empty")]
    EmptyTask,
    #[error("word count n must be at least 1")]
    ZeroWords,
    #[error("reply has no {{...}} list: {reply:?}")]
    NoBraces { reply: String },
    #[error("reply names no known feature: {reply:?}")]
    NoValidWords { reply: String },
    #[error("cannot aggregate zero explanations")]
    NoExplanations,
    #[error("explanation {index} names unknown feature `{word}`")]
    UnknownFeature { index: usize, word: String },
    #[error("explanation {index} has {len} words, more than n = {n}")]
    TooManyWords { index: usize, len: usize, n: usize },
    #[error("threshold p must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("importance table has zero total mass")]
    ZeroMass,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// The four-section explanation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub task_description: String,
    pub demonstration_text: String,
    pub n: usize,
    pub response_instruction: String,
    pub source_index: usize,
}

impl ExplanationRequest {
    pub fn instruction(&self) -> String {
        format!(
            "{INSTRUCTION_PREFIX}{} words in the question that are most important for obtaining the given answer.",
            self.n
        )
    }

    pub fn prompt_text(&self) -> String {
        format!(
            "Task\n{}\n\nCandidate Demonstration\n{}\n\nPost Hoc Explanation Generation Instruction\n{}\n\nResponse Instruction\n{}",
            self.task_description,
            self.demonstration_text,
            self.instruction(),
            self.response_instruction
        )
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::user(self.prompt_text())]
    }
}

/// `{'word'}` for n = 1 up to four explicit slots, the elided form beyond.
fn response_instruction(n: usize) -> String {
    let list = if n <= 4 {
        vec!["'word'"; n].join(", ")
    } else {
        "'word', 'word', … , 'word', 'word'".to_owned()
    };
    format!("Note: The output format is as follows: {{{list}}}")
}

pub fn build_explanation_prompt(
    demo: &SerializedDemonstration,
    task_description: &str,
    n: usize,
) -> Result<ExplanationRequest, ExplainError> {
    if demo.answer.is_none() {
        return Err(ExplainError::MissingAnswer(demo.source_index));
    }
    if task_description.trim().is_empty() {
        return Err(ExplainError::EmptyTask);
    }
    if n == 0 {
        return Err(ExplainError::ZeroWords);
    }
    Ok(ExplanationRequest {
        task_description: task_description.to_owned(),
        demonstration_text: demo.flat_text(),
        n,
        response_instruction: response_instruction(n),
        source_index: demo.source_index,
    })
}

/// One chat call per uncached request; cached replies cost nothing.
pub fn generate_explanation(req: &ExplanationRequest, chat: &ChatClient) -> Result<Completion, ExplainError> {
    Ok(chat.complete(&req.messages(), Stage::Warmup)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    /// Canonical feature names, first-mention order, no duplicates.
    pub words: Vec<String>,
    pub source_index: usize,
    /// Tokens in the reply that matched no feature.
    pub dropped: usize,
}

fn quoted_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"'([^']*)'|"([^"]*)"|‘([^’]*)’|“([^”]*)”"#).expect("static regex"))
}

/// Contents of the outermost `{...}`, or `None` when there is no pair.
pub(crate) fn outer_brace_body(reply: &str) -> Option<&str> {
    let open = reply.find('{')?;
    let close = reply.rfind('}')?;
    (close > open).then(|| &reply[open + 1..close])
}

/// Quoted tokens of a brace body; falls back to comma splitting when
/// nothing is quoted.
pub(crate) fn brace_tokens(body: &str) -> Vec<String> {
    let quoted: Vec<String> = quoted_token_re()
        .captures_iter(body)
        .filter_map(|c| (1..=4).find_map(|i| c.get(i)).map(|m| m.as_str().trim().to_owned()))
        .collect();
    let tokens = if quoted.is_empty() {
        body.split(',').map(|t| t.trim().to_owned()).collect()
    } else {
        quoted
    };
    tokens.into_iter().filter(|t| !t.is_empty()).collect()
}

pub fn parse_explanation_reply(
    reply: &str,
    feature_names: &[String],
    n: usize,
    source_index: usize,
) -> Result<Explanation, ExplainError> {
    let body = outer_brace_body(reply).ok_or_else(|| ExplainError::NoBraces {
        reply: reply.to_owned(),
    })?;
    let exact: HashMap<&str, &String> = feature_names.iter().map(|f| (f.as_str(), f)).collect();
    let mut folded: HashMap<String, &String> = HashMap::new();
    for f in feature_names {
        folded.entry(f.to_lowercase()).or_insert(f);
    }

    let mut words: Vec<String> = Vec::new();
    let mut dropped = 0;
    for token in brace_tokens(body) {
        let canonical = exact
            .get(token.as_str())
            .copied()
            .or_else(|| folded.get(&token.to_lowercase()).copied());
        match canonical {
            Some(f) if words.len() < n && !words.contains(f) => words.push(f.clone()),
            Some(_) => {}
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::debug!("candidate {source_index}: dropped {dropped} unknown word(s)");
    }
    if words.is_empty() {
        return Err(ExplainError::NoValidWords {
            reply: reply.to_owned(),
        });
    }
    Ok(Explanation {
        words,
        source_index,
        dropped,
    })
}

/// Per-feature count of explanations mentioning it, over the fixed
/// denominator n·M.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureImportanceTable {
    feature_names: Vec<String>,
    counts: Vec<u64>,
    n: u64,
    m: u64,
}

impl FeatureImportanceTable {
    /// Builds a table directly from mention counts.
    pub fn from_counts(feature_names: Vec<String>, counts: Vec<u64>, n: usize, m: usize) -> Self {
        assert_eq!(feature_names.len(), counts.len());
        Self {
            feature_names,
            counts,
            n: n as u64,
            m: m as u64,
        }
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn denominator(&self) -> u64 {
        self.n * self.m
    }

    pub fn count(&self, feature: &str) -> Option<u64> {
        self.position(feature).map(|i| self.counts[i])
    }

    pub fn ratio(&self, feature: &str) -> Option<Ratio<u64>> {
        self.count(feature).map(|c| Ratio::new(c, self.denominator()))
    }

    pub fn score(&self, feature: &str) -> Option<f64> {
        self.count(feature).map(|c| c as f64 / self.denominator() as f64)
    }

    pub fn total_mass(&self) -> Ratio<u64> {
        Ratio::new(self.counts.iter().sum(), self.denominator())
    }

    /// `(feature, score)` in feature order.
    pub fn scores(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        let den = self.denominator() as f64;
        self.feature_names
            .iter()
            .zip(&self.counts)
            .map(move |(f, &c)| (f.as_str(), c as f64 / den))
    }

    /// Feature indices by descending score, ties in feature order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.counts.len()).collect();
        idx.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]));
        idx
    }

    fn position(&self, feature: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == feature)
    }
}

pub fn compute_feature_importance(
    explanations: &[Explanation],
    n: usize,
    feature_names: &[String],
) -> Result<FeatureImportanceTable, ExplainError> {
    if explanations.is_empty() {
        return Err(ExplainError::NoExplanations);
    }
    if n == 0 {
        return Err(ExplainError::ZeroWords);
    }
    let index: HashMap<&str, usize> = feature_names.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut counts = vec![0u64; feature_names.len()];
    for (i, e) in explanations.iter().enumerate() {
        let distinct: BTreeSet<&str> = e.words.iter().map(String::as_str).collect();
        if distinct.len() > n {
            return Err(ExplainError::TooManyWords {
                index: i,
                len: distinct.len(),
                n,
            });
        }
        for w in distinct {
            let j = *index.get(w).ok_or_else(|| ExplainError::UnknownFeature {
                index: i,
                word: w.to_owned(),
            })?;
            counts[j] += 1;
        }
    }
    Ok(FeatureImportanceTable::from_counts(
        feature_names.to_vec(),
        counts,
        n,
        explanations.len(),
    ))
}

/// Smallest top-ranked prefix of features whose share of the total
/// importance reaches `p`.
pub fn select_feature_set(table: &FeatureImportanceTable, p: f64) -> Result<BTreeSet<String>, ExplainError> {
    Ok(select_ranked_features(table, p)?.into_iter().collect())
}

/// As [`select_feature_set`], in rank order.
pub fn select_ranked_features(table: &FeatureImportanceTable, p: f64) -> Result<Vec<String>, ExplainError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(ExplainError::BadThreshold(p));
    }
    let total: u64 = table.counts.iter().sum();
    if total == 0 {
        return Err(ExplainError::ZeroMass);
    }
    let mut out = Vec::new();
    let mut cum = 0u64;
    for i in table.ranking() {
        cum += table.counts[i];
        out.push(table.feature_names[i].clone());
        if cum as f64 / total as f64 >= p - 1e-12 {
            break;
        }
    }
    Ok(out)
}

/// Result of explaining the whole candidate pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupOutcome {
    /// One entry per candidate; unparseable replies become empty lists.
    pub explanations: Vec<Explanation>,
    pub parse_failures: usize,
    pub dropped_words: usize,
}

/// Requests, caches and parses one explanation per candidate.
pub fn explain_candidates(
    candidates: &[SerializedDemonstration],
    feature_names: &[String],
    task_description: &str,
    n: usize,
    chat: &ChatClient,
    exec: Exec,
) -> Result<WarmupOutcome, ExplainError> {
    let parsed = exec.try_map(candidates, |_, demo| {
        let req = build_explanation_prompt(demo, task_description, n)?;
        let completion = generate_explanation(&req, chat)?;
        let parsed = parse_explanation_reply(&completion.reply, feature_names, n, demo.source_index);
        if let Ok(e) = &parsed {
            chat.record_words(&completion.key, e.words.clone());
        }
        Ok::<_, ExplainError>(parsed)
    })?;
    let mut explanations = Vec::with_capacity(parsed.len());
    let mut parse_failures = 0;
    let mut dropped_words = 0;
    for (p, demo) in parsed.into_iter().zip(candidates) {
        match p {
            Ok(e) => {
                dropped_words += e.dropped;
                explanations.push(e);
            }
            Err(err) => {
                log::warn!("candidate {}: {err}", demo.source_index);
                parse_failures += 1;
                explanations.push(Explanation {
                    words: Vec::new(),
                    source_index: demo.source_index,
                    dropped: 0,
                });
            }
        }
    }
    Ok(WarmupOutcome {
        explanations,
        parse_failures,
        dropped_words,
    })
}
