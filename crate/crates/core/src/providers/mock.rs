//! Offline, deterministic stand-ins for the chat and embedding backends.
//!
//! The chat mock first looks the prompt up in a fixture table keyed by
//! [`prompt_hash`](super::prompt_hash). Without a fixture entry (and outside
//! strict mode) it recognises the two prompt shapes the pipeline sends and
//! answers them with seeded, hash-derived choices, so full runs work with no
//! network at all.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{prompt_hash, ChatMessage, ChatParams, ChatProvider, EmbeddingProvider, ProviderError};
use crate::explainer::INSTRUCTION_PREFIX;
use crate::inference::REPLY_NOTE_PREFIX;

fn hash_unit(seed: u64, parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn rng_for(seed: u64, text: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Splits "Q: f is v. g is w. A: y" style text into its clauses, without
/// the leading "Q:".
fn clauses(text: &str) -> Vec<String> {
    let body = text.trim().strip_prefix("Q:").unwrap_or(text).trim();
    body.split(". ")
        .map(|c| c.trim().trim_end_matches('.').trim().to_owned())
        .filter(|c| !c.is_empty())
        .collect()
}

fn question_clauses(q_line: &str) -> Vec<String> {
    let q = match q_line.rfind(" A:") {
        Some(i) => &q_line[..i],
        None => q_line,
    };
    clauses(q)
}

fn feature_of(clause: &str) -> Option<&str> {
    clause.split_once(" is ").map(|(f, _)| f)
}

fn brace_list<'a>(words: impl IntoIterator<Item = &'a str>) -> String {
    let quoted: Vec<String> = words.into_iter().map(|w| format!("'{w}'")).collect();
    format!("{{{}}}", quoted.join(", "))
}

#[derive(Debug, Clone)]
pub struct MockChat {
    seed: u64,
    fixtures: HashMap<String, String>,
    strict: bool,
    model_id: String,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fixtures: HashMap::new(),
            strict: false,
            model_id: format!("mock-chat-{seed}"),
        }
    }

    /// Loads a JSON object mapping prompt hash to reply text.
    pub fn with_fixture_file(mut self, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("fixture {}: {e}", path.display())))?;
        let table: HashMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("fixture {}: {e}", path.display())))?;
        self.fixtures.extend(table);
        Ok(self)
    }

    pub fn with_fixture(mut self, messages: &[ChatMessage], reply: impl Into<String>) -> Self {
        self.fixtures.insert(prompt_hash(messages), reply.into());
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    fn scripted(&self, prompt: &str) -> String {
        if let Some(reply) = self.explain(prompt) {
            return reply;
        }
        if let Some(reply) = self.predict(prompt) {
            return reply;
        }
        format!("ok {}", &super::sha256_hex(prompt.as_bytes())[..8])
    }

    /// Ranks the demonstration's features by a per-feature preference plus
    /// per-prompt noise, so explanations agree across candidates without
    /// being identical.
    fn explain(&self, prompt: &str) -> Option<String> {
        let n: usize = prompt
            .lines()
            .find_map(|l| l.strip_prefix(INSTRUCTION_PREFIX))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|w| w.parse().ok())?;
        let q_line = prompt.lines().find(|l| l.starts_with("Q:"))?;
        let clauses = question_clauses(q_line);
        let mut features: Vec<(f64, &str)> = clauses
            .iter()
            .filter_map(|c| feature_of(c))
            .map(|f| {
                let score = hash_unit(self.seed, &["pref", f]) + 0.5 * hash_unit(self.seed, &["noise", prompt, f]);
                (score, f)
            })
            .collect();
        features.sort_by(|a, b| b.0.total_cmp(&a.0));
        features.truncate(n);
        Some(brace_list(features.into_iter().map(|(_, f)| f)))
    }

    /// Answers with the label of the shot sharing the most clauses with the
    /// query.
    fn predict(&self, prompt: &str) -> Option<String> {
        let labels: Vec<&str> = prompt
            .lines()
            .find_map(|l| l.strip_prefix(REPLY_NOTE_PREFIX))?
            .split(", ")
            .map(str::trim)
            .collect();
        if labels.is_empty() {
            return None;
        }
        let mut shots: Vec<(Vec<String>, &str)> = Vec::new();
        let mut query: Option<Vec<String>> = None;
        for block in prompt.split("\n\n") {
            let lines: Vec<&str> = block.lines().collect();
            let Some(q) = lines.iter().find(|l| l.starts_with("Q:")) else { continue };
            match lines.last().map(|l| l.trim_end()) {
                Some("A:") => query = Some(clauses(q)),
                Some(last) => {
                    if let Some(label) = last.strip_prefix("A: ") {
                        shots.push((clauses(q), label));
                    }
                }
                None => {}
            }
        }
        let query = query.unwrap_or_default();
        let best = shots
            .iter()
            .map(|(c, label)| {
                let shared: Vec<&str> = c
                    .iter()
                    .filter(|x| query.contains(x))
                    .filter_map(|x| feature_of(x))
                    .collect();
                (shared, *label)
            })
            .enumerate()
            .max_by(|(i, a), (j, b)| a.0.len().cmp(&b.0.len()).then(j.cmp(i)));
        let (words, label) = match best {
            Some((_, (shared, label))) => (shared.into_iter().take(3).collect::<Vec<_>>(), label),
            None => {
                let pick = (hash_unit(self.seed, &["label", prompt]) * labels.len() as f64) as usize;
                (Vec::new(), labels[pick.min(labels.len() - 1)])
            }
        };
        Some(format!("Explanation: {}\nA: {label}", brace_list(words)))
    }
}

impl ChatProvider for MockChat {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, messages: &[ChatMessage], _params: &ChatParams) -> Result<String, ProviderError> {
        let hash = prompt_hash(messages);
        if let Some(reply) = self.fixtures.get(&hash) {
            return Ok(reply.clone());
        }
        if self.strict {
            return Err(ProviderError::FixtureMiss(hash));
        }
        let prompt: Vec<&str> = messages.iter().map(|m| m.content.as_str()).collect();
        Ok(self.scripted(&prompt.join("\n")))
    }
}

/// Hash-derived unit vectors. Each clause of the text contributes a seeded
/// Gaussian direction, so texts sharing clauses land close together; a small
/// whole-text component keeps distinct texts distinct.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    model_id: String,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            model_id: format!("mock-embed-{seed}-{dim}"),
        }
    }

    fn direction(&self, token: &str, out: &mut [f64], weight: f64) {
        let mut rng = rng_for(self.seed, token);
        for x in out.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x += weight * g;
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for clause in clauses(text) {
            self.direction(&format!("clause:{clause}"), &mut v, 1.0);
        }
        self.direction(&format!("text:{text}"), &mut v, 0.25);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// A chat mock and an embedding mock sharing one seed.
pub fn mock_provider(seed: u64, dim: usize) -> (MockChat, MockEmbedder) {
    (MockChat::new(seed), MockEmbedder::new(seed, dim))
}
