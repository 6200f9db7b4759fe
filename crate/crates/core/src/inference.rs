//! Rationale-augmented k-shot prompting of the surrogate model and parsing
//! of its replies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explainer::brace_tokens;
use crate::providers::{ChatClient, ChatMessage, Completion, ProviderError, Stage};
use crate::serializer::SerializedDemonstration;

/// Start of the closing instruction line; the label vocabulary follows.
pub const REPLY_NOTE_PREFIX: &str = "Note: reply with an Explanation line then an A line using one of: ";

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("{shots} shots but {explanations} explanations")]
    CountMismatch { shots: usize, explanations: usize },
    #[error("shot from candidate {0} has no answer")]
    UnlabelledShot(usize),
    #[error("the query must not carry an answer")]
    LabelledQuery,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Which components of the method are switched off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    None,
    /// Shots carry no explanation lines.
    NoPosthoc,
    /// Shots are drawn at random instead of by guided selection.
    NoSelect,
    /// Both removals: plain in-context learning with random shots.
    Both,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::None, Self::NoPosthoc, Self::NoSelect, Self::Both];

    pub fn includes_explanations(self) -> bool {
        matches!(self, Self::None | Self::NoSelect)
    }

    pub fn guided_selection(self) -> bool {
        matches!(self, Self::None | Self::NoPosthoc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::NoPosthoc => "no-posthoc",
            Self::NoSelect => "no-select",
            Self::Both => "both",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "no-posthoc" => Ok(Self::NoPosthoc),
            "no-select" => Ok(Self::NoSelect),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown ablation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    /// Unfiltered `Q: ...` text.
    pub question: String,
    pub answer: String,
    /// `None` when explanations are ablated away.
    pub explanation_words: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferencePrompt {
    pub task_description: Option<String>,
    pub shots: Vec<Shot>,
    pub query_text: String,
    pub label_vocabulary: Vec<String>,
}

fn quoted_list(words: &[String]) -> String {
    let items: Vec<String> = words.iter().map(|w| format!("'{w}'")).collect();
    format!("{{{}}}", items.join(", "))
}

impl InferencePrompt {
    /// Blocks separated by single blank lines: optional task header, one
    /// block per shot, the open query, and the reply-format note.
    pub fn render(&self) -> String {
        let mut blocks = Vec::with_capacity(self.shots.len() + 3);
        if let Some(task) = &self.task_description {
            blocks.push(format!("Task\n{task}"));
        }
        for shot in &self.shots {
            let mut b = shot.question.clone();
            if let Some(words) = &shot.explanation_words {
                b.push_str("\nExplanation: ");
                b.push_str(&quoted_list(words));
            }
            b.push_str("\nA: ");
            b.push_str(&shot.answer);
            blocks.push(b);
        }
        blocks.push(format!("{}\nA:", self.query_text));
        blocks.push(format!("{REPLY_NOTE_PREFIX}{}", self.label_vocabulary.join(", ")));
        blocks.join("\n\n")
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::user(self.render())]
    }
}

/// Builds the prompt from already-ordered shots. `explanations[i]` belongs
/// to `shots[i]`; it may be empty when explanations are ablated.
pub fn assemble_prompt(
    shots: &[SerializedDemonstration],
    explanations: &[Vec<String>],
    query: &SerializedDemonstration,
    task_description: Option<&str>,
    label_vocabulary: &BTreeSet<String>,
    ablation: AblationMode,
) -> Result<InferencePrompt, InferenceError> {
    let with_expl = ablation.includes_explanations();
    if with_expl && explanations.len() != shots.len() {
        return Err(InferenceError::CountMismatch {
            shots: shots.len(),
            explanations: explanations.len(),
        });
    }
    if !query.is_query() {
        return Err(InferenceError::LabelledQuery);
    }
    let shots = shots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let answer = s.answer.clone().ok_or(InferenceError::UnlabelledShot(s.source_index))?;
            Ok(Shot {
                question: s.question_text(),
                answer,
                explanation_words: with_expl.then(|| explanations[i].clone()),
            })
        })
        .collect::<Result<Vec<_>, InferenceError>>()?;
    Ok(InferencePrompt {
        task_description: task_description.map(str::to_owned),
        shots,
        query_text: query.question_text(),
        label_vocabulary: label_vocabulary.iter().cloned().collect(),
    })
}

/// One surrogate-model call per prompt (cached by prompt, model and
/// sampling parameters).
pub fn predict(prompt: &InferencePrompt, slm: &ChatClient, attempt: u32) -> Result<Completion, InferenceError> {
    Ok(slm.complete_attempt(&prompt.messages(), Stage::Inference, attempt)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    /// Always a vocabulary member; `None` means the parse failed.
    pub label: Option<String>,
    pub explanation_words: Vec<String>,
    pub raw_reply: String,
    pub status: ParseStatus,
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_alphanumeric() || c == '_')
}

/// Byte offset of the first standalone, case-insensitive occurrence of
/// `needle` (already lowercased) in `hay` (already lowercased).
fn find_standalone(hay: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let first = needle.chars().next();
    let last = needle.chars().last();
    hay.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        (!is_word_char(first) || !is_word_char(before)) && (!is_word_char(last) || !is_word_char(after))
    })
}

/// Earliest vocabulary label in `text`; at equal positions the longer label
/// wins.
fn first_label<'a>(text: &str, vocabulary: &'a BTreeSet<String>) -> Option<&'a String> {
    let hay = text.to_lowercase();
    vocabulary
        .iter()
        .filter_map(|label| find_standalone(&hay, &label.to_lowercase()).map(|pos| (pos, label)))
        .min_by(|(pa, la), (pb, lb)| pa.cmp(pb).then(lb.len().cmp(&la.len())))
        .map(|(_, l)| l)
}

/// Offset just past the last `A:` marker that is not the tail of a word.
fn last_answer_marker(reply: &str) -> Option<usize> {
    reply
        .match_indices("A:")
        .map(|(i, _)| i)
        .filter(|&i| !is_word_char(reply[..i].chars().next_back()))
        .last()
        .map(|i| i + 2)
}

pub fn parse_reply(reply: &str, label_vocabulary: &BTreeSet<String>) -> ParsedPrediction {
    let explanation_words = outer_brace_body_first(reply).map(brace_tokens).unwrap_or_default();
    let label = last_answer_marker(reply)
        .and_then(|start| first_label(&reply[start..], label_vocabulary))
        .or_else(|| first_label(reply, label_vocabulary))
        .cloned();
    let status = if label.is_some() {
        ParseStatus::Ok
    } else {
        ParseStatus::Failed
    };
    ParsedPrediction {
        label,
        explanation_words,
        raw_reply: reply.to_owned(),
        status,
    }
}

/// The first `{...}` group of a reply, which may contain later braces.
fn outer_brace_body_first(reply: &str) -> Option<&str> {
    let open = reply.find('{')?;
    let close = open + reply[open..].find('}')?;
    Some(&reply[open + 1..close])
}
