//! The model behind the engine.
//!
//! Everything that needs a generative model goes through the [`Backend`]
//! trait: hypothesis generation, NLL scoring, yes/no posterior scoring,
//! captioning, summarization, judging, and text embedding. Two
//! implementations ship: a table-driven scripted backend for fully offline,
//! deterministic runs, and a remote backend speaking a chat-completions
//! style wire protocol with per-token log-probabilities.

mod remote;
mod scripted;

pub use remote::{parse_chat_response, ChatResponsePayload, RemoteBackend, RemoteConfig};
pub use scripted::{ScriptedBackend, SymbolSpan, WorldScript};

use crate::manifest::FrameRef;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The backend could not be reached; `attempts` retries were spent.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    /// The backend answered, but not in the shape the protocol promises.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The backend cannot do what was asked (e.g. no token logprobs).
    #[error("capability missing: {0}")]
    Capability(String),

    #[error("world script error: {0}")]
    Script(String),
}

/// What the model sees when generating or scoring at one timestep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    /// Rolling narrative of everything before the prior window.
    pub history_text: String,
    /// The frames immediately preceding the observed timestep.
    pub prior_window: Vec<FrameRef>,
    /// The newly observed frame; present only for posterior-side calls.
    pub observed_frame: Option<FrameRef>,
}

impl Context {
    pub fn prior(history_text: String, prior_window: Vec<FrameRef>) -> Self {
        Context {
            history_text,
            prior_window,
            observed_frame: None,
        }
    }

    /// The same context with the observed frame attached.
    pub fn with_observation(&self, frame: FrameRef) -> Self {
        Context {
            history_text: self.history_text.clone(),
            prior_window: self.prior_window.clone(),
            observed_frame: Some(frame),
        }
    }
}

/// Knobs for hypothesis generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// How many hypotheses to produce.
    pub n: usize,
    /// Nucleus sampling mass in (0, 1].
    pub nucleus_p: f64,
    /// Advisory length cap; the engine never truncates model output.
    pub max_words: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            n: 3,
            nucleus_p: 0.9,
            max_words: 10,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n == 0 {
            return Err(BackendError::InvalidParameter(
                "hypothesis count must be at least 1".into(),
            ));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(BackendError::InvalidParameter(format!(
                "nucleus_p must lie in (0, 1], got {}",
                self.nucleus_p
            )));
        }
        Ok(())
    }
}

/// The prompt templates the engine fills in, one per call kind.
///
/// Placeholders use `{name}` syntax; construction checks that each template
/// still carries the placeholders its call site substitutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    pub generation: String,
    pub prior_score: String,
    pub posterior_score: String,
    pub caption: String,
    pub judge: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            generation: "\
Given a textual summary of the video so far and the most recent prior window of frames, \
predict what will most likely happen in the next frame.

Context so far:
{memory_text}

Prior window (video inputs):
A sequence of images corresponding to the last W frames.

Output format:
Hypothesis: 8-10 words"
                .to_string(),
            prior_score: "\
Context so far:
{memory_text}

Prior window (video inputs):
A sequence of images corresponding to the last W frames.

Here is what will happen next: {hypothesis}"
                .to_string(),
            posterior_score: "\
You are given a textual summary of the video so far, a prior window of frames, and the \
current frame that follows.
Your task is to evaluate whether each hypothesis generated from the prior context still \
holds in the current frame.

Context so far:
{memory_text}

Prior window (video inputs):
A sequence of images corresponding to the last W frames.

Current frame:
The observed frame immediately following the prior window.

Hypothesis: {hypothesis}

Question: Is this hypothesis true in the current frame?
Answer with a single word: yes or no."
                .to_string(),
            caption: "\
Context so far:
{memory_text}

You are given a short window of prior frames and the most recent observed frame.
Describe the new event shown by the observed frame in one concise sentence."
                .to_string(),
            judge: "\
Rate how closely the content of the prediction matches the content of the reference \
description in terms of meaning and how well it captures important details regarding \
events in the video.
Ignore the difference in length.
Score 0.0-1.0 where:

0.0-0.3: Poor match (key details in the reference are missing in the prediction)
0.4-0.6: Moderate match (a few key details in the reference are captured in the prediction)
0.7-0.9: Good match (most key details are present in the prediction)
1.0: Perfect match (all key details in the reference are accurately captured in the prediction)
Output only the numerical score (e.g., 0.75).

Reference: {reference}
Response: {response}

Score:"
                .to_string(),
        }
    }
}

impl PromptTemplateSet {
    /// Check that every template still contains the placeholders its call
    /// site fills.
    pub fn validate(&self) -> Result<(), BackendError> {
        let required: [(&str, &str, &[&str]); 5] = [
            ("generation", &self.generation, &["{memory_text}"]),
            ("prior_score", &self.prior_score, &["{memory_text}", "{hypothesis}"]),
            (
                "posterior_score",
                &self.posterior_score,
                &["{memory_text}", "{hypothesis}"],
            ),
            ("caption", &self.caption, &["{memory_text}"]),
            ("judge", &self.judge, &["{reference}", "{response}"]),
        ];
        for (name, template, placeholders) in required {
            for ph in placeholders {
                if !template.contains(ph) {
                    return Err(BackendError::InvalidParameter(format!(
                        "template {name:?} is missing placeholder {ph}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Substitute `{name}` placeholders.
    pub fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
        let mut out = template.to_string();
        for (name, value) in substitutions {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

/// A dense text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidInput(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; zero when either vector has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

/// Everything the engine asks of a model.
///
/// Implementations must tolerate concurrent calls; the pipeline fans
/// per-hypothesis scoring out across threads.
pub trait Backend: Send + Sync {
    /// Generate exactly `params.n` hypothesis texts for what happens next.
    /// The context must not carry an observed frame.
    fn generate_hypotheses(
        &self,
        ctx: &Context,
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError>;

    /// Total negative log-likelihood (nats) of the hypothesis continuation
    /// under the backend, conditioned on the context. Scores the prior side
    /// when `observed_frame` is absent and the posterior side when present.
    fn score_nll(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError>;

    /// Probability mass of the affirmative answer to "is this hypothesis
    /// true in the current frame?". Requires an observed frame.
    fn score_posterior_yes(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError>;

    /// Compress text to at most `word_budget` words.
    fn summarize(&self, text: &str, word_budget: usize) -> Result<String, BackendError>;

    /// Deterministic text embedding.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;

    /// One caption: the new event when an observed frame is present, or a
    /// whole-video caption over the prior-window frames when absent.
    fn caption(&self, ctx: &Context) -> Result<String, BackendError>;

    /// Raw judge output rating `response` against `reference`; parse with
    /// [`crate::grpo::parse_reward`].
    fn judge(&self, reference: &str, response: &str) -> Result<String, BackendError>;
}

/// Split into lowercase alphanumeric word tokens.
pub(crate) fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Count whitespace-separated words.
pub(crate) fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
