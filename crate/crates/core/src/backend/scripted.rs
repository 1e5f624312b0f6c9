//! Table-driven backend for offline, deterministic runs.
//!
//! A [`WorldScript`] describes a video as ordered symbol spans plus lookup
//! tables: hypothesis candidates per context symbol, NLL and yes-probability
//! tables keyed by (symbol, hypothesis), and one caption per symbol. Every
//! call is a pure function of (script, seed, inputs), so end-to-end runs
//! replay bit for bit. The backend also counts calls per method, which the
//! tests use to pin the engine's backend-call complexity.

use super::{
    word_count, word_tokens, Backend, BackendError, Context, EmbeddingVector, GenerationParams,
};
use crate::manifest::FrameManifest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

const EMBED_DIM: usize = 512;

/// One contiguous stretch of the scripted video showing one symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpan {
    pub start: f64,
    pub end: f64,
    pub symbol: String,
}

/// The full script for one synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldScript {
    pub video_id: String,
    pub fps: f64,
    pub duration: f64,
    /// Ordered spans tiling [0, duration].
    pub spans: Vec<SymbolSpan>,
    /// Context symbol -> candidate hypothesis texts.
    pub hypotheses: BTreeMap<String, Vec<String>>,
    /// Symbol -> hypothesis -> NLL (nats). Looked up with the context
    /// symbol for prior scoring and the observed symbol for posterior
    /// scoring.
    pub nll: BTreeMap<String, BTreeMap<String, f64>>,
    /// Symbol -> hypothesis -> probability of "yes".
    pub yes_prob: BTreeMap<String, BTreeMap<String, f64>>,
    /// Symbol -> event caption.
    pub captions: BTreeMap<String, String>,
    /// NLL for (symbol, hypothesis) pairs missing from the table.
    pub default_nll: f64,
    /// Yes-probability for pairs missing from the table.
    pub default_yes: f64,
    /// Ground-truth whole-video caption, when the script carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_caption: Option<String>,
}

impl WorldScript {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(BackendError::Script(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        if self.spans.is_empty() {
            return Err(BackendError::Script("script has no spans".into()));
        }
        if self.spans[0].start != 0.0 {
            return Err(BackendError::Script("first span must start at 0".into()));
        }
        for pair in self.spans.windows(2) {
            if (pair[0].end - pair[1].start).abs() > 1e-9 {
                return Err(BackendError::Script(format!(
                    "spans must tile the timeline: {} ends at {} but next starts at {}",
                    pair[0].symbol, pair[0].end, pair[1].start
                )));
            }
        }
        let last_end = self.spans.last().expect("nonempty").end;
        if (last_end - self.duration).abs() > 1e-9 {
            return Err(BackendError::Script(format!(
                "spans end at {last_end}, expected duration {}",
                self.duration
            )));
        }
        for table in self.yes_prob.values() {
            for (hyp, p) in table {
                if !(0.0..=1.0).contains(p) {
                    return Err(BackendError::Script(format!(
                        "yes-probability for {hyp:?} is {p}, outside [0, 1]"
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.default_yes) {
            return Err(BackendError::Script(format!(
                "default_yes is {}, outside [0, 1]",
                self.default_yes
            )));
        }
        if !self.default_nll.is_finite() {
            return Err(BackendError::Script("default_nll must be finite".into()));
        }
        Ok(())
    }

    /// Symbol shown at time `t`; times past the end keep the last symbol.
    pub fn symbol_at(&self, t: f64) -> &str {
        for span in &self.spans {
            if t >= span.start && t < span.end {
                return &span.symbol;
            }
        }
        &self.spans.last().expect("nonempty").symbol
    }

    /// Frame manifest matching this script's timing.
    pub fn manifest(&self) -> FrameManifest {
        FrameManifest::synthetic(
            &self.video_id,
            self.fps,
            self.duration,
            &format!("scripted://{}", self.video_id),
        )
        .expect("validated script yields a valid manifest")
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Script(format!("cannot read {}: {e}", path.display()))
        })?;
        let script: WorldScript = serde_json::from_str(&text).map_err(|e| {
            BackendError::Script(format!("cannot parse {}: {e}", path.display()))
        })?;
        script.validate()?;
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let text = serde_json::to_string_pretty(self).expect("script serializes");
        std::fs::write(path, text)
            .map_err(|e| BackendError::Script(format!("cannot write {}: {e}", path.display())))
    }

    /// A routine world with an optional single surprising moment.
    ///
    /// The timeline shows `routine` everywhere except (when requested) the
    /// one frame nearest the end of segment `deviation_segment` out of
    /// `segments` equal segments, which shows `deviation`. Scoring tables
    /// are symmetric on routine evidence, so a run over a world without a
    /// deviation yields identical surprise at every step.
    ///
    /// Worlds are built for prior windows that fit inside one segment; keep
    /// `fps * duration / segments` at or above 2.
    pub fn routine_with_deviation(
        video_id: &str,
        fps: f64,
        duration: f64,
        segments: usize,
        deviation_segment: Option<usize>,
    ) -> Result<Self, BackendError> {
        if segments < 2 {
            return Err(BackendError::Script(
                "a world needs at least 2 segments".into(),
            ));
        }
        if let Some(d) = deviation_segment {
            if d >= segments {
                return Err(BackendError::Script(format!(
                    "deviation segment {d} out of range for {segments} segments"
                )));
            }
        }
        if !(fps.is_finite() && fps > 0.0 && duration.is_finite() && duration > 0.0) {
            return Err(BackendError::Script(
                "fps and duration must be positive".into(),
            ));
        }

        let manifest = FrameManifest::synthetic(
            video_id,
            fps,
            duration,
            &format!("scripted://{video_id}"),
        )
        .map_err(|e| BackendError::Script(e.to_string()))?;

        let spans = match deviation_segment {
            None => vec![SymbolSpan {
                start: 0.0,
                end: duration,
                symbol: "routine".into(),
            }],
            Some(d) => {
                let segment_end = (d + 1) as f64 * duration / segments as f64;
                let frame_t = manifest.frames()[manifest.nearest_frame(segment_end)].timestamp;
                let half = 0.5 / fps;
                let dev_start = (frame_t - half).max(0.0);
                let dev_end = (frame_t + half).min(duration);
                let mut spans = Vec::new();
                if dev_start > 0.0 {
                    spans.push(SymbolSpan {
                        start: 0.0,
                        end: dev_start,
                        symbol: "routine".into(),
                    });
                }
                spans.push(SymbolSpan {
                    start: dev_start,
                    end: dev_end,
                    symbol: "deviation".into(),
                });
                if dev_end < duration {
                    spans.push(SymbolSpan {
                        start: dev_end,
                        end: duration,
                        symbol: "routine".into(),
                    });
                }
                spans
            }
        };

        let hyp_steady = "the man keeps stacking boxes in the warehouse".to_string();
        let hyp_pace = "he continues moving boxes at a steady pace".to_string();
        let hyp_surprise = "the stack suddenly collapses on top of him".to_string();
        let table = vec![hyp_steady.clone(), hyp_pace.clone(), hyp_surprise.clone()];

        let mut hypotheses = BTreeMap::new();
        hypotheses.insert("routine".to_string(), table.clone());
        hypotheses.insert("deviation".to_string(), table);

        let routine_nll: BTreeMap<String, f64> = [
            (hyp_steady.clone(), 0.5),
            (hyp_pace.clone(), 0.7),
            (hyp_surprise.clone(), 4.0),
        ]
        .into_iter()
        .collect();
        let deviation_nll: BTreeMap<String, f64> = [
            (hyp_steady.clone(), 5.0),
            (hyp_pace.clone(), 5.0),
            (hyp_surprise.clone(), 0.2),
        ]
        .into_iter()
        .collect();
        let mut nll = BTreeMap::new();
        nll.insert("routine".to_string(), routine_nll);
        nll.insert("deviation".to_string(), deviation_nll);

        let routine_yes: BTreeMap<String, f64> = [
            (hyp_steady.clone(), 0.95),
            (hyp_pace.clone(), 0.9),
            (hyp_surprise.clone(), 0.05),
        ]
        .into_iter()
        .collect();
        let deviation_yes: BTreeMap<String, f64> = [
            (hyp_steady, 0.05),
            (hyp_pace, 0.05),
            (hyp_surprise, 0.95),
        ]
        .into_iter()
        .collect();
        let mut yes_prob = BTreeMap::new();
        yes_prob.insert("routine".to_string(), routine_yes);
        yes_prob.insert("deviation".to_string(), deviation_yes);

        let mut captions = BTreeMap::new();
        captions.insert(
            "routine".to_string(),
            "the man stacks boxes at a steady pace".to_string(),
        );
        captions.insert(
            "deviation".to_string(),
            "the stack collapses and the man tumbles over".to_string(),
        );

        let script = WorldScript {
            video_id: video_id.to_string(),
            fps,
            duration,
            spans,
            hypotheses,
            nll,
            yes_prob,
            captions,
            default_nll: 5.0,
            default_yes: 0.05,
            reference_caption: Some(
                "the man stacks boxes at a steady pace until the stack collapses and he tumbles over"
                    .to_string(),
            ),
        };
        script.validate()?;
        Ok(script)
    }
}

/// Per-method call tally for a [`ScriptedBackend`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub generation: u64,
    pub scoring: u64,
    pub caption: u64,
    pub summarize: u64,
    pub embed: u64,
    pub judge: u64,
}

/// Deterministic backend driven by a [`WorldScript`].
pub struct ScriptedBackend {
    script: WorldScript,
    generation_calls: AtomicU64,
    scoring_calls: AtomicU64,
    caption_calls: AtomicU64,
    summarize_calls: AtomicU64,
    embed_calls: AtomicU64,
    judge_calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: WorldScript) -> Result<Self, BackendError> {
        script.validate()?;
        Ok(ScriptedBackend {
            script,
            generation_calls: AtomicU64::new(0),
            scoring_calls: AtomicU64::new(0),
            caption_calls: AtomicU64::new(0),
            summarize_calls: AtomicU64::new(0),
            embed_calls: AtomicU64::new(0),
            judge_calls: AtomicU64::new(0),
        })
    }

    pub fn script(&self) -> &WorldScript {
        &self.script
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            generation: self.generation_calls.load(Ordering::Relaxed),
            scoring: self.scoring_calls.load(Ordering::Relaxed),
            caption: self.caption_calls.load(Ordering::Relaxed),
            summarize: self.summarize_calls.load(Ordering::Relaxed),
            embed: self.embed_calls.load(Ordering::Relaxed),
            judge: self.judge_calls.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.generation_calls.store(0, Ordering::Relaxed);
        self.scoring_calls.store(0, Ordering::Relaxed);
        self.caption_calls.store(0, Ordering::Relaxed);
        self.summarize_calls.store(0, Ordering::Relaxed);
        self.embed_calls.store(0, Ordering::Relaxed);
        self.judge_calls.store(0, Ordering::Relaxed);
    }

    /// Symbol conditioning a prior-side call: the last prior-window frame,
    /// or the opening span when the window is still empty.
    fn context_symbol(&self, ctx: &Context) -> &str {
        match ctx.prior_window.last() {
            Some(frame) => self.script.symbol_at(frame.timestamp),
            None => self.script.symbol_at(0.0),
        }
    }

    fn observed_symbol(&self, ctx: &Context) -> Result<&str, BackendError> {
        let frame = ctx.observed_frame.as_ref().ok_or_else(|| {
            BackendError::InvalidInput("posterior-side call without an observed frame".into())
        })?;
        Ok(self.script.symbol_at(frame.timestamp))
    }
}

impl Backend for ScriptedBackend {
    fn generate_hypotheses(
        &self,
        ctx: &Context,
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        self.generation_calls.fetch_add(1, Ordering::Relaxed);
        params.validate()?;
        if ctx.observed_frame.is_some() {
            return Err(BackendError::InvalidInput(
                "hypothesis generation must not see the observed frame".into(),
            ));
        }
        let symbol = self.context_symbol(ctx);
        let table = self.script.hypotheses.get(symbol).ok_or_else(|| {
            BackendError::Script(format!("no hypothesis table for symbol {symbol:?}"))
        })?;
        if table.is_empty() {
            return Err(BackendError::Script(format!(
                "hypothesis table for symbol {symbol:?} is empty"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(
            params
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .rotate_left(17)
                ^ fnv64(symbol.as_bytes()),
        );
        if params.n <= table.len() {
            let mut picked = rand::seq::index::sample(&mut rng, table.len(), params.n).into_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(|i| table[i].clone()).collect())
        } else {
            // Table smaller than the request: cycle, keeping determinism.
            Ok((0..params.n).map(|i| table[i % table.len()].clone()).collect())
        }
    }

    fn score_nll(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError> {
        self.scoring_calls.fetch_add(1, Ordering::Relaxed);
        if hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty hypothesis".into()));
        }
        let symbol = match ctx.observed_frame {
            Some(_) => self.observed_symbol(ctx)?,
            None => self.context_symbol(ctx),
        };
        Ok(self
            .script
            .nll
            .get(symbol)
            .and_then(|table| table.get(hypothesis))
            .copied()
            .unwrap_or(self.script.default_nll))
    }

    fn score_posterior_yes(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError> {
        self.scoring_calls.fetch_add(1, Ordering::Relaxed);
        if hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty hypothesis".into()));
        }
        let symbol = self.observed_symbol(ctx)?;
        Ok(self
            .script
            .yes_prob
            .get(symbol)
            .and_then(|table| table.get(hypothesis))
            .copied()
            .unwrap_or(self.script.default_yes))
    }

    fn summarize(&self, text: &str, word_budget: usize) -> Result<String, BackendError> {
        self.summarize_calls.fetch_add(1, Ordering::Relaxed);
        Ok(head_truncate(text, word_budget))
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        hashed_bag_of_words(text)
    }

    fn caption(&self, ctx: &Context) -> Result<String, BackendError> {
        self.caption_calls.fetch_add(1, Ordering::Relaxed);
        let caption_for = |symbol: &str| -> String {
            self.script
                .captions
                .get(symbol)
                .cloned()
                .unwrap_or_else(|| format!("the scene shows {symbol}"))
        };
        match &ctx.observed_frame {
            Some(frame) => Ok(caption_for(self.script.symbol_at(frame.timestamp))),
            None => {
                // Whole-video caption over the provided frames: one clause
                // per distinct symbol, in order of first appearance.
                if ctx.prior_window.is_empty() {
                    return Err(BackendError::InvalidInput(
                        "caption call without frames".into(),
                    ));
                }
                let mut seen = Vec::new();
                for frame in &ctx.prior_window {
                    let symbol = self.script.symbol_at(frame.timestamp);
                    if !seen.iter().any(|s| s == symbol) {
                        seen.push(symbol.to_string());
                    }
                }
                Ok(seen
                    .iter()
                    .map(|s| caption_for(s))
                    .collect::<Vec<_>>()
                    .join(". "))
            }
        }
    }

    fn judge(&self, reference: &str, response: &str) -> Result<String, BackendError> {
        self.judge_calls.fetch_add(1, Ordering::Relaxed);
        let ref_words: std::collections::BTreeSet<_> = word_tokens(reference).into_iter().collect();
        let resp_words: std::collections::BTreeSet<_> = word_tokens(response).into_iter().collect();
        if ref_words.is_empty() && resp_words.is_empty() {
            return Ok("1.00".to_string());
        }
        let intersection = ref_words.intersection(&resp_words).count() as f64;
        let union = ref_words.union(&resp_words).count() as f64;
        Ok(format!("{:.2}", intersection / union))
    }
}

/// Keep whole sentences from the head while they fit the budget; fall back
/// to a hard word cut if even the first sentence is too long.
fn head_truncate(text: &str, word_budget: usize) -> String {
    if word_count(text) <= word_budget {
        return text.to_string();
    }
    let mut kept = String::new();
    let mut words = 0;
    for sentence in text.split_inclusive(['.', '!', '?']) {
        let n = word_count(sentence);
        if words + n > word_budget {
            break;
        }
        kept.push_str(sentence);
        words += n;
    }
    let kept = kept.trim();
    if kept.is_empty() {
        text.split_whitespace()
            .take(word_budget)
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        kept.to_string()
    }
}

/// Fixed hashed bag-of-words projection. Texts without alphanumeric tokens
/// hash as a single token so nonempty text never embeds to zero.
fn hashed_bag_of_words(text: &str) -> Result<EmbeddingVector, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::InvalidInput("cannot embed empty text".into()));
    }
    let mut values = vec![0.0; EMBED_DIM];
    let tokens = word_tokens(text);
    if tokens.is_empty() {
        values[(fnv64(text.trim().as_bytes()) as usize) % EMBED_DIM] += 1.0;
    } else {
        for token in tokens {
            values[(fnv64(token.as_bytes()) as usize) % EMBED_DIM] += 1.0;
        }
    }
    EmbeddingVector::new(values)
}

/// FNV-1a, kept local so hashes stay stable across platforms and releases.
fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
