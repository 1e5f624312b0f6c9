//! Remote backend speaking a chat-completions style wire protocol.
//!
//! Requests are JSON `POST`s carrying the filled prompt as message content
//! parts; frames ride along as image parts in prompt order (history text,
//! then prior-window images, then the observed image). Responses must carry
//! per-token log-probabilities for scoring calls; NLL scoring sends the
//! hypothesis as the assistant turn and expects the server to score its
//! tokens. Embeddings are computed locally with the same hashed
//! bag-of-words projection the scripted backend uses, so the wire protocol
//! stays a single endpoint.
//!
//! Every call carries a timeout and a bounded retry policy; a backend call
//! can fail, but it cannot hang.

use super::{Backend, BackendError, Context, EmbeddingVector, GenerationParams, PromptTemplateSet};
use crate::manifest::FrameRef;
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Connection settings for a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Model name to request.
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// How many times a failed request is retried.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Base backoff between retries, in milliseconds (doubles per attempt).
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default, skip_serializing_if = "is_default_templates")]
    pub templates: PromptTemplateSet,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

fn is_default_templates(t: &PromptTemplateSet) -> bool {
    *t == PromptTemplateSet::default()
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_env: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            templates: PromptTemplateSet::default(),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage {
    role: &'static str,
    content: Vec<ContentPart>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Serialize)]
struct ImageUrl {
    url: String,
}

/// Parsed response body of a chat completion.
#[derive(Debug, Clone, Deserialize)]
pub struct ChatResponsePayload {
    pub choices: Vec<ResponseChoice>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ResponseChoice {
    pub message: ResponseMessage,
    #[serde(default)]
    pub logprobs: Option<ResponseLogprobs>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ResponseLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Parse a raw chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<ChatResponsePayload, BackendError> {
    let payload: ChatResponsePayload = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")))?;
    if payload.choices.is_empty() {
        return Err(BackendError::Protocol("response carries no choices".into()));
    }
    Ok(payload)
}

impl ChatResponsePayload {
    /// Text of the first choice.
    pub fn first_text(&self) -> Result<&str, BackendError> {
        self.choices[0]
            .message
            .content
            .as_deref()
            .ok_or_else(|| BackendError::Protocol("first choice has no content".into()))
    }

    /// Token logprobs of the first choice; a capability error when the
    /// server did not return any.
    pub fn token_logprobs(&self) -> Result<&[TokenLogprob], BackendError> {
        self.choices[0]
            .logprobs
            .as_ref()
            .and_then(|lp| lp.content.as_deref())
            .filter(|tokens| !tokens.is_empty())
            .ok_or_else(|| {
                BackendError::Capability(
                    "backend did not expose token log-probabilities".into(),
                )
            })
    }

    /// Sum of per-token logprobs, negated: the total NLL in nats.
    pub fn total_nll(&self) -> Result<f64, BackendError> {
        Ok(-self
            .token_logprobs()?
            .iter()
            .map(|t| t.logprob)
            .sum::<f64>())
    }

    /// Probability mass of the affirmative token at the first generated
    /// position, read from the top-logprobs list.
    pub fn yes_probability(&self) -> Result<f64, BackendError> {
        let tokens = self.token_logprobs()?;
        let first = &tokens[0];
        let candidates = if first.top_logprobs.is_empty() {
            // No alternatives listed: fall back to the sampled token itself.
            std::slice::from_ref(first).iter().map(|t| (normalize_token(&t.token), t.logprob)).collect::<Vec<_>>()
        } else {
            first
                .top_logprobs
                .iter()
                .map(|t| (normalize_token(&t.token), t.logprob))
                .collect()
        };
        let mass: f64 = candidates
            .iter()
            .filter(|(tok, _)| tok == "yes")
            .map(|(_, lp)| lp.exp())
            .sum();
        Ok(mass.clamp(0.0, 1.0))
    }
}

fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Chat-completions client implementing [`Backend`].
pub struct RemoteBackend {
    config: RemoteConfig,
    auth_header: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        config.templates.validate()?;
        let auth_header = match &config.auth_env {
            Some(var) => {
                let token = std::env::var(var).map_err(|_| {
                    BackendError::InvalidParameter(format!(
                        "auth environment variable {var} is not set"
                    ))
                })?;
                Some(format!("Bearer {token}"))
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                message: format!("cannot build HTTP client: {e}"),
                attempts: 0,
            })?;
        Ok(RemoteBackend {
            config,
            auth_header,
            client,
        })
    }

    fn templates(&self) -> &PromptTemplateSet {
        &self.config.templates
    }

    /// POST with bounded retries; retried on transport errors, 429 and 5xx.
    fn post(&self, request: &ChatRequest) -> Result<ChatResponsePayload, BackendError> {
        let attempts = self.config.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1).min(8),
                ));
            }
            let mut builder = self.client.post(&self.config.endpoint).json(request);
            if let Some(auth) = &self.auth_header {
                builder = builder.header("Authorization", auth);
            }
            match builder.send() {
                Err(e) => last_error = format!("request failed: {e}"),
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let body = response.text().map_err(|e| BackendError::Transport {
                            message: format!("cannot read response body: {e}"),
                            attempts: attempt + 1,
                        })?;
                        return parse_chat_response(&body);
                    }
                    let retriable = status.as_u16() == 429 || status.is_server_error();
                    let body = response.text().unwrap_or_default();
                    last_error = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
                    if !retriable {
                        return Err(BackendError::Protocol(last_error));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            message: last_error,
            attempts,
        })
    }

    fn message_with_frames(
        &self,
        text: String,
        frames: &[FrameRef],
        observed: Option<&FrameRef>,
    ) -> Result<ChatMessage, BackendError> {
        let mut content = vec![ContentPart::Text { text }];
        for frame in frames {
            content.push(ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: frame_url(frame)?,
                },
            });
        }
        if let Some(frame) = observed {
            content.push(ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: frame_url(frame)?,
                },
            });
        }
        Ok(ChatMessage {
            role: "user",
            content,
        })
    }

    fn base_request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            max_tokens: None,
            temperature: None,
            top_p: None,
            n: None,
            seed: None,
            logprobs: false,
            top_logprobs: None,
        }
    }
}

/// Inline a frame reference as an image URL: URLs and data URIs pass
/// through, local paths are read and base64-inlined.
fn frame_url(frame: &FrameRef) -> Result<String, BackendError> {
    let uri = frame.uri.as_str();
    if uri.contains("://") || uri.starts_with("data:") {
        return Ok(uri.to_string());
    }
    let bytes = std::fs::read(uri).map_err(|e| {
        BackendError::InvalidInput(format!("cannot read frame file {uri}: {e}"))
    })?;
    let mime = if uri.ends_with(".png") { "image/png" } else { "image/jpeg" };
    Ok(format!("data:{mime};base64,{}", base64_encode(&bytes)))
}

/// Minimal standard-alphabet base64, enough for inlining frame bytes.
fn base64_encode(bytes: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(ALPHABET[(n >> 18) as usize & 63] as char);
        out.push(ALPHABET[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { ALPHABET[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { ALPHABET[n as usize & 63] as char } else { '=' });
    }
    out
}

impl Backend for RemoteBackend {
    fn generate_hypotheses(
        &self,
        ctx: &Context,
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        params.validate()?;
        if ctx.observed_frame.is_some() {
            return Err(BackendError::InvalidInput(
                "hypothesis generation must not see the observed frame".into(),
            ));
        }
        let prompt = PromptTemplateSet::fill(
            &self.templates().generation,
            &[("memory_text", &ctx.history_text)],
        );
        let message = self.message_with_frames(prompt, &ctx.prior_window, None)?;
        let mut request = self.base_request(vec![message]);
        request.n = Some(params.n as u32);
        request.temperature = Some(1.0);
        request.top_p = Some(params.nucleus_p);
        request.seed = Some(params.seed);
        let payload = self.post(&request)?;
        if payload.choices.len() < params.n {
            return Err(BackendError::Protocol(format!(
                "asked for {} hypotheses, server returned {}",
                params.n,
                payload.choices.len()
            )));
        }
        payload
            .choices
            .iter()
            .take(params.n)
            .map(|choice| {
                choice
                    .message
                    .content
                    .as_deref()
                    .map(|text| strip_hypothesis_prefix(text).to_string())
                    .ok_or_else(|| BackendError::Protocol("choice has no content".into()))
            })
            .collect()
    }

    fn score_nll(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError> {
        if hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty hypothesis".into()));
        }
        let prompt = PromptTemplateSet::fill(
            &self.templates().prior_score,
            &[("memory_text", &ctx.history_text), ("hypothesis", "")],
        );
        let user = self.message_with_frames(
            prompt.trim_end().to_string(),
            &ctx.prior_window,
            ctx.observed_frame.as_ref(),
        )?;
        // The hypothesis rides as the assistant turn; the server scores its
        // tokens and returns their logprobs.
        let assistant = ChatMessage {
            role: "assistant",
            content: vec![ContentPart::Text {
                text: hypothesis.to_string(),
            }],
        };
        let mut request = self.base_request(vec![user, assistant]);
        request.logprobs = true;
        request.max_tokens = Some(0);
        self.post(&request)?.total_nll()
    }

    fn score_posterior_yes(&self, hypothesis: &str, ctx: &Context) -> Result<f64, BackendError> {
        if ctx.observed_frame.is_none() {
            return Err(BackendError::InvalidInput(
                "posterior scoring needs an observed frame".into(),
            ));
        }
        let prompt = PromptTemplateSet::fill(
            &self.templates().posterior_score,
            &[
                ("memory_text", &ctx.history_text),
                ("hypothesis", hypothesis),
            ],
        );
        let message = self.message_with_frames(
            prompt,
            &ctx.prior_window,
            ctx.observed_frame.as_ref(),
        )?;
        let mut request = self.base_request(vec![message]);
        request.logprobs = true;
        request.top_logprobs = Some(20);
        request.max_tokens = Some(1);
        request.temperature = Some(0.0);
        self.post(&request)?.yes_probability()
    }

    fn summarize(&self, text: &str, word_budget: usize) -> Result<String, BackendError> {
        if text.trim().is_empty() {
            return Ok(String::new());
        }
        let prompt = format!(
            "Summarize the following video narrative in at most {word_budget} words, \
keeping the order of events:\n\n{text}"
        );
        let message = ChatMessage {
            role: "user",
            content: vec![ContentPart::Text { text: prompt }],
        };
        let mut request = self.base_request(vec![message]);
        request.temperature = Some(0.0);
        let summary = match self.post(&request) {
            Ok(payload) => payload.first_text()?.trim().to_string(),
            // Summarization always has the local truncation fallback.
            Err(_) => text.to_string(),
        };
        Ok(super::scripted_head_truncate(&summary, word_budget))
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        super::scripted_bag_of_words(text)
    }

    fn caption(&self, ctx: &Context) -> Result<String, BackendError> {
        let prompt = PromptTemplateSet::fill(
            &self.templates().caption,
            &[("memory_text", &ctx.history_text)],
        );
        let message = self.message_with_frames(
            prompt,
            &ctx.prior_window,
            ctx.observed_frame.as_ref(),
        )?;
        let mut request = self.base_request(vec![message]);
        request.temperature = Some(0.0);
        Ok(self.post(&request)?.first_text()?.trim().to_string())
    }

    fn judge(&self, reference: &str, response: &str) -> Result<String, BackendError> {
        let prompt = PromptTemplateSet::fill(
            &self.templates().judge,
            &[("reference", reference), ("response", response)],
        );
        let message = ChatMessage {
            role: "user",
            content: vec![ContentPart::Text { text: prompt }],
        };
        let mut request = self.base_request(vec![message]);
        request.temperature = Some(0.0);
        Ok(self.post(&request)?.first_text()?.trim().to_string())
    }
}

/// Models often answer "Hypothesis: ..."; keep only the prediction.
fn strip_hypothesis_prefix(text: &str) -> &str {
    let trimmed = text.trim();
    trimmed
        .strip_prefix("Hypothesis:")
        .map(str::trim)
        .unwrap_or(trimmed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCORING_BODY: &str = r#"{
        "id": "cmpl-1",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": "the man keeps stacking boxes"},
            "logprobs": {"content": [
                {"token": "the", "logprob": -0.105, "top_logprobs": []},
                {"token": " man", "logprob": -0.223, "top_logprobs": []},
                {"token": " keeps", "logprob": -1.204, "top_logprobs": []},
                {"token": " stacking", "logprob": -0.693, "top_logprobs": []},
                {"token": " boxes", "logprob": -0.051, "top_logprobs": []}
            ]}
        }]
    }"#;

    #[test]
    fn nll_recomputes_from_raw_payload() {
        let payload = parse_chat_response(SCORING_BODY).unwrap();
        let nll = payload.total_nll().unwrap();
        // Independent recomputation straight from the numbers in the body.
        let expected = -(-0.105 + -0.223 + -1.204 + -0.693 + -0.051);
        assert!((nll - expected).abs() < 1e-6, "nll {nll} vs {expected}");
    }

    #[test]
    fn missing_logprobs_is_a_capability_error() {
        let body = r#"{"choices": [{"message": {"content": "hi"}}]}"#;
        let payload = parse_chat_response(body).unwrap();
        assert!(matches!(
            payload.total_nll(),
            Err(BackendError::Capability(_))
        ));
    }

    #[test]
    fn malformed_body_is_a_protocol_error() {
        assert!(matches!(
            parse_chat_response("not json"),
            Err(BackendError::Protocol(_))
        ));
        assert!(matches!(
            parse_chat_response(r#"{"choices": []}"#),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn yes_probability_reads_top_logprobs() {
        let body = r#"{
            "choices": [{
                "message": {"content": "yes"},
                "logprobs": {"content": [{
                    "token": "yes", "logprob": -0.105,
                    "top_logprobs": [
                        {"token": "yes", "logprob": -0.105},
                        {"token": "Yes", "logprob": -3.0},
                        {"token": "no", "logprob": -2.5}
                    ]
                }]}
            }]
        }"#;
        let payload = parse_chat_response(body).unwrap();
        let p = payload.yes_probability().unwrap();
        let expected = (-0.105_f64).exp() + (-3.0_f64).exp();
        assert!((p - expected).abs() < 1e-9);
    }

    #[test]
    fn base64_matches_known_vectors() {
        assert_eq!(base64_encode(b""), "");
        assert_eq!(base64_encode(b"f"), "Zg==");
        assert_eq!(base64_encode(b"fo"), "Zm8=");
        assert_eq!(base64_encode(b"foo"), "Zm9v");
        assert_eq!(base64_encode(b"foobar"), "Zm9vYmFy");
    }

    #[test]
    fn strip_prefix_only_removes_label() {
        assert_eq!(strip_hypothesis_prefix("Hypothesis: he falls"), "he falls");
        assert_eq!(strip_hypothesis_prefix(" he falls "), "he falls");
    }

    mod live {
        use super::super::*;
        use crate::backend::Backend;
        use std::io::{Read, Write};
        use std::net::TcpListener;

        /// One-shot HTTP server answering every request with `body`.
        fn serve(body: &'static str, requests: usize) -> String {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap();
            std::thread::spawn(move || {
                for _ in 0..requests {
                    let (mut stream, _) = listener.accept().unwrap();
                    let mut buf = [0u8; 65536];
                    let mut read = 0;
                    // Read until the blank line plus the declared body.
                    loop {
                        let n = stream.read(&mut buf[read..]).unwrap_or(0);
                        if n == 0 {
                            break;
                        }
                        read += n;
                        let text = String::from_utf8_lossy(&buf[..read]);
                        if let Some(header_end) = text.find("\r\n\r\n") {
                            let content_length = text
                                .lines()
                                .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                                .unwrap_or(0);
                            if read >= header_end + 4 + content_length {
                                break;
                            }
                        }
                    }
                    let response = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                        body.len(),
                        body
                    );
                    stream.write_all(response.as_bytes()).unwrap();
                }
            });
            format!("http://{addr}")
        }

        #[test]
        fn caption_round_trip_against_local_server() {
            let endpoint = serve(
                r#"{"choices": [{"message": {"content": "a man stacks boxes"}}]}"#,
                1,
            );
            let mut config = RemoteConfig::new(endpoint, "test-model");
            config.retries = 0;
            let backend = RemoteBackend::new(config).unwrap();
            let caption = backend.caption(&Context::default()).unwrap();
            assert_eq!(caption, "a man stacks boxes");
        }

        #[test]
        fn unreachable_server_reports_attempts() {
            // Bind and drop a listener to find a dead port.
            let dead = {
                let l = TcpListener::bind("127.0.0.1:0").unwrap();
                format!("http://{}", l.local_addr().unwrap())
            };
            let mut config = RemoteConfig::new(dead, "test-model");
            config.retries = 2;
            config.backoff_ms = 1;
            let backend = RemoteBackend::new(config).unwrap();
            match backend.caption(&Context::default()) {
                Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
                other => panic!("expected transport error, got {other:?}"),
            }
        }
    }
}
