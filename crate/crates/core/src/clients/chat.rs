//! OpenAI-compatible chat-completions client for both model roles.
//!
//! VQA calls request a single answer token with top log-probabilities at the
//! first generated position. Transport failures are retried with exponential
//! backoff; protocol errors are not.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ClientError, TextBackend, TextGenRequest, TokenLogprobs, VqaBackend, VqaRequest};
use crate::domain::AnswerTokens;

pub const VQA_ANSWER_INSTRUCTION: &str = "Answer with exactly one word: Yes or No.";
pub const DUAL_IMAGE_PREAMBLE: &str =
    "The first image is the reference image. The second image is the candidate image.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub choices: Vec<Choice>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub message: ResponseMessage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<ChoiceLogprobs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprobEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobEntry {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<Vec<u8>>,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatClientConfig {
    /// Base URL including the API prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    /// Template turning an image id into a URL; `{id}` is substituted.
    /// References that already are `http(s)://` or `data:` URLs pass through.
    pub image_url_template: String,
    pub top_logprobs: u32,
}

impl ChatClientConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            backoff_base: Duration::from_millis(500),
            image_url_template: "{id}".to_string(),
            top_logprobs: 10,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Identity used to namespace cached responses.
    pub fn identity(&self) -> String {
        format!("{}@{}", self.model, self.base_url.trim_end_matches('/'))
    }

    pub fn image_url(&self, image_ref: &str) -> String {
        if image_ref.starts_with("http://")
            || image_ref.starts_with("https://")
            || image_ref.starts_with("data:")
        {
            image_ref.to_string()
        } else {
            self.image_url_template.replace("{id}", image_ref)
        }
    }

    pub fn build_text_request(&self, request: &TextGenRequest) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: vec![ContentPart::Text {
                    text: request.prompt.clone(),
                }],
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            logprobs: None,
            top_logprobs: None,
        }
    }

    /// Images first (reference before candidate), then the question text.
    pub fn build_vqa_request(&self, request: &VqaRequest) -> ChatRequest {
        let mut content: Vec<ContentPart> = request
            .image_refs
            .iter()
            .map(|r| ContentPart::ImageUrl {
                image_url: ImageUrl { url: self.image_url(r) },
            })
            .collect();
        let text = if request.image_refs.len() == 2 {
            format!("{DUAL_IMAGE_PREAMBLE}\n{}\n{VQA_ANSWER_INSTRUCTION}", request.question_text)
        } else {
            format!("{}\n{VQA_ANSWER_INSTRUCTION}", request.question_text)
        };
        content.push(ContentPart::Text { text });
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
            temperature: 0.0,
            max_tokens: 1,
            logprobs: Some(true),
            top_logprobs: Some(self.top_logprobs.max(5)),
        }
    }
}

pub fn parse_text_response(response: &ChatResponse) -> Result<String, ClientError> {
    response
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .ok_or_else(|| ClientError::ProtocolError("response has no message content".into()))
}

/// Log-probabilities at the first generated position: the sampled token plus
/// its top alternatives. Duplicate tokens keep the larger value.
pub fn parse_vqa_response(
    response: &ChatResponse,
    tokens: &AnswerTokens,
) -> Result<TokenLogprobs, ClientError> {
    let first = response
        .choices
        .first()
        .and_then(|c| c.logprobs.as_ref())
        .and_then(|l| l.content.as_ref())
        .and_then(|c| c.first())
        .ok_or_else(|| ClientError::ProtocolError("response carries no token log-probabilities".into()))?;
    let mut map: BTreeMap<String, f64> = BTreeMap::new();
    let all = std::iter::once((&first.token, first.logprob))
        .chain(first.top_logprobs.iter().map(|t| (&t.token, t.logprob)));
    for (token, lp) in all {
        let slot = map.entry(token.clone()).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(lp);
    }
    let logprobs = TokenLogprobs::new(map)?;
    if !logprobs.has_answer_token(tokens) {
        return Err(ClientError::MissingBothAnswerTokens);
    }
    Ok(logprobs)
}

/// Live HTTP client.
#[derive(Debug)]
pub struct ChatCompletionsClient {
    config: ChatClientConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl ChatCompletionsClient {
    /// Reads the API key from the configured environment variable, if any.
    pub fn new(config: ChatClientConfig) -> Result<Self, ClientError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::BackendUnavailable(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .connect_timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::BackendUnavailable(format!("building HTTP client: {e}")))?;
        Ok(Self {
            config,
            http,
            api_key,
        })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    fn post_once(&self, body: &[u8]) -> Result<ChatResponse, ClientError> {
        let mut req = self
            .http
            .post(self.config.endpoint())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| classify_transport(&e))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| classify_transport(&e))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ClientError::BackendUnavailable(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        if !status.is_success() {
            return Err(ClientError::ProtocolError(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        serde_json::from_slice(&bytes)
            .map_err(|e| ClientError::ProtocolError(format!("malformed response body: {e}")))
    }

    /// Posts `request`, retrying transport errors.
    pub fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let body = serde_json::to_vec(request).expect("chat requests serialize");
        let mut attempt = 0;
        loop {
            match self.post_once(&body) {
                Err(e) if e.is_transport() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff_base * 2u32.pow(attempt);
                    tracing::debug!("transport error ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn classify_transport(e: &reqwest::Error) -> ClientError {
    if e.is_timeout() {
        ClientError::Timeout(e.to_string())
    } else if e.is_decode() {
        ClientError::ProtocolError(e.to_string())
    } else {
        ClientError::BackendUnavailable(e.to_string())
    }
}

impl TextBackend for ChatCompletionsClient {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        request.validate()?;
        let resp = self.send(&self.config.build_text_request(request))?;
        parse_text_response(&resp)
    }
}

impl VqaBackend for ChatCompletionsClient {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        request.validate()?;
        let resp = self.send(&self.config.build_vqa_request(request))?;
        parse_vqa_response(&resp, &request.answer_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response_with(top: &[(&str, f64)]) -> ChatResponse {
        ChatResponse {
            id: None,
            object: None,
            model: None,
            choices: vec![Choice {
                index: 0,
                message: ResponseMessage {
                    role: "assistant".into(),
                    content: Some(top[0].0.into()),
                },
                logprobs: Some(ChoiceLogprobs {
                    content: Some(vec![TokenLogprobEntry {
                        token: top[0].0.into(),
                        logprob: top[0].1,
                        bytes: None,
                        top_logprobs: top
                            .iter()
                            .map(|(t, l)| TopLogprob {
                                token: (*t).into(),
                                logprob: *l,
                                bytes: None,
                            })
                            .collect(),
                    }]),
                }),
                finish_reason: Some("length".into()),
            }],
            extra: Map::new(),
        }
    }

    #[test]
    fn vqa_request_shape() {
        let cfg = ChatClientConfig::new("http://x/v1/", "vlm");
        let req = VqaRequest {
            question_text: "Is it longer?".into(),
            image_refs: vec!["ref".into(), "https://img/c.jpg".into()],
            answer_tokens: AnswerTokens::default(),
        };
        let chat = cfg.build_vqa_request(&req);
        assert_eq!(cfg.endpoint(), "http://x/v1/chat/completions");
        assert_eq!(chat.max_tokens, 1);
        assert_eq!(chat.temperature, 0.0);
        assert_eq!(chat.logprobs, Some(true));
        assert!(chat.top_logprobs.unwrap() >= 5);
        let parts = &chat.messages[0].content;
        assert_eq!(parts.len(), 3);
        assert_eq!(
            parts[0],
            ContentPart::ImageUrl { image_url: ImageUrl { url: "ref".into() } }
        );
        assert_eq!(
            parts[1],
            ContentPart::ImageUrl { image_url: ImageUrl { url: "https://img/c.jpg".into() } }
        );
        let json = serde_json::to_value(&chat).unwrap();
        assert_eq!(json["messages"][0]["content"][2]["type"], "text");
    }

    #[test]
    fn extracts_first_position_logprobs() {
        let r = response_with(&[("Yes", -0.1), ("No", -2.5), ("yes", -4.0)]);
        let lp = parse_vqa_response(&r, &AnswerTokens::default()).unwrap();
        assert_eq!(lp.get("Yes"), Some(-0.1));
        assert_eq!(lp.get("No"), Some(-2.5));
        assert_eq!(lp.len(), 3);
    }

    #[test]
    fn missing_answer_tokens() {
        let r = response_with(&[("Maybe", -0.1), ("Perhaps", -2.5)]);
        assert_eq!(
            parse_vqa_response(&r, &AnswerTokens::default()),
            Err(ClientError::MissingBothAnswerTokens)
        );
    }

    #[test]
    fn missing_logprobs_is_protocol_error() {
        let mut r = response_with(&[("Yes", -0.1)]);
        r.choices[0].logprobs = None;
        assert!(matches!(
            parse_vqa_response(&r, &AnswerTokens::default()),
            Err(ClientError::ProtocolError(_))
        ));
    }

    #[test]
    fn image_url_template() {
        let mut cfg = ChatClientConfig::new("http://x/v1", "m");
        cfg.image_url_template = "http://images.local/{id}.jpg".into();
        assert_eq!(cfg.image_url("B001"), "http://images.local/B001.jpg");
        assert_eq!(cfg.image_url("data:image/png;base64,AA"), "data:image/png;base64,AA");
    }

    #[test]
    fn unreachable_host_is_backend_unavailable() {
        let mut cfg = ChatClientConfig::new("http://127.0.0.1:9/v1", "m");
        cfg.timeout = Duration::from_millis(500);
        cfg.max_retries = 1;
        cfg.backoff_base = Duration::from_millis(10);
        let client = ChatCompletionsClient::new(cfg).unwrap();
        let err = client.complete(&TextGenRequest::new("hi")).unwrap_err();
        assert!(err.is_transport(), "{err:?}");
    }
}
