//! Deterministic fixture-backed backends.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{
    prompt_hash, ClientError, TextBackend, TextGenRequest, TokenLogprobs, VqaBackend, VqaRequest,
};
use crate::formats::RecordStore;

/// Text backend answering from fixtures keyed by the prompt's content hash.
#[derive(Debug, Clone, Default)]
pub struct MockTextBackend {
    fixtures: HashMap<String, String>,
    strict: bool,
    default_output: Option<String>,
}

impl MockTextBackend {
    /// In strict mode an unregistered prompt is a [`ClientError::ProtocolError`].
    pub fn new(strict: bool) -> Self {
        Self {
            fixtures: HashMap::new(),
            strict,
            default_output: None,
        }
    }

    pub fn with_default(mut self, output: impl Into<String>) -> Self {
        self.default_output = Some(output.into());
        self
    }

    pub fn register(&mut self, prompt: &str, output: impl Into<String>) {
        self.fixtures.insert(prompt_hash(prompt), output.into());
    }

    pub fn register_hash(&mut self, hash: impl Into<String>, output: impl Into<String>) {
        self.fixtures.insert(hash.into(), output.into());
    }

    /// Loads `{key: prompt hash, response: string}` records.
    pub fn from_store(store: &RecordStore, strict: bool) -> Result<Self, ClientError> {
        let mut mock = Self::new(strict);
        for (key, value) in store.entries() {
            let text = value.as_str().ok_or_else(|| {
                ClientError::ProtocolError(format!("fixture {key} is not a string"))
            })?;
            mock.register_hash(key.clone(), text);
        }
        Ok(mock)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl TextBackend for MockTextBackend {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        request.validate()?;
        let hash = request.prompt_hash();
        if let Some(out) = self.fixtures.get(&hash) {
            return Ok(out.clone());
        }
        if self.strict {
            return Err(ClientError::ProtocolError(format!(
                "no fixture registered for prompt hash {hash}"
            )));
        }
        Ok(self.default_output.clone().unwrap_or_default())
    }
}

/// What a VQA mock answers for requests without a registered fixture.
#[derive(Debug, Clone, PartialEq)]
pub enum VqaFallback {
    /// Unregistered requests fail with a protocol error naming the hash.
    Strict,
    /// Pseudo-probabilities derived from the request hash, in `[0.01, 0.99]`.
    HashDerived,
    Constant(TokenLogprobs),
}

/// VQA backend answering from fixtures keyed by the request content hash.
#[derive(Debug, Clone)]
pub struct MockVqaBackend {
    fixtures: HashMap<String, TokenLogprobs>,
    fallback: VqaFallback,
}

impl MockVqaBackend {
    pub fn new(fallback: VqaFallback) -> Self {
        Self {
            fixtures: HashMap::new(),
            fallback,
        }
    }

    pub fn strict() -> Self {
        Self::new(VqaFallback::Strict)
    }

    pub fn register(&mut self, request: &VqaRequest, response: TokenLogprobs) {
        self.fixtures.insert(request.cache_key(), response);
    }

    /// Registers plain probabilities for the request's answer tokens.
    /// `None` leaves that token out of the response.
    pub fn register_probs(&mut self, request: &VqaRequest, p_yes: Option<f64>, p_no: Option<f64>) {
        let tokens = &request.answer_tokens;
        let pairs = [(tokens.yes.as_str(), p_yes), (tokens.no.as_str(), p_no)];
        let logprobs =
            TokenLogprobs::from_probabilities(pairs.into_iter().filter_map(|(t, p)| p.map(|p| (t, p))))
                .expect("fixture probabilities must lie in (0, 1]");
        self.register(request, logprobs);
    }

    /// Loads `{key: request hash, response: {token: logprob}}` records.
    pub fn from_store(store: &RecordStore, fallback: VqaFallback) -> Result<Self, ClientError> {
        let mut mock = Self::new(fallback);
        for (key, value) in store.entries() {
            let logprobs: TokenLogprobs = serde_json::from_value(value)
                .map_err(|e| ClientError::ProtocolError(format!("fixture {key}: {e}")))?;
            mock.fixtures.insert(key, logprobs);
        }
        Ok(mock)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

fn hash_derived(request: &VqaRequest, key: &str) -> Result<TokenLogprobs, ClientError> {
    let digest = Sha256::digest(key.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let unit = (u64::from_be_bytes(word) >> 11) as f64 / (1u64 << 53) as f64;
    let p_yes = 0.01 + 0.98 * unit;
    TokenLogprobs::from_probabilities([
        (request.answer_tokens.yes.as_str(), p_yes),
        (request.answer_tokens.no.as_str(), 1.0 - p_yes),
    ])
}

impl VqaBackend for MockVqaBackend {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        request.validate()?;
        let key = request.cache_key();
        let response = match self.fixtures.get(&key) {
            Some(r) => r.clone(),
            None => match &self.fallback {
                VqaFallback::Strict => {
                    return Err(ClientError::ProtocolError(format!(
                        "no fixture registered for request hash {key}"
                    )))
                }
                VqaFallback::HashDerived => hash_derived(request, &key)?,
                VqaFallback::Constant(c) => c.clone(),
            },
        };
        if !response.has_answer_token(&request.answer_tokens) {
            return Err(ClientError::MissingBothAnswerTokens);
        }
        Ok(response)
    }
}
