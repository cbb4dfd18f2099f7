//! Contracts for the two external model roles: text generation and VQA
//! answer scoring.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{AnswerTokens, VisualQuestion};

pub mod cache;
pub mod chat;
pub mod mock;

pub use cache::{CachedTextBackend, CachedVqaBackend, ResponseCache};
pub use chat::{ChatClientConfig, ChatCompletionsClient};
pub use mock::{MockTextBackend, MockVqaBackend, VqaFallback};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("neither answer token appears in the returned log-probabilities")]
    MissingBothAnswerTokens,
}

impl ClientError {
    /// Errors worth retrying at the transport level.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::BackendUnavailable(_) | ClientError::Timeout(_))
    }
}

/// Hex SHA-256 over a domain tag and the canonical JSON form of `value`.
pub fn content_hash<T: Serialize + ?Sized>(tag: &str, value: &T) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_vec(value).expect("request types always serialize"));
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGenRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Retry index. Only affects cache identity; never sent on the wire.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub attempt: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl TextGenRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 1024;

    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            attempt: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_tokens < 1 {
            return Err(ClientError::ProtocolError("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Key used by mock fixtures: depends on the prompt only.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt)
    }

    /// Key used by the response cache: depends on every request field.
    pub fn cache_key(&self) -> String {
        content_hash("text-gen", self)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    content_hash("prompt", prompt)
}

/// One yes/no question about one image, or about a (reference, candidate) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VqaRequest {
    pub question_text: String,
    pub image_refs: Vec<String>,
    pub answer_tokens: AnswerTokens,
}

impl VqaRequest {
    /// Routes the question to `[candidate]` or `[reference, candidate]`
    /// according to its reference flag.
    pub fn for_question(
        question: &VisualQuestion,
        reference_image_id: &str,
        candidate_image_id: &str,
        answer_tokens: &AnswerTokens,
    ) -> Self {
        let image_refs = if question.needs_reference() {
            vec![reference_image_id.to_string(), candidate_image_id.to_string()]
        } else {
            vec![candidate_image_id.to_string()]
        };
        Self {
            question_text: question.text().to_string(),
            image_refs,
            answer_tokens: answer_tokens.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        match self.image_refs.as_slice() {
            [_] => Ok(()),
            [a, b] if a != b => Ok(()),
            [_, _] => Err(ClientError::ProtocolError(
                "reference and candidate image must differ".into(),
            )),
            refs => Err(ClientError::ProtocolError(format!(
                "expected 1 or 2 image references, got {}",
                refs.len()
            ))),
        }
    }

    pub fn cache_key(&self) -> String {
        content_hash("vqa", self)
    }
}

/// Log-probabilities of candidate tokens at the first generated position.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct TokenLogprobs {
    entries: BTreeMap<String, f64>,
}

impl TryFrom<BTreeMap<String, f64>> for TokenLogprobs {
    type Error = ClientError;

    fn try_from(entries: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        for (token, &lp) in &entries {
            // Providers occasionally report tiny positive values from rounding.
            if !lp.is_finite() || lp > 1e-9 {
                return Err(ClientError::ProtocolError(format!(
                    "invalid log-probability {lp} for token {token:?}"
                )));
            }
        }
        let entries = entries.into_iter().map(|(t, lp)| (t, lp.min(0.0))).collect();
        Ok(Self { entries })
    }
}

impl From<TokenLogprobs> for BTreeMap<String, f64> {
    fn from(t: TokenLogprobs) -> Self {
        t.entries
    }
}

impl TokenLogprobs {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self, ClientError> {
        Self::try_from(entries)
    }

    /// Builds from plain probabilities in `(0, 1]`.
    pub fn from_probabilities<'a>(
        pairs: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Result<Self, ClientError> {
        Self::try_from(
            pairs
                .into_iter()
                .map(|(t, p)| (t.to_string(), p.ln()))
                .collect::<BTreeMap<_, _>>(),
        )
    }

    pub fn get(&self, token: &str) -> Option<f64> {
        self.entries.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(t, &lp)| (t.as_str(), lp))
    }

    pub fn has_answer_token(&self, tokens: &AnswerTokens) -> bool {
        self.entries.contains_key(&tokens.yes) || self.entries.contains_key(&tokens.no)
    }
}

pub trait TextBackend: Send + Sync {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError>;
}

pub trait VqaBackend: Send + Sync {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError>;
}

impl<T: TextBackend + ?Sized> TextBackend for &T {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<T: TextBackend + ?Sized> TextBackend for Arc<T> {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<T: VqaBackend + ?Sized> VqaBackend for &T {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        (**self).answer_logprobs(request)
    }
}

impl<T: VqaBackend + ?Sized> VqaBackend for Arc<T> {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        (**self).answer_logprobs(request)
    }
}

impl<T: TextBackend + ?Sized> TextBackend for Box<T> {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<T: VqaBackend + ?Sized> VqaBackend for Box<T> {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        (**self).answer_logprobs(request)
    }
}

/// Applies `f` to every item with at most `limit` calls running at once.
///
/// Results come back in input order. With `limit <= 1` (or a single item)
/// everything runs sequentially on the calling thread.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Issues VQA requests with a bound on in-flight calls; failures stay positional.
pub fn answer_batch<B: VqaBackend + ?Sized>(
    client: &B,
    requests: &[VqaRequest],
    limit: usize,
) -> Vec<Result<TokenLogprobs, ClientError>> {
    bounded_map(requests, limit, |req| {
        req.validate()?;
        client.answer_logprobs(req)
    })
}

#[derive(Debug, Default)]
struct FlightCounter {
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl FlightCounter {
    fn enter(&self) -> FlightGuard<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        FlightGuard(self)
    }
}

struct FlightGuard<'a>(&'a FlightCounter);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Wraps a backend and records call counts and peak concurrency.
#[derive(Debug)]
pub struct Instrumented<B> {
    inner: B,
    counter: FlightCounter,
}

impl<B> Instrumented<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            counter: FlightCounter::default(),
        }
    }

    pub fn calls(&self) -> u64 {
        self.counter.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.counter.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.counter.calls.store(0, Ordering::SeqCst);
        self.counter.max_in_flight.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: VqaBackend> VqaBackend for Instrumented<B> {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        let _guard = self.counter.enter();
        self.inner.answer_logprobs(request)
    }
}

impl<B: TextBackend> TextBackend for Instrumented<B> {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        let _guard = self.counter.enter();
        self.inner.complete(request)
    }
}

/// Bounds in-flight calls across every user of a shared backend handle.
#[derive(Debug)]
pub struct ConcurrencyLimited<B> {
    inner: B,
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl<B> ConcurrencyLimited<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_, B> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a, B>(&'a ConcurrencyLimited<B>);

impl<B> Drop for PermitGuard<'_, B> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl<B: VqaBackend> VqaBackend for ConcurrencyLimited<B> {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        let _permit = self.acquire();
        self.inner.answer_logprobs(request)
    }
}

impl<B: TextBackend> TextBackend for ConcurrencyLimited<B> {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        let _permit = self.acquire();
        self.inner.complete(request)
    }
}
