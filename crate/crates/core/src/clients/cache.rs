//! Response caching in front of a backend.

use std::sync::Arc;

use serde_json::Value;

use super::{
    content_hash, ClientError, TextBackend, TextGenRequest, TokenLogprobs, VqaBackend, VqaRequest,
};
use crate::formats::{FormatError, RecordStore};

/// Cache keyed by a backend namespace plus the full request content hash.
///
/// The namespace should identify the backend (model name, endpoint) so that
/// switching models never replays another model's answers.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    store: Arc<RecordStore>,
    namespace: String,
}

impl ResponseCache {
    pub fn new(store: Arc<RecordStore>, namespace: impl Into<String>) -> Self {
        Self {
            store,
            namespace: namespace.into(),
        }
    }

    pub fn in_memory(namespace: impl Into<String>) -> Self {
        Self::new(Arc::new(RecordStore::in_memory()), namespace)
    }

    pub fn key(&self, request_key: &str) -> String {
        content_hash(&self.namespace, request_key)
    }

    pub fn get(&self, request_key: &str) -> Option<Value> {
        self.store.get(&self.key(request_key))
    }

    pub fn put(&self, request_key: &str, value: Value) -> Result<(), FormatError> {
        self.store.insert(&self.key(request_key), value)
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }
}

/// Only successful responses are cached.
#[derive(Debug)]
pub struct CachedTextBackend<B> {
    inner: B,
    cache: ResponseCache,
}

impl<B> CachedTextBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: TextBackend> TextBackend for CachedTextBackend<B> {
    fn complete(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        let key = request.cache_key();
        if let Some(Value::String(hit)) = self.cache.get(&key) {
            return Ok(hit);
        }
        let out = self.inner.complete(request)?;
        if let Err(e) = self.cache.put(&key, Value::String(out.clone())) {
            tracing::warn!("failed to persist text cache entry: {e}");
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct CachedVqaBackend<B> {
    inner: B,
    cache: ResponseCache,
}

impl<B> CachedVqaBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: VqaBackend> VqaBackend for CachedVqaBackend<B> {
    fn answer_logprobs(&self, request: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
        let key = request.cache_key();
        if let Some(hit) = self.cache.get(&key) {
            if let Ok(parsed) = serde_json::from_value::<TokenLogprobs>(hit) {
                return Ok(parsed);
            }
        }
        let out = self.inner.answer_logprobs(request)?;
        let value = serde_json::to_value(&out).expect("logprobs serialize");
        if let Err(e) = self.cache.put(&key, value) {
            tracing::warn!("failed to persist VQA cache entry: {e}");
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{Instrumented, MockTextBackend, MockVqaBackend, VqaFallback};
    use crate::domain::AnswerTokens;

    #[test]
    fn text_cache_hits_skip_backend() {
        let mut mock = MockTextBackend::new(true);
        mock.register("p", "out");
        let backend = CachedTextBackend::new(Instrumented::new(mock), ResponseCache::in_memory("m"));
        let req = TextGenRequest::new("p");
        assert_eq!(backend.complete(&req).unwrap(), "out");
        assert_eq!(backend.complete(&req).unwrap(), "out");
        assert_eq!(backend.inner().calls(), 1);
    }

    #[test]
    fn errors_are_not_cached() {
        let backend = CachedTextBackend::new(
            Instrumented::new(MockTextBackend::new(true)),
            ResponseCache::in_memory("m"),
        );
        let req = TextGenRequest::new("p");
        assert!(backend.complete(&req).is_err());
        assert!(backend.complete(&req).is_err());
        assert_eq!(backend.inner().calls(), 2);
    }

    #[test]
    fn vqa_replay_equals_live_capture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vqa.jsonl");
        let live = MockVqaBackend::new(VqaFallback::HashDerived);
        let reqs: Vec<VqaRequest> = (0..20)
            .map(|i| VqaRequest {
                question_text: format!("Is it item {i}?"),
                image_refs: vec![format!("img{i}")],
                answer_tokens: AnswerTokens::default(),
            })
            .collect();
        let captured: Vec<_> = {
            let store = Arc::new(RecordStore::open_append(&path).unwrap());
            let cached = CachedVqaBackend::new(&live, ResponseCache::new(store, "vlm"));
            reqs.iter().map(|r| cached.answer_logprobs(r).unwrap()).collect()
        };
        let store = Arc::new(RecordStore::load(&path).unwrap());
        let offline = CachedVqaBackend::new(
            Instrumented::new(MockVqaBackend::strict()),
            ResponseCache::new(store, "vlm"),
        );
        for (r, live_out) in reqs.iter().zip(&captured) {
            let replay = offline.answer_logprobs(r).unwrap();
            assert_eq!(
                serde_json::to_vec(&replay).unwrap(),
                serde_json::to_vec(live_out).unwrap()
            );
        }
        assert_eq!(offline.inner().calls(), 0);
    }

    #[test]
    fn namespace_separates_backends() {
        let store = Arc::new(RecordStore::in_memory());
        let a = ResponseCache::new(store.clone(), "model-a");
        let b = ResponseCache::new(store, "model-b");
        a.put("k", Value::from(1)).unwrap();
        assert!(b.get("k").is_none());
    }
}
