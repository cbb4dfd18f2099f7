//! Builds the text, VQA and annotator backends from configuration.
//!
//! Each role is stacked as cache -> concurrency limit -> call counter ->
//! backend, so cache hits never reach the counter.

use std::path::Path;
use std::sync::Arc;

use vqarank::clients::{
    CachedTextBackend, CachedVqaBackend, ChatCompletionsClient, ConcurrencyLimited, Instrumented,
    MockTextBackend, MockVqaBackend, ResponseCache, TextBackend, VqaBackend, VqaFallback,
};
use vqarank::formats::RecordStore;

use crate::config::{BackendMode, Config, EndpointConfig};
use crate::error::CliError;

pub type CountedText = Instrumented<Box<dyn TextBackend>>;
pub type CountedVqa = Instrumented<Box<dyn VqaBackend>>;

pub struct TextRole {
    pub backend: Arc<dyn TextBackend>,
    pub counter: Arc<CountedText>,
}

pub struct VqaRole {
    pub backend: Arc<dyn VqaBackend>,
    pub counter: Arc<CountedVqa>,
}

impl TextRole {
    /// Calls that reached the underlying backend.
    pub fn calls(&self) -> u64 {
        self.counter.calls()
    }
}

impl VqaRole {
    pub fn calls(&self) -> u64 {
        self.counter.calls()
    }
}

fn endpoint<'a>(e: &'a Option<EndpointConfig>, role: &str) -> Result<&'a EndpointConfig, CliError> {
    let e = e
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("live mode needs a [backend.{role}] section")))?;
    if e.base_url.is_empty() || e.model.is_empty() {
        return Err(CliError::Usage(format!(
            "[backend.{role}] needs base_url and model"
        )));
    }
    if let Some(var) = &e.api_key_env {
        if std::env::var_os(var).is_none() {
            return Err(CliError::Usage(format!(
                "environment variable {var} (api_key_env of [backend.{role}]) is not set"
            )));
        }
    }
    Ok(e)
}

fn live_client(e: &EndpointConfig) -> Result<ChatCompletionsClient, CliError> {
    ChatCompletionsClient::new(e.client_config()).map_err(|err| CliError::Backend(err.to_string()))
}

fn load_store(path: &Path) -> Result<RecordStore, CliError> {
    RecordStore::load(path).map_err(|e| CliError::Data(format!("mock fixtures: {e}")))
}

fn cache_for(config: &Config, file: &str, namespace: String) -> Result<Option<ResponseCache>, CliError> {
    let Some(dir) = &config.backend.cache_dir else {
        return Ok(None);
    };
    let store = RecordStore::open_append(&dir.join(file))?;
    Ok(Some(ResponseCache::new(Arc::new(store), namespace)))
}

pub fn text_role(config: &Config) -> Result<TextRole, CliError> {
    let (inner, namespace): (Box<dyn TextBackend>, String) = match config.backend.mode {
        BackendMode::Live => {
            let e = endpoint(&config.backend.text, "text")?;
            let client = live_client(e)?;
            let ns = client.config().identity();
            (Box::new(client), ns)
        }
        BackendMode::Mock => {
            let mut mock = match &config.mock.text_fixtures {
                Some(p) => MockTextBackend::from_store(&load_store(p)?, config.mock.strict)
                    .map_err(|e| CliError::Data(e.to_string()))?,
                None => MockTextBackend::new(config.mock.strict),
            };
            if let Some(out) = &config.mock.text_default {
                mock = mock.with_default(out.clone());
            }
            (Box::new(mock), mock_namespace("text", &config.mock.text_fixtures))
        }
    };
    let counter = Arc::new(Instrumented::new(inner));
    let limited = ConcurrencyLimited::new(Arc::clone(&counter), config.rerank.fan_out);
    let backend: Arc<dyn TextBackend> = match cache_for(config, "text.jsonl", namespace)? {
        Some(cache) => Arc::new(CachedTextBackend::new(limited, cache)),
        None => Arc::new(limited),
    };
    Ok(TextRole { backend, counter })
}

fn mock_namespace(role: &str, fixtures: &Option<std::path::PathBuf>) -> String {
    match fixtures {
        Some(p) => format!("mock-{role}:{}", p.display()),
        None => format!("mock-{role}"),
    }
}

fn vqa_like(
    config: &Config,
    live: &Option<EndpointConfig>,
    role: &str,
    fixtures: &Option<std::path::PathBuf>,
    cache_file: &str,
) -> Result<VqaRole, CliError> {
    let (inner, namespace): (Box<dyn VqaBackend>, String) = match config.backend.mode {
        BackendMode::Live => {
            let e = endpoint(live, role)?;
            let client = live_client(e)?;
            let ns = client.config().identity();
            (Box::new(client), ns)
        }
        BackendMode::Mock => {
            let fallback = if config.mock.strict {
                VqaFallback::Strict
            } else {
                VqaFallback::HashDerived
            };
            let mock = match fixtures {
                Some(p) => MockVqaBackend::from_store(&load_store(p)?, fallback)
                    .map_err(|e| CliError::Data(e.to_string()))?,
                None => MockVqaBackend::new(fallback),
            };
            (Box::new(mock), mock_namespace(role, fixtures))
        }
    };
    let counter = Arc::new(Instrumented::new(inner));
    let limited = ConcurrencyLimited::new(Arc::clone(&counter), config.rerank.fan_out);
    let backend: Arc<dyn VqaBackend> = match cache_for(config, cache_file, namespace)? {
        Some(cache) => Arc::new(CachedVqaBackend::new(limited, cache)),
        None => Arc::new(limited),
    };
    Ok(VqaRole { backend, counter })
}

pub fn vqa_role(config: &Config) -> Result<VqaRole, CliError> {
    vqa_like(config, &config.backend.vqa, "vqa", &config.mock.vqa_fixtures, "vqa.jsonl")
}

pub fn annotator_role(config: &Config) -> Result<VqaRole, CliError> {
    let live = config.backend.annotator.clone().or_else(|| config.backend.vqa.clone());
    let fixtures = config
        .mock
        .annotator_fixtures
        .clone()
        .or_else(|| config.mock.vqa_fixtures.clone());
    vqa_like(config, &live, "annotator", &fixtures, "annotator.jsonl")
}
