//! TOML configuration with command-line overrides.
//!
//! Relative paths in a config file resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vqarank::clients::ChatClientConfig;
use vqarank::RerankConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL including the API prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub image_url_template: String,
    pub top_logprobs: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 2,
            image_url_template: "{id}".into(),
            top_logprobs: 10,
        }
    }
}

impl EndpointConfig {
    pub fn client_config(&self) -> ChatClientConfig {
        ChatClientConfig {
            api_key_env: self.api_key_env.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            max_retries: self.max_retries,
            image_url_template: self.image_url_template.clone(),
            top_logprobs: self.top_logprobs,
            ..ChatClientConfig::new(&self.base_url, &self.model)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    /// Directory for the append-only response caches. No caching when unset.
    pub cache_dir: Option<PathBuf>,
    pub text: Option<EndpointConfig>,
    pub vqa: Option<EndpointConfig>,
    /// Larger model used to label sampled images; defaults to `vqa`.
    pub annotator: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Record store of text completions keyed by prompt hash.
    pub text_fixtures: Option<PathBuf>,
    /// Output for prompts without a fixture (non-strict mode only).
    pub text_default: Option<String>,
    /// Record store of VQA log-probabilities keyed by request hash.
    pub vqa_fixtures: Option<PathBuf>,
    pub annotator_fixtures: Option<PathBuf>,
    /// Fail on requests without a fixture instead of synthesizing answers.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuestionsConfig {
    /// Extra attempts when the text backend returns unparseable output.
    pub retry_budget: u32,
    /// Prompt template file replacing the built-in one.
    pub template: Option<PathBuf>,
}

impl Default for QuestionsConfig {
    fn default() -> Self {
        Self {
            retry_budget: 2,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub attempt_cap: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            attempt_cap: 5,
        }
    }
}

/// Default file locations; subcommand flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub triplets: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub cir_scores: Option<PathBuf>,
    pub image_index: Option<PathBuf>,
    pub rankings: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub balance_report: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub rerank: RerankConfig,
    pub backend: BackendConfig,
    pub mock: MockConfig,
    pub questions: QuestionsConfig,
    pub dataset: DatasetConfig,
    pub paths: PathsConfig,
    pub serve: ServeConfig,
}

/// Values given on the command line; `None` keeps the configured value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub lambda_vqa: Option<f64>,
    pub k: Option<f64>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<BackendMode>,
    pub cache_dir: Option<PathBuf>,
    pub fan_out: Option<usize>,
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut config: Config =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let paths = &mut self.paths;
        let slots = [
            &mut self.backend.cache_dir,
            &mut self.mock.text_fixtures,
            &mut self.mock.vqa_fixtures,
            &mut self.mock.annotator_fixtures,
            &mut self.questions.template,
            &mut paths.triplets,
            &mut paths.questions,
            &mut paths.cir_scores,
            &mut paths.image_index,
            &mut paths.rankings,
            &mut paths.traces,
            &mut paths.corpus,
            &mut paths.balance_report,
            &mut paths.metrics,
        ];
        for slot in slots {
            if let Some(p) = slot.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = o.lambda_vqa {
            self.rerank.lambda_vqa = v;
        }
        if let Some(v) = o.k {
            self.rerank.k = v;
        }
        if let Some(v) = o.n {
            self.rerank.n = v;
        }
        if let Some(v) = o.seed {
            self.dataset.seed = v;
        }
        if let Some(v) = o.backend {
            self.backend.mode = v;
        }
        if let Some(v) = &o.cache_dir {
            self.backend.cache_dir = Some(v.clone());
        }
        if let Some(v) = o.fan_out {
            self.rerank.fan_out = v;
        }
        self.rerank
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Picks the flag value, falling back to the configured path.
pub fn require_path(
    flag: Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone()).ok_or_else(|| {
        CliError::Usage(format!("no {what} path given (flag or [paths] in the config)"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let c = Config::parse("", Path::new("/")).unwrap();
        assert_eq!(c.rerank, RerankConfig::default());
        assert_eq!(c.backend.mode, BackendMode::Mock);
        assert_eq!(c.questions.retry_budget, 2);
    }

    #[test]
    fn parses_and_resolves_relative_paths() {
        let text = r#"
            [rerank]
            lambda_vqa = 0.1
            n = 70

            [backend]
            mode = "live"
            cache_dir = "cache"

            [backend.vqa]
            base_url = "http://localhost:8000/v1"
            model = "vlm"
            api_key_env = "VLM_KEY"

            [paths]
            triplets = "/data/triplets.jsonl"
            questions = "questions.jsonl"
        "#;
        let c = Config::parse(text, Path::new("/etc/vqarank")).unwrap();
        assert_eq!(c.rerank.lambda_vqa, 0.1);
        assert_eq!(c.rerank.n, 70);
        assert_eq!(c.rerank.k, vqarank::domain::DEFAULT_K);
        assert_eq!(c.backend.mode, BackendMode::Live);
        assert_eq!(c.backend.cache_dir.as_deref(), Some(Path::new("/etc/vqarank/cache")));
        assert_eq!(c.paths.triplets.as_deref(), Some(Path::new("/data/triplets.jsonl")));
        assert_eq!(c.paths.questions.as_deref(), Some(Path::new("/etc/vqarank/questions.jsonl")));
        let vqa = c.backend.vqa.unwrap().client_config();
        assert_eq!(vqa.endpoint(), "http://localhost:8000/v1/chat/completions");
        assert_eq!(vqa.api_key_env.as_deref(), Some("VLM_KEY"));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = Config::parse("[rerank]\nlambda = 1.0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let mut c = Config::default();
        c.apply(&Overrides {
            lambda_vqa: Some(0.0),
            n: Some(4),
            seed: Some(9),
            backend: Some(BackendMode::Live),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!((c.rerank.lambda_vqa, c.rerank.n, c.dataset.seed), (0.0, 4, 9));
        assert_eq!(c.backend.mode, BackendMode::Live);
        let bad = c.apply(&Overrides { k: Some(-1.0), ..Overrides::default() });
        assert!(matches!(bad, Err(CliError::Usage(_))));
    }
}
