//! Declarative pipeline configuration: one TOML file drives every stage;
//! every field has a flag-level override in the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{FilterThreshold, OffsetRange};
use crate::blocking::BlockingConfig;
use crate::gateway::{GatewayConfig, DEFAULT_API_KEY_ENV, ECHO_ENDPOINT};
use crate::records::{sha256_hex, write_atomic};
use crate::response::{DeltaSec, TimestampGrammar};
use crate::synthetic::SyntheticConfig;

use super::StageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Transcript source: a line-delimited record file, or a directory of
    /// `.srt`/`.vtt` files. Defaults to the synthetic corpus when a
    /// `[synth]` section is present.
    #[serde(default)]
    pub input: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Optional path for the merged final dataset after the last round.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_shards")]
    pub shards: u32,
    /// Process only the first N videos (0 = everything).
    #[serde(default)]
    pub limit: u64,
    #[serde(default)]
    pub seed: u64,

    #[serde(default)]
    pub blocking: BlockingConfig,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub parse: ParseSection,
    #[serde(default)]
    pub alignment: AlignmentSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub synth: Option<SyntheticConfig>,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

fn default_shards() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// Named preset, ignored when `template_file` is given.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Plain-text task template with a `{{ASR}}` placeholder.
    #[serde(default)]
    pub template_file: Option<PathBuf>,
    /// Plain-text system preamble override.
    #[serde(default)]
    pub system_file: Option<PathBuf>,
}

fn default_preset() -> String {
    "final".into()
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { preset: default_preset(), template_file: None, system_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    #[serde(default = "default_endpoint")]
    pub endpoint_url: String,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_gateway_concurrency")]
    pub concurrency_limit: usize,
    /// Defaults to `<workdir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Generation aborts when more than this fraction of requests fail.
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

fn default_endpoint() -> String {
    ECHO_ENDPOINT.into()
}
fn default_model() -> String {
    "default".into()
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_gateway_concurrency() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}
fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}
fn default_failure_fraction() -> f64 {
    0.01
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            endpoint_url: default_endpoint(),
            model_name: default_model(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            request_timeout_s: default_timeout(),
            max_retries: default_retries(),
            concurrency_limit: default_gateway_concurrency(),
            cache_dir: None,
            backoff_base_ms: default_backoff(),
            api_key_env: default_api_key_env(),
            max_failure_fraction: default_failure_fraction(),
        }
    }
}

impl GatewaySection {
    pub fn to_gateway_config(&self, workdir: &Path) -> GatewayConfig {
        GatewayConfig {
            endpoint_url: self.endpoint_url.clone(),
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            request_timeout_s: self.request_timeout_s,
            max_retries: self.max_retries,
            concurrency_limit: self.concurrency_limit,
            cache_dir: self.cache_dir.clone().unwrap_or_else(|| workdir.join("cache")),
            backoff_base_ms: self.backoff_base_ms,
            api_key_env: self.api_key_env.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseSection {
    #[serde(default = "default_delta_sec")]
    pub delta_sec: u32,
    #[serde(default)]
    pub grammar: TimestampGrammar,
    /// Drop candidates from fully degenerate responses (structure failure
    /// or total input repetition) at parse time. Off by default: the
    /// similarity filter is the quality gate.
    #[serde(default)]
    pub drop_flagged: bool,
}

fn default_delta_sec() -> u32 {
    8
}

impl Default for ParseSection {
    fn default() -> Self {
        ParseSection { delta_sec: default_delta_sec(), grammar: TimestampGrammar::Default, drop_flagged: false }
    }
}

impl ParseSection {
    pub fn delta(&self) -> Result<DeltaSec, StageError> {
        DeltaSec::new(self.delta_sec)
            .ok_or_else(|| StageError::Config("parse.delta_sec must be at least 1".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum ProviderSpec {
    /// In-process scorer rebuilt from the synth stage's ground truth.
    Synthetic,
    /// Precomputed `{candidate_id, delta, score}` files, sharded like the
    /// candidate shards: `<path>/shard-NNNN.jsonl`.
    ScoreFiles { path: PathBuf },
    /// Remote scoring service.
    Http { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSection {
    #[serde(default = "default_t_offset")]
    pub t_offset: u32,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    #[serde(default)]
    pub providers: Vec<ProviderSpec>,
}

fn default_t_offset() -> u32 {
    10
}
fn default_rounds() -> u32 {
    1
}

impl Default for AlignmentSection {
    fn default() -> Self {
        AlignmentSection {
            t_offset: default_t_offset(),
            rounds: default_rounds(),
            max_failure_fraction: default_failure_fraction(),
            providers: Vec::new(),
        }
    }
}

impl AlignmentSection {
    pub fn range(&self) -> Result<OffsetRange, StageError> {
        OffsetRange::new(self.t_offset)
            .ok_or_else(|| StageError::Config("alignment.t_offset must be at least 1".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// Adaptive mode: keep the N most similar pairs.
    #[serde(default)]
    pub retain: Option<u64>,
    /// Fixed mode: keep pairs scoring at least this much.
    #[serde(default)]
    pub kappa: Option<f64>,
}

impl FilterSection {
    pub fn threshold(&self) -> Result<FilterThreshold, StageError> {
        match (self.retain, self.kappa) {
            (Some(retain), None) => Ok(FilterThreshold::AdaptiveTopN { retain }),
            (None, Some(kappa)) => Ok(FilterThreshold::Fixed { kappa }),
            (None, None) => Err(StageError::Config(
                "filter: set exactly one of `retain` (adaptive) or `kappa` (fixed)".into(),
            )),
            (Some(_), Some(_)) => Err(StageError::Config(
                "filter: `retain` and `kappa` are mutually exclusive".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    /// Line-delimited `{caption_id, verbs: [...]}` annotations from an
    /// external POS tagger; verb statistics are reported as null without it.
    #[serde(default)]
    pub verbs_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Flat f32 matrix + JSON sidecar; defaults to the synth fixture.
    #[serde(default)]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default)]
    pub video_embeddings: Option<PathBuf>,
    /// Mean-pool every `pool` consecutive video rows into one gallery
    /// entry (frames-per-video).
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Multi-positive ground truth: `{query_id, positive_ids}` records.
    /// Defaults to exact id matching.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
}

fn default_pool() -> usize {
    1
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StageError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| StageError::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), StageError> {
        if self.shards == 0 {
            return Err(StageError::Config("shards must be at least 1".into()));
        }
        if self.input.is_none() && self.synth.is_none() {
            return Err(StageError::Config(
                "no transcript source: set `input` or a [synth] section".into(),
            ));
        }
        if self.alignment.rounds == 0 {
            return Err(StageError::Config("alignment.rounds must be at least 1".into()));
        }
        let score_file_providers = self
            .alignment
            .providers
            .iter()
            .any(|p| matches!(p, ProviderSpec::ScoreFiles { .. }));
        if score_file_providers && self.alignment.rounds > 1 {
            return Err(StageError::Config(
                "score-file providers carry offsets relative to round-1 timestamps; \
                 multi-round alignment needs a queryable provider"
                    .into(),
            ));
        }
        if self.synth.is_none()
            && self.alignment.providers.iter().any(|p| matches!(p, ProviderSpec::Synthetic))
        {
            return Err(StageError::Config(
                "synthetic provider requires a [synth] section".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the configuration; recorded in every stage manifest. Any
    /// config change invalidates completed stages conservatively. The
    /// workdir itself is masked out so a relocated workdir still verifies.
    pub fn config_hash(&self) -> String {
        let mut masked = self.clone();
        masked.workdir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&masked).expect("config serializes"))
    }

    /// Persist the effective config into the workdir for later inspection.
    pub fn snapshot(&self, workdir: &Path) -> Result<(), StageError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| StageError::Config(format!("config serialization failed: {e}")))?;
        write_atomic(&workdir.join("config.toml"), text.as_bytes())?;
        Ok(())
    }
}
