//! Sharded, resumable pipeline orchestration.
//!
//! Every stage reads its predecessor's shards, writes its own shards
//! deterministically, and finishes by writing a digest-carrying manifest.
//! Re-running a complete stage is a no-op; killing a stage mid-run and
//! restarting reproduces byte-identical artifacts because partial outputs
//! are never visible under their final names and LLM responses are served
//! from the content-addressed cache.

pub mod config;
pub mod manifest;
mod stages;

use std::fmt;

use thiserror::Error;

pub use config::{
    AlignmentSection, EvalSection, FilterSection, GatewaySection, ParseSection, PipelineConfig,
    PromptSection, ProviderSpec, StatsSection,
};
pub use manifest::{ShardEntry, ShardManifest};
pub use stages::{CandidateRecord, FailureRecord, ResponseRecord};

use crate::records::fnv1a64;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{0}` has not completed; run it first")]
    UpstreamIncomplete(String),
    #[error("stage `{stage}`: {failed} of {total} items failed (limit {limit})")]
    PartialFailure { stage: String, failed: usize, total: usize, limit: f64 },
    #[error(transparent)]
    Record(#[from] crate::records::RecordError),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl StageError {
    /// Process exit status: 2 for configuration/sequencing mistakes, 1 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) | StageError::UpstreamIncomplete(_) => 2,
            _ => 1,
        }
    }
}

/// Pipeline stages in execution order. Alignment and filtering repeat per
/// round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Block,
    Prompt,
    Generate,
    Parse,
    Align(u32),
    Filter(u32),
    Stats,
    Eval,
}

impl Stage {
    /// Directory under the workdir holding this stage's artifacts.
    pub fn dir_name(&self) -> String {
        match self {
            Stage::Synth => "synth".into(),
            Stage::Ingest => "ingest".into(),
            Stage::Block => "block".into(),
            Stage::Prompt => "prompt".into(),
            Stage::Generate => "generate".into(),
            Stage::Parse => "parse".into(),
            Stage::Align(round) => format!("align/round-{round}"),
            Stage::Filter(round) => format!("filter/round-{round}"),
            Stage::Stats => "stats".into(),
            Stage::Eval => "eval".into(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Align(round) => write!(f, "align (round {round})"),
            Stage::Filter(round) => write!(f, "filter (round {round})"),
            other => write!(f, "{}", other.dir_name()),
        }
    }
}

/// What one stage invocation did.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub shards: usize,
    pub records: u64,
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.skipped {
            write!(f, "{:<18} up to date ({} records)", self.stage, self.records)
        } else {
            write!(f, "{:<18} {} records in {} shard file(s)", self.stage, self.records, self.shards)
        }
    }
}

/// Stable shard assignment: all records of a video land in one shard, and
/// the layout never drifts across runs or machines.
pub fn shard_assign(video_id: &str, n_shards: u32) -> u32 {
    (fnv1a64(video_id.as_bytes()) % n_shards as u64) as u32
}

/// Executes stages against one workdir, skipping anything already complete
/// under the current configuration.
pub struct StageRunner<'a> {
    config: &'a PipelineConfig,
    config_hash: String,
    force: bool,
}

impl<'a> StageRunner<'a> {
    pub fn new(config: &'a PipelineConfig, force: bool) -> Self {
        let config_hash = config.config_hash();
        StageRunner { config, config_hash, force }
    }

    pub fn config(&self) -> &PipelineConfig {
        self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn force(&self) -> bool {
        self.force
    }

    /// Run one stage (no-op if already complete and not forced).
    pub fn run(&self, stage: Stage) -> Result<StageReport, StageError> {
        stages::run_stage(self, stage)
    }

    /// Run the full chain for this configuration, in order.
    pub fn run_all(&self) -> Result<Vec<StageReport>, StageError> {
        let mut reports = Vec::new();
        if self.config.synth.is_some() {
            reports.push(self.run(Stage::Synth)?);
        }
        for stage in [Stage::Ingest, Stage::Block, Stage::Prompt, Stage::Generate, Stage::Parse] {
            reports.push(self.run(stage)?);
        }
        for round in 1..=self.config.alignment.rounds {
            reports.push(self.run(Stage::Align(round))?);
            reports.push(self.run(Stage::Filter(round))?);
        }
        reports.push(self.run(Stage::Stats)?);
        if self.config.eval.is_some() || self.config.synth.is_some() {
            reports.push(self.run(Stage::Eval)?);
        }
        if self.config.output.is_some() {
            stages::export_dataset(self)?;
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_assignment_is_stable_and_balanced() {
        assert_eq!(shard_assign("any-video", 1), 0);
        let id = "video-xyz";
        assert_eq!(shard_assign(id, 64), shard_assign(id, 64));

        let mut counts = vec![0u64; 64];
        for i in 0..10_000 {
            counts[shard_assign(&format!("video-{i:06}"), 64) as usize] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(min > 0.0 && max / min < 1.5, "shard skew too high: {min}..{max}");
    }
}
