//! Stage implementations. Each stage follows the same protocol: skip when
//! its manifest verifies under the current config, otherwise recompute from
//! a clean directory and write the manifest last.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    self, align, apply_offset, combine_providers, AlignedCaption, AlignedRecord, FilterThreshold,
    HttpScoringProvider, ProviderHandle, RoundManifest, ScoreFileSource, ScoreRecord, ScoreSpool,
    SimilarityProvider,
};
use crate::blocking::{slice_into_blocks, BlockRecord, SubtitleBlock};
use crate::gateway::{echo_response, Gateway};
use crate::ingest::{
    normalize, parse_record_stream, parse_srt, parse_webvtt, ParseMode, TranscriptRecord,
    VideoTranscript,
};
use crate::metrics::{corpus_stats, metrics_report, CaptionDoc, SimilarityMatrix, VerbAnnotation};
use crate::numerics::{cosine_sim, mean_pool, read_matrix, write_matrix};
use crate::prompt::{build_prompt, preset, PromptRequest, PromptTemplate};
use crate::records::{read_jsonl, sha256_file, write_atomic, write_jsonl, JsonlReader, ShardDigest};
use crate::response::{
    detect_failure_modes, parse_timestamped_captions, CaptionCandidate, ParseDiagnostics,
};
use crate::synthetic::{self, evaluate_recovery, GroundTruth, GroundTruthRecord};

use super::config::{EvalSection, PipelineConfig, ProviderSpec};
use super::manifest::ShardManifest;
use super::{shard_assign, Stage, StageError, StageReport, StageRunner};

/// Response record as persisted. Deliberately excludes latency and cache
/// provenance: a resumed run must produce bytes identical to an
/// uninterrupted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub video_id: String,
    pub block_index: u32,
    pub content_hash: String,
    pub raw_text: String,
    pub model_name: String,
}

/// Parsed caption candidate with its response-level diagnostics attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub video_id: String,
    pub block_index: u32,
    pub line_index: u32,
    pub caption: String,
    pub start: f64,
    pub end: f64,
    pub diagnostics: ParseDiagnostics,
}

impl CandidateRecord {
    pub fn to_candidate(&self) -> CaptionCandidate {
        CaptionCandidate {
            video_id: self.video_id.clone(),
            block_index: self.block_index,
            line_index: self.line_index,
            caption: self.caption.clone(),
            start_s: self.start,
            end_s: self.end,
        }
    }
}

/// Per-item failure log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub error: String,
}

fn shard_file(index: u32) -> String {
    format!("shard-{index:04}.jsonl")
}

fn stage_dir(runner: &StageRunner<'_>, stage: Stage) -> PathBuf {
    runner.config().workdir.join(stage.dir_name())
}

fn clean_dir(dir: &Path) -> Result<(), StageError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn require_complete(
    runner: &StageRunner<'_>,
    stage: Stage,
) -> Result<ShardManifest, StageError> {
    ShardManifest::load_verified(&stage_dir(runner, stage), runner.config_hash())
        .ok_or_else(|| StageError::UpstreamIncomplete(stage.to_string()))
}

fn skip_report(stage: Stage, manifest: &ShardManifest) -> StageReport {
    StageReport {
        stage: stage.to_string(),
        skipped: true,
        shards: manifest.shards.len(),
        records: manifest.record_count(),
    }
}

pub(super) fn run_stage(runner: &StageRunner<'_>, stage: Stage) -> Result<StageReport, StageError> {
    let dir = stage_dir(runner, stage);
    if !runner.force() {
        if let Some(manifest) = ShardManifest::load_verified(&dir, runner.config_hash()) {
            return Ok(skip_report(stage, &manifest));
        }
    }
    clean_dir(&dir)?;
    let manifest = match stage {
        Stage::Synth => run_synth(runner, &dir),
        Stage::Ingest => run_ingest(runner, &dir),
        Stage::Block => run_block(runner, &dir),
        Stage::Prompt => run_prompt(runner, &dir),
        Stage::Generate => run_generate(runner, &dir),
        Stage::Parse => run_parse(runner, &dir),
        Stage::Align(round) => run_align(runner, &dir, round),
        Stage::Filter(round) => run_filter(runner, &dir, round),
        Stage::Stats => run_stats(runner, &dir),
        Stage::Eval => run_eval(runner, &dir),
    }?;
    let manifest = manifest.finalize(&dir)?;
    Ok(StageReport {
        stage: stage.to_string(),
        skipped: false,
        shards: manifest.shards.len(),
        records: manifest.record_count(),
    })
}

fn push_file(manifest: &mut ShardManifest, dir: &Path, file: &str) -> Result<(), StageError> {
    let digest = ShardDigest { records: 0, sha256: sha256_file(&dir.join(file))? };
    manifest.push(file, &digest);
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

const SYNTH_RECORDS: &str = "records.jsonl";
const SYNTH_CANDIDATES: &str = "candidates.jsonl";
const SYNTH_TRUTH: &str = "ground_truth.jsonl";
const SYNTH_CONFIG: &str = "synth.json";
const SYNTH_TEXT_EMB: &str = "text.f32";
const SYNTH_VIDEO_EMB: &str = "video.f32";

fn run_synth(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    let synth_config = config
        .synth
        .as_ref()
        .ok_or_else(|| StageError::Config("synth stage needs a [synth] section".into()))?;
    let corpus = synthetic::generate(synth_config);

    let mut manifest = ShardManifest::new(Stage::Synth.dir_name(), runner.config_hash());

    let records: Vec<TranscriptRecord> =
        corpus.transcripts.iter().map(TranscriptRecord::from_transcript).collect();
    let digest = write_jsonl(&dir.join(SYNTH_RECORDS), &records)?;
    manifest.push(SYNTH_RECORDS, &digest);

    // Candidates as the real chain will see them: the transcripts are run
    // through the actual blocking + prompt + echo + parse path, so ids in
    // the score files line up with the parse stage's output.
    let candidates = simulate_candidates(runner, &corpus.transcripts)?;
    let digest = write_jsonl(&dir.join(SYNTH_CANDIDATES), &candidates)?;
    manifest.push(SYNTH_CANDIDATES, &digest);

    let digest = write_jsonl(&dir.join(SYNTH_TRUTH), corpus.truth.to_records())?;
    manifest.push(SYNTH_TRUTH, &digest);

    write_atomic(&dir.join(SYNTH_CONFIG), &serde_json::to_vec_pretty(synth_config).expect("config serializes"))?;
    push_file(&mut manifest, dir, SYNTH_CONFIG)?;

    let plain: Vec<CaptionCandidate> = candidates.iter().map(CandidateRecord::to_candidate).collect();
    let (ids, text_rows, video_rows) = synthetic::embedding_fixture(synth_config, &plain);
    write_matrix(&dir.join(SYNTH_TEXT_EMB), &ids, &text_rows)?;
    write_matrix(&dir.join(SYNTH_VIDEO_EMB), &ids, &video_rows)?;
    for file in [
        SYNTH_TEXT_EMB,
        SYNTH_VIDEO_EMB,
        &format!("{SYNTH_TEXT_EMB}.json"),
        &format!("{SYNTH_VIDEO_EMB}.json"),
    ] {
        push_file(&mut manifest, dir, file)?;
    }

    // Score files for the score-file provider route, sharded like the
    // candidate shards downstream.
    if let Some(ProviderSpec::ScoreFiles { path }) = config
        .alignment
        .providers
        .iter()
        .find(|p| matches!(p, ProviderSpec::ScoreFiles { .. }))
    {
        let range = config.alignment.range()?;
        let score_dir = resolve(&config.workdir, path);
        let durations: HashMap<String, f64> = corpus
            .transcripts
            .iter()
            .map(|t| (t.video_id.clone(), t.effective_duration().unwrap_or(f64::INFINITY)))
            .collect();
        let mut per_shard: Vec<Vec<ScoreRecord>> = vec![Vec::new(); config.shards as usize];
        for record in &candidates {
            let candidate = record.to_candidate();
            let shard = shard_assign(&candidate.video_id, config.shards) as usize;
            let duration = durations.get(&candidate.video_id).copied().unwrap_or(f64::INFINITY);
            let id = candidate.id();
            for delta in range.offsets() {
                if let Some((s, e)) =
                    align::shifted_window(candidate.start_s, candidate.end_s, delta, duration)
                {
                    let score = corpus
                        .provider
                        .score(&align::WindowQuery {
                            video_id: &candidate.video_id,
                            start_s: s,
                            end_s: e,
                            caption: &candidate.caption,
                        })
                        .map_err(|e| StageError::Config(format!("synthetic scoring failed: {e}")))?;
                    per_shard[shard].push(ScoreRecord { candidate_id: id.clone(), delta, score });
                }
            }
        }
        for (i, records) in per_shard.iter().enumerate() {
            write_jsonl(&score_dir.join(shard_file(i as u32)), records)?;
        }
        // Score files live outside the stage dir (their path is caller
        // chosen), so they are not manifest entries.
    }

    Ok(manifest)
}


fn resolve(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

/// Run transcripts through the same blocking/prompt/echo/parse path the
/// pipeline uses, in memory.
fn simulate_candidates(
    runner: &StageRunner<'_>,
    transcripts: &[VideoTranscript],
) -> Result<Vec<CandidateRecord>, StageError> {
    let config = runner.config();
    let template = resolve_template(config)?;
    let params = config.gateway.to_gateway_config(&config.workdir).model_params();
    let delta = config.parse.delta()?;
    let mut out = Vec::new();
    for transcript in transcripts {
        let normalized = normalize(transcript.clone());
        for block in slice_into_blocks(&normalized, &config.blocking) {
            let request = build_prompt(&block, &template, &params)?;
            let raw = echo_response(&request.rendered_user);
            let (candidates, diagnostics) = parse_timestamped_captions(
                &raw,
                &block.video_id,
                block.block_index,
                block.duration_s,
                delta,
                config.parse.grammar,
            );
            out.extend(candidates.into_iter().map(|c| CandidateRecord {
                video_id: c.video_id,
                block_index: c.block_index,
                line_index: c.line_index,
                caption: c.caption,
                start: c.start_s,
                end: c.end_s,
                diagnostics: diagnostics.clone(),
            }));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ingest

fn run_ingest(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    let input = match &config.input {
        Some(path) => path.clone(),
        None => {
            // Synthetic source: the synth stage must have run.
            require_complete(runner, Stage::Synth)?;
            stage_dir(runner, Stage::Synth).join(SYNTH_RECORDS)
        }
    };

    let mut transcripts: Vec<VideoTranscript> = Vec::new();
    let mut skipped: Vec<FailureRecord> = Vec::new();
    let limit = if config.limit == 0 { u64::MAX } else { config.limit };

    if input.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("srt") | Some("vtt")
                )
            })
            .collect();
        paths.sort();
        for path in paths {
            if transcripts.len() as u64 >= limit {
                break;
            }
            let video_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("video").to_string();
            let bytes = std::fs::read(&path)?;
            let parsed = match path.extension().and_then(|e| e.to_str()) {
                Some("srt") => parse_srt(&bytes, &video_id, ParseMode::Lenient),
                _ => parse_webvtt(&bytes, &video_id, ParseMode::Lenient),
            };
            match parsed {
                Ok(t) => transcripts.push(normalize(t)),
                Err(e) => skipped.push(FailureRecord {
                    id: path.display().to_string(),
                    error: e.to_string(),
                }),
            }
        }
    } else {
        let file = std::fs::File::open(&input).map_err(|e| {
            StageError::Config(format!("cannot open input {}: {e}", input.display()))
        })?;
        for (line_no, result) in parse_record_stream(std::io::BufReader::new(file)).enumerate() {
            if transcripts.len() as u64 >= limit {
                break;
            }
            match result {
                Ok(t) => transcripts.push(normalize(t)),
                Err(e) => skipped.push(FailureRecord {
                    id: format!("{}:{}", input.display(), line_no + 1),
                    error: e.to_string(),
                }),
            }
        }
    }

    let mut shards: Vec<Vec<TranscriptRecord>> = vec![Vec::new(); config.shards as usize];
    for t in &transcripts {
        shards[shard_assign(&t.video_id, config.shards) as usize]
            .push(TranscriptRecord::from_transcript(t));
    }

    let mut manifest = ShardManifest::new(Stage::Ingest.dir_name(), runner.config_hash());
    for (i, records) in shards.iter().enumerate() {
        let file = shard_file(i as u32);
        let digest = write_jsonl(&dir.join(&file), records)?;
        manifest.push(file, &digest);
    }
    if !skipped.is_empty() {
        let digest = write_jsonl(&dir.join("skipped.jsonl"), &skipped)?;
        manifest.push("skipped.jsonl", &digest);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// block

fn run_block(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    let upstream = require_complete(runner, Stage::Ingest)?;
    let ingest_dir = stage_dir(runner, Stage::Ingest);
    let mut manifest = ShardManifest::new(Stage::Block.dir_name(), runner.config_hash());

    let digests: Vec<(String, ShardDigest)> = (0..config.shards)
        .into_par_iter()
        .map(|i| -> Result<(String, ShardDigest), StageError> {
            let file = shard_file(i);
            let mut blocks: Vec<BlockRecord> = Vec::new();
            for record in JsonlReader::<TranscriptRecord>::open(&ingest_dir.join(&file))? {
                let transcript = record?.into_transcript()?;
                blocks.extend(
                    slice_into_blocks(&transcript, &config.blocking)
                        .iter()
                        .map(BlockRecord::from_block),
                );
            }
            let digest = write_jsonl(&dir.join(&file), &blocks)?;
            Ok((file, digest))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (file, digest) in digests {
        manifest.push(file, &digest);
    }
    drop(upstream);
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// prompt

fn resolve_template(config: &PipelineConfig) -> Result<PromptTemplate, StageError> {
    let mut template = match &config.prompt.template_file {
        Some(path) => PromptTemplate::from_task_file(&resolve(&config.workdir, path))
            .map_err(|e| StageError::Config(format!("cannot read template file: {e}")))?,
        None => preset(&config.prompt.preset).ok_or_else(|| {
            StageError::Config(format!(
                "unknown prompt preset `{}` (available: {})",
                config.prompt.preset,
                crate::prompt::PRESET_NAMES.join(", ")
            ))
        })?,
    };
    if let Some(path) = &config.prompt.system_file {
        template.system_text = std::fs::read_to_string(resolve(&config.workdir, path))
            .map_err(|e| StageError::Config(format!("cannot read system file: {e}")))?
            .trim_end()
            .to_string();
    }
    template.validate()?;
    Ok(template)
}


fn run_prompt(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    require_complete(runner, Stage::Block)?;
    let block_dir = stage_dir(runner, Stage::Block);
    let template = resolve_template(config)?;
    let params = config.gateway.to_gateway_config(&config.workdir).model_params();

    let mut manifest = ShardManifest::new(Stage::Prompt.dir_name(), runner.config_hash());
    let digests: Vec<(String, ShardDigest)> = (0..config.shards)
        .into_par_iter()
        .map(|i| -> Result<(String, ShardDigest), StageError> {
            let file = shard_file(i);
            let mut requests: Vec<PromptRequest> = Vec::new();
            for record in JsonlReader::<BlockRecord>::open(&block_dir.join(&file))? {
                let block = record?.into_block();
                if block.subtitles.is_empty() {
                    continue;
                }
                requests.push(build_prompt(&block, &template, &params)?);
            }
            let digest = write_jsonl(&dir.join(&file), &requests)?;
            Ok((file, digest))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (file, digest) in digests {
        manifest.push(file, &digest);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// generate

fn run_generate(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    require_complete(runner, Stage::Prompt)?;
    let prompt_dir = stage_dir(runner, Stage::Prompt);
    let gateway = Gateway::new(config.gateway.to_gateway_config(&config.workdir))?;

    let mut manifest = ShardManifest::new(Stage::Generate.dir_name(), runner.config_hash());
    let mut failures: Vec<FailureRecord> = Vec::new();
    let mut total = 0usize;

    for i in 0..config.shards {
        let file = shard_file(i);
        let requests: Vec<PromptRequest> = read_jsonl(&prompt_dir.join(&file))?;
        total += requests.len();
        let outcomes = gateway.batch_complete(&requests);
        let mut responses: Vec<ResponseRecord> = Vec::with_capacity(requests.len());
        for outcome in outcomes {
            let request = &requests[outcome.index];
            match outcome.result {
                Ok(response) => responses.push(ResponseRecord {
                    video_id: request.video_id.clone(),
                    block_index: request.block_index,
                    content_hash: response.content_hash,
                    raw_text: response.raw_text,
                    model_name: response.model_name,
                }),
                Err(e) => failures.push(FailureRecord {
                    id: format!("{}:{}", request.video_id, request.block_index),
                    error: e.to_string(),
                }),
            }
        }
        let digest = write_jsonl(&dir.join(&file), &responses)?;
        manifest.push(file, &digest);
    }

    if !failures.is_empty() {
        let digest = write_jsonl(&dir.join("failures.jsonl"), &failures)?;
        manifest.push("failures.jsonl", &digest);
        let fraction = failures.len() as f64 / total.max(1) as f64;
        if fraction > config.gateway.max_failure_fraction {
            return Err(StageError::PartialFailure {
                stage: Stage::Generate.to_string(),
                failed: failures.len(),
                total,
                limit: config.gateway.max_failure_fraction,
            });
        }
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// parse

fn run_parse(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    require_complete(runner, Stage::Generate)?;
    require_complete(runner, Stage::Block)?;
    let generate_dir = stage_dir(runner, Stage::Generate);
    let block_dir = stage_dir(runner, Stage::Block);
    let delta = config.parse.delta()?;

    let mut manifest = ShardManifest::new(Stage::Parse.dir_name(), runner.config_hash());
    let digests: Vec<(String, ShardDigest)> = (0..config.shards)
        .into_par_iter()
        .map(|i| -> Result<(String, ShardDigest), StageError> {
            let file = shard_file(i);
            let mut blocks: HashMap<(String, u32), SubtitleBlock> = HashMap::new();
            for record in JsonlReader::<BlockRecord>::open(&block_dir.join(&file))? {
                let block = record?.into_block();
                blocks.insert((block.video_id.clone(), block.block_index), block);
            }
            let mut candidates: Vec<CandidateRecord> = Vec::new();
            for record in JsonlReader::<ResponseRecord>::open(&generate_dir.join(&file))? {
                let response = record?;
                let Some(block) = blocks.get(&(response.video_id.clone(), response.block_index))
                else {
                    continue;
                };
                let diagnostics =
                    detect_failure_modes(&response.raw_text, block, delta, config.parse.grammar);
                if config.parse.drop_flagged
                    && (!diagnostics.structure_ok || diagnostics.repetition_ratio >= 1.0)
                {
                    continue;
                }
                let (parsed, _) = parse_timestamped_captions(
                    &response.raw_text,
                    &response.video_id,
                    response.block_index,
                    block.duration_s,
                    delta,
                    config.parse.grammar,
                );
                candidates.extend(parsed.into_iter().map(|c| CandidateRecord {
                    video_id: c.video_id,
                    block_index: c.block_index,
                    line_index: c.line_index,
                    caption: c.caption,
                    start: c.start_s,
                    end: c.end_s,
                    diagnostics: diagnostics.clone(),
                }));
            }
            let digest = write_jsonl(&dir.join(&file), &candidates)?;
            Ok((file, digest))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (file, digest) in digests {
        manifest.push(file, &digest);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// align

enum RoundProvider {
    Synthetic(crate::synthetic::SyntheticProvider),
    Http(HttpScoringProvider),
    ScoreFiles(PathBuf),
}

fn load_truth(runner: &StageRunner<'_>) -> Result<GroundTruth, StageError> {
    require_complete(runner, Stage::Synth)?;
    let records: Vec<GroundTruthRecord> =
        read_jsonl(&stage_dir(runner, Stage::Synth).join(SYNTH_TRUTH))?;
    Ok(GroundTruth::from_records(records))
}

fn build_providers(runner: &StageRunner<'_>) -> Result<Vec<RoundProvider>, StageError> {
    let config = runner.config();
    if config.alignment.providers.is_empty() {
        return Err(StageError::Config(
            "alignment needs at least one provider ([[alignment.providers]])".into(),
        ));
    }
    config
        .alignment
        .providers
        .iter()
        .map(|spec| match spec {
            ProviderSpec::Synthetic => {
                let synth_config = config.synth.as_ref().ok_or_else(|| {
                    StageError::Config("synthetic provider requires a [synth] section".into())
                })?;
                let truth = load_truth(runner)?;
                Ok(RoundProvider::Synthetic(synthetic::provider_from_truth(synth_config, &truth)))
            }
            ProviderSpec::Http { endpoint } => Ok(RoundProvider::Http(
                HttpScoringProvider::new(
                    endpoint.clone(),
                    std::time::Duration::from_secs_f64(config.gateway.request_timeout_s),
                )
                .map_err(|e| StageError::Config(format!("bad scoring endpoint: {e}")))?,
            )),
            ProviderSpec::ScoreFiles { path } => {
                Ok(RoundProvider::ScoreFiles(resolve(&config.workdir, path)))
            }
        })
        .collect()
}

fn load_durations(runner: &StageRunner<'_>, shard: u32) -> Result<HashMap<String, f64>, StageError> {
    let path = stage_dir(runner, Stage::Ingest).join(shard_file(shard));
    let mut durations = HashMap::new();
    for record in JsonlReader::<TranscriptRecord>::open(&path)? {
        let record = record?;
        if let Some(d) = record.duration {
            durations.insert(record.video_id, d);
        }
    }
    Ok(durations)
}

fn align_input_candidates(
    runner: &StageRunner<'_>,
    round: u32,
    shard: u32,
) -> Result<Vec<CaptionCandidate>, StageError> {
    let mut candidates: Vec<CaptionCandidate> = if round == 1 {
        read_jsonl::<CandidateRecord>(&stage_dir(runner, Stage::Parse).join(shard_file(shard)))?
            .iter()
            .map(CandidateRecord::to_candidate)
            .collect()
    } else {
        read_jsonl::<AlignedRecord>(
            &stage_dir(runner, Stage::Filter(round - 1)).join(shard_file(shard)),
        )?
        .into_iter()
        .map(|r| r.into_aligned().candidate)
        .collect()
    };
    candidates.sort_by(|a, b| {
        (&a.video_id, a.block_index, a.line_index).cmp(&(&b.video_id, b.block_index, b.line_index))
    });
    Ok(candidates)
}

fn run_align(runner: &StageRunner<'_>, dir: &Path, round: u32) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    if round == 1 {
        require_complete(runner, Stage::Parse)?;
    } else {
        require_complete(runner, Stage::Filter(round - 1))?;
    }
    require_complete(runner, Stage::Ingest)?;
    let range = config.alignment.range()?;
    let providers = build_providers(runner)?;

    struct ShardOutput {
        file: String,
        digest: ShardDigest,
        failures: Vec<FailureRecord>,
        total: usize,
    }

    let outputs: Vec<ShardOutput> = (0..config.shards)
        .into_par_iter()
        .map(|i| -> Result<ShardOutput, StageError> {
            let candidates = align_input_candidates(runner, round, i)?;
            let durations = load_durations(runner, i)?;

            // Score-file sources load per shard so memory stays bounded by
            // the shard, not the corpus.
            let shard_sources: Vec<Option<ScoreFileSource>> = providers
                .iter()
                .map(|p| match p {
                    RoundProvider::ScoreFiles(path) => {
                        ScoreFileSource::load(&[path.join(shard_file(i))]).map(Some)
                    }
                    _ => Ok(None),
                })
                .collect::<Result<_, _>>()?;
            let handles: Vec<ProviderHandle<'_>> = providers
                .iter()
                .zip(&shard_sources)
                .map(|(p, source)| match p {
                    RoundProvider::Synthetic(s) => ProviderHandle::Window(s as &dyn SimilarityProvider),
                    RoundProvider::Http(h) => ProviderHandle::Window(h as &dyn SimilarityProvider),
                    RoundProvider::ScoreFiles(_) => {
                        ProviderHandle::Scores(source.as_ref().expect("loaded above"))
                    }
                })
                .collect();

            let mut aligned: Vec<AlignedRecord> = Vec::with_capacity(candidates.len());
            let mut failures: Vec<FailureRecord> = Vec::new();
            for candidate in &candidates {
                let duration =
                    durations.get(&candidate.video_id).copied().unwrap_or(f64::INFINITY);
                let result = handles
                    .iter()
                    .map(|h| h.profile(candidate, range, duration))
                    .collect::<Result<Vec<_>, _>>()
                    .and_then(|profiles| {
                        let combined = if profiles.len() == 1 {
                            profiles.into_iter().next().expect("one profile")
                        } else {
                            combine_providers(&profiles)?
                        };
                        let (delta_star, score) = align(&combined)?;
                        Ok(apply_offset(candidate, delta_star, score, duration))
                    });
                match result {
                    Ok(a) => aligned.push(AlignedRecord::from_aligned(&a)),
                    Err(e) => {
                        failures.push(FailureRecord { id: candidate.id(), error: e.to_string() })
                    }
                }
            }
            let file = shard_file(i);
            let digest = write_jsonl(&dir.join(&file), &aligned)?;
            Ok(ShardOutput { file, digest, failures, total: candidates.len() })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut manifest = ShardManifest::new(Stage::Align(round).dir_name(), runner.config_hash());
    let mut failures = Vec::new();
    let mut total = 0usize;
    for output in outputs {
        manifest.push(output.file, &output.digest);
        failures.extend(output.failures);
        total += output.total;
    }
    if !failures.is_empty() {
        let digest = write_jsonl(&dir.join("failures.jsonl"), &failures)?;
        manifest.push("failures.jsonl", &digest);
        let fraction = failures.len() as f64 / total.max(1) as f64;
        if fraction > config.alignment.max_failure_fraction {
            return Err(StageError::PartialFailure {
                stage: Stage::Align(round).to_string(),
                failed: failures.len(),
                total,
                limit: config.alignment.max_failure_fraction,
            });
        }
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// filter

pub const ROUND_MANIFEST_FILE: &str = "round_manifest.json";

fn run_filter(runner: &StageRunner<'_>, dir: &Path, round: u32) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    require_complete(runner, Stage::Align(round))?;
    let align_dir = stage_dir(runner, Stage::Align(round));
    let threshold = config.filter.threshold()?;

    // Pass A: spool every aligned score to disk, tracking count and bounds.
    let spool_path = dir.join("scores.spool");
    let mut spool = ScoreSpool::create(&spool_path)?;
    let mut count = 0u64;
    let mut score_min = f64::INFINITY;
    let mut score_max = f64::NEG_INFINITY;
    for i in 0..config.shards {
        for record in JsonlReader::<AlignedRecord>::open(&align_dir.join(shard_file(i)))? {
            let record = record?;
            spool.push(record.score)?;
            count += 1;
            score_min = score_min.min(record.score);
            score_max = score_max.max(record.score);
        }
    }
    let (spool_path, spooled) = spool.finish()?;
    debug_assert_eq!(spooled, count);

    let kappa = match threshold {
        FilterThreshold::Fixed { kappa } => Some(kappa),
        FilterThreshold::AdaptiveTopN { retain } => {
            align::select_global_threshold(&spool_path, count, retain)?
        }
    };

    // Pass B: partition each shard; histogram the full input distribution.
    struct ShardOutput {
        file: String,
        digest: ShardDigest,
        drops_file: Option<(String, ShardDigest)>,
        retained: u64,
        histogram: Vec<u64>,
    }
    let (lo, hi) = if count == 0 { (0.0, 0.0) } else { (score_min, score_max) };
    let outputs: Vec<ShardOutput> = (0..config.shards)
        .into_par_iter()
        .map(|i| -> Result<ShardOutput, StageError> {
            let records: Vec<AlignedRecord> = read_jsonl(&align_dir.join(shard_file(i)))?;
            let histogram = align::score_histogram(records.iter().map(|r| r.score), lo, hi);
            let (retained, dropped): (Vec<AlignedRecord>, Vec<AlignedRecord>) = match kappa {
                None => (records, Vec::new()),
                Some(kappa) => records.into_iter().partition(|r| r.score >= kappa),
            };
            let file = shard_file(i);
            let digest = write_jsonl(&dir.join(&file), &retained)?;
            let drops_file = if dropped.is_empty() {
                None
            } else {
                let drops: Vec<align::DropEntry> = dropped
                    .iter()
                    .map(|r| align::DropEntry {
                        candidate_id: format!("{}:{}:{}", r.video_id, r.block_index, r.line_index),
                        score: r.score,
                    })
                    .collect();
                let name = format!("drops-{i:04}.jsonl");
                let drop_digest = write_jsonl(&dir.join(&name), &drops)?;
                Some((name, drop_digest))
            };
            Ok(ShardOutput {
                file,
                digest,
                drops_file,
                retained: retained.len() as u64,
                histogram,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    std::fs::remove_file(&spool_path).ok();

    let mut manifest = ShardManifest::new(Stage::Filter(round).dir_name(), runner.config_hash());
    let mut retained_count = 0u64;
    let mut histogram = vec![0u64; align::HISTOGRAM_BINS];
    let mut drop_entries = Vec::new();
    for output in outputs {
        retained_count += output.retained;
        for (bin, add) in histogram.iter_mut().zip(&output.histogram) {
            *bin += add;
        }
        manifest.push(output.file, &output.digest);
        drop_entries.extend(output.drops_file);
    }
    for (name, digest) in drop_entries {
        manifest.push(name, &digest);
    }

    let round_manifest = RoundManifest {
        round,
        input_count: count,
        retained_count,
        kappa,
        score_min: lo,
        score_max: hi,
        histogram,
    };
    write_atomic(
        &dir.join(ROUND_MANIFEST_FILE),
        &serde_json::to_vec_pretty(&round_manifest).expect("round manifest serializes"),
    )?;
    push_file(&mut manifest, dir, ROUND_MANIFEST_FILE)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// stats

fn run_stats(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    let last_round = config.alignment.rounds;
    require_complete(runner, Stage::Filter(last_round))?;
    let filter_dir = stage_dir(runner, Stage::Filter(last_round));

    let mut docs: Vec<CaptionDoc> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut retained: Vec<AlignedCaption> = Vec::new();
    for i in 0..config.shards {
        for record in JsonlReader::<AlignedRecord>::open(&filter_dir.join(shard_file(i)))? {
            let record = record?;
            ids.push(format!("{}:{}:{}", record.video_id, record.block_index, record.line_index));
            docs.push(CaptionDoc::from_text(record.video_id.clone(), &record.caption));
            retained.push(record.into_aligned());
        }
    }

    let verb_lemmas: Option<Vec<Vec<String>>> = match &config.stats.verbs_file {
        None => None,
        Some(path) => {
            let annotations: Vec<VerbAnnotation> =
                read_jsonl(&resolve(&config.workdir, path))?;
            let by_id: HashMap<String, Vec<String>> =
                annotations.into_iter().map(|a| (a.caption_id, a.verbs)).collect();
            Some(ids.iter().map(|id| by_id.get(id).cloned().unwrap_or_default()).collect())
        }
    };

    let stats = corpus_stats(&docs, verb_lemmas.as_deref());
    let mut manifest = ShardManifest::new(Stage::Stats.dir_name(), runner.config_hash());
    write_atomic(
        &dir.join("corpus_stats.json"),
        &serde_json::to_vec_pretty(&stats).expect("stats serialize"),
    )?;
    push_file(&mut manifest, dir, "corpus_stats.json")?;

    if config.synth.is_some() {
        let truth = load_truth(runner)?;
        let recovery = evaluate_recovery(&retained, &truth);
        write_atomic(
            &dir.join("recovery.json"),
            &serde_json::to_vec_pretty(&recovery).expect("recovery serializes"),
        )?;
        push_file(&mut manifest, dir, "recovery.json")?;
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Deserialize)]
struct PairRecord {
    query_id: String,
    positive_ids: Vec<String>,
}

fn run_eval(runner: &StageRunner<'_>, dir: &Path) -> Result<ShardManifest, StageError> {
    let config = runner.config();
    let synth_dir = stage_dir(runner, Stage::Synth);
    let eval = config.eval.clone().unwrap_or(EvalSection {
        text_embeddings: None,
        video_embeddings: None,
        pool: 1,
        pairs: None,
    });
    let text_path = match &eval.text_embeddings {
        Some(p) => resolve(&config.workdir, p),
        None => {
            require_complete(runner, Stage::Synth)?;
            synth_dir.join(SYNTH_TEXT_EMB)
        }
    };
    let video_path = match &eval.video_embeddings {
        Some(p) => resolve(&config.workdir, p),
        None => {
            require_complete(runner, Stage::Synth)?;
            synth_dir.join(SYNTH_VIDEO_EMB)
        }
    };

    let (query_ids, queries) = read_matrix(&text_path)?;
    let (frame_ids, frames) = read_matrix(&video_path)?;
    let pool = eval.pool.max(1);
    if frames.len() % pool != 0 {
        return Err(StageError::Config(format!(
            "video matrix rows ({}) not divisible by pool ({pool})",
            frames.len()
        )));
    }
    let mut gallery_ids: Vec<String> = Vec::with_capacity(frames.len() / pool);
    let mut gallery: Vec<Vec<f64>> = Vec::with_capacity(frames.len() / pool);
    for (chunk_ids, chunk) in frame_ids.chunks(pool).zip(frames.chunks(pool)) {
        gallery_ids.push(chunk_ids[0].clone());
        gallery.push(mean_pool(chunk)?);
    }

    let positives_of: HashMap<String, Vec<usize>> = match &eval.pairs {
        Some(path) => {
            let pairs: Vec<PairRecord> = read_jsonl(&resolve(&config.workdir, path))?;
            let index: HashMap<&str, usize> =
                gallery_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            pairs
                .into_iter()
                .map(|p| {
                    let ids = p
                        .positive_ids
                        .iter()
                        .filter_map(|id| index.get(id.as_str()).copied())
                        .collect();
                    (p.query_id, ids)
                })
                .collect()
        }
        None => {
            let mut map: HashMap<String, Vec<usize>> = HashMap::new();
            for (i, id) in gallery_ids.iter().enumerate() {
                map.entry(id.clone()).or_default().push(i);
            }
            map
        }
    };

    let mut scores = Vec::with_capacity(queries.len());
    let mut ground_truth = Vec::with_capacity(queries.len());
    for (qi, query) in queries.iter().enumerate() {
        let row: Result<Vec<f64>, _> = gallery.iter().map(|g| cosine_sim(query, g)).collect();
        scores.push(row?);
        let positives = positives_of.get(&query_ids[qi]).cloned().unwrap_or_default();
        if positives.is_empty() {
            return Err(StageError::Config(format!(
                "query `{}` has no positive gallery item",
                query_ids[qi]
            )));
        }
        ground_truth.push(positives);
    }
    let matrix = SimilarityMatrix::new(scores, ground_truth)?;
    let report = metrics_report(&matrix);

    let mut manifest = ShardManifest::new(Stage::Eval.dir_name(), runner.config_hash());
    write_atomic(
        &dir.join("metrics.json"),
        &serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    push_file(&mut manifest, dir, "metrics.json")?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// export

/// Concatenate the final round's retained shards into `config.output`.
pub(super) fn export_dataset(runner: &StageRunner<'_>) -> Result<(), StageError> {
    let config = runner.config();
    let Some(output) = &config.output else {
        return Ok(());
    };
    let last_round = config.alignment.rounds;
    require_complete(runner, Stage::Filter(last_round))?;
    let filter_dir = stage_dir(runner, Stage::Filter(last_round));
    let output = resolve(&config.workdir, output);
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = output.with_extension("tmp");
    {
        let mut writer = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for i in 0..config.shards {
            let bytes = std::fs::read(filter_dir.join(shard_file(i)))?;
            writer.write_all(&bytes)?;
        }
        writer.flush()?;
    }
    std::fs::rename(&tmp, &output)?;
    Ok(())
}
