//! Alignment & filtering: score caption candidates against shifted video
//! windows, pick the best offset per candidate, derive a global retention
//! threshold, and keep only the highest-scoring pairs.
//!
//! The engine is provider-agnostic. A [`SimilarityProvider`] answers window
//! queries (HTTP scoring service, in-process synthetic scorer); a
//! [`ScoreFileSource`] replays precomputed per-offset scores. Rounds compose:
//! round k re-scores around the timestamps aligned in round k-1, optionally
//! averaging several providers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::CaptionCandidate;

/// Symmetric offset search range: integer offsets `-T ..= T` at 1-second
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetRange {
    t: u32,
}

impl OffsetRange {
    /// T = 10 seconds; wider searches showed no further gain.
    pub const DEFAULT: OffsetRange = OffsetRange { t: 10 };

    pub fn new(t: u32) -> Option<Self> {
        (t >= 1).then_some(OffsetRange { t })
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    /// Number of offsets scanned: `2T + 1`.
    pub fn len(&self) -> usize {
        2 * self.t as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offsets(&self) -> impl Iterator<Item = i64> {
        let t = self.t as i64;
        -t..=t
    }

    pub fn index_of(&self, delta: i64) -> Option<usize> {
        let t = self.t as i64;
        (-t..=t).contains(&delta).then(|| (delta + t) as usize)
    }

    pub fn delta_at(&self, index: usize) -> i64 {
        index as i64 - self.t as i64
    }
}

impl Default for OffsetRange {
    fn default() -> Self {
        OffsetRange::DEFAULT
    }
}

/// Similarity scores of one candidate against its shifted windows.
///
/// `scores[k]` holds `rho(delta)` for `delta = k - T`; positions whose
/// clipped window degenerates (shorter than one second) are masked invalid
/// and hold NaN.
#[derive(Debug, Clone)]
pub struct OffsetProfile {
    pub candidate_id: String,
    pub range: OffsetRange,
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

impl OffsetProfile {
    pub fn valid_entries(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(k, _)| (self.range.delta_at(k), self.scores[k]))
    }
}

/// Window query for a similarity provider.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowQuery<'a> {
    pub video_id: &'a str,
    pub start_s: f64,
    pub end_s: f64,
    pub caption: &'a str,
}

#[derive(Debug, Error)]
#[error("provider failure: {0}")]
pub struct ProviderError(pub String);

/// Anything that can score a caption against a video window. Must be
/// deterministic for fixed inputs and produce values on a comparable scale
/// across queries.
pub trait SimilarityProvider: Sync {
    fn score(&self, query: &WindowQuery<'_>) -> Result<f64, ProviderError>;

    /// Batch variant; providers with per-request overhead should override.
    fn score_batch(&self, queries: &[WindowQuery<'_>]) -> Result<Vec<f64>, ProviderError> {
        queries.iter().map(|q| self.score(q)).collect()
    }
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("candidate {candidate_id}: no valid offset")]
    NoValidOffset { candidate_id: String },
    #[error("profiles disagree in shape or identity: {0}")]
    ShapeMismatch(String),
    #[error("candidate {candidate_id}: {source}")]
    Provider {
        candidate_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("candidate {candidate_id}: no score on file for offset {delta}")]
    MissingScore { candidate_id: String, delta: i64 },
    #[error("too many provider failures: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Minimum clipped window length for an offset to count as scoreable.
const MIN_WINDOW_S: f64 = 1.0;

/// Clip `[start+delta, end+delta]` to `[0, duration]`; `None` when the
/// clipped window is shorter than [`MIN_WINDOW_S`].
pub fn shifted_window(
    start_s: f64,
    end_s: f64,
    delta: i64,
    duration_s: f64,
) -> Option<(f64, f64)> {
    let s = (start_s + delta as f64).max(0.0);
    let e = (end_s + delta as f64).min(duration_s);
    (e - s >= MIN_WINDOW_S).then_some((s, e))
}

/// Score one candidate over every offset in the range, batching the valid
/// windows into a single provider call.
pub fn score_offsets(
    candidate: &CaptionCandidate,
    provider: &dyn SimilarityProvider,
    range: OffsetRange,
    duration_s: f64,
) -> Result<OffsetProfile, AlignError> {
    let candidate_id = candidate.id();
    let mut scores = vec![f64::NAN; range.len()];
    let mut valid = vec![false; range.len()];
    let mut queries = Vec::with_capacity(range.len());
    let mut slots = Vec::with_capacity(range.len());

    for delta in range.offsets() {
        if let Some((s, e)) = shifted_window(candidate.start_s, candidate.end_s, delta, duration_s)
        {
            let k = range.index_of(delta).expect("delta in range");
            valid[k] = true;
            slots.push(k);
            queries.push(WindowQuery {
                video_id: &candidate.video_id,
                start_s: s,
                end_s: e,
                caption: &candidate.caption,
            });
        }
    }

    if queries.is_empty() {
        return Err(AlignError::NoValidOffset { candidate_id });
    }
    let results = provider
        .score_batch(&queries)
        .map_err(|source| AlignError::Provider { candidate_id: candidate_id.clone(), source })?;
    for (k, score) in slots.into_iter().zip(results) {
        scores[k] = score;
    }
    Ok(OffsetProfile { candidate_id, range, scores, valid })
}

/// Argmax over the valid offsets. Ties break toward the smallest `|delta|`,
/// then toward the negative offset.
pub fn align(profile: &OffsetProfile) -> Result<(i64, f64), AlignError> {
    let mut best: Option<(i64, f64)> = None;
    for (delta, score) in profile.valid_entries() {
        let better = match best {
            None => true,
            Some((bd, bs)) => {
                score > bs
                    || (score == bs
                        && (delta.abs() < bd.abs() || (delta.abs() == bd.abs() && delta < bd)))
            }
        };
        if better {
            best = Some((delta, score));
        }
    }
    best.ok_or_else(|| AlignError::NoValidOffset { candidate_id: profile.candidate_id.clone() })
}

/// Elementwise mean of several profiles over the same candidate and range.
/// The output mask is the intersection of the input masks.
pub fn combine_providers(profiles: &[OffsetProfile]) -> Result<OffsetProfile, AlignError> {
    let first = profiles
        .first()
        .ok_or_else(|| AlignError::ShapeMismatch("no profiles to combine".into()))?;
    for p in &profiles[1..] {
        if p.candidate_id != first.candidate_id {
            return Err(AlignError::ShapeMismatch(format!(
                "candidates differ: {} vs {}",
                first.candidate_id, p.candidate_id
            )));
        }
        if p.range != first.range {
            return Err(AlignError::ShapeMismatch("offset ranges differ".into()));
        }
    }
    let len = first.range.len();
    let mut scores = vec![f64::NAN; len];
    let mut valid = vec![true; len];
    for k in 0..len {
        for p in profiles {
            valid[k] &= p.valid[k];
        }
        if valid[k] {
            scores[k] = profiles.iter().map(|p| p.scores[k]).sum::<f64>() / profiles.len() as f64;
        }
    }
    Ok(OffsetProfile { candidate_id: first.candidate_id.clone(), range: first.range, scores, valid })
}

/// A candidate after alignment: times shifted by the winning offset and the
/// winning similarity score attached.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCaption {
    /// The candidate with its clip window shifted by `delta_star` (and
    /// clipped to the video bounds).
    pub candidate: CaptionCandidate,
    pub delta_star: i64,
    pub score: f64,
}

/// Flat record form of [`AlignedCaption`] for JSONL shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedRecord {
    pub video_id: String,
    pub block_index: u32,
    pub line_index: u32,
    pub caption: String,
    pub start: f64,
    pub end: f64,
    pub delta_star: i64,
    pub score: f64,
}

impl AlignedRecord {
    pub fn from_aligned(a: &AlignedCaption) -> Self {
        AlignedRecord {
            video_id: a.candidate.video_id.clone(),
            block_index: a.candidate.block_index,
            line_index: a.candidate.line_index,
            caption: a.candidate.caption.clone(),
            start: a.candidate.start_s,
            end: a.candidate.end_s,
            delta_star: a.delta_star,
            score: a.score,
        }
    }

    pub fn into_aligned(self) -> AlignedCaption {
        AlignedCaption {
            candidate: CaptionCandidate {
                video_id: self.video_id,
                block_index: self.block_index,
                line_index: self.line_index,
                caption: self.caption,
                start_s: self.start,
                end_s: self.end,
            },
            delta_star: self.delta_star,
            score: self.score,
        }
    }
}

/// Apply the winning offset to a candidate's window.
pub fn apply_offset(
    candidate: &CaptionCandidate,
    delta_star: i64,
    score: f64,
    duration_s: f64,
) -> AlignedCaption {
    let (s, e) = shifted_window(candidate.start_s, candidate.end_s, delta_star, duration_s)
        .expect("winning offset has a valid window");
    AlignedCaption {
        candidate: CaptionCandidate {
            start_s: s,
            end_s: e,
            ..candidate.clone()
        },
        delta_star,
        score,
    }
}

/// Filtering threshold: either a fixed similarity cutoff or adaptive top-N
/// retention (the cutoff becomes the N-th largest score in the corpus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterThreshold {
    Fixed { kappa: f64 },
    AdaptiveTopN { retain: u64 },
}

/// On-disk spool of raw little-endian f64 scores; the intermediate between
/// the scoring pass and threshold selection.
pub struct ScoreSpool {
    path: PathBuf,
    writer: BufWriter<File>,
    count: u64,
}

impl ScoreSpool {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(ScoreSpool {
            path: path.to_path_buf(),
            writer: BufWriter::new(File::create(path)?),
            count: 0,
        })
    }

    pub fn push(&mut self, score: f64) -> std::io::Result<()> {
        self.writer.write_all(&score.to_le_bytes())?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<(PathBuf, u64)> {
        self.writer.flush()?;
        Ok((self.path, self.count))
    }
}

/// Upper bound on scores pulled into memory during selection. Selection
/// beyond this recurses through partition files, so peak memory stays a
/// fixed constant rather than growing with the corpus.
const SELECT_IN_MEMORY_LIMIT: u64 = 1 << 20;

fn read_spool_chunked(
    path: &Path,
    mut f: impl FnMut(&[f64]),
) -> std::io::Result<()> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = vec![0u8; 8 * 8192];
    let mut values = vec![0f64; 8192];
    loop {
        let mut filled = 0;
        // read_exact-style fill so chunks stay 8-byte aligned
        loop {
            let n = reader.read(&mut buf[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
            if filled == buf.len() {
                break;
            }
        }
        if filled == 0 {
            break;
        }
        let n_vals = filled / 8;
        for i in 0..n_vals {
            values[i] = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
        }
        f(&values[..n_vals]);
        if filled < buf.len() {
            break;
        }
    }
    Ok(())
}

/// Exact k-th largest value in a spool file (`k` is 1-based).
///
/// Streams the file in partition passes: a deterministic strided sample
/// picks a pivot, one pass counts the partition sizes, and the side holding
/// rank `k` is rewritten to a scratch file for the next iteration. Small
/// remainders are selected in memory.
pub fn kth_largest_in_spool(path: &Path, count: u64, k: u64) -> std::io::Result<f64> {
    assert!(k >= 1 && k <= count, "rank out of range");
    let scratch_a = path.with_extension("sel_a");
    let scratch_b = path.with_extension("sel_b");
    let mut current = path.to_path_buf();
    let mut current_count = count;
    let mut k = k;
    let mut flip = false;

    let result = loop {
        if current_count <= SELECT_IN_MEMORY_LIMIT {
            let mut values = Vec::with_capacity(current_count as usize);
            read_spool_chunked(&current, |chunk| values.extend_from_slice(chunk))?;
            let idx = (k - 1) as usize;
            values.select_nth_unstable_by(idx, |a, b| b.total_cmp(a));
            break values[idx];
        }

        let pivot = strided_sample_median(&current, current_count)?;
        let mut gt = 0u64;
        let mut eq = 0u64;
        read_spool_chunked(&current, |chunk| {
            for &v in chunk {
                if v > pivot {
                    gt += 1;
                } else if v == pivot {
                    eq += 1;
                }
            }
        })?;

        if k > gt && k <= gt + eq {
            break pivot;
        }
        let target = if flip { &scratch_a } else { &scratch_b };
        flip = !flip;
        let keep_greater = k <= gt;
        {
            let mut writer = BufWriter::new(File::create(target)?);
            let mut written = 0u64;
            let mut io_err: Option<std::io::Error> = None;
            read_spool_chunked(&current, |chunk| {
                if io_err.is_some() {
                    return;
                }
                for &v in chunk {
                    let keep = if keep_greater { v > pivot } else { v < pivot };
                    if keep {
                        if let Err(e) = writer.write_all(&v.to_le_bytes()) {
                            io_err = Some(e);
                            return;
                        }
                        written += 1;
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            writer.flush()?;
            if !keep_greater {
                k -= gt + eq;
            }
            current_count = written;
        }
        current = target.clone();
    };

    let _ = std::fs::remove_file(&scratch_a);
    let _ = std::fs::remove_file(&scratch_b);
    Ok(result)
}

/// Median of up to 1024 evenly strided values; deterministic pivot choice.
fn strided_sample_median(path: &Path, count: u64) -> std::io::Result<f64> {
    let sample_size = 1024u64.min(count);
    let stride = count / sample_size;
    let mut file = File::open(path)?;
    let mut sample = Vec::with_capacity(sample_size as usize);
    let mut buf = [0u8; 8];
    for i in 0..sample_size {
        file.seek(SeekFrom::Start(i * stride * 8))?;
        file.read_exact(&mut buf)?;
        sample.push(f64::from_le_bytes(buf));
    }
    let mid = sample.len() / 2;
    sample.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(sample[mid])
}

/// Derive the adaptive threshold from a finished spool: the N-th largest
/// score, or `None` (meaning minus infinity, keep everything) when the
/// corpus holds at most N scores.
pub fn select_global_threshold(
    spool_path: &Path,
    count: u64,
    retain: u64,
) -> std::io::Result<Option<f64>> {
    if count <= retain || retain == 0 {
        return Ok(if retain == 0 { Some(f64::INFINITY) } else { None });
    }
    kth_largest_in_spool(spool_path, count, retain).map(Some)
}

/// In-memory exact N-th largest, for corpora already resident.
pub fn kth_largest_in_memory(scores: &[f64], k: u64) -> Option<f64> {
    if k == 0 || k > scores.len() as u64 {
        return None;
    }
    let mut copy = scores.to_vec();
    let idx = (k - 1) as usize;
    copy.select_nth_unstable_by(idx, |a, b| b.total_cmp(a));
    Some(copy[idx])
}

/// Dropped-pair log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropEntry {
    pub candidate_id: String,
    pub score: f64,
}

/// Retain pairs scoring at least `kappa` (`None` keeps everything); ties at
/// the threshold are retained, so the post-filter count can exceed N in
/// adaptive mode.
pub fn filter(
    aligned: Vec<AlignedCaption>,
    kappa: Option<f64>,
) -> (Vec<AlignedCaption>, Vec<DropEntry>) {
    match kappa {
        None => (aligned, Vec::new()),
        Some(kappa) => {
            let mut retained = Vec::with_capacity(aligned.len());
            let mut dropped = Vec::new();
            for a in aligned {
                if a.score >= kappa {
                    retained.push(a);
                } else {
                    dropped.push(DropEntry { candidate_id: a.candidate.id(), score: a.score });
                }
            }
            (retained, dropped)
        }
    }
}

pub const HISTOGRAM_BINS: usize = 64;

/// Per-round book-keeping: counts, the threshold used, and the score
/// distribution of the round's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: u32,
    pub input_count: u64,
    pub retained_count: u64,
    /// `null` means minus infinity (keep-all).
    pub kappa: Option<f64>,
    pub score_min: f64,
    pub score_max: f64,
    pub histogram: Vec<u64>,
}

/// Equal-width histogram of `scores` over `[min, max]`.
pub fn score_histogram(scores: impl Iterator<Item = f64>, min: f64, max: f64) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    let width = max - min;
    for s in scores {
        let bin = if width > 0.0 {
            (((s - min) / width) * HISTOGRAM_BINS as f64).floor() as usize
        } else {
            0
        };
        bins[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

/// How a round resolves video durations for window clipping.
pub type DurationLookup<'a> = &'a dyn Fn(&str) -> f64;

/// One profile source for a round: a queryable provider or precomputed
/// score files.
pub enum ProviderHandle<'a> {
    Window(&'a dyn SimilarityProvider),
    Scores(&'a ScoreFileSource),
}

impl ProviderHandle<'_> {
    pub fn profile(
        &self,
        candidate: &CaptionCandidate,
        range: OffsetRange,
        duration_s: f64,
    ) -> Result<OffsetProfile, AlignError> {
        match self {
            ProviderHandle::Window(p) => score_offsets(candidate, *p, range, duration_s),
            ProviderHandle::Scores(s) => s.profile(candidate, range, duration_s),
        }
    }
}

/// Precomputed scores keyed by `(candidate id, delta)`, loaded from
/// line-delimited `{candidate_id, delta, score}` records. Load per shard;
/// the map is the shard working set.
pub struct ScoreFileSource {
    by_candidate: HashMap<String, Vec<(i64, f64)>>,
}

/// Score-file record: one `(candidate, offset)` similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub candidate_id: String,
    pub delta: i64,
    pub score: f64,
}

impl ScoreFileSource {
    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Self {
        let mut by_candidate: HashMap<String, Vec<(i64, f64)>> = HashMap::new();
        for r in records {
            by_candidate.entry(r.candidate_id).or_default().push((r.delta, r.score));
        }
        ScoreFileSource { by_candidate }
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self, crate::records::RecordError> {
        let mut records = Vec::new();
        for p in paths {
            records.extend(crate::records::read_jsonl::<ScoreRecord>(p)?);
        }
        Ok(Self::from_records(records))
    }

    pub fn profile(
        &self,
        candidate: &CaptionCandidate,
        range: OffsetRange,
        duration_s: f64,
    ) -> Result<OffsetProfile, AlignError> {
        let candidate_id = candidate.id();
        let entries = self.by_candidate.get(&candidate_id).ok_or_else(|| AlignError::Provider {
            candidate_id: candidate_id.clone(),
            source: ProviderError("candidate absent from score files".into()),
        })?;
        let mut scores = vec![f64::NAN; range.len()];
        let mut have = vec![false; range.len()];
        for &(delta, score) in entries {
            if let Some(k) = range.index_of(delta) {
                scores[k] = score;
                have[k] = true;
            }
        }
        let mut valid = vec![false; range.len()];
        for delta in range.offsets() {
            let k = range.index_of(delta).expect("delta in range");
            if shifted_window(candidate.start_s, candidate.end_s, delta, duration_s).is_some() {
                if !have[k] {
                    return Err(AlignError::MissingScore { candidate_id, delta });
                }
                valid[k] = true;
            }
        }
        if !valid.iter().any(|&v| v) {
            return Err(AlignError::NoValidOffset { candidate_id });
        }
        Ok(OffsetProfile { candidate_id, range, scores, valid })
    }
}

/// Remote scoring service speaking JSON over HTTP: one POST per
/// `(video_id, caption)` with all of its windows.
pub struct HttpScoringProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
}

#[derive(Serialize)]
struct ScoreServiceRequest<'a> {
    video_id: &'a str,
    windows: Vec<(f64, f64)>,
    caption: &'a str,
}

#[derive(Deserialize)]
struct ScoreServiceResponse {
    scores: Vec<f64>,
}

impl HttpScoringProvider {
    pub fn new(endpoint: impl Into<String>, timeout: std::time::Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError(e.to_string()))?;
        Ok(HttpScoringProvider { client, endpoint: endpoint.into() })
    }

    fn post_group(&self, queries: &[WindowQuery<'_>]) -> Result<Vec<f64>, ProviderError> {
        let first = &queries[0];
        let body = ScoreServiceRequest {
            video_id: first.video_id,
            windows: queries.iter().map(|q| (q.start_s, q.end_s)).collect(),
            caption: first.caption,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| ProviderError(e.to_string()))?;
        if !response.status().is_success() {
            return Err(ProviderError(format!("scoring service returned {}", response.status())));
        }
        let parsed: ScoreServiceResponse =
            response.json().map_err(|e| ProviderError(e.to_string()))?;
        if parsed.scores.len() != queries.len() {
            return Err(ProviderError(format!(
                "scoring service returned {} scores for {} windows",
                parsed.scores.len(),
                queries.len()
            )));
        }
        Ok(parsed.scores)
    }
}

impl SimilarityProvider for HttpScoringProvider {
    fn score(&self, query: &WindowQuery<'_>) -> Result<f64, ProviderError> {
        Ok(self.post_group(std::slice::from_ref(query))?[0])
    }

    fn score_batch(&self, queries: &[WindowQuery<'_>]) -> Result<Vec<f64>, ProviderError> {
        let mut scores = Vec::with_capacity(queries.len());
        let mut group_start = 0;
        for i in 0..=queries.len() {
            let boundary = i == queries.len()
                || queries[i].video_id != queries[group_start].video_id
                || queries[i].caption != queries[group_start].caption;
            if boundary && i > group_start {
                scores.extend(self.post_group(&queries[group_start..i])?);
                group_start = i;
            }
        }
        Ok(scores)
    }
}

/// Output of one in-memory alignment round.
pub struct RoundOutput {
    pub retained: Vec<AlignedCaption>,
    pub dropped: Vec<DropEntry>,
    pub failures: Vec<(String, AlignError)>,
    pub manifest: RoundManifest,
}

/// One full score → combine → align → threshold → filter pass over an
/// in-memory candidate set.
///
/// Rounds after the first feed the retained captions back in with their
/// aligned timestamps, so the search window recenters on the previous
/// round's output. Candidates are processed in the caller's order; pass
/// them sorted by `(video_id, block_index, line_index)` for deterministic
/// artifacts.
pub fn run_round(
    candidates: &[CaptionCandidate],
    providers: &[ProviderHandle<'_>],
    range: OffsetRange,
    threshold: FilterThreshold,
    round: u32,
    duration_of: DurationLookup<'_>,
    max_failure_fraction: f64,
) -> Result<RoundOutput, AlignError> {
    assert!(!providers.is_empty(), "at least one provider required");
    let mut aligned = Vec::with_capacity(candidates.len());
    let mut failures = Vec::new();

    for candidate in candidates {
        let duration = duration_of(&candidate.video_id);
        let profiles: Result<Vec<OffsetProfile>, AlignError> = providers
            .iter()
            .map(|p| p.profile(candidate, range, duration))
            .collect();
        let result = profiles.and_then(|ps| {
            let combined = if ps.len() == 1 {
                ps.into_iter().next().expect("one profile")
            } else {
                combine_providers(&ps)?
            };
            let (delta_star, score) = align(&combined)?;
            Ok(apply_offset(candidate, delta_star, score, duration))
        });
        match result {
            Ok(a) => aligned.push(a),
            Err(e) => failures.push((candidate.id(), e)),
        }
    }

    if !candidates.is_empty()
        && failures.len() as f64 / candidates.len() as f64 > max_failure_fraction
    {
        return Err(AlignError::TooManyFailures {
            failed: failures.len(),
            total: candidates.len(),
        });
    }

    let input_count = aligned.len() as u64;
    let (score_min, score_max) = aligned.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), a| (lo.min(a.score), hi.max(a.score)),
    );
    let histogram = score_histogram(aligned.iter().map(|a| a.score), score_min, score_max);

    let kappa = match threshold {
        FilterThreshold::Fixed { kappa } => Some(kappa),
        FilterThreshold::AdaptiveTopN { retain } => {
            let scores: Vec<f64> = aligned.iter().map(|a| a.score).collect();
            kth_largest_in_memory(&scores, retain)
        }
    };
    let (retained, dropped) = filter(aligned, kappa);

    Ok(RoundOutput {
        manifest: RoundManifest {
            round,
            input_count,
            retained_count: retained.len() as u64,
            kappa,
            score_min: if input_count == 0 { 0.0 } else { score_min },
            score_max: if input_count == 0 { 0.0 } else { score_max },
            histogram,
        },
        retained,
        dropped,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FnProvider<F: Fn(&WindowQuery<'_>) -> f64 + Sync>(F);

    impl<F: Fn(&WindowQuery<'_>) -> f64 + Sync> SimilarityProvider for FnProvider<F> {
        fn score(&self, q: &WindowQuery<'_>) -> Result<f64, ProviderError> {
            Ok((self.0)(q))
        }
    }

    fn candidate(start: f64, end: f64) -> CaptionCandidate {
        CaptionCandidate {
            video_id: "v".into(),
            block_index: 0,
            line_index: 0,
            caption: "c".into(),
            start_s: start,
            end_s: end,
        }
    }

    fn profile_from(scores: Vec<f64>) -> OffsetProfile {
        let t = (scores.len() - 1) / 2;
        OffsetProfile {
            candidate_id: "v:0:0".into(),
            range: OffsetRange::new(t as u32).unwrap(),
            valid: vec![true; scores.len()],
            scores,
        }
    }

    #[test]
    fn interior_candidate_scores_all_offsets() {
        let p = FnProvider(|_q: &WindowQuery<'_>| 0.5);
        let c = candidate(50.0, 58.0);
        let prof = score_offsets(&c, &p, OffsetRange::new(2).unwrap(), 600.0).unwrap();
        assert_eq!(prof.scores.len(), 5);
        assert!(prof.valid.iter().all(|&v| v));
        assert!(prof.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn boundary_candidate_masks_degenerate_windows() {
        // Start 0, length 8, T=10: delta=-8 clips to a zero-length window.
        let p = FnProvider(|_q: &WindowQuery<'_>| 1.0);
        let c = candidate(0.0, 8.0);
        let range = OffsetRange::new(10).unwrap();
        let prof = score_offsets(&c, &p, range, 600.0).unwrap();
        assert!(!prof.valid[range.index_of(-8).unwrap()]);
        assert!(!prof.valid[range.index_of(-10).unwrap()]);
        // delta=-7 leaves a one-second window; still valid.
        assert!(prof.valid[range.index_of(-7).unwrap()]);
        assert!(prof.valid[range.index_of(0).unwrap()]);
    }

    #[test]
    fn align_picks_peak() {
        let mut scores = vec![0.0; 21];
        scores[13] = 0.9; // delta = +3
        let (d, s) = align(&profile_from(scores)).unwrap();
        assert_eq!(d, 3);
        assert_eq!(s, 0.9);
    }

    #[test]
    fn align_tie_breaks_to_zero_then_negative() {
        let (d, _) = align(&profile_from(vec![0.5; 21])).unwrap();
        assert_eq!(d, 0);

        let mut scores = vec![0.0; 21];
        scores[8] = 0.7; // delta = -2
        scores[12] = 0.7; // delta = +2
        let (d, _) = align(&profile_from(scores)).unwrap();
        assert_eq!(d, -2);
    }

    #[test]
    fn combine_means_and_intersects_masks() {
        let a = profile_from(vec![1.0, 3.0, 5.0]);
        let b = profile_from(vec![3.0, 1.0, 5.0]);
        let c = combine_providers(&[a, b]).unwrap();
        assert_eq!(c.scores, vec![2.0, 2.0, 5.0]);

        let mut masked = profile_from(vec![1.0, 1.0, 1.0]);
        masked.valid[0] = false;
        let d = combine_providers(&[masked, profile_from(vec![2.0, 2.0, 2.0])]).unwrap();
        assert!(!d.valid[0]);
        assert_eq!(d.scores[1], 1.5);
    }

    #[test]
    fn combine_rejects_mismatch() {
        let a = profile_from(vec![1.0, 2.0, 3.0]);
        let mut b = profile_from(vec![1.0, 2.0, 3.0]);
        b.candidate_id = "other:0:0".into();
        assert!(matches!(combine_providers(&[a, b]), Err(AlignError::ShapeMismatch(_))));
    }

    #[test]
    fn monotone_transform_keeps_argmax() {
        let scores: Vec<f64> = (0..21).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let base = profile_from(scores.clone());
        let (d1, _) = align(&base).unwrap();
        let squashed = profile_from(scores.iter().map(|s| (3.0 * s).tanh() + 2.0).collect());
        let (d2, _) = align(&squashed).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn threshold_small_lists() {
        assert_eq!(kth_largest_in_memory(&[0.1, 0.5, 0.9], 2), Some(0.5));
        assert_eq!(kth_largest_in_memory(&[0.1], 2), None);
        // Duplicated boundary score: ties at kappa retain.
        let aligned: Vec<AlignedCaption> = [0.5, 0.9, 0.5, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &s)| AlignedCaption {
                candidate: CaptionCandidate {
                    video_id: "v".into(),
                    block_index: 0,
                    line_index: i as u32,
                    caption: "c".into(),
                    start_s: 0.0,
                    end_s: 8.0,
                },
                delta_star: 0,
                score: s,
            })
            .collect();
        let kappa = kth_largest_in_memory(&[0.5, 0.9, 0.5, 0.1], 2);
        assert_eq!(kappa, Some(0.5));
        let (retained, dropped) = filter(aligned, kappa);
        assert_eq!(retained.len(), 3); // one more than N: the tie at kappa
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].score, 0.1);
    }

    #[test]
    fn filter_extremes() {
        let aligned = vec![AlignedCaption {
            candidate: candidate(0.0, 8.0),
            delta_star: 0,
            score: 0.3,
        }];
        let (all, none_dropped) = filter(aligned.clone(), None);
        assert_eq!(all.len(), 1);
        assert!(none_dropped.is_empty());
        let (none, all_dropped) = filter(aligned, Some(f64::INFINITY));
        assert!(none.is_empty());
        assert_eq!(all_dropped.len(), 1);
    }

    #[test]
    fn spool_selection_matches_sort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.spool");
        let mut spool = ScoreSpool::create(&path).unwrap();
        let scores: Vec<f64> = (0..9173).map(|i| ((i * 2654435761u64) % 100003) as f64 / 997.0).collect();
        for &s in &scores {
            spool.push(s).unwrap();
        }
        let (path, count) = spool.finish().unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for k in [1u64, 2, 100, 5000, 9173] {
            let got = kth_largest_in_spool(&path, count, k).unwrap();
            assert_eq!(got, sorted[(k - 1) as usize], "k={k}");
        }
        assert_eq!(select_global_threshold(&path, count, 10_000).unwrap(), None);
    }

    #[test]
    fn score_file_source_builds_profiles() {
        let c = candidate(50.0, 58.0);
        let range = OffsetRange::new(2).unwrap();
        let records: Vec<ScoreRecord> = range
            .offsets()
            .map(|d| ScoreRecord { candidate_id: c.id(), delta: d, score: d as f64 })
            .collect();
        let source = ScoreFileSource::from_records(records);
        let prof = source.profile(&c, range, 600.0).unwrap();
        let (d, s) = align(&prof).unwrap();
        assert_eq!(d, 2);
        assert_eq!(s, 2.0);

        // A valid offset without a score on file is a hard error.
        let sparse = ScoreFileSource::from_records(vec![ScoreRecord {
            candidate_id: c.id(),
            delta: 0,
            score: 1.0,
        }]);
        assert!(matches!(
            sparse.profile(&c, range, 600.0),
            Err(AlignError::MissingScore { delta: -2, .. })
        ));
    }

    #[test]
    fn constant_provider_does_not_change_ranking() {
        // Averaging with a constant provider is an affine map of the other
        // provider's scores, so the retained set is unchanged.
        let varying = FnProvider(|q: &WindowQuery<'_>| (q.start_s * 0.37).sin());
        let constant = FnProvider(|_q: &WindowQuery<'_>| 0.25);
        let candidates: Vec<CaptionCandidate> = (0..40)
            .map(|i| CaptionCandidate {
                video_id: "v".into(),
                block_index: 0,
                line_index: i,
                caption: format!("c{i}"),
                start_s: 40.0 + i as f64 * 11.0,
                end_s: 48.0 + i as f64 * 11.0,
            })
            .collect();
        let duration = |_: &str| 1e6;
        let range = OffsetRange::new(3).unwrap();
        let solo = run_round(
            &candidates,
            &[ProviderHandle::Window(&varying)],
            range,
            FilterThreshold::AdaptiveTopN { retain: 10 },
            1,
            &duration,
            0.0,
        )
        .unwrap();
        let averaged = run_round(
            &candidates,
            &[ProviderHandle::Window(&varying), ProviderHandle::Window(&constant)],
            range,
            FilterThreshold::AdaptiveTopN { retain: 10 },
            1,
            &duration,
            0.0,
        )
        .unwrap();
        let ids = |out: &RoundOutput| {
            out.retained.iter().map(|a| a.candidate.id()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&solo), ids(&averaged));
        let deltas = |out: &RoundOutput| {
            out.retained.iter().map(|a| a.delta_star).collect::<Vec<_>>()
        };
        assert_eq!(deltas(&solo), deltas(&averaged));
    }

    #[test]
    fn keep_all_round_shifts_every_candidate() {
        let p = FnProvider(|q: &WindowQuery<'_>| if q.start_s as i64 % 2 == 0 { 1.0 } else { 0.0 });
        let candidates: Vec<CaptionCandidate> = (0..5)
            .map(|i| CaptionCandidate {
                video_id: "v".into(),
                block_index: 0,
                line_index: i,
                caption: format!("c{i}"),
                start_s: 100.0 + i as f64 * 50.0,
                end_s: 108.0 + i as f64 * 50.0,
            })
            .collect();
        let out = run_round(
            &candidates,
            &[ProviderHandle::Window(&p)],
            OffsetRange::new(2).unwrap(),
            FilterThreshold::Fixed { kappa: f64::NEG_INFINITY },
            1,
            &|_| 1e6,
            0.0,
        )
        .unwrap();
        assert_eq!(out.retained.len(), 5);
        assert_eq!(out.manifest.retained_count, 5);
        for a in &out.retained {
            assert_eq!(a.candidate.start_s as i64 % 2, 0, "aligned to an even start");
        }
    }
}
