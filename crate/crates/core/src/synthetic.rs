//! Synthetic corpora with known ground truth: planted temporal offsets,
//! controllable score noise, and a configurable fraction of deliberately
//! mismatched captions (the stand-in for pairing a video with another
//! video's transcript).
//!
//! Everything is a pure function of the seed, so alignment and filtering
//! behavior is verifiable end to end without any real encoder.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedCaption, ProviderError, SimilarityProvider, WindowQuery};
use crate::ingest::{Subtitle, VideoTranscript};
use crate::records::fnv1a64;
use crate::response::CaptionCandidate;

/// Clip length used for synthetic candidates, matching the default parse
/// clip length so the echo pipeline reproduces these candidates exactly.
const CLIP_LEN_S: f64 = 8.0;
/// Seconds between consecutive synthetic subtitles; leaves room for two
/// rounds of offset search without touching the video bounds.
const SPACING_S: f64 = 30.0;
/// Planted peak height over the base score.
const PEAK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub candidates_per_video: usize,
    /// True offsets are drawn uniformly from `-delta_true_max ..= delta_true_max`.
    pub delta_true_max: u32,
    /// Standard deviation of the additive score noise.
    pub noise_sigma: f64,
    /// Fraction of candidates whose provider profile is pure noise.
    pub mismatch_fraction: f64,
    /// Dimension of the embedding fixture emitted for retrieval evaluation.
    pub embedding_dim: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_videos: 20,
            candidates_per_video: 10,
            delta_true_max: 6,
            noise_sigma: 0.05,
            mismatch_fraction: 0.0,
            embedding_dim: 16,
            rng_seed: 7,
        }
    }
}

/// Per-candidate ground truth, keyed by `(video_id, caption)` so it survives
/// the full pipeline regardless of how blocks get sliced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthEntry {
    pub delta_true: i64,
    pub mismatched: bool,
    pub orig_start_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    entries: HashMap<(String, String), GroundTruthEntry>,
}

/// Ground truth in record form for JSONL persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub video_id: String,
    pub caption: String,
    pub delta_true: i64,
    pub mismatched: bool,
    pub orig_start: f64,
}

impl GroundTruth {
    pub fn get(&self, video_id: &str, caption: &str) -> Option<&GroundTruthEntry> {
        self.entries.get(&(video_id.to_string(), caption.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn matched_count(&self) -> usize {
        self.entries.values().filter(|e| !e.mismatched).count()
    }

    pub fn mismatched_count(&self) -> usize {
        self.entries.values().filter(|e| e.mismatched).count()
    }

    pub fn to_records(&self) -> Vec<GroundTruthRecord> {
        let mut records: Vec<GroundTruthRecord> = self
            .entries
            .iter()
            .map(|((video_id, caption), e)| GroundTruthRecord {
                video_id: video_id.clone(),
                caption: caption.clone(),
                delta_true: e.delta_true,
                mismatched: e.mismatched,
                orig_start: e.orig_start_s,
            })
            .collect();
        records.sort_by(|a, b| (&a.video_id, &a.caption).cmp(&(&b.video_id, &b.caption)));
        records
    }

    pub fn from_records(records: impl IntoIterator<Item = GroundTruthRecord>) -> Self {
        let entries = records
            .into_iter()
            .map(|r| {
                (
                    (r.video_id, r.caption),
                    GroundTruthEntry {
                        delta_true: r.delta_true,
                        mismatched: r.mismatched,
                        orig_start_s: r.orig_start,
                    },
                )
            })
            .collect();
        GroundTruth { entries }
    }
}

/// In-process scorer over the synthetic corpus.
///
/// Matched candidates get `peak * exp(-(x - delta_true)^2 / 2)` centered on
/// their true offset; mismatched candidates get none. Noise is keyed by
/// `(seed, video, caption, window start)`, so repeated queries are
/// bit-identical and the provider is safe for concurrent readers.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    noise_sigma: f64,
    truth: HashMap<(String, String), GroundTruthEntry>,
}

impl SyntheticProvider {
    fn noise(&self, video_id: &str, caption: &str, start_s: f64) -> f64 {
        let mut key = Vec::with_capacity(video_id.len() + caption.len() + 18);
        key.extend_from_slice(&self.seed.to_le_bytes());
        key.extend_from_slice(video_id.as_bytes());
        key.push(0xff);
        key.extend_from_slice(caption.as_bytes());
        key.push(0xff);
        key.extend_from_slice(&((start_s * 1000.0).round() as i64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
        let z: f64 = rng.sample(StandardNormal);
        self.noise_sigma * z
    }
}

impl SimilarityProvider for SyntheticProvider {
    fn score(&self, q: &WindowQuery<'_>) -> Result<f64, ProviderError> {
        let entry = self
            .truth
            .get(&(q.video_id.to_string(), q.caption.to_string()))
            .ok_or_else(|| {
                ProviderError(format!("unknown synthetic candidate {}:{:?}", q.video_id, q.caption))
            })?;
        let signal = if entry.mismatched {
            0.0
        } else {
            let x = q.start_s - entry.orig_start_s;
            PEAK * (-(x - entry.delta_true as f64).powi(2) / 2.0).exp()
        };
        Ok(signal + self.noise(q.video_id, q.caption, q.start_s))
    }
}

/// A generated corpus: transcripts for the full pipeline, parsed-equivalent
/// candidates for direct alignment, the scoring provider, and the truth to
/// grade against.
pub struct SyntheticCorpus {
    pub transcripts: Vec<VideoTranscript>,
    pub candidates: Vec<CaptionCandidate>,
    pub provider: SyntheticProvider,
    pub truth: GroundTruth,
}

const CAPTION_SUBJECTS: [&str; 8] =
    ["a person", "the host", "someone", "the chef", "a worker", "the speaker", "a woman", "a man"];
const CAPTION_VERBS: [&str; 10] = [
    "stirs", "cuts", "places", "lifts", "pours", "wipes", "folds", "paints", "sands", "measures",
];
const CAPTION_OBJECTS: [&str; 10] = [
    "the mixture", "a board", "the panel", "a wheel", "the dough", "a bracket", "the fabric",
    "a bottle", "the frame", "a bowl",
];
const CAPTION_TAILS: [&str; 6] = [
    "on the table", "near the window", "with both hands", "in the workshop", "over the sink",
    "beside the car",
];

fn video_duration(candidates_per_video: usize) -> f64 {
    SPACING_S * (candidates_per_video as f64 + 2.0)
}

/// Generate a corpus. Fully reproducible: the same config yields
/// byte-identical transcripts, candidates and scores.
pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let total = config.n_videos * config.candidates_per_video;
    let n_mismatched = (config.mismatch_fraction * total as f64).round() as usize;
    let mut mismatch_flags = vec![false; total];
    for flag in mismatch_flags.iter_mut().take(n_mismatched) {
        *flag = true;
    }
    mismatch_flags.shuffle(&mut rng);

    let duration = video_duration(config.candidates_per_video);
    let t_true = config.delta_true_max as i64;
    let mut transcripts = Vec::with_capacity(config.n_videos);
    let mut candidates = Vec::with_capacity(total);
    let mut entries = HashMap::with_capacity(total);

    for v in 0..config.n_videos {
        let video_id = format!("synth{v:05}");
        let mut subtitles = Vec::with_capacity(config.candidates_per_video);
        for j in 0..config.candidates_per_video {
            let caption = format!(
                "{} {} {} {} clip {}",
                CAPTION_SUBJECTS[rng.gen_range(0..CAPTION_SUBJECTS.len())],
                CAPTION_VERBS[rng.gen_range(0..CAPTION_VERBS.len())],
                CAPTION_OBJECTS[rng.gen_range(0..CAPTION_OBJECTS.len())],
                CAPTION_TAILS[rng.gen_range(0..CAPTION_TAILS.len())],
                j,
            );
            let start = SPACING_S * (j as f64 + 1.0);
            let delta_true = rng.gen_range(-t_true..=t_true);
            let mismatched = mismatch_flags[v * config.candidates_per_video + j];
            subtitles.push(Subtitle {
                text: caption.clone(),
                start_s: start,
                end_s: start + 6.0,
            });
            candidates.push(CaptionCandidate {
                video_id: video_id.clone(),
                block_index: 0,
                line_index: j as u32,
                caption: caption.clone(),
                start_s: start,
                end_s: start + CLIP_LEN_S,
            });
            entries.insert(
                (video_id.clone(), caption),
                GroundTruthEntry { delta_true, mismatched, orig_start_s: start },
            );
        }
        transcripts.push(VideoTranscript {
            video_id,
            duration_s: Some(duration),
            subtitles,
        });
    }

    SyntheticCorpus {
        transcripts,
        candidates,
        provider: SyntheticProvider {
            seed: config.rng_seed,
            noise_sigma: config.noise_sigma,
            truth: entries.clone(),
        },
        truth: GroundTruth { entries },
    }
}

/// Rebuild the provider from persisted ground-truth records, e.g. when a
/// later pipeline stage runs in a fresh process.
pub fn provider_from_truth(config: &SyntheticConfig, truth: &GroundTruth) -> SyntheticProvider {
    SyntheticProvider {
        seed: config.rng_seed,
        noise_sigma: config.noise_sigma,
        truth: truth.entries.clone(),
    }
}

/// Matched text/video embedding fixture for retrieval evaluation: one unit
/// text vector per candidate and a noise-perturbed copy as its video vector.
pub fn embedding_fixture(
    config: &SyntheticConfig,
    candidates: &[CaptionCandidate],
) -> (Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let dim = config.embedding_dim.max(2);
    let mut ids = Vec::with_capacity(candidates.len());
    let mut text_rows = Vec::with_capacity(candidates.len());
    let mut video_rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut t: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        t.iter_mut().for_each(|x| *x /= norm);
        let v: Vec<f64> = t
            .iter()
            .map(|&x| x + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ids.push(c.id());
        text_rows.push(t);
        video_rows.push(v);
    }
    (ids, text_rows, video_rows)
}

/// Recovery grades for an aligned dataset against the planted truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Fraction of retained matched candidates whose total shift equals the
    /// planted offset exactly. `None` when nothing matched was retained.
    pub offset_accuracy: Option<f64>,
    pub matched_retention: f64,
    pub mismatched_retention: f64,
    pub retained_matched: u64,
    pub retained_mismatched: u64,
    pub total_matched: u64,
    pub total_mismatched: u64,
}

/// Grade retained captions. The shift is measured against the candidate's
/// original timestamp, so the report stays meaningful after multiple
/// recentering rounds.
pub fn evaluate_recovery(retained: &[AlignedCaption], truth: &GroundTruth) -> RecoveryReport {
    let mut retained_matched = 0u64;
    let mut retained_mismatched = 0u64;
    let mut exact = 0u64;
    for a in retained {
        let Some(entry) = truth.get(&a.candidate.video_id, &a.candidate.caption) else {
            continue;
        };
        if entry.mismatched {
            retained_mismatched += 1;
        } else {
            retained_matched += 1;
            let shift = (a.candidate.start_s - entry.orig_start_s).round() as i64;
            if shift == entry.delta_true {
                exact += 1;
            }
        }
    }
    let total_matched = truth.matched_count() as u64;
    let total_mismatched = truth.mismatched_count() as u64;
    RecoveryReport {
        offset_accuracy: (retained_matched > 0).then(|| exact as f64 / retained_matched as f64),
        matched_retention: if total_matched > 0 {
            retained_matched as f64 / total_matched as f64
        } else {
            0.0
        },
        mismatched_retention: if total_mismatched > 0 {
            retained_mismatched as f64 / total_mismatched as f64
        } else {
            0.0
        },
        retained_matched,
        retained_mismatched,
        total_matched,
        total_mismatched,
    }
}
