//! Subtitle ingestion: SRT, WebVTT and the line-delimited record format.
//!
//! Every parser produces a [`VideoTranscript`] sorted by start time. Text
//! cleanup (whitespace collapse, empty-cue dropping, end-time clamping,
//! duration inference) lives in [`normalize`], which is total and idempotent.
//!
//! Parsers run in lenient mode by default: web-scale subtitle data is dirty,
//! so malformed cues are skipped rather than failing the whole document.
//! Strict mode turns the first malformed cue into an error.

use std::io::BufRead;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One ASR subtitle: the spoken text plus its start/end in video seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtitle {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// A video's ordered subtitle stream.
///
/// Invariants (guaranteed after [`normalize`]): subtitles sorted
/// non-decreasing by `start_s`, every `end_s >= start_s`, all timestamps
/// within `[0, duration_s]` when the duration is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTranscript {
    pub video_id: String,
    pub duration_s: Option<f64>,
    pub subtitles: Vec<Subtitle>,
}

impl VideoTranscript {
    pub fn empty(video_id: impl Into<String>) -> Self {
        VideoTranscript {
            video_id: video_id.into(),
            duration_s: None,
            subtitles: Vec::new(),
        }
    }

    /// Known duration, or the last end time when the duration was never set.
    pub fn effective_duration(&self) -> Option<f64> {
        self.duration_s.or_else(|| {
            self.subtitles
                .iter()
                .map(|s| s.end_s)
                .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))))
        })
    }
}

/// How parsers react to malformed cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Skip malformed cues (default; web data is dirty).
    #[default]
    Lenient,
    /// Fail on the first malformed cue.
    Strict,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed cue {cue}: {reason}")]
    MalformedCue { cue: usize, reason: String },
    #[error("missing WEBVTT header")]
    MissingHeader,
    #[error("record {video_id}: array length mismatch (text={text}, start={start}, end={end})")]
    LengthMismatch {
        video_id: String,
        text: usize,
        start: usize,
        end: usize,
    },
    #[error("bad record on line {line}: {source}")]
    BadRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// "HH:MM:SS,mmm --> HH:MM:SS,mmm"; comma or dot both occur in the wild.
static SRT_TIMING: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})\s*-->\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})")
        .unwrap()
});

// WebVTT allows omitting the hour field; trailing cue settings are ignored.
static VTT_TIMING: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^(?:(\d+):)?(\d{1,2}):(\d{1,2})\.(\d{1,3})\s*-->\s*(?:(\d+):)?(\d{1,2}):(\d{1,2})\.(\d{1,3})")
        .unwrap()
});

static VTT_TAG: Lazy<Regex> = Lazy::new(|| Regex::new(r"<[^>]*>").unwrap());

fn hms_to_seconds(h: &str, m: &str, s: &str, ms: &str) -> f64 {
    let h: f64 = h.parse().unwrap_or(0.0);
    let m: f64 = m.parse().unwrap_or(0.0);
    let s: f64 = s.parse().unwrap_or(0.0);
    // "7" means 700 ms, "70" means 700 ms, "007" means 7 ms.
    let ms_val: f64 = ms.parse().unwrap_or(0.0);
    let ms_scale = 10f64.powi(3 - ms.len() as i32);
    h * 3600.0 + m * 60.0 + s + ms_val * ms_scale / 1000.0
}

/// Parse SubRip bytes into a transcript.
///
/// One [`Subtitle`] per cue; multi-line cue text is joined with single
/// spaces; timestamps carry millisecond precision.
pub fn parse_srt(
    bytes: &[u8],
    video_id: &str,
    mode: ParseMode,
) -> Result<VideoTranscript, IngestError> {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim_start_matches('\u{feff}');
    let mut subtitles = Vec::new();
    let mut cue_no = 0usize;

    for block in split_cue_blocks(text) {
        cue_no += 1;
        // The numeric index line is optional in practice; timing is on the
        // first line that contains an arrow.
        let timing_pos = block.iter().position(|l| l.contains("-->"));
        let Some(pos) = timing_pos else {
            if let Err(e) = malformed(mode, cue_no, "no timestamp line") {
                return Err(e);
            }
            continue;
        };
        let caps = match SRT_TIMING.captures(block[pos].trim()) {
            Some(c) => c,
            None => {
                if let Err(e) = malformed(mode, cue_no, "bad timestamp line") {
                    return Err(e);
                }
                continue;
            }
        };
        let start_s = hms_to_seconds(&caps[1], &caps[2], &caps[3], &caps[4]);
        let end_s = hms_to_seconds(&caps[5], &caps[6], &caps[7], &caps[8]);
        if end_s < start_s {
            if let Err(e) = malformed(mode, cue_no, "end before start") {
                return Err(e);
            }
            continue;
        }
        let text = join_cue_text(&block[pos + 1..]);
        subtitles.push(Subtitle { text, start_s, end_s });
    }

    subtitles.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(VideoTranscript {
        video_id: video_id.to_string(),
        duration_s: None,
        subtitles,
    })
}

/// Parse WebVTT bytes into a transcript.
///
/// NOTE/STYLE/REGION blocks are skipped and styling tags are stripped from
/// cue text.
pub fn parse_webvtt(
    bytes: &[u8],
    video_id: &str,
    mode: ParseMode,
) -> Result<VideoTranscript, IngestError> {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim_start_matches('\u{feff}');
    let mut blocks = split_cue_blocks(text).into_iter();

    let header_ok = blocks
        .next()
        .map(|b| b.first().is_some_and(|l| l.trim_start().starts_with("WEBVTT")))
        .unwrap_or(false);
    if !header_ok {
        return Err(IngestError::MissingHeader);
    }

    let mut subtitles = Vec::new();
    let mut cue_no = 0usize;
    for block in blocks {
        let first = block.first().map(|l| l.trim()).unwrap_or("");
        if first.starts_with("NOTE") || first.starts_with("STYLE") || first.starts_with("REGION") {
            continue;
        }
        cue_no += 1;
        let Some(pos) = block.iter().position(|l| l.contains("-->")) else {
            if let Err(e) = malformed(mode, cue_no, "no timestamp line") {
                return Err(e);
            }
            continue;
        };
        let caps = match VTT_TIMING.captures(block[pos].trim()) {
            Some(c) => c,
            None => {
                if let Err(e) = malformed(mode, cue_no, "bad timestamp line") {
                    return Err(e);
                }
                continue;
            }
        };
        let start_s = hms_to_seconds(
            caps.get(1).map_or("0", |m| m.as_str()),
            &caps[2],
            &caps[3],
            &caps[4],
        );
        let end_s = hms_to_seconds(
            caps.get(5).map_or("0", |m| m.as_str()),
            &caps[6],
            &caps[7],
            &caps[8],
        );
        if end_s < start_s {
            if let Err(e) = malformed(mode, cue_no, "end before start") {
                return Err(e);
            }
            continue;
        }
        let raw = join_cue_text(&block[pos + 1..]);
        let text = VTT_TAG.replace_all(&raw, "").to_string();
        subtitles.push(Subtitle { text, start_s, end_s });
    }

    subtitles.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(VideoTranscript {
        video_id: video_id.to_string(),
        duration_s: None,
        subtitles,
    })
}

fn malformed(mode: ParseMode, cue: usize, reason: &str) -> Result<(), IngestError> {
    match mode {
        ParseMode::Lenient => Ok(()),
        ParseMode::Strict => Err(IngestError::MalformedCue {
            cue,
            reason: reason.to_string(),
        }),
    }
}

fn split_cue_blocks(text: &str) -> Vec<Vec<&str>> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks
}

fn join_cue_text(lines: &[&str]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// The line-delimited record format: one JSON object per line with parallel
/// `text`/`start`/`end` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub video_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub text: Vec<String>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl TranscriptRecord {
    pub fn into_transcript(self) -> Result<VideoTranscript, IngestError> {
        if self.text.len() != self.start.len() || self.text.len() != self.end.len() {
            return Err(IngestError::LengthMismatch {
                video_id: self.video_id,
                text: self.text.len(),
                start: self.start.len(),
                end: self.end.len(),
            });
        }
        let mut subtitles: Vec<Subtitle> = self
            .text
            .into_iter()
            .zip(self.start)
            .zip(self.end)
            .map(|((text, start_s), end_s)| Subtitle { text, start_s, end_s })
            .collect();
        // Non-monotonic timestamps are recoverable: sort, don't fail.
        if !subtitles.windows(2).all(|w| w[0].start_s <= w[1].start_s) {
            subtitles.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        }
        Ok(VideoTranscript {
            video_id: self.video_id,
            duration_s: self.duration,
            subtitles,
        })
    }

    pub fn from_transcript(t: &VideoTranscript) -> Self {
        TranscriptRecord {
            video_id: t.video_id.clone(),
            duration: t.duration_s,
            text: t.subtitles.iter().map(|s| s.text.clone()).collect(),
            start: t.subtitles.iter().map(|s| s.start_s).collect(),
            end: t.subtitles.iter().map(|s| s.end_s).collect(),
        }
    }
}

/// Parse a stream of line-delimited transcript records.
///
/// A record with mismatched array lengths fails individually; the stream
/// continues with the next line.
pub fn parse_record_stream<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<VideoTranscript, IngestError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(IngestError::Io(e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(
                serde_json::from_str::<TranscriptRecord>(&l)
                    .map_err(|source| IngestError::BadRecord { line: i + 1, source })
                    .and_then(TranscriptRecord::into_transcript),
            ),
        })
}

/// Normalize a transcript. Total and idempotent.
///
/// Collapses whitespace, drops empty-text subtitles, clamps `start_s` to be
/// non-negative and `end_s` to be `>= start_s`, sorts by start time, and
/// infers the duration from the last end time when absent. A provided
/// duration shorter than the data is extended so that every timestamp stays
/// within `[0, duration_s]`.
pub fn normalize(mut t: VideoTranscript) -> VideoTranscript {
    for sub in &mut t.subtitles {
        let collapsed = sub.text.split_whitespace().collect::<Vec<_>>().join(" ");
        sub.text = collapsed;
        // f64::max scrubs NaN here: NaN.max(0.0) == 0.0.
        sub.start_s = sub.start_s.max(0.0);
        sub.end_s = sub.end_s.max(sub.start_s);
    }
    t.subtitles.retain(|s| !s.text.is_empty());
    t.subtitles.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    let max_end = t
        .subtitles
        .iter()
        .map(|s| s.end_s)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    t.duration_s = match (t.duration_s, max_end) {
        (Some(d), Some(m)) => Some(d.max(0.0).max(m)),
        (Some(d), None) => Some(d.max(0.0)),
        (None, m) => m,
    };
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srt_single_cue() {
        let input = "1\n00:00:07,000 --> 00:00:09,000\nhi i'm matt swanson\n";
        let t = parse_srt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
        assert_eq!(t.subtitles.len(), 1);
        assert_eq!(t.subtitles[0].text, "hi i'm matt swanson");
        assert_eq!(t.subtitles[0].start_s, 7.0);
        assert_eq!(t.subtitles[0].end_s, 9.0);
    }

    #[test]
    fn srt_empty_input() {
        let t = parse_srt(b"", "v", ParseMode::Strict).unwrap();
        assert!(t.subtitles.is_empty());
        assert!(t.duration_s.is_none());
    }

    #[test]
    fn srt_end_before_start_is_malformed() {
        let input = "1\n00:00:05,000 --> 00:00:03,000\nbackwards\n";
        let err = parse_srt(input.as_bytes(), "v", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, IngestError::MalformedCue { cue: 1, .. }));
        // Lenient mode skips the cue instead.
        let t = parse_srt(input.as_bytes(), "v", ParseMode::Lenient).unwrap();
        assert!(t.subtitles.is_empty());
    }

    #[test]
    fn srt_multiline_text_joined() {
        let input = "1\n00:00:01,500 --> 00:00:04,250\nfirst line\nsecond line\n";
        let t = parse_srt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
        assert_eq!(t.subtitles[0].text, "first line second line");
        assert_eq!(t.subtitles[0].start_s, 1.5);
        assert_eq!(t.subtitles[0].end_s, 4.25);
    }

    #[test]
    fn vtt_basic_cue() {
        let input = "WEBVTT\n\n00:00:07.000 --> 00:00:09.000\nhi i'm matt swanson";
        let t = parse_webvtt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
        assert_eq!(t.subtitles.len(), 1);
        assert_eq!(t.subtitles[0].start_s, 7.0);
        assert_eq!(t.subtitles[0].end_s, 9.0);
    }

    #[test]
    fn vtt_header_only() {
        let t = parse_webvtt(b"WEBVTT\n", "v", ParseMode::Strict).unwrap();
        assert!(t.subtitles.is_empty());
    }

    #[test]
    fn vtt_missing_header() {
        let err = parse_webvtt(b"00:00:01.000 --> 00:00:02.000\nhi\n", "v", ParseMode::Lenient)
            .unwrap_err();
        assert!(matches!(err, IngestError::MissingHeader));
    }

    #[test]
    fn vtt_tags_stripped() {
        let input = "WEBVTT\n\n00:00:01.000 --> 00:00:02.000\n<b>hello</b>";
        let t = parse_webvtt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
        assert_eq!(t.subtitles[0].text, "hello");
    }

    #[test]
    fn vtt_note_block_skipped() {
        let input = "WEBVTT\n\nNOTE a comment\n\n00:01.000 --> 00:02.000\nshort clock format";
        let t = parse_webvtt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
        assert_eq!(t.subtitles.len(), 1);
        assert_eq!(t.subtitles[0].start_s, 1.0);
    }

    #[test]
    fn record_basic() {
        let rec = TranscriptRecord {
            video_id: "v".into(),
            duration: None,
            text: vec!["a".into()],
            start: vec![0.0],
            end: vec![2.0],
        };
        let t = rec.into_transcript().unwrap();
        assert_eq!(t.subtitles.len(), 1);
    }

    #[test]
    fn record_length_mismatch() {
        let rec = TranscriptRecord {
            video_id: "v".into(),
            duration: None,
            text: vec!["a".into(), "b".into()],
            start: vec![0.0, 1.0, 2.0],
            end: vec![2.0, 3.0, 4.0],
        };
        assert!(matches!(
            rec.into_transcript(),
            Err(IngestError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn record_sorts_non_monotonic() {
        let rec = TranscriptRecord {
            video_id: "v".into(),
            duration: None,
            text: vec!["late".into(), "early".into()],
            start: vec![5.0, 0.0],
            end: vec![6.0, 1.0],
        };
        let t = rec.into_transcript().unwrap();
        assert_eq!(t.subtitles[0].start_s, 0.0);
        assert_eq!(t.subtitles[1].start_s, 5.0);
    }

    #[test]
    fn normalize_collapses_whitespace_and_drops_empty() {
        let t = VideoTranscript {
            video_id: "v".into(),
            duration_s: None,
            subtitles: vec![
                Subtitle { text: "  hi   there ".into(), start_s: 0.0, end_s: 1.0 },
                Subtitle { text: "   ".into(), start_s: 1.0, end_s: 2.0 },
            ],
        };
        let n = normalize(t);
        assert_eq!(n.subtitles.len(), 1);
        assert_eq!(n.subtitles[0].text, "hi there");
        assert_eq!(n.duration_s, Some(1.0));
    }

    #[test]
    fn normalize_clamps_end() {
        let t = VideoTranscript {
            video_id: "v".into(),
            duration_s: None,
            subtitles: vec![Subtitle { text: "x".into(), start_s: 5.0, end_s: 3.0 }],
        };
        let n = normalize(t);
        assert_eq!(n.subtitles[0].end_s, 5.0);
    }
}
