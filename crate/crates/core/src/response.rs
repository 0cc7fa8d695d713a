//! Extracting timestamped caption candidates from raw LLM text.
//!
//! Well-behaved responses follow the "`<seconds>s: <caption>`" line format
//! requested by the prompt. Everything else — verbatim input repetition,
//! "A person says ..." style reformulations, free-form summaries without
//! timestamps — is measured into [`ParseDiagnostics`] rather than dropped:
//! the similarity filter downstream is the actual quality gate, so flags
//! travel with the candidates.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::blocking::SubtitleBlock;

/// Clip length in whole seconds appended to each caption's start timestamp
/// to form its end timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSec(u32);

impl DeltaSec {
    /// 8-second clips; the tuning sweet spot for instructional video corpora.
    pub const DEFAULT: DeltaSec = DeltaSec(8);

    pub fn new(value: u32) -> Option<Self> {
        (value >= 1).then_some(DeltaSec(value))
    }

    pub fn seconds(self) -> f64 {
        f64::from(self.0)
    }
}

impl Default for DeltaSec {
    fn default() -> Self {
        DeltaSec::DEFAULT
    }
}

/// One parsed caption with its predicted clip window, before alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub video_id: String,
    pub block_index: u32,
    /// Index among the parsed caption lines of the source response; together
    /// with `video_id` and `block_index` it identifies the candidate through
    /// every later stage.
    pub line_index: u32,
    pub caption: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl CaptionCandidate {
    /// Stable identifier string used in score files and drop logs.
    pub fn id(&self) -> String {
        format!("{}:{}:{}", self.video_id, self.block_index, self.line_index)
    }
}

/// Quality signals for one response, mirroring the observed failure modes:
/// direct input repetition, speech-reporting reformulation, and structure
/// violations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub total_lines: usize,
    pub parsed_lines: usize,
    /// Fraction of parsed lines whose normalized text is a verbatim copy of
    /// an input subtitle line.
    pub repetition_ratio: f64,
    /// Fraction of parsed lines that merely report speech ("Someone says
    /// ...", "X is mentioned").
    pub speech_report_ratio: f64,
    /// True when at least half of the non-empty lines follow the requested
    /// timestamp format.
    pub structure_ok: bool,
}

/// Timestamp grammar accepted when parsing response lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestampGrammar {
    /// Only the requested "`<n>s:`" format.
    #[default]
    Default,
    /// Additionally accept "`MM:SS:`" prefixes.
    Permissive,
}

static TS_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(\d+)\s*s?\s*[:\-]\s*(\S.*)$").unwrap());

static MMSS_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(\d+):(\d{1,2})\s*[:\-]\s*(\S.*)$").unwrap());

// "- ", "• ", "* ", "1. ", "2) " list markers; the trailing whitespace is
// required so "10s:" is never split into marker + text.
static LIST_MARKER: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*(?:[-•*]|\d+[.)])\s+").unwrap());

fn match_line(line: &str, grammar: TimestampGrammar) -> Option<(f64, &str)> {
    let text = match LIST_MARKER.find(line) {
        Some(marker) => &line[marker.end()..],
        None => line,
    };
    if grammar == TimestampGrammar::Permissive {
        if let Some(caps) = MMSS_LINE.captures(text) {
            let minutes: f64 = caps[1].parse().ok()?;
            let seconds: f64 = caps[2].parse().ok()?;
            let caption = caps.get(3).unwrap();
            return Some((minutes * 60.0 + seconds, &text[caption.range()]));
        }
    }
    let caps = TS_LINE.captures(text)?;
    let secs: f64 = caps[1].parse().ok()?;
    let caption = caps.get(2).unwrap();
    Some((secs, &text[caption.range()]))
}

/// Parse one response into caption candidates plus diagnostics.
///
/// A line parses iff it matches the timestamp grammar after list-marker
/// stripping. Parsed captions whose start lies beyond the known video
/// duration are dropped (they cannot form a clip). End timestamps are
/// `min(start + delta, duration)`.
///
/// `repetition_ratio` needs the source subtitles and is left at zero here;
/// use [`detect_failure_modes`] when the block is available.
pub fn parse_timestamped_captions(
    raw_text: &str,
    video_id: &str,
    block_index: u32,
    duration_s: Option<f64>,
    delta: DeltaSec,
    grammar: TimestampGrammar,
) -> (Vec<CaptionCandidate>, ParseDiagnostics) {
    let mut candidates = Vec::new();
    let mut diag = ParseDiagnostics::default();
    let mut speech_reports = 0usize;

    for line in raw_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        diag.total_lines += 1;
        let Some((start_s, caption)) = match_line(line, grammar) else {
            continue;
        };
        diag.parsed_lines += 1;
        let caption = caption.trim_end().to_string();
        if is_speech_report(&caption) {
            speech_reports += 1;
        }
        let end_s = match duration_s {
            Some(d) => {
                // A start at or past the end of the video cannot form a
                // non-empty clip.
                if start_s >= d {
                    continue;
                }
                (start_s + delta.seconds()).min(d)
            }
            None => start_s + delta.seconds(),
        };
        candidates.push(CaptionCandidate {
            video_id: video_id.to_string(),
            block_index,
            line_index: candidates.len() as u32,
            caption,
            start_s,
            end_s,
        });
    }

    if diag.parsed_lines > 0 {
        diag.speech_report_ratio = speech_reports as f64 / diag.parsed_lines as f64;
    }
    diag.structure_ok =
        diag.parsed_lines as f64 / (diag.total_lines.max(1)) as f64 >= 0.5 && diag.total_lines > 0;
    (candidates, diag)
}

/// Full diagnostics for one response against its source block, including the
/// input-repetition check.
pub fn detect_failure_modes(
    raw_text: &str,
    block: &SubtitleBlock,
    delta: DeltaSec,
    grammar: TimestampGrammar,
) -> ParseDiagnostics {
    let (_, mut diag) = parse_timestamped_captions(
        raw_text,
        &block.video_id,
        block.block_index,
        block.duration_s,
        delta,
        grammar,
    );

    let inputs: std::collections::HashSet<String> = block
        .subtitles
        .iter()
        .map(|s| normalize_for_match(&s.text))
        .filter(|s| !s.is_empty())
        .collect();

    let mut parsed = 0usize;
    let mut repeated = 0usize;
    for line in raw_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some((_, caption)) = match_line(line, grammar) {
            parsed += 1;
            if inputs.contains(&normalize_for_match(caption)) {
                repeated += 1;
            }
        }
    }
    if parsed > 0 {
        diag.repetition_ratio = repeated as f64 / parsed as f64;
    }
    diag
}

/// Lowercase, strip punctuation, collapse whitespace.
fn normalize_for_match(text: &str) -> String {
    let lowered: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

const SPEECH_REPORT_PREFIXES: [&str; 5] = [
    "a person says",
    "someone says",
    "the speaker says",
    "a person announces",
    "someone tells",
];

fn is_speech_report(caption: &str) -> bool {
    let norm = normalize_for_match(caption);
    SPEECH_REPORT_PREFIXES.iter().any(|p| norm.starts_with(p)) || norm.ends_with("is mentioned")
}
