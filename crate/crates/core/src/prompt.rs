//! Prompt rendering: system preamble, task templates, and the timestamped
//! ASR payload.
//!
//! The payload line format is `"<seconds>s: <text>"` with absolute video
//! seconds; the alternative `minutes:seconds` payload format measurably
//! underperforms it, so it is not rendered here (the permissive response
//! grammar can still read it back, see [`crate::response`]).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blocking::SubtitleBlock;

/// Placeholder token for the ASR payload in task templates.
pub const ASR_PLACEHOLDER: &str = "{{ASR}}";

/// Default chat system preamble (the stock Vicuna v0 preamble).
pub const DEFAULT_SYSTEM_TEXT: &str = "A chat between a curious human and an artificial \
intelligence assistant. The assistant gives helpful, detailed, and polite answers to the \
human's questions.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("block has no subtitles")]
    EmptyBlock,
    #[error("task template does not contain the {ASR_PLACEHOLDER} placeholder")]
    TemplateMissingPlaceholder,
    #[error("task template contains {0} {ASR_PLACEHOLDER} placeholders, expected exactly one")]
    TemplateMultiplePlaceholders(usize),
}

/// A chat prompt template: system preamble plus a task text with exactly one
/// `{{ASR}}` placeholder for the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub task_text: String,
}

impl PromptTemplate {
    pub fn new(system_text: impl Into<String>, task_text: impl Into<String>) -> Self {
        PromptTemplate {
            system_text: system_text.into(),
            task_text: task_text.into(),
        }
    }

    /// Load the task text from a plain-text file, keeping the default system
    /// preamble.
    pub fn from_task_file(path: &std::path::Path) -> std::io::Result<Self> {
        let task = std::fs::read_to_string(path)?;
        Ok(PromptTemplate::new(DEFAULT_SYSTEM_TEXT, task.trim_end()))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self.task_text.matches(ASR_PLACEHOLDER).count() {
            0 => Err(PromptError::TemplateMissingPlaceholder),
            1 => Ok(()),
            n => Err(PromptError::TemplateMultiplePlaceholders(n)),
        }
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        preset("final").expect("default preset exists")
    }
}

// Sentence building blocks shared by the preset family. Presets differ only
// in which refinements are present and where the payload sits.
const S_SYNOPSIS: &str = "Write a synopsis for this video.";
const S_SUMMARY: &str = "Write a summary for this video.";
const S_SUMMARY_SEGMENT: &str = "Write a summary for this video segment.";
const S_SHORT: &str = "Write only short sentences.";
const S_ONE_ACTION: &str = "Describe only one action per sentence.";
const S_PRESENT: &str = "Keep only actions that happen in the present time.";
const S_TIMESTAMP: &str = "Begin each sentence with an estimated timestamp.";
const PAYLOAD_FIRST: &str = "Here is an automatically recognized speech from a video: {{ASR}}.";
const PAYLOAD_FIRST_SEGMENT: &str =
    "Here is an automatically recognized speech from a video segment that is cut from a long video: {{ASR}}";
const FINAL_INTRO: &str = "I will give you an automatically recognized speech with timestamps \
from a video segment that is cut from a long video.";
const FINAL_PAYLOAD: &str = "Here is this automatically recognized speech: {{ASR}}";

/// Names of all built-in task presets, in ablation order. `"final"` is the
/// default production prompt.
pub const PRESET_NAMES: [&str; 9] = [
    "synopsis",
    "short-sentences",
    "one-action",
    "present-time",
    "summary",
    "segment",
    "final",
    "likely",
    "creative",
];

/// Look up a named task preset.
pub fn preset(name: &str) -> Option<PromptTemplate> {
    let task = match name {
        "synopsis" => [PAYLOAD_FIRST, S_SYNOPSIS, S_TIMESTAMP].join(" "),
        "short-sentences" => [PAYLOAD_FIRST, S_SYNOPSIS, S_SHORT, S_TIMESTAMP].join(" "),
        "one-action" => [PAYLOAD_FIRST, S_SYNOPSIS, S_SHORT, S_ONE_ACTION, S_TIMESTAMP].join(" "),
        "present-time" => {
            [PAYLOAD_FIRST, S_SYNOPSIS, S_SHORT, S_ONE_ACTION, S_PRESENT, S_TIMESTAMP].join(" ")
        }
        "summary" => {
            [PAYLOAD_FIRST, S_SUMMARY, S_SHORT, S_ONE_ACTION, S_PRESENT, S_TIMESTAMP].join(" ")
        }
        "segment" => [
            PAYLOAD_FIRST_SEGMENT,
            S_SUMMARY_SEGMENT,
            S_SHORT,
            S_ONE_ACTION,
            S_PRESENT,
            S_TIMESTAMP,
        ]
        .join(" "),
        "final" => [
            FINAL_INTRO,
            S_SUMMARY_SEGMENT,
            S_SHORT,
            S_ONE_ACTION,
            S_PRESENT,
            S_TIMESTAMP,
            FINAL_PAYLOAD,
        ]
        .join(" "),
        "likely" => [
            FINAL_INTRO,
            "Write a likely summary for this video segment.",
            S_SHORT,
            S_ONE_ACTION,
            S_PRESENT,
            S_TIMESTAMP,
            FINAL_PAYLOAD,
        ]
        .join(" "),
        "creative" => [
            FINAL_INTRO,
            "Write a creative summary for this video segment.",
            S_SHORT,
            S_ONE_ACTION,
            S_PRESENT,
            S_TIMESTAMP,
            FINAL_PAYLOAD,
        ]
        .join(" "),
        _ => return None,
    };
    Some(PromptTemplate::new(DEFAULT_SYSTEM_TEXT, task))
}

/// Model parameters folded into the request hash: responses are only
/// interchangeable when these match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            model_name: "default".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

/// A fully rendered request, content-addressed by a SHA-256 of the template,
/// payload and model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub video_id: String,
    pub block_index: u32,
    pub rendered_system: String,
    pub rendered_user: String,
    pub content_hash: String,
}

/// Render one payload line per subtitle: `"<seconds>s: <text>"`.
///
/// Start times are printed as whole seconds (nearest integer, ties to even);
/// the internal model keeps millisecond precision and is only coarsened at
/// this LLM boundary.
pub fn format_asr_lines(block: &SubtitleBlock) -> Result<String, PromptError> {
    if block.subtitles.is_empty() {
        return Err(PromptError::EmptyBlock);
    }
    Ok(block
        .subtitles
        .iter()
        .map(|s| format!("{}s: {}", round_seconds(s.start_s), s.text))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Nearest-integer seconds with ties to even, clamped at zero.
pub fn round_seconds(seconds: f64) -> u64 {
    seconds.round_ties_even().max(0.0) as u64
}

/// Substitute the block's payload into the template and hash the request.
pub fn build_prompt(
    block: &SubtitleBlock,
    template: &PromptTemplate,
    params: &ModelParams,
) -> Result<PromptRequest, PromptError> {
    template.validate()?;
    let payload = format_asr_lines(block)?;
    let rendered_user = template.task_text.replace(ASR_PLACEHOLDER, &payload);
    let content_hash = content_hash(template, &payload, params);
    Ok(PromptRequest {
        video_id: block.video_id.clone(),
        block_index: block.block_index,
        rendered_system: template.system_text.clone(),
        rendered_user,
        content_hash,
    })
}

fn content_hash(template: &PromptTemplate, payload: &str, params: &ModelParams) -> String {
    let mut hasher = Sha256::new();
    for part in [
        template.system_text.as_str(),
        template.task_text.as_str(),
        payload,
        params.model_name.as_str(),
    ] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update(params.temperature.to_le_bytes());
    hasher.update(params.max_output_tokens.to_le_bytes());
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Subtitle;

    fn block(subs: Vec<(&str, f64, f64)>) -> SubtitleBlock {
        SubtitleBlock {
            video_id: "v".into(),
            block_index: 0,
            duration_s: Some(600.0),
            subtitles: subs
                .into_iter()
                .map(|(t, s, e)| Subtitle { text: t.into(), start_s: s, end_s: e })
                .collect(),
        }
    }

    #[test]
    fn asr_line_format() {
        let b = block(vec![("hi i'm matt swanson", 7.0, 9.0)]);
        assert_eq!(format_asr_lines(&b).unwrap(), "7s: hi i'm matt swanson");
    }

    #[test]
    fn rounding_is_ties_to_even() {
        assert_eq!(round_seconds(0.4), 0);
        assert_eq!(round_seconds(118.6), 119);
        assert_eq!(round_seconds(120.2), 120);
        assert_eq!(round_seconds(0.5), 0);
        assert_eq!(round_seconds(1.5), 2);
        assert_eq!(round_seconds(2.5), 2);
    }

    #[test]
    fn empty_block_is_an_error() {
        let b = block(vec![]);
        assert_eq!(format_asr_lines(&b).unwrap_err(), PromptError::EmptyBlock);
    }

    #[test]
    fn final_preset_is_verbatim() {
        let t = preset("final").unwrap();
        assert_eq!(
            t.task_text,
            "I will give you an automatically recognized speech with timestamps from a video \
             segment that is cut from a long video. Write a summary for this video segment. \
             Write only short sentences. Describe only one action per sentence. Keep only \
             actions that happen in the present time. Begin each sentence with an estimated \
             timestamp. Here is this automatically recognized speech: {{ASR}}"
        );
        assert!(t.system_text.starts_with("A chat between a curious human and"));
    }

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            let t = preset(name).unwrap_or_else(|| panic!("missing preset {name}"));
            t.validate().unwrap();
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn build_prompt_substitutes_payload() {
        let b = block(vec![("pour the batter", 12.0, 15.0)]);
        let req = build_prompt(&b, &PromptTemplate::default(), &ModelParams::default()).unwrap();
        assert!(req.rendered_user.ends_with("Here is this automatically recognized speech: 12s: pour the batter"));
        assert!(!req.rendered_user.contains(ASR_PLACEHOLDER));
    }

    #[test]
    fn missing_placeholder_is_an_error() {
        let b = block(vec![("x", 0.0, 1.0)]);
        let t = PromptTemplate::new("sys", "no placeholder here");
        assert_eq!(
            build_prompt(&b, &t, &ModelParams::default()).unwrap_err(),
            PromptError::TemplateMissingPlaceholder
        );
    }

    #[test]
    fn content_hash_is_deterministic_and_sensitive() {
        let b = block(vec![("x", 0.0, 1.0)]);
        let params = ModelParams::default();
        let t = PromptTemplate::default();
        let a = build_prompt(&b, &t, &params).unwrap();
        let b2 = build_prompt(&b, &t, &params).unwrap();
        assert_eq!(a.content_hash, b2.content_hash);

        let other_params = ModelParams { temperature: 0.7, ..ModelParams::default() };
        let c = build_prompt(&b, &t, &other_params).unwrap();
        assert_ne!(a.content_hash, c.content_hash);

        let other_block = block(vec![("y", 0.0, 1.0)]);
        let d = build_prompt(&other_block, &t, &params).unwrap();
        assert_ne!(a.content_hash, d.content_hash);
    }

    #[test]
    fn payload_appears_exactly_once_in_order() {
        let b = block(vec![("first", 1.0, 2.0), ("second", 3.0, 4.0)]);
        let req = build_prompt(&b, &PromptTemplate::default(), &ModelParams::default()).unwrap();
        assert_eq!(req.rendered_user.matches("1s: first\n3s: second").count(), 1);
    }
}
