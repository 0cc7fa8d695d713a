//! Slicing a transcript into contiguous long-context blocks.
//!
//! Each block becomes one LLM request, so it must stay inside the model's
//! context budget. Packing is greedy left-to-right with no overlap: blocks
//! partition the subtitle sequence exactly.

use serde::{Deserialize, Serialize};

use crate::ingest::{Subtitle, TranscriptRecord, VideoTranscript};

/// Size limits for one block. A block is extended until adding the next
/// subtitle would violate any limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingConfig {
    /// Whitespace-token budget per block.
    pub max_words: usize,
    /// Subtitle-count budget per block.
    pub max_subtitles: usize,
    /// Time-span budget per block, last end minus first start, in seconds.
    pub max_span_s: f64,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        // Sized to fit a 2k-token context together with the prompt preamble.
        BlockingConfig {
            max_words: 300,
            max_subtitles: 120,
            max_span_s: 360.0,
        }
    }
}

/// A contiguous slice of a transcript, destined for one LLM request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleBlock {
    pub video_id: String,
    pub block_index: u32,
    /// Video duration carried through from the transcript; downstream
    /// parsing clips caption timestamps against it.
    pub duration_s: Option<f64>,
    pub subtitles: Vec<Subtitle>,
}

impl SubtitleBlock {
    /// `[first start, last end]` of the block's subtitles.
    pub fn span(&self) -> (f64, f64) {
        match (self.subtitles.first(), self.subtitles.last()) {
            (Some(f), Some(l)) => (f.start_s, l.end_s),
            _ => (0.0, 0.0),
        }
    }

    pub fn word_count(&self) -> usize {
        self.subtitles.iter().map(|s| word_count(&s.text)).sum()
    }
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Greedy left-to-right packing of a normalized transcript into blocks.
///
/// A single subtitle that alone exceeds a limit still forms its own block,
/// so every subtitle lands in exactly one block and block indices are
/// consecutive from zero.
pub fn slice_into_blocks(t: &VideoTranscript, config: &BlockingConfig) -> Vec<SubtitleBlock> {
    let mut blocks: Vec<SubtitleBlock> = Vec::new();
    let mut current: Vec<Subtitle> = Vec::new();
    let mut current_words = 0usize;
    let mut current_start = 0.0f64;

    for sub in &t.subtitles {
        let words = word_count(&sub.text);
        let fits = if current.is_empty() {
            true
        } else {
            current.len() + 1 <= config.max_subtitles
                && current_words + words <= config.max_words
                && sub.end_s - current_start <= config.max_span_s
        };
        if !fits {
            blocks.push(SubtitleBlock {
                video_id: t.video_id.clone(),
                block_index: blocks.len() as u32,
                duration_s: t.duration_s,
                subtitles: std::mem::take(&mut current),
            });
            current_words = 0;
        }
        if current.is_empty() {
            current_start = sub.start_s;
        }
        current_words += words;
        current.push(sub.clone());
    }
    if !current.is_empty() {
        blocks.push(SubtitleBlock {
            video_id: t.video_id.clone(),
            block_index: blocks.len() as u32,
            duration_s: t.duration_s,
            subtitles: current,
        });
    }
    blocks
}

/// Block serialized in the standard record format plus `block_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub video_id: String,
    pub block_index: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub text: Vec<String>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BlockRecord {
    pub fn from_block(b: &SubtitleBlock) -> Self {
        let rec = TranscriptRecord::from_transcript(&VideoTranscript {
            video_id: b.video_id.clone(),
            duration_s: b.duration_s,
            subtitles: b.subtitles.clone(),
        });
        BlockRecord {
            video_id: rec.video_id,
            block_index: b.block_index,
            duration: rec.duration,
            text: rec.text,
            start: rec.start,
            end: rec.end,
        }
    }

    pub fn into_block(self) -> SubtitleBlock {
        let subtitles = self
            .text
            .into_iter()
            .zip(self.start)
            .zip(self.end)
            .map(|((text, start_s), end_s)| Subtitle { text, start_s, end_s })
            .collect();
        SubtitleBlock {
            video_id: self.video_id,
            block_index: self.block_index,
            duration_s: self.duration,
            subtitles,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(text: &str, start: f64, end: f64) -> Subtitle {
        Subtitle { text: text.into(), start_s: start, end_s: end }
    }

    fn transcript(subs: Vec<Subtitle>) -> VideoTranscript {
        let duration = subs.iter().map(|s| s.end_s).fold(None, |a: Option<f64>, e| {
            Some(a.map_or(e, |x| x.max(e)))
        });
        VideoTranscript { video_id: "v".into(), duration_s: duration, subtitles: subs }
    }

    #[test]
    fn empty_transcript_yields_no_blocks() {
        let t = VideoTranscript::empty("v");
        assert!(slice_into_blocks(&t, &BlockingConfig::default()).is_empty());
    }

    #[test]
    fn word_limit_splits_greedily() {
        // 3 subtitles of 10 words each with max_words=20 -> sizes [2, 1].
        let ten = "w w w w w w w w w w";
        let t = transcript(vec![sub(ten, 0.0, 1.0), sub(ten, 1.0, 2.0), sub(ten, 2.0, 3.0)]);
        let cfg = BlockingConfig { max_words: 20, ..BlockingConfig::default() };
        let blocks = slice_into_blocks(&t, &cfg);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].subtitles.len(), 2);
        assert_eq!(blocks[1].subtitles.len(), 1);
        assert_eq!(blocks[0].block_index, 0);
        assert_eq!(blocks[1].block_index, 1);
    }

    #[test]
    fn span_limit_splits() {
        let t = transcript(vec![sub("a", 0.0, 10.0), sub("b", 400.0, 410.0)]);
        let cfg = BlockingConfig { max_span_s: 360.0, ..BlockingConfig::default() };
        let blocks = slice_into_blocks(&t, &cfg);
        assert_eq!(blocks.len(), 2);
    }

    #[test]
    fn oversized_single_subtitle_forms_own_block() {
        let forty: String = std::iter::repeat("w").take(40).collect::<Vec<_>>().join(" ");
        let t = transcript(vec![sub(&forty, 0.0, 1.0), sub("tail", 1.0, 2.0)]);
        let cfg = BlockingConfig { max_words: 20, ..BlockingConfig::default() };
        let blocks = slice_into_blocks(&t, &cfg);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].subtitles.len(), 1);
    }

    #[test]
    fn blocks_partition_transcript() {
        let subs: Vec<Subtitle> =
            (0..50).map(|i| sub(&format!("word {i}"), i as f64, i as f64 + 1.0)).collect();
        let t = transcript(subs.clone());
        let cfg = BlockingConfig { max_subtitles: 7, ..BlockingConfig::default() };
        let blocks = slice_into_blocks(&t, &cfg);
        let rejoined: Vec<Subtitle> =
            blocks.iter().flat_map(|b| b.subtitles.iter().cloned()).collect();
        assert_eq!(rejoined, subs);
        for b in &blocks {
            assert!(b.subtitles.len() <= 7);
        }
    }
}
