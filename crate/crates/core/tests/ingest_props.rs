//! Property tests for parsing, normalization and blocking.

use caplign_core::blocking::{slice_into_blocks, BlockingConfig};
use caplign_core::ingest::{
    normalize, parse_record_stream, parse_srt, parse_webvtt, ParseMode, Subtitle,
    TranscriptRecord, VideoTranscript,
};
use proptest::prelude::*;

fn arb_subtitle() -> impl Strategy<Value = Subtitle> {
    (
        proptest::collection::vec("[a-z]{1,8}", 0..12),
        0.0f64..4000.0,
        0.0f64..60.0,
    )
        .prop_map(|(words, start, len)| Subtitle {
            text: words.join(" "),
            start_s: start,
            end_s: start + len,
        })
}

fn arb_transcript() -> impl Strategy<Value = VideoTranscript> {
    proptest::collection::vec(arb_subtitle(), 0..40).prop_map(|subtitles| VideoTranscript {
        video_id: "prop".into(),
        duration_s: None,
        subtitles,
    })
}

proptest! {
    #[test]
    fn normalize_is_idempotent(t in arb_transcript()) {
        let once = normalize(t);
        let twice = normalize(once.clone());
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn record_format_round_trips(t in arb_transcript()) {
        let normalized = normalize(t);
        let line = serde_json::to_string(&TranscriptRecord::from_transcript(&normalized)).unwrap();
        let parsed: Vec<_> = parse_record_stream(std::io::Cursor::new(line))
            .collect::<Result<_, _>>()
            .unwrap();
        prop_assert_eq!(parsed.len(), 1);
        prop_assert_eq!(&parsed[0], &normalized);
    }

    #[test]
    fn lenient_srt_never_panics_and_sorts(bytes in proptest::collection::vec(any::<u8>(), 0..2000)) {
        let t = parse_srt(&bytes, "fuzz", ParseMode::Lenient).unwrap();
        for pair in t.subtitles.windows(2) {
            prop_assert!(pair[0].start_s <= pair[1].start_s);
        }
        for sub in &t.subtitles {
            prop_assert!(sub.end_s >= sub.start_s);
        }
    }

    #[test]
    fn lenient_vtt_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..2000)) {
        // Header errors are fine; panics are not.
        if let Ok(t) = parse_webvtt(&bytes, "fuzz", ParseMode::Lenient) {
            for pair in t.subtitles.windows(2) {
                prop_assert!(pair[0].start_s <= pair[1].start_s);
            }
        }
    }

    #[test]
    fn normalized_output_satisfies_invariants(t in arb_transcript()) {
        let n = normalize(t);
        if let Some(d) = n.duration_s {
            for sub in &n.subtitles {
                prop_assert!(sub.start_s >= 0.0);
                prop_assert!(sub.end_s >= sub.start_s);
                prop_assert!(sub.end_s <= d);
            }
        }
        for sub in &n.subtitles {
            prop_assert!(!sub.text.is_empty());
            prop_assert_eq!(sub.text.split_whitespace().collect::<Vec<_>>().join(" "), sub.text.clone());
        }
    }

    #[test]
    fn blocks_partition_and_respect_limits(
        t in arb_transcript(),
        max_words in 1usize..40,
        max_subtitles in 1usize..10,
        max_span in 1.0f64..500.0,
    ) {
        let t = normalize(t);
        let config = BlockingConfig { max_words, max_subtitles, max_span_s: max_span };
        let blocks = slice_into_blocks(&t, &config);

        let rejoined: Vec<Subtitle> = blocks.iter().flat_map(|b| b.subtitles.clone()).collect();
        prop_assert_eq!(rejoined, t.subtitles.clone());

        for (i, block) in blocks.iter().enumerate() {
            prop_assert_eq!(block.block_index as usize, i);
            prop_assert!(!block.subtitles.is_empty());
            let within_limits = block.word_count() <= max_words
                && block.subtitles.len() <= max_subtitles
                && (block.span().1 - block.span().0) <= max_span;
            prop_assert!(within_limits || block.subtitles.len() == 1);
        }
    }

    #[test]
    fn identical_input_gives_identical_blocks(t in arb_transcript()) {
        let t = normalize(t);
        let config = BlockingConfig::default();
        let a = serde_json::to_string(&slice_into_blocks(&t, &config)).unwrap();
        let b = serde_json::to_string(&slice_into_blocks(&t, &config)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn srt_cue_order_is_repaired() {
    let input = "1\n00:01:00,000 --> 00:01:02,000\nlate\n\n2\n00:00:05,000 --> 00:00:06,000\nearly\n";
    let t = parse_srt(input.as_bytes(), "v", ParseMode::Strict).unwrap();
    assert_eq!(t.subtitles[0].text, "early");
}
