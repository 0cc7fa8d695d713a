//! Core library for turning timestamped ASR transcripts of long videos into
//! temporally aligned, quality-filtered captions.
//!
//! The pipeline reads noisy per-video subtitle streams, slices them into
//! long-context blocks, renders chat prompts for an external LLM, parses the
//! timestamped caption lines out of the responses, and then post-processes the
//! candidates with an offset-search alignment and adaptive-threshold filtering
//! engine backed by pluggable similarity providers.
//!
//! Module map:
//! - [`ingest`] — SRT / WebVTT / line-delimited record parsing and normalization
//! - [`blocking`] — slicing a transcript into LLM-sized context blocks
//! - [`prompt`] — prompt templates, presets and deterministic request hashing
//! - [`gateway`] — HTTP chat-completion client with retries and a response cache
//! - [`response`] — extracting timestamped caption candidates from raw LLM text
//! - [`align`] — offset scoring, argmax alignment, threshold selection, filtering
//! - [`numerics`] — embedding kernels (cosine, mean pooling, contrastive loss)
//! - [`metrics`] — retrieval metrics and corpus statistics
//! - [`synthetic`] — seeded corpora with planted offsets for ground-truth testing
//! - [`pipeline`] — sharded, resumable stage orchestration

pub mod align;
pub mod blocking;
pub mod gateway;
pub mod ingest;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod prompt;
pub mod records;
pub mod response;
pub mod synthetic;

pub use align::{
    AlignedCaption, FilterThreshold, OffsetProfile, OffsetRange, SimilarityProvider,
};
pub use blocking::{BlockingConfig, SubtitleBlock};
pub use gateway::{GatewayConfig, LlmResponse};
pub use ingest::{Subtitle, VideoTranscript};
pub use prompt::{PromptRequest, PromptTemplate};
pub use response::{CaptionCandidate, DeltaSec, ParseDiagnostics};
