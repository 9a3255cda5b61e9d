//! Multilingual pretraining toolkit built around cross-lingual document
//! attention (XLDA).
//!
//! The pipeline is:
//!
//! - [`corpus`]: ingest language-tagged, optionally quality-scored documents
//!   from line-delimited JSON records.
//! - [`quality_filter`]: per-language quantile filtering with stage presets.
//! - [`sampler`]: temperature/upsampling language distribution and the
//!   cross-lingual constraint flags.
//! - [`packer`]: fixed-length sequence packing with document spans and
//!   next-token / second-next-token label tracks, plus the packed binary format.
//! - [`xlda_mask`]: span-based attention masks (XLDA, intra-document, bridge).
//! - [`schedule`]: warmup-stable-decay learning rate, batch ramp, annealing
//!   switches and scaling-law advisors.
//! - [`toy_model`]: a small f64 decoder-only transformer with hand-written
//!   backward pass, used to check mask semantics end to end.
//! - [`consistency`]: cross-lingual prediction-consistency metrics.

pub mod consistency;
pub mod corpus;
pub mod error;
pub mod packer;
pub mod quality_filter;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod toy_model;
pub mod xlda_mask;

pub use consistency::{consistency_metrics, ConsistencyReport, PredictionPair};
pub use corpus::{CorpusStats, Document, LanguageClass, LanguageTag};
pub use error::{Error, Result};
pub use packer::{DocSpan, PackReport, PackedSequence, PackerConfig, SplitPolicy};
pub use quality_filter::{FilterSpec, Stage};
pub use sampler::{LanguageDistribution, MixturePlan, SamplerConfig};
pub use schedule::{AnnealStage, ScheduleConfig};
pub use toy_model::{ModelConfig, Parameters};
pub use xlda_mask::{MaskPolicy, MaskSpec};
