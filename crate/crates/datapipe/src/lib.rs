//! Hyperspectral preprocessing: quality masking, L1B/L2 temporal pairing,
//! sliding-window tiling with a NaN filter, per-channel statistics, and a
//! synthetic granule generator standing in for PACE OCI downloads.

pub mod container;
pub mod granule;
pub mod matching;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod tiles;

pub use granule::{GranuleKind, GranuleMeta, GranuleRecord};
pub use matching::{match_granules, MatchReport};
pub use pipeline::{preprocess, PreprocessConfig, PreprocessReport, SplitManifest};
pub use stats::{compute_stats, ChannelStats};
pub use synth::{synth_granules, synth_scene, SceneSpec, Split, SynthConfig};
pub use tiles::{extract_patches, ExtractOptions, NanScope, PatchTile};
