//! One-stream transformer tracker with grouped-token attention masking,
//! temporal template cues, search-token partitioning and elimination, plus
//! a synthetic benchmark harness.

pub mod config;
pub mod encoder;
pub mod error;
pub mod flow_mask;
pub mod geometry;
pub mod head;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth_bench;
pub mod tokenization;

pub use config::{parse_config, Config};
pub use error::{Error, Result};
pub use flow_mask::{AttentionMask, FlowPolicy, PartitionMode, PartitionResult, Variant};
pub use geometry::{CenterBox, Rect};
pub use numerics::{ParamStore, Tensor};
pub use tokenization::{Geometry, ImageCrop, TokenLayout};
