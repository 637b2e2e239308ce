//! Per-sequence tracking: crops around the last box, prediction, mapping
//! back to frame coordinates, and periodic dynamic-template updates.

mod crop;
mod io;
mod tracker;

pub use crop::CropTransform;
pub use io::{
    format_predictions, format_rect, parse_rect_line, read_rects, write_rects, write_sequence_dir,
    SequenceDir, GROUNDTRUTH_FILE,
};
pub use tracker::{FrameResult, RunConfig, Tracker, TrackerState, WindowBest};
