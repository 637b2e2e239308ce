//! Synthetic sequences, tracking metrics, toy training and the variant
//! ablation harness.

mod ablation;
mod heatmap;
mod metrics;
mod synth;
mod train;

pub use ablation::{
    baseline_mask_diff, evaluate, gen_dataset, run_ablation, AblationProtocol, AblationResult,
    AblationRow, SeedRun, TrendVerdict, TREND_TOLERANCE,
};
pub use heatmap::{emit_heatmap, overlay, pgm_bytes, quantize, read_pgm, write_pgm};
pub use metrics::{
    auc_thresholds, compute_metrics, iou, success_auc, success_rate, MetricsReport,
    NORM_PRECISION_RADIUS, PRECISION_RADIUS_PX, SR_RULE,
};
pub use synth::{gen_sequence, SynthConfig, SynthSequence, Texture, TEXTURE_CELLS};
pub use train::{
    build_sample, check_gradients, loss_trend_decreasing, sample_loss, train_from, train_toy,
    SampleSpec, TrainConfig, TrainOutcome, TrainingSample,
};
