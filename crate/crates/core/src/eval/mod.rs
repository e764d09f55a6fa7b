//! Heart-rate extraction, error metrics and evaluation harnesses.

mod activation;
mod harness;
mod metrics;
mod signal;

pub use activation::{activation_map, map_grid, upsample_bilinear, write_map_grid};
pub use harness::{
    compare_joint_vs_extractor, evaluate_pool, evaluate_video, gradient_fidelity, predicted_hr, reference_hr, set_workers, sweep_adaptation_steps,
    sweep_svg, EvalConfig, HrMethod, JointComparison, PoolResult, SweepRow, SweepTable, VideoResult, workers,
};
pub use metrics::{compute_metrics, summarize, MetricsReport};
pub use signal::{
    bandpass, detect_peaks, estimate_hr, hr_from_peaks, spectral_hr, HrEstimate, HrOptions, DEFAULT_MAX_HR,
    DEFAULT_MIN_HR, PROMINENCE_IQR_FRACTION,
};
