//! Differentiable channel pruning: learned per-group width multipliers,
//! salience-ranked channel masks and the interleaved train/prune loop.

mod mask;
mod run;
mod telemetry;
mod width;

pub use mask::{
    compute_mask, patch_weights, salience_ranking, smooth_mask, smooth_mask_dtau, task_grad_wrt_pi,
    ChannelMask, SALIENCE_FLOOR,
};
pub use run::{check_reachable, prune_train_loop, EpochRecord, PruneJob, PruneOutcome};
pub use telemetry::{
    parse_telemetry, telemetry_csv, telemetry_header, TelemetryRow, TELEMETRY_SCHEMA_VERSION,
};
pub use width::{
    combined_gradient, init_alphas, width_update, AlphaScale, Alphas, LossMode, MaskGradSource,
    PruneConfig, UpdateSignal, WidthMultipliers,
};
