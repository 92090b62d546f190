//! Joint optimization of detection, prior-adversarial and residual losses,
//! evaluation and the ablation ladder.

mod ablation;
mod config;
mod data;
mod losses;
mod metrics;
mod optim;
mod train;

pub use ablation::{ablation_run, lambda_sweep, sweep_csv, AblationRow, AblationTable, RunHook, SweepRow};
pub use config::{Mode, SourcePrior, TrainConfig};
pub use data::{batch_prior, Item, Sampler, StemKey, TrainData, PRIOR_LEVELS};
pub use losses::{
    adv_loss, build_targets, detection_loss, domain_loss, pal_domain_loss, pal_level_loss, reg_loss, DetLoss,
    DetTargets, SMOOTH_L1_BETA,
};
pub use metrics::{
    average_precision, eval_csv, evaluate_map, EvalRecord, MapReport, MetricsLog, StepRecord, STEP_COLUMNS,
};
pub use optim::{clip_scale, Sgd};
pub use train::{
    build_losses, can_use_cache, evaluate, pen_learnability, predict, predict_priors, train, train_step, Batch,
    LossNodes, TrainOutcome, Trainer, CHECKPOINT_FILE, CONFIG_FILE, EVAL_FILE, METRICS_FILE,
};
