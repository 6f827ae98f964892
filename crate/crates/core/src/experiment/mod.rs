//! Training runs, evaluation, checkpoints and their file formats.

mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{Algorithm, TrainConfig, DESK_OUTER_STEPS, FULL_OUTER_STEPS};
pub use eval::{
    emit_plotdata, eval_episode, run_eval, variants_for, Aggregate, EpisodeRecord, EvalReport,
    EvalSettings, Protocol, Variant, GRID_POINTS,
};
pub use gradcheck::{
    jittered_params, run_gradcheck, CheckResult, GradcheckReport, GradcheckSettings,
    CLOSED_FORM_TOLERANCE, FD_EPSILON, FD_TOLERANCE,
};
pub use train::{
    run_training, TrainOutcome, Trainer, CHECKPOINT_FILE, LOSS_CSV, LOSS_HEADER, LOSS_LIMIT,
    SNAPSHOT_CSV, SNAPSHOT_EPISODES, SNAPSHOT_HEADER,
};
