//! Episodic SGD training, evaluation sweeps and the gradient check.

mod config;
mod eval;
mod gradcheck;
mod sgd;
mod train;

pub use config::{apply_config_text, config_text, set_option, TrainConfig};
pub use eval::{
    episode_seeds, evaluate, infer_episodes, phase_episodes, phase_stream, test_phases, EpisodeResult, EvalReport,
    EVAL_BATCH,
};
pub use gradcheck::{gradcheck, linear_toy, GradcheckOptions, GradcheckReport};
pub use sgd::Sgd;
pub use train::{
    first_non_finite, overfit, stack_episodes, train, train_observed, train_step, EvalRecord, OverfitReport,
    RunRecord, StepRecord, TrainOutcome,
};
