//! Normalization, splitting, training, evaluation, baselines and
//! fine-tuning.

mod baselines;
mod data;
mod eval;
mod finetune;
mod train;

pub use baselines::{persistence_baseline, RidgeBaseline};
pub use data::{
    fit_normalizer, min_series_len, prepare, split_series, stack_windows, NormalizerStats, PreparedData, SplitRatios,
};
pub use eval::{evaluate, evaluate_predictions, ChannelMetrics, EvalReport};
pub use finetune::{fine_tune, FineTuneOutcome};
pub use train::{
    ci_loss, model_gradcheck, predict_windows, train, train_on_windows, windows_loss, EpochRecord, TrainConfig,
    TrainOutcome, Trainer, TrainingHistory,
};
