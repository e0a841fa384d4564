use crate::embed::MultivariateSeries;
use crate::error::{Error, Result};
use crate::io::Checkpoint;

use super::data::{prepare, PreparedData};
use super::train::{train_on_windows, windows_loss, TrainConfig, TrainingHistory};

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub checkpoint: Checkpoint,
    /// `None` for zero-shot (`fraction == 0`).
    pub history: Option<TrainingHistory>,
    /// Normalized validation MSE of the starting parameters.
    pub zero_shot_val_loss: f64,
    pub windows_used: usize,
    pub heads_reinitialized: bool,
}

/// Warm-starts from `checkpoint` and trains on the first
/// `⌈fraction · count⌉` chronological training windows of `series`.
///
/// The encoder is always carried over. Decoder heads are carried over when
/// the channel count matches and re-initialized otherwise. Normalization
/// statistics are refit on the new series' training split.
pub fn fine_tune(
    checkpoint: &Checkpoint,
    series: &MultivariateSeries,
    fraction: f64,
    tc: &TrainConfig,
) -> Result<FineTuneOutcome> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("fraction {fraction} outside [0, 1]")));
    }
    let mut params = checkpoint.params.clone();
    let n = series.n_channels();
    let heads_reinitialized = n != params.config.n_channels;
    if heads_reinitialized {
        params.reinit_decoders(n, tc.seed)?;
    }
    let PreparedData { stats, train, val, .. } = prepare(series, &params.config, tc)?;
    let count = (fraction * train.len() as f64).ceil() as usize;
    let zero_shot_val_loss = windows_loss(&params, &val, 16)?;
    let (params, history) = if count == 0 {
        (params, None)
    } else {
        let (p, h) = train_on_windows(params, &train[..count], &val, tc)?;
        (p, Some(h))
    };
    Ok(FineTuneOutcome {
        checkpoint: Checkpoint { params, stats },
        history,
        zero_shot_val_loss,
        windows_used: count,
        heads_reinitialized,
    })
}
