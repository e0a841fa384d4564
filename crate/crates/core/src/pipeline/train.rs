use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{MultivariateSeries, WindowPair};
use crate::error::{Error, Result};
use crate::model::{forward, forward_graph, init_params, ModelConfig, ModelParams, ParamVars};
use crate::tensor::{
    adam_step, gradcheck_with, AdamConfig, AdamState, GradcheckOptions, GradcheckReport, Gradients, Tape, Tensor,
};

use super::data::{prepare, stack_windows, NormalizerStats, SplitRatios};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Window stride for the training and validation splits.
    pub stride: usize,
    pub seed: u64,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            stride: 1,
            seed: 0,
            split: SplitRatios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "batch_size and stride must be ≥ 1 and learning_rate ≥ 0, got {}, {}, {}",
                self.batch_size, self.stride, self.learning_rate
            )));
        }
        self.split.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the starting parameters.
    pub initial_val_loss: f64,
    pub steps: u64,
}

/// Mean squared error over every element of `[B, N, H]` predictions.
pub fn ci_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "ci_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / pred.len() as f64)
}

/// Parameters plus one Adam state per trainable tensor.
pub struct Trainer {
    params: ModelParams,
    states: Vec<AdamState>,
    dropout_rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(params: ModelParams, adam: AdamConfig, seed: u64) -> Self {
        let states = params
            .trainable()
            .iter()
            .map(|t| AdamState::new(t.shape(), adam))
            .collect();
        Trainer {
            params,
            states,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0d0f_0d0f),
            steps: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adam update on a `[B, N, W_in]` → `[B, N, H]` batch. Returns the
    /// loss before the update.
    pub fn step(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let cfg = self.params.config.clone();
        let mut tape = Tape::new();
        let pv = ParamVars::register_owned(&mut tape, &mut self.params);
        let outcome = (|| -> Result<(f64, Gradients)> {
            let pred = forward_graph(&mut tape, inputs, &pv, &cfg, Some(&mut self.dropout_rng))?;
            let target = tape.constant(targets.clone());
            let loss = tape.mean_squared_error(pred, target)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, grads))
        })();
        pv.restore(&mut tape, &mut self.params);
        let (loss, mut grads) = outcome?;
        for ((param, state), &v) in self
            .params
            .trainable_mut()
            .into_iter()
            .zip(&mut self.states)
            .zip(&pv.leaves)
        {
            let g = grads.take(v).expect("every trainable leaf has a gradient");
            adam_step(param, &g, state)?;
        }
        self.steps += 1;
        Ok(loss)
    }
}

/// Forecasts for each window, batched through [`forward`].
pub fn predict_windows(params: &ModelParams, windows: &[WindowPair], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    let (n, h) = (params.config.n_channels, params.config.horizon);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let (inputs, _) = stack_windows(&refs)?;
        let pred = forward(&inputs, params)?;
        for b in 0..chunk.len() {
            out.push(Tensor::new(vec![n, h], pred.row(b).to_vec())?);
        }
    }
    Ok(out)
}

/// Normalized MSE over all windows, channels and horizon steps.
pub fn windows_loss(params: &ModelParams, windows: &[WindowPair], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::contract("loss over zero windows"));
    }
    let preds = predict_windows(params, windows, batch_size)?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        sse += ci_loss(p, &w.target)? * p.len() as f64;
        count += p.len();
    }
    Ok(sse / count as f64)
}

/// Evaluation batches hold at most this many windows.
const EVAL_BATCH: usize = 16;

/// Adam over shuffled minibatches with early stopping on validation loss.
/// Returns the parameters of the best validation epoch.
pub fn train_on_windows(
    params: ModelParams,
    train: &[WindowPair],
    val: &[WindowPair],
    tc: &TrainConfig,
) -> Result<(ModelParams, TrainingHistory)> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!(
            "training needs at least one training and one validation window, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut history = TrainingHistory {
        initial_val_loss: windows_loss(&params, val, EVAL_BATCH)?,
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut trainer = Trainer::new(params, tc.adam(), tc.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (inputs, targets) = stack_windows(&batch)?;
            loss_sum += trainer.step(&inputs, &targets)? * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = windows_loss(trainer.params(), val, EVAL_BATCH)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = trainer.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    history.steps = trainer.steps();
    Ok((best, history))
}

/// Checks backward against central differences for the mean-squared
/// forecast loss of a freshly initialized model on one random batch.
pub fn model_gradcheck(cfg: &ModelConfig, batch: usize, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let params = init_params(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let inputs = random(&[batch, cfg.n_channels, cfg.w_in])?;
    let targets = random(&[batch, cfg.n_channels, cfg.horizon])?;
    let point: Vec<Tensor> = params.trainable().into_iter().cloned().collect();
    gradcheck_with(
        |tape, leaves| {
            let pv = ParamVars::from_leaves(tape, leaves.to_vec(), &params.pos_encoding);
            let pred = forward_graph(tape, &inputs, &pv, cfg, None)?;
            let target = tape.constant(targets.clone());
            tape.mean_squared_error(pred, target)
        },
        &point,
        opts,
    )
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainingHistory,
    pub stats: NormalizerStats,
}

/// Splits, normalizes and windows `series`, then trains a fresh model.
pub fn train(model: &ModelConfig, series: &MultivariateSeries, tc: &TrainConfig) -> Result<TrainOutcome> {
    if series.n_channels() != model.n_channels {
        return Err(Error::contract(format!(
            "model expects {} channels, series has {}",
            model.n_channels,
            series.n_channels()
        )));
    }
    let data = prepare(series, model, tc)?;
    let params = init_params(model, model.seed)?;
    let (params, history) = train_on_windows(params, &data.train, &data.val, tc)?;
    Ok(TrainOutcome {
        params,
        history,
        stats: data.stats,
    })
}
