use serde::{Deserialize, Serialize};

use crate::embed::{make_windows, MultivariateSeries, WindowPair};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

use super::TrainConfig;

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.train, self.val, self.test].iter().all(|&r| r > 0.0);
        if !all_positive || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "split ratios must be positive and sum to 1, got ({}, {}, {})",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Segment lengths for a series of `m` steps.
    pub fn lengths(&self, m: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (self.train * m as f64).floor() as usize;
        let val = (self.val * m as f64).floor() as usize;
        Ok((train, val, m - train - val))
    }
}

/// Contiguous, ordered, non-overlapping train/val/test segments.
pub fn split_series(
    series: &MultivariateSeries,
    ratios: &SplitRatios,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    let (a, b, c) = ratios.lengths(series.len())?;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::contract(format!(
            "series of length {} too short for a non-empty three-way split",
            series.len()
        )));
    }
    Ok((
        series.slice_time(0, a)?,
        series.slice_time(a, a + b)?,
        series.slice_time(a + b, a + b + c)?,
    ))
}

/// Per-channel z-score statistics from a training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub channel_names: Vec<String>,
    pub means: Vec<f64>,
    /// Effective standard deviations, already floored at [`NormalizerStats::STD_FLOOR`].
    pub stds: Vec<f64>,
}

impl NormalizerStats {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn n_channels(&self) -> usize {
        self.means.len()
    }

    fn check(&self, series: &MultivariateSeries) -> Result<()> {
        if series.n_channels() != self.n_channels() {
            return Err(Error::contract(format!(
                "normalizer has {} channels, series has {}",
                self.n_channels(),
                series.n_channels()
            )));
        }
        Ok(())
    }

    fn map(&self, series: &MultivariateSeries, f: impl Fn(f64, f64, f64) -> f64) -> Result<MultivariateSeries> {
        self.check(series)?;
        let mut values = series.values().clone();
        let m = series.len();
        for (k, row) in values.data_mut().chunks_mut(m).enumerate() {
            for v in row {
                *v = f(*v, self.means[k], self.stds[k]);
            }
        }
        MultivariateSeries::new(values, series.channel_names().to_vec(), series.dt())
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.map(series, |v, mu, sd| (v - mu) / sd)
    }

    pub fn invert(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.map(series, |v, mu, sd| v * sd + mu)
    }

    /// Inverts a tensor whose second-to-last axis indexes channels
    /// (`[N, T]` or `[B, N, T]`).
    pub fn invert_tensor(&self, t: &Tensor) -> Result<Tensor> {
        self.map_tensor(t, |v, mu, sd| v * sd + mu)
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        self.map_tensor(t, |v, mu, sd| (v - mu) / sd)
    }

    fn map_tensor(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let r = t.rank();
        if r < 2 || t.shape()[r - 2] != self.n_channels() {
            return Err(Error::Dimension {
                op: "normalize",
                lhs: t.shape().to_vec(),
                rhs: vec![self.n_channels()],
            });
        }
        let len = t.shape()[r - 1];
        let n = self.n_channels();
        let mut out = t.clone();
        for (i, row) in out.data_mut().chunks_mut(len).enumerate() {
            let k = i % n;
            for v in row {
                *v = f(*v, self.means[k], self.stds[k]);
            }
        }
        Ok(out)
    }
}

pub fn fit_normalizer(train: &MultivariateSeries) -> NormalizerStats {
    let m = train.len() as f64;
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for k in 0..train.n_channels() {
        let ch = train.channel(k);
        let mean = ch.iter().sum::<f64>() / m;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        means.push(mean);
        stds.push(var.sqrt().max(NormalizerStats::STD_FLOOR));
    }
    NormalizerStats {
        channel_names: train.channel_names().to_vec(),
        means,
        stds,
    }
}

/// Normalized windows for each split, with statistics from the training
/// segment only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub stats: NormalizerStats,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    /// Always cut with stride 1.
    pub test: Vec<WindowPair>,
}

/// Smallest series length giving one training and one validation window.
pub fn min_series_len(model: &ModelConfig, ratios: &SplitRatios) -> usize {
    let need = model.w_in + model.horizon;
    let mut m = need;
    while let Ok((a, b, c)) = ratios.lengths(m) {
        if a >= need && b >= need && c >= 1 {
            break;
        }
        m += 1;
    }
    m
}

pub fn prepare(series: &MultivariateSeries, model: &ModelConfig, tc: &TrainConfig) -> Result<PreparedData> {
    tc.split.validate()?;
    let (train, val, test) = split_series(series, &tc.split)?;
    let stats = fit_normalizer(&train);
    let cut = |s: &MultivariateSeries, stride: usize| -> Result<Vec<WindowPair>> {
        make_windows(&stats.apply(s)?, model.w_in, model.horizon, stride)
    };
    let data = PreparedData {
        train: cut(&train, tc.stride)?,
        val: cut(&val, tc.stride)?,
        test: cut(&test, 1)?,
        stats,
    };
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract(format!(
            "series of length {} yields {} training and {} validation windows; need at least {} steps",
            series.len(),
            data.train.len(),
            data.val.len(),
            min_series_len(model, &tc.split)
        )));
    }
    Ok(data)
}

/// Stacks windows into `([B, N, W_in], [B, N, H])`.
pub fn stack_windows(windows: &[&WindowPair]) -> Result<(Tensor, Tensor)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::contract("cannot stack an empty batch"))?;
    let (n, w) = (first.input.shape()[0], first.input.shape()[1]);
    let h = first.target.shape()[1];
    let mut inputs = Vec::with_capacity(windows.len() * n * w);
    let mut targets = Vec::with_capacity(windows.len() * n * h);
    for win in windows {
        if win.input.shape() != first.input.shape() || win.target.shape() != first.target.shape() {
            return Err(Error::Dimension {
                op: "stack_windows",
                lhs: first.input.shape().to_vec(),
                rhs: win.input.shape().to_vec(),
            });
        }
        inputs.extend_from_slice(win.input.data());
        targets.extend_from_slice(win.target.data());
    }
    let b = windows.len();
    Ok((
        Tensor::new(vec![b, n, w], inputs)?,
        Tensor::new(vec![b, n, h], targets)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(m: usize) -> MultivariateSeries {
        MultivariateSeries::from_channels(vec![(0..m).map(|v| v as f64).collect(), vec![3.0; m]]).unwrap()
    }

    #[test]
    fn split_lengths() {
        let r = SplitRatios::default();
        assert_eq!(r.lengths(5000).unwrap(), (3500, 500, 1000));
        assert_eq!(r.lengths(10).unwrap(), (7, 1, 2));
        let bad = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(bad.lengths(10).is_err());
    }

    #[test]
    fn split_is_contiguous_cover() {
        let s = ramp(10);
        let (a, b, c) = split_series(&s, &SplitRatios::default()).unwrap();
        let joined: Vec<f64> = [a.channel(0), b.channel(0), c.channel(0)].concat();
        assert_eq!(joined, s.channel(0));
    }

    #[test]
    fn normalizer_round_trip_and_constant_channel() {
        let s = MultivariateSeries::from_channels(vec![vec![1.0, -2.5, 7.25, 0.1], vec![3.0; 4]]).unwrap();
        let stats = fit_normalizer(&s);
        let z = stats.apply(&s).unwrap();
        assert!(z.channel(1).iter().all(|&v| v == 0.0));
        let back = stats.invert(&z).unwrap();
        assert!(back.values().max_abs_diff(s.values()) < 1e-12);
    }

    #[test]
    fn normalizer_uses_given_stats_not_target_stats() {
        let train = MultivariateSeries::from_channels(vec![vec![0.0, 2.0]]).unwrap();
        let test = MultivariateSeries::from_channels(vec![vec![10.0, 12.0]]).unwrap();
        let stats = fit_normalizer(&train);
        assert_eq!(stats.apply(&test).unwrap().channel(0), &[9.0, 11.0]);
    }

    #[test]
    fn prepare_reports_minimum_length() {
        let cfg = ModelConfig {
            n_channels: 2,
            w_in: 12,
            horizon: 4,
            embed_dim: 5,
            p1: 4,
            p2: 5,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.0,
            seed: 0,
        };
        let err = prepare(&ramp(40), &cfg, &TrainConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("need at least 160 steps"), "{err}");
        let ok = prepare(&ramp(160), &cfg, &TrainConfig::default()).unwrap();
        assert_eq!(ok.val.len(), 1);
    }
}
