//! Reference forecasters: last-value persistence and closed-form ridge.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::embed::WindowPair;
use crate::error::{Error, Result};
use crate::tensor::ops::{gemm, MatView};
use crate::tensor::Tensor;

/// Repeats each channel's last observed value `horizon` times.
pub fn persistence_baseline(window: &Tensor, horizon: usize) -> Result<Tensor> {
    if window.rank() != 2 || horizon == 0 {
        return Err(Error::contract(format!(
            "persistence needs an [N, W_in] window and horizon ≥ 1, got {:?} and {horizon}",
            window.shape()
        )));
    }
    let n = window.shape()[0];
    let data = (0..n)
        .flat_map(|k| {
            let last = *window.row(k).last().expect("W_in ≥ 1");
            std::iter::repeat_n(last, horizon)
        })
        .collect();
    Tensor::new(vec![n, horizon], data)
}

/// Linear map from a flattened `[N, W_in]` window to a flattened `[N, H]`
/// forecast, with an unregularized intercept.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeBaseline {
    pub n_channels: usize,
    pub w_in: usize,
    pub horizon: usize,
    pub lambda: f64,
    /// `[(N·W_in + 1), N·H]`, intercept in the last row.
    pub weights: Vec<f64>,
}

/// Gram matrices `XᵀX` and `XᵀY` with a trailing constant feature.
struct Normal {
    features: usize,
    outputs: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
}

fn normal_equations(windows: &[WindowPair]) -> Result<Normal> {
    let first = windows
        .first()
        .ok_or_else(|| Error::contract("ridge needs at least one training window"))?;
    let f = first.input.len() + 1;
    let o = first.target.len();
    let s = windows.len();
    let mut x = Vec::with_capacity(s * f);
    let mut y = Vec::with_capacity(s * o);
    for w in windows {
        if w.input.len() + 1 != f || w.target.len() != o {
            return Err(Error::Dimension {
                op: "ridge",
                lhs: first.input.shape().to_vec(),
                rhs: w.input.shape().to_vec(),
            });
        }
        x.extend_from_slice(w.input.data());
        x.push(1.0);
        y.extend_from_slice(w.target.data());
    }
    let mut xtx = vec![0.0; f * f];
    gemm(&x, MatView::dense(s, f).t(), &x, MatView::dense(s, f), &mut xtx, 0.0);
    let mut xty = vec![0.0; f * o];
    gemm(&x, MatView::dense(s, f).t(), &y, MatView::dense(s, o), &mut xty, 0.0);
    Ok(Normal {
        features: f,
        outputs: o,
        xtx,
        xty,
    })
}

fn solve(normal: &Normal, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("ridge λ must be ≥ 0, got {lambda}")));
    }
    let f = normal.features;
    let mut a = DMatrix::from_row_slice(f, f, &normal.xtx);
    for i in 0..f - 1 {
        a[(i, i)] += lambda;
    }
    let singular = || Error::Solver(format!("normal matrix is singular at λ = {lambda}; use λ > 0"));
    let chol = Cholesky::new(a).ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d * d), hi.max(d * d)));
    if !(lo > hi * 1e-13) {
        return Err(singular());
    }
    // A⁻¹ once, then one GEMM for all outputs.
    let inv = chol.inverse();
    let mut w = vec![0.0; f * normal.outputs];
    // `inv` is symmetric, so its column-major storage reads as row-major.
    gemm(
        inv.as_slice(),
        MatView::dense(f, f),
        &normal.xty,
        MatView::dense(f, normal.outputs),
        &mut w,
        0.0,
    );
    Ok(w)
}

impl RidgeBaseline {
    /// Closed-form fit `W = (XᵀX + λI)⁻¹XᵀY`.
    pub fn fit(windows: &[WindowPair], lambda: f64) -> Result<Self> {
        let normal = normal_equations(windows)?;
        Self::from_normal(windows, &normal, lambda)
    }

    fn from_normal(windows: &[WindowPair], normal: &Normal, lambda: f64) -> Result<Self> {
        let first = &windows[0];
        Ok(RidgeBaseline {
            n_channels: first.input.shape()[0],
            w_in: first.input.shape()[1],
            horizon: first.target.shape()[1],
            lambda,
            weights: solve(normal, lambda)?,
        })
    }

    /// Fits once per candidate λ and keeps the one with the lowest MSE on
    /// `val`. The Gram matrices are shared across candidates.
    pub fn fit_select(train: &[WindowPair], val: &[WindowPair], lambdas: &[f64]) -> Result<Self> {
        let normal = normal_equations(train)?;
        let mut best: Option<(f64, RidgeBaseline)> = None;
        for &lambda in lambdas {
            let model = match Self::from_normal(train, &normal, lambda) {
                Ok(m) => m,
                Err(Error::Solver(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut sse = 0.0;
            let mut count = 0;
            for w in val {
                let p = model.predict(&w.input)?;
                sse += p
                    .data()
                    .iter()
                    .zip(w.target.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                count += p.len();
            }
            let mse = sse / count.max(1) as f64;
            if best.as_ref().is_none_or(|(b, _)| mse < *b) {
                best = Some((mse, model));
            }
        }
        best.map(|(_, m)| m)
            .ok_or_else(|| Error::Solver("no candidate λ gave a solvable system".into()))
    }

    pub fn predict(&self, window: &Tensor) -> Result<Tensor> {
        if window.shape() != [self.n_channels, self.w_in] {
            return Err(Error::Dimension {
                op: "ridge_predict",
                lhs: window.shape().to_vec(),
                rhs: vec![self.n_channels, self.w_in],
            });
        }
        let o = self.n_channels * self.horizon;
        let f = window.len();
        let mut out = self.weights[f * o..(f + 1) * o].to_vec();
        for (i, &x) in window.data().iter().enumerate() {
            let row = &self.weights[i * o..(i + 1) * o];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
        Tensor::new(vec![self.n_channels, self.horizon], out)
    }

    /// Weight from input feature `feature` to output `output` (flattened
    /// channel-major indices).
    pub fn weight(&self, feature: usize, output: usize) -> f64 {
        self.weights[feature * self.n_channels * self.horizon + output]
    }
}
