use serde::{Deserialize, Serialize};

use crate::embed::WindowPair;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

use super::data::NormalizerStats;
use super::train::predict_windows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub name: String,
    pub mse: f64,
    pub mae: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
}

/// Forecast errors over a set of windows. `mse`/`mae` are on the
/// normalized scale; the `_raw` fields are in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
    pub per_channel: Vec<ChannelMetrics>,
    pub windows: usize,
}

/// Scores `[N, H]` normalized predictions against the windows' targets.
pub fn evaluate_predictions(preds: &[Tensor], windows: &[WindowPair], stats: &NormalizerStats) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::contract("evaluation needs at least one window"));
    }
    if preds.len() != windows.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} windows",
            preds.len(),
            windows.len()
        )));
    }
    let n = stats.n_channels();
    // [sq, abs, sq_raw, abs_raw] per channel
    let mut acc = vec![[0.0f64; 4]; n];
    let mut per_channel_count = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        if p.shape() != w.target.shape() || p.shape()[0] != n {
            return Err(Error::Dimension {
                op: "evaluate",
                lhs: p.shape().to_vec(),
                rhs: w.target.shape().to_vec(),
            });
        }
        let h = p.shape()[1];
        for (k, a) in acc.iter_mut().enumerate() {
            let sd = stats.stds[k];
            for (x, y) in p.row(k).iter().zip(w.target.row(k)) {
                let e = x - y;
                a[0] += e * e;
                a[1] += e.abs();
                a[2] += e * e * sd * sd;
                a[3] += e.abs() * sd;
            }
        }
        per_channel_count += h;
    }
    let c = per_channel_count as f64;
    let per_channel: Vec<ChannelMetrics> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| ChannelMetrics {
            name: stats.channel_names.get(k).cloned().unwrap_or_else(|| format!("c{k}")),
            mse: a[0] / c,
            mae: a[1] / c,
            mse_raw: a[2] / c,
            mae_raw: a[3] / c,
        })
        .collect();
    let mean = |f: fn(&ChannelMetrics) -> f64| per_channel.iter().map(f).sum::<f64>() / n as f64;
    Ok(EvalReport {
        mse: mean(|m| m.mse),
        mae: mean(|m| m.mae),
        mse_raw: mean(|m| m.mse_raw),
        mae_raw: mean(|m| m.mae_raw),
        windows: windows.len(),
        per_channel,
    })
}

/// Runs the model over normalized `windows` and scores it.
pub fn evaluate(params: &ModelParams, windows: &[WindowPair], stats: &NormalizerStats) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::contract("evaluation needs at least one window"));
    }
    let preds = predict_windows(params, windows, 16)?;
    evaluate_predictions(&preds, windows, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize) -> NormalizerStats {
        NormalizerStats {
            channel_names: (0..n).map(|k| format!("c{k}")).collect(),
            means: vec![0.0; n],
            stds: vec![2.0; n],
        }
    }

    fn window(target: Vec<f64>, n: usize) -> WindowPair {
        let h = target.len() / n;
        WindowPair {
            input: Tensor::zeros(&[n, 1]),
            target: Tensor::new(vec![n, h], target).unwrap(),
            start: 0,
        }
    }

    #[test]
    fn perfect_predictions() {
        let w = window(vec![1.0, 2.0, 3.0, 4.0], 2);
        let r = evaluate_predictions(&[w.target.clone()], &[w], &stats(2)).unwrap();
        assert_eq!((r.mse, r.mae, r.mse_raw), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_errors() {
        let w = window(vec![0.0; 4], 1);
        let pred = Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let r = evaluate_predictions(&[pred], &[w], &stats(1)).unwrap();
        assert_eq!(r.mse, 0.5);
        assert_eq!(r.mae, 0.5);
        assert_eq!(r.mse_raw, 2.0);
        assert_eq!(r.mae_raw, 1.0);
    }

    #[test]
    fn empty_windows_rejected() {
        assert!(evaluate_predictions(&[], &[], &stats(1)).is_err());
    }
}
