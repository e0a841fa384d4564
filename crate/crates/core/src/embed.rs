//! Delay embedding: series containers, Hankel matrices, patch tokens and
//! sliding windows.
//!
//! A length-`W` segment embedded with dimension `L` gives an `L × m` Hankel
//! matrix (`m = W - L + 1`) whose rows index the delay and whose columns index
//! the window position, so `entry(i, j) = segment[i + j]`. Patches are
//! `p2` rows by `p1` columns; `p1` must divide `m` and `p2` must divide `L`.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N` channels observed at `M` evenly spaced steps, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    values: Tensor,
    channel_names: Vec<String>,
    dt: f64,
}

impl MultivariateSeries {
    /// `values` has shape `[N, M]`.
    pub fn new(values: Tensor, channel_names: Vec<String>, dt: f64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::contract(format!(
                "series values must be [channels, steps], got {:?}",
                values.shape()
            )));
        }
        if channel_names.len() != values.shape()[0] {
            return Err(Error::contract(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.shape()[0]
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::contract(format!("duplicate channel name {dup:?}")));
        }
        if !values.all_finite() {
            return Err(Error::contract("series contains non-finite values"));
        }
        Ok(MultivariateSeries {
            values,
            channel_names,
            dt,
        })
    }

    /// Builds a series from per-channel vectors, naming channels `c0, c1, …`.
    pub fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..channels.len()).map(|i| format!("c{i}")).collect();
        Self::new(Tensor::from_rows(&channels)?, names, 1.0)
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    /// Value of channel `k` at step `t`.
    pub fn at(&self, k: usize, t: usize) -> f64 {
        self.values.data()[k * self.len() + t]
    }

    /// Steps `[start, end)` of every channel.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::contract(format!(
                "time slice [{start}, {end}) invalid for length {}",
                self.len()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..self.n_channels())
            .map(|k| self.channel(k)[start..end].to_vec())
            .collect();
        Self::new(Tensor::from_rows(&rows)?, self.channel_names.clone(), self.dt)
    }

    /// Keeps only the listed channels, in the listed order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("channel selection is empty"));
        }
        let mut rows = Vec::with_capacity(indices.len());
        let mut names = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.n_channels() {
                return Err(Error::contract(format!(
                    "channel {k} out of range for {} channels",
                    self.n_channels()
                )));
            }
            rows.push(self.channel(k).to_vec());
            names.push(self.channel_names[k].clone());
        }
        Self::new(Tensor::from_rows(&rows)?, names, self.dt)
    }

    /// Index of a channel by name.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// Delay-embedded matrix of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    pub channel: usize,
    /// Time index of the top-left entry in the source series.
    pub origin: usize,
    /// `[L, m]`.
    pub matrix: Tensor,
}

impl HankelMatrix {
    pub fn embedding_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn columns(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(&[i, j])
    }
}

/// Embeds `segment` with embedding dimension `l`.
pub fn hankelize(segment: &[f64], l: usize) -> Result<HankelMatrix> {
    let w = segment.len();
    if l < 1 || l > w {
        return Err(Error::contract(format!("embedding dimension {l} must lie in [1, {w}]")));
    }
    let m = w - l + 1;
    let mut data = Vec::with_capacity(l * m);
    for i in 0..l {
        data.extend_from_slice(&segment[i..i + m]);
    }
    Ok(HankelMatrix {
        channel: 0,
        origin: 0,
        matrix: Tensor::new(vec![l, m], data)?,
    })
}

/// Hankel matrix of channel `k` of `series`, starting at step `origin`.
pub fn hankelize_channel(
    series: &MultivariateSeries,
    k: usize,
    origin: usize,
    w_in: usize,
    l: usize,
) -> Result<HankelMatrix> {
    if k >= series.n_channels() || origin + w_in > series.len() {
        return Err(Error::contract(format!(
            "window (channel {k}, origin {origin}, length {w_in}) outside series"
        )));
    }
    let mut h = hankelize(&series.channel(k)[origin..origin + w_in], l)?;
    h.channel = k;
    h.origin = origin;
    Ok(h)
}

/// Patch tokens of one Hankel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `[p, p1·p2]`, one flattened patch per row.
    pub tokens: Tensor,
    /// `(L / p2, m / p1)` row-blocks by column-blocks.
    pub grid: (usize, usize),
    /// `(p1, p2)`: patch width in columns, patch height in rows.
    pub patch_shape: (usize, usize),
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Flat positions (into the Hankel matrix, row-major) of every token element,
/// in token order then within-patch row-major order.
pub fn patch_gather_index(l: usize, m: usize, p1: usize, p2: usize) -> Result<Vec<usize>> {
    check_patch_shape(l, m, p1, p2)?;
    let (rows, cols) = (l / p2, m / p1);
    let mut idx = Vec::with_capacity(l * m);
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..p2 {
                for j in 0..p1 {
                    idx.push((r * p2 + i) * m + c * p1 + j);
                }
            }
        }
    }
    Ok(idx)
}

fn check_patch_shape(l: usize, m: usize, p1: usize, p2: usize) -> Result<()> {
    if p1 == 0 || p2 == 0 || m % p1 != 0 || l % p2 != 0 {
        return Err(Error::contract(format!(
            "patch shape (p1, p2) = ({p1}, {p2}) needs p1 | m = {m} and p2 | L = {l}"
        )));
    }
    Ok(())
}

pub fn patchify(h: &HankelMatrix, p1: usize, p2: usize) -> Result<PatchSequence> {
    let (l, m) = (h.embedding_dim(), h.columns());
    let idx = patch_gather_index(l, m, p1, p2)?;
    let src = h.matrix.data();
    let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
    let p = l * m / (p1 * p2);
    Ok(PatchSequence {
        tokens: Tensor::new(vec![p, p1 * p2], data)?,
        grid: (l / p2, m / p1),
        patch_shape: (p1, p2),
    })
}

/// Reassembles the `[L, m]` matrix from its patches.
pub fn unpatchify(p: &PatchSequence) -> Result<Tensor> {
    let (rows, cols) = p.grid;
    let (p1, p2) = p.patch_shape;
    let consistent = rows > 0
        && cols > 0
        && p1 > 0
        && p2 > 0
        && p.tokens.rank() == 2
        && p.tokens.shape()[0] == rows * cols
        && p.tokens.shape()[1] == p1 * p2;
    if !consistent {
        return Err(Error::contract(format!(
            "patch metadata grid {:?} / shape {:?} inconsistent with tokens {:?}",
            p.grid,
            p.patch_shape,
            p.tokens.shape()
        )));
    }
    let (l, m) = (rows * p2, cols * p1);
    let idx = patch_gather_index(l, m, p1, p2)?;
    let mut out = vec![0.0; l * m];
    for (&dst, &v) in idx.iter().zip(p.tokens.data()) {
        out[dst] = v;
    }
    Tensor::new(vec![l, m], out)
}

/// Supervised sample cut from a series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// `[N, W_in]`.
    pub input: Tensor,
    /// `[N, H]`, starting right where `input` ends.
    pub target: Tensor,
    pub start: usize,
}

/// Sliding windows; window `i` starts at `i · stride`.
pub fn make_windows(
    series: &MultivariateSeries,
    w_in: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if w_in == 0 || horizon == 0 || stride == 0 {
        return Err(Error::contract(format!(
            "window length {w_in}, horizon {horizon} and stride {stride} must be ≥ 1"
        )));
    }
    let m = series.len();
    if m < w_in + horizon {
        return Ok(Vec::new());
    }
    let count = (m - w_in - horizon) / stride + 1;
    let n = series.n_channels();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        let mut input = Vec::with_capacity(n * w_in);
        let mut target = Vec::with_capacity(n * horizon);
        for k in 0..n {
            let ch = series.channel(k);
            input.extend_from_slice(&ch[start..start + w_in]);
            target.extend_from_slice(&ch[start + w_in..start + w_in + horizon]);
        }
        out.push(WindowPair {
            input: Tensor::new(vec![n, w_in], input)?,
            target: Tensor::new(vec![n, horizon], target)?,
            start,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hankel_small_example() {
        let h = hankelize(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(h.matrix.shape(), &[2, 3]);
        assert_eq!(h.matrix.data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hankel_unit_embedding_is_the_segment() {
        let seg = [0.5, -1.0, 2.0];
        let h = hankelize(&seg, 1).unwrap();
        assert_eq!(h.matrix.shape(), &[1, 3]);
        assert_eq!(h.matrix.data(), &seg);
    }

    #[test]
    fn hankel_default_shape() {
        let seg: Vec<f64> = (0..96).map(f64::from).collect();
        let h = hankelize(&seg, 49).unwrap();
        assert_eq!(h.matrix.shape(), &[49, 48]);
    }

    #[test]
    fn hankel_rejects_bad_dimension() {
        assert!(hankelize(&[1.0, 2.0], 0).is_err());
        assert!(hankelize(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn default_patching_gives_56_tokens() {
        let seg: Vec<f64> = (0..96).map(f64::from).collect();
        let h = hankelize(&seg, 49).unwrap();
        let p = patchify(&h, 6, 7).unwrap();
        assert_eq!(p.tokens.shape(), &[56, 42]);
        assert_eq!(p.grid, (7, 8));
    }

    #[test]
    fn single_and_unit_patches() {
        let seg: Vec<f64> = (0..10).map(f64::from).collect();
        let h = hankelize(&seg, 4).unwrap();
        let whole = patchify(&h, 7, 4).unwrap();
        assert_eq!(whole.tokens.shape(), &[1, 28]);
        assert_eq!(whole.tokens.data(), h.matrix.data());
        let unit = patchify(&h, 1, 1).unwrap();
        assert_eq!(unit.tokens.shape(), &[28, 1]);
        assert_eq!(unit.tokens.data(), h.matrix.data());
    }

    #[test]
    fn patch_layout_is_row_major_over_grid() {
        let seg: Vec<f64> = (0..5).map(f64::from).collect();
        // 2×4 matrix [[0,1,2,3],[1,2,3,4]], 2×2 patches → two tokens
        let h = hankelize(&seg, 2).unwrap();
        let p = patchify(&h, 2, 2).unwrap();
        assert_eq!(p.tokens.data(), &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_divisibility_error_names_pair() {
        let seg: Vec<f64> = (0..96).map(f64::from).collect();
        let h = hankelize(&seg, 49).unwrap();
        let msg = patchify(&h, 5, 7).unwrap_err().to_string();
        assert!(msg.contains("(5, 7)"), "{msg}");
    }

    #[test]
    fn unpatchify_rejects_corrupt_grid() {
        let seg: Vec<f64> = (0..10).map(f64::from).collect();
        let h = hankelize(&seg, 4).unwrap();
        let mut p = patchify(&h, 7, 2).unwrap();
        assert_eq!(unpatchify(&p).unwrap(), h.matrix);
        p.grid = (3, 1);
        assert!(unpatchify(&p).is_err());
    }

    #[test]
    fn window_counts() {
        let series = |m: usize| MultivariateSeries::from_channels(vec![(0..m).map(|v| v as f64).collect()]).unwrap();
        assert_eq!(make_windows(&series(192), 96, 96, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&series(191), 96, 96, 1).unwrap().len(), 0);
        assert_eq!(make_windows(&series(200), 96, 96, 1).unwrap().len(), 9);
        let w = make_windows(&series(200), 96, 96, 4).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].start, 8);
        assert_eq!(w[2].input.data()[95] + 1.0, w[2].target.data()[0]);
    }

    #[test]
    fn series_rejects_duplicate_names_and_nan() {
        let v = Tensor::zeros(&[2, 3]);
        assert!(MultivariateSeries::new(v.clone(), vec!["a".into(), "a".into()], 1.0).is_err());
        let mut bad = v;
        bad.data_mut()[1] = f64::NAN;
        assert!(MultivariateSeries::new(bad, vec!["a".into(), "b".into()], 1.0).is_err());
    }
}
