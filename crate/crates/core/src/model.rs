//! The Delayformer network.
//!
//! Each channel's input window is delay-embedded into a Hankel matrix, cut
//! into patches, projected to `D`-wide tokens and passed through one shared
//! stack of post-norm transformer blocks. Channel `k` is then decoded by its
//! own affine head into `H` forecast values. Channels never mix in the
//! forward pass; they only meet in the shared encoder weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{patch_gather_index, PatchSequence};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape hyperparameters of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of channels `N` (one decoder head each).
    pub n_channels: usize,
    /// Input window length `W_in`.
    pub w_in: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    /// Embedding dimension `L` (Hankel rows).
    pub embed_dim: usize,
    /// Patch width in Hankel columns.
    pub p1: usize,
    /// Patch height in Hankel rows.
    pub p2: usize,
    /// Token width `D`.
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Hankel columns `m = W_in - L + 1`.
    pub fn hankel_cols(&self) -> usize {
        self.w_in + 1 - self.embed_dim
    }

    /// Tokens per channel, `L·m / (p1·p2)`.
    pub fn n_tokens(&self) -> usize {
        self.embed_dim * self.hankel_cols() / (self.p1 * self.p2)
    }

    pub fn token_width(&self) -> usize {
        self.p1 * self.p2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("n_channels", self.n_channels),
            ("w_in", self.w_in),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("p1", self.p1),
            ("p2", self.p2),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.embed_dim > self.w_in {
            return bad(format!("embed_dim {} exceeds w_in {}", self.embed_dim, self.w_in));
        }
        let m = self.hankel_cols();
        if m % self.p1 != 0 || self.embed_dim % self.p2 != 0 {
            return bad(format!(
                "patch shape (p1, p2) = ({}, {}) needs p1 | m = {m} and p2 | L = {}",
                self.p1, self.p2, self.embed_dim
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!(
                "d_model {} must be even for the sinusoidal table",
                self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub ff_in: Affine,
    pub ff_out: Affine,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

/// All weights of one model: a single shared encoder and `N` decoder heads.
///
/// The heads are stored stacked: `decoder_weight[k]` is the `[p·D, H]`
/// matrix of head `k` and `decoder_bias[k]` its `[H]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_proj: Affine,
    /// Fixed `[p, D]` sinusoidal table, never trained.
    pub pos_encoding: Tensor,
    pub blocks: Vec<EncoderBlockParams>,
    /// `[N, p·D, H]`.
    pub decoder_weight: Tensor,
    /// `[N, H]`.
    pub decoder_bias: Tensor,
}

/// Sinusoidal position table: `sin` on even columns, `cos` on odd ones.
pub fn sinusoidal_pe(p: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 || p == 0 {
        return Err(Error::contract(format!(
            "sinusoidal table needs positive p and even D, got p={p}, D={d}"
        )));
    }
    let mut data = vec![0.0; p * d];
    for pos in 0..p {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![p, d], data)
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn affine(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Affine {
    Affine {
        weight: xavier(rng, &[fan_in, fan_out], fan_in, fan_out),
        bias: Tensor::zeros(&[fan_out]),
    }
}

fn init_decoders(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let flat = cfg.n_tokens() * cfg.d_model;
    let w = xavier(rng, &[cfg.n_channels, flat, cfg.horizon], flat, cfg.horizon);
    (w, Tensor::zeros(&[cfg.n_channels, cfg.horizon]))
}

/// Fresh, seed-deterministic parameters.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let patch_proj = affine(&mut rng, config.token_width(), d);
    let blocks = (0..config.n_blocks)
        .map(|_| EncoderBlockParams {
            query: affine(&mut rng, d, d),
            key: affine(&mut rng, d, d),
            value: affine(&mut rng, d, d),
            output: affine(&mut rng, d, d),
            ff_in: affine(&mut rng, d, config.d_ff),
            ff_out: affine(&mut rng, config.d_ff, d),
            norm1_gain: Tensor::full(&[d], 1.0),
            norm1_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::full(&[d], 1.0),
            norm2_bias: Tensor::zeros(&[d]),
        })
        .collect();
    let (decoder_weight, decoder_bias) = init_decoders(config, &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        patch_proj,
        pos_encoding: sinusoidal_pe(config.n_tokens(), d)?,
        blocks,
        decoder_weight,
        decoder_bias,
    })
}

impl ModelParams {
    /// Names of the trainable tensors, in [`ModelParams::trainable`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = vec!["patch_proj.weight".to_string(), "patch_proj.bias".to_string()];
        for i in 0..self.blocks.len() {
            for part in [
                "query.weight",
                "query.bias",
                "key.weight",
                "key.bias",
                "value.weight",
                "value.bias",
                "output.weight",
                "output.bias",
                "ff_in.weight",
                "ff_in.bias",
                "ff_out.weight",
                "ff_out.bias",
                "norm1.gain",
                "norm1.bias",
                "norm2.gain",
                "norm2.bias",
            ] {
                names.push(format!("blocks.{i}.{part}"));
            }
        }
        names.push("decoder.weight".into());
        names.push("decoder.bias".into());
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_proj.weight, &self.patch_proj.bias];
        for b in &self.blocks {
            out.extend([
                &b.query.weight,
                &b.query.bias,
                &b.key.weight,
                &b.key.bias,
                &b.value.weight,
                &b.value.bias,
                &b.output.weight,
                &b.output.bias,
                &b.ff_in.weight,
                &b.ff_in.bias,
                &b.ff_out.weight,
                &b.ff_out.bias,
                &b.norm1_gain,
                &b.norm1_bias,
                &b.norm2_gain,
                &b.norm2_bias,
            ]);
        }
        out.push(&self.decoder_weight);
        out.push(&self.decoder_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_proj.weight, &mut self.patch_proj.bias];
        for b in &mut self.blocks {
            out.extend([
                &mut b.query.weight,
                &mut b.query.bias,
                &mut b.key.weight,
                &mut b.key.bias,
                &mut b.value.weight,
                &mut b.value.bias,
                &mut b.output.weight,
                &mut b.output.bias,
                &mut b.ff_in.weight,
                &mut b.ff_in.bias,
                &mut b.ff_out.weight,
                &mut b.ff_out.bias,
                &mut b.norm1_gain,
                &mut b.norm1_bias,
                &mut b.norm2_gain,
                &mut b.norm2_bias,
            ]);
        }
        out.push(&mut self.decoder_weight);
        out.push(&mut self.decoder_bias);
        out
    }

    /// Number of tensors belonging to the shared encoder (the leading
    /// entries of [`ModelParams::trainable`]).
    pub fn encoder_tensor_count(&self) -> usize {
        2 + 16 * self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Weights and bias of head `k`.
    pub fn decoder_head(&self, k: usize) -> Result<(&[f64], &[f64])> {
        let n = self.config.n_channels;
        if k >= n {
            return Err(Error::contract(format!(
                "decoder head {k} out of range for {n} channels"
            )));
        }
        let w = self.decoder_weight.len() / n;
        let h = self.config.horizon;
        Ok((
            &self.decoder_weight.data()[k * w..(k + 1) * w],
            &self.decoder_bias.data()[k * h..(k + 1) * h],
        ))
    }

    /// Replaces every decoder head with fresh weights for `n_channels`
    /// channels, keeping the encoder.
    pub fn reinit_decoders(&mut self, n_channels: usize, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.n_channels = n_channels;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_de00);
        let (w, b) = init_decoders(&cfg, &mut rng);
        self.decoder_weight = w;
        self.decoder_bias = b;
        self.config = cfg;
        Ok(())
    }
}

struct AffineVars {
    weight: Var,
    bias: Var,
}

struct BlockVars {
    query: AffineVars,
    key: AffineVars,
    value: AffineVars,
    output: AffineVars,
    ff_in: AffineVars,
    ff_out: AffineVars,
    norm1: (Var, Var),
    norm2: (Var, Var),
}

/// Tape handles for one set of [`ModelParams`].
pub struct ParamVars {
    /// Trainable leaves in [`ModelParams::trainable`] order.
    pub leaves: Vec<Var>,
    patch_proj: AffineVars,
    pos_encoding: Var,
    blocks: Vec<BlockVars>,
    decoder_weight: Var,
    decoder_bias: Var,
}

impl ParamVars {
    /// Places copies of `params` on the tape. With `trainable` the leaves
    /// receive gradients.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let tensors: Vec<Tensor> = params.trainable().into_iter().cloned().collect();
        Self::from_tensors(tape, tensors, &params.pos_encoding, trainable)
    }

    /// Moves the parameter tensors onto the tape without copying; get them
    /// back with [`ParamVars::restore`].
    pub fn register_owned(tape: &mut Tape, params: &mut ModelParams) -> Self {
        let tensors: Vec<Tensor> = params.trainable_mut().into_iter().map(std::mem::take).collect();
        Self::from_tensors(tape, tensors, &params.pos_encoding, true)
    }

    pub fn restore(&self, tape: &mut Tape, params: &mut ModelParams) {
        for (slot, &v) in params.trainable_mut().into_iter().zip(&self.leaves) {
            *slot = tape.take_value(v);
        }
    }

    fn from_tensors(tape: &mut Tape, tensors: Vec<Tensor>, pe: &Tensor, trainable: bool) -> Self {
        let leaves: Vec<Var> = tensors
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Self::from_leaves(tape, leaves, pe)
    }

    /// Wraps leaves already on the tape, given in [`ModelParams::trainable`]
    /// order, and adds the position table `pe` as a constant.
    pub fn from_leaves(tape: &mut Tape, leaves: Vec<Var>, pe: &Tensor) -> Self {
        assert!(
            leaves.len() >= 4 && (leaves.len() - 4) % 16 == 0,
            "{} leaves do not form a parameter layout",
            leaves.len()
        );
        let pos_encoding = tape.constant(pe.clone());
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("leaf count matches layout");
        let aff = |next: &mut dyn FnMut() -> Var| AffineVars {
            weight: next(),
            bias: next(),
        };
        let patch_proj = aff(&mut next);
        let n_blocks = (leaves.len() - 4) / 16;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(BlockVars {
                query: aff(&mut next),
                key: aff(&mut next),
                value: aff(&mut next),
                output: aff(&mut next),
                ff_in: aff(&mut next),
                ff_out: aff(&mut next),
                norm1: (next(), next()),
                norm2: (next(), next()),
            });
        }
        let decoder_weight = next();
        let decoder_bias = next();
        ParamVars {
            leaves,
            patch_proj,
            pos_encoding,
            blocks,
            decoder_weight,
            decoder_bias,
        }
    }
}

/// Source of dropout masks during training; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let n = tape.value(x).len();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mask(x, mask)
        }
        _ => Ok(x),
    }
}

fn apply_affine(tape: &mut Tape, x: Var, a: &AffineVars) -> Result<Var> {
    tape.affine(x, a.weight, a.bias)
}

/// Tokens `[S, p, p1·p2]` → hidden `[S, p, D]`.
fn graph_embed(tape: &mut Tape, tokens: Var, pv: &ParamVars) -> Result<Var> {
    let h = apply_affine(tape, tokens, &pv.patch_proj)?;
    tape.add(h, pv.pos_encoding)
}

fn split_heads(tape: &mut Tape, x: Var, s: usize, p: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[s, p, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[s * heads, p, dh])
}

/// One post-norm block over hidden `[S, p, D]`.
fn graph_block(tape: &mut Tape, h: Var, bv: &BlockVars, cfg: &ModelConfig, rng: &mut DropoutRng<'_>) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    let (s, p, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (cfg.n_heads, d / cfg.n_heads);

    let q = apply_affine(tape, h, &bv.query)?;
    let k = apply_affine(tape, h, &bv.key)?;
    let v = apply_affine(tape, h, &bv.value)?;
    let q = split_heads(tape, q, s, p, heads, dh)?;
    let k = split_heads(tape, k, s, p, heads, dh)?;
    let v = split_heads(tape, v, s, p, heads, dh)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores);
    let ctx = tape.bmm(attn, v, false)?;
    let ctx = tape.reshape(ctx, &[s, heads, p, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[s, p, d])?;
    let msa = apply_affine(tape, ctx, &bv.output)?;
    let msa = dropout(tape, msa, cfg.dropout, rng)?;
    let res = tape.add(h, msa)?;
    let h1 = tape.layer_norm(res, bv.norm1.0, bv.norm1.1, LAYER_NORM_EPS)?;

    let ff = apply_affine(tape, h1, &bv.ff_in)?;
    let ff = tape.gelu(ff);
    let ff = apply_affine(tape, ff, &bv.ff_out)?;
    let ff = dropout(tape, ff, cfg.dropout, rng)?;
    let res = tape.add(h1, ff)?;
    tape.layer_norm(res, bv.norm2.0, bv.norm2.1, LAYER_NORM_EPS)
}

/// Tokens `[S, p, p1·p2]` → encodings `[S, p, D]`.
pub(crate) fn graph_encode(
    tape: &mut Tape,
    tokens: Var,
    pv: &ParamVars,
    cfg: &ModelConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let mut h = graph_embed(tape, tokens, pv)?;
    for bv in &pv.blocks {
        h = graph_block(tape, h, bv, cfg, rng)?;
    }
    Ok(h)
}

/// Encodings `[B·N, p, D]` (window-major) → forecasts `[B, N, H]`.
fn graph_decode(tape: &mut Tape, z: Var, pv: &ParamVars, b: usize, cfg: &ModelConfig) -> Result<Var> {
    let n = tape.value(pv.decoder_weight).shape()[0];
    let flat = cfg.n_tokens() * cfg.d_model;
    let h = cfg.horizon;
    let z = tape.reshape(z, &[b, n, flat])?;
    let z = if b == 1 {
        tape.reshape(z, &[n, 1, flat])?
    } else {
        tape.permute(z, &[1, 0, 2])?
    };
    let y = tape.bmm(z, pv.decoder_weight, false)?;
    let bias = tape.reshape(pv.decoder_bias, &[n, 1, h])?;
    let y = tape.add(y, bias)?;
    if b == 1 {
        tape.reshape(y, &[1, n, h])
    } else {
        tape.permute(y, &[1, 0, 2])
    }
}

/// Gathers `[B, N, W_in]` windows into patch tokens `[B·N, p, p1·p2]`.
pub fn tokenize_batch(batch: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if batch.rank() != 3 || batch.shape()[1] != cfg.n_channels || batch.shape()[2] != cfg.w_in {
        return Err(Error::Dimension {
            op: "forward",
            lhs: batch.shape().to_vec(),
            rhs: vec![0, cfg.n_channels, cfg.w_in],
        });
    }
    let (l, m) = (cfg.embed_dim, cfg.hankel_cols());
    // Hankel entry (i, j) is window[i + j].
    let index: Vec<usize> = patch_gather_index(l, m, cfg.p1, cfg.p2)?
        .into_iter()
        .map(|flat| flat / m + flat % m)
        .collect();
    let seqs = batch.shape()[0] * cfg.n_channels;
    let mut data = Vec::with_capacity(seqs * index.len());
    for s in 0..seqs {
        let window = &batch.data()[s * cfg.w_in..(s + 1) * cfg.w_in];
        data.extend(index.iter().map(|&i| window[i]));
    }
    Tensor::new(vec![seqs, cfg.n_tokens(), cfg.token_width()], data)
}

/// Records the full forward pass for a `[B, N, W_in]` batch and returns the
/// `[B, N, H]` forecast node.
pub fn forward_graph(
    tape: &mut Tape,
    batch: &Tensor,
    pv: &ParamVars,
    cfg: &ModelConfig,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    let b = batch.shape().first().copied().unwrap_or(0);
    let tokens = tape.constant(tokenize_batch(batch, cfg)?);
    let z = graph_encode(tape, tokens, pv, cfg, &mut rng)?;
    graph_decode(tape, z, pv, b, cfg)
}

/// Forecasts `[B, N, H]` for normalized inputs `[B, N, W_in]`.
pub fn forward(batch: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let out = forward_graph(&mut tape, batch, &pv, &params.config, None)?;
    Ok(tape.take_value(out))
}

fn check_patches(patches: &PatchSequence, cfg: &ModelConfig) -> Result<()> {
    let want = [cfg.n_tokens(), cfg.token_width()];
    if patches.tokens.shape() != want {
        return Err(Error::contract(format!(
            "patch tokens {:?} do not match model tokens {want:?}",
            patches.tokens.shape()
        )));
    }
    Ok(())
}

/// First hidden state `[p, D]`: affine projection of each patch plus the
/// position table.
pub fn embed_tokens(patches: &PatchSequence, params: &ModelParams) -> Result<Tensor> {
    check_patches(patches, &params.config)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let (p, w) = (patches.len(), patches.token_width());
    let tokens = tape.constant(patches.tokens.clone().reshape(&[1, p, w])?);
    let h = graph_embed(&mut tape, tokens, &pv)?;
    tape.take_value(h).reshape(&[p, params.config.d_model])
}

/// Applies one encoder block to a `[p, D]` hidden state.
pub fn encoder_block(hidden: &Tensor, block: &EncoderBlockParams, n_heads: usize) -> Result<Tensor> {
    if hidden.rank() != 2 {
        return Err(Error::contract(format!(
            "hidden state must be [p, D], got {:?}",
            hidden.shape()
        )));
    }
    let (p, d) = (hidden.shape()[0], hidden.shape()[1]);
    if n_heads == 0 || d % n_heads != 0 || block.query.weight.shape() != [d, d] {
        return Err(Error::Dimension {
            op: "encoder_block",
            lhs: hidden.shape().to_vec(),
            rhs: block.query.weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let aff = |a: &Affine, c: &mut dyn FnMut(&Tensor) -> Var| AffineVars {
        weight: c(&a.weight),
        bias: c(&a.bias),
    };
    let bv = BlockVars {
        query: aff(&block.query, &mut c),
        key: aff(&block.key, &mut c),
        value: aff(&block.value, &mut c),
        output: aff(&block.output, &mut c),
        ff_in: aff(&block.ff_in, &mut c),
        ff_out: aff(&block.ff_out, &mut c),
        norm1: (c(&block.norm1_gain), c(&block.norm1_bias)),
        norm2: (c(&block.norm2_gain), c(&block.norm2_bias)),
    };
    let cfg = ModelConfig {
        n_channels: 1,
        w_in: 1,
        horizon: 1,
        embed_dim: 1,
        p1: 1,
        p2: 1,
        d_model: d,
        n_blocks: 1,
        n_heads,
        d_ff: block.ff_in.weight.shape()[1],
        dropout: 0.0,
        seed: 0,
    };
    let h = tape.constant(hidden.clone().reshape(&[1, p, d])?);
    let out = graph_block(&mut tape, h, &bv, &cfg, &mut None)?;
    tape.take_value(out).reshape(&[p, d])
}

/// Shared-encoder representation `Z_k` (`[p, D]`) of one channel's patches.
pub fn encode_channel(patches: &PatchSequence, params: &ModelParams) -> Result<Tensor> {
    check_patches(patches, &params.config)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let (p, w) = (patches.len(), patches.token_width());
    let tokens = tape.constant(patches.tokens.clone().reshape(&[1, p, w])?);
    let z = graph_encode(&mut tape, tokens, &pv, &params.config, &mut None)?;
    tape.take_value(z).reshape(&[p, params.config.d_model])
}

/// Head `k` applied to the flattened `Z_k`; returns `H` values.
pub fn decode_channel(z: &Tensor, k: usize, params: &ModelParams) -> Result<Vec<f64>> {
    let (w, b) = params.decoder_head(k)?;
    let h = params.config.horizon;
    let flat = z.len();
    if flat * h != w.len() {
        return Err(Error::Dimension {
            op: "decode_channel",
            lhs: z.shape().to_vec(),
            rhs: vec![w.len() / h, h],
        });
    }
    let mut out = b.to_vec();
    for (i, &zi) in z.data().iter().enumerate() {
        let row = &w[i * h..(i + 1) * h];
        for (o, &wi) in out.iter_mut().zip(row) {
            *o += zi * wi;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{hankelize, patchify};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_channels: 2,
            w_in: 12,
            horizon: 4,
            embed_dim: 5,
            p1: 4,
            p2: 5,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn pe_reference_values() {
        let pe = sinusoidal_pe(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe(4, 5).is_err());
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        assert_eq!(a.decoder_weight.shape()[0], cfg.n_channels);
        assert!(a.blocks.iter().all(|b| b.norm1_gain.data().iter().all(|&g| g == 1.0)));
        assert!(a.decoder_head(2).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_config();
        cfg.p1 = 3;
        assert!(init_params(&cfg, 0).is_err());
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(init_params(&cfg, 0).is_err());
    }

    fn patches_for(segment: &[f64], cfg: &ModelConfig) -> PatchSequence {
        patchify(&hankelize(segment, cfg.embed_dim).unwrap(), cfg.p1, cfg.p2).unwrap()
    }

    #[test]
    fn zero_patches_embed_to_position_table() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let patches = patches_for(&[0.0; 12], &cfg);
        let h = embed_tokens(&patches, &params).unwrap();
        assert_eq!(h.shape(), &[2, 8]);
        assert_eq!(h, params.pos_encoding);
    }

    #[test]
    fn embedding_is_affine() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let e = |s: &[f64]| {
            let h = embed_tokens(&patches_for(s, &cfg), &params).unwrap();
            h.data()
                .iter()
                .zip(params.pos_encoding.data())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
        };
        let (ex, ey, ec) = (e(&x), e(&y), e(&combo));
        for i in 0..ec.len() {
            assert!((ec[i] - (2.0 * ex[i] - 0.5 * ey[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let p = patchify(&hankelize(&[0.0; 12], 5).unwrap(), 8, 5).unwrap();
        assert!(embed_tokens(&p, &params).is_err());
    }

    #[test]
    fn singleton_attention_reduces_to_value_output_path() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 4).unwrap();
        let blk = &params.blocks[0];
        let token: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let hidden = Tensor::new(vec![1, 8], token.clone()).unwrap();
        let got = encoder_block(&hidden, blk, 2).unwrap();

        // Hand-rolled: msa = (h·Wv + bv)·Wo + bo, then the two post-norm residuals.
        use crate::tensor::{gelu, layer_norm, matmul};
        let lin = |x: &Tensor, a: &Affine| {
            let y = matmul(x, &a.weight).unwrap();
            let data = y
                .data()
                .iter()
                .zip(a.bias.data().iter().cycle())
                .map(|(p, q)| p + q)
                .collect();
            Tensor::new(y.shape().to_vec(), data).unwrap()
        };
        let add = |a: &Tensor, b: &Tensor| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect(),
            )
            .unwrap()
        };
        let msa = lin(&lin(&hidden, &blk.value), &blk.output);
        let h1 = layer_norm(&add(&hidden, &msa), &blk.norm1_gain, &blk.norm1_bias, LAYER_NORM_EPS).unwrap();
        let ff = lin(&gelu(&lin(&h1, &blk.ff_in)), &blk.ff_out);
        let want = layer_norm(&add(&h1, &ff), &blk.norm2_gain, &blk.norm2_bias, LAYER_NORM_EPS).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_blocks_encode_to_embedding() {
        let mut cfg = tiny_config();
        cfg.n_blocks = 0;
        let params = init_params(&cfg, 2).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let p = patches_for(&x, &cfg);
        assert_eq!(encode_channel(&p, &params).unwrap(), embed_tokens(&p, &params).unwrap());
    }

    #[test]
    fn zero_head_returns_bias() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 2).unwrap();
        params.decoder_weight = Tensor::zeros(params.decoder_weight.shape());
        params
            .decoder_bias
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let z = Tensor::full(&[2, 8], 0.5);
        assert_eq!(decode_channel(&z, 1, &params).unwrap(), vec![5.0, 6.0, 7.0, 8.0]);
        assert!(decode_channel(&z, 2, &params).is_err());
    }

    #[test]
    fn batched_forward_matches_per_channel_pipeline() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3).unwrap();
        let xs: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = Tensor::new(vec![1, 2, 12], xs.clone()).unwrap();
        let out = forward(&batch, &params).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4]);
        for k in 0..2 {
            let z = encode_channel(&patches_for(&xs[k * 12..(k + 1) * 12], &cfg), &params).unwrap();
            let f = decode_channel(&z, k, &params).unwrap();
            for (a, b) in f.iter().zip(&out.data()[k * 4..(k + 1) * 4]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3).unwrap();
        assert!(forward(&Tensor::zeros(&[1, 3, 12]), &params).is_err());
        assert!(forward(&Tensor::zeros(&[1, 2, 11]), &params).is_err());
    }
}
