//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep. Gradients add
//! across fan-out. A tape is built fresh for every forward pass.

use super::ops::{self, MatView};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Mask {
        a: usize,
        mask: Vec<f64>,
    },
    Sum(usize),
    MeanSquaredError {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Moves a node's value out, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    /// Matrix product. `a` may carry leading axes (`[.., K]`), which are
    /// flattened into rows; `b` must be `K×C`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.rank() == 2 {
            ops::matmul(av, bv)?
        } else {
            let k = *av.shape().last().expect("non-empty shape");
            if bv.rank() != 2 || bv.shape()[0] != k {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let (r, c) = (av.len() / k, bv.shape()[1]);
            let mut out = vec![0.0; r * c];
            ops::gemm(
                &av.data,
                MatView::dense(r, k),
                &bv.data,
                MatView::dense(k, c),
                &mut out,
                0.0,
            );
            let mut shape = av.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = c;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// `x·W + b` over the last axis of `x` (rank ≥ 2), with `W: [K, C]` and
    /// `b: [C]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let k = *xv.shape().last().expect("non-empty shape");
        if xv.rank() < 2 || wv.rank() != 2 || wv.shape()[0] != k || bv.shape() != [wv.shape()[1]] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.len() / k, wv.shape()[1]);
        let mut out = Vec::with_capacity(r * c);
        for _ in 0..r {
            out.extend_from_slice(&bv.data);
        }
        ops::gemm(
            &xv.data,
            MatView::dense(r, k),
            &wv.data,
            MatView::dense(k, c),
            &mut out,
            1.0,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = c;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Affine { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Batched product; see [`ops::bmm`].
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = ops::bmm(self.value(a), self.value(b), trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = ops::gelu(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a.0), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = ops::softmax_lastdim(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a.0), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = ops::check_layer_norm(xv, gv, bv, eps)?;
        let parts = ops::layer_norm_parts(xv.data(), d, gv.data(), bv.data(), eps);
        let value = Tensor::new(xv.shape().to_vec(), parts.out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat: parts.xhat,
            rstd: parts.rstd,
        };
        Ok(self.push(value, op, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = ops::permute(self.value(a), axes)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::Dimension {
                op: "mask",
                lhs: src.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mask { a: a.0, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mean_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::Dimension {
                op: "mean_squared_error",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = p.len() as f64;
        let mse = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(mse),
            Op::MeanSquaredError {
                pred: pred.0,
                target: target.0,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf gets an entry; leaves the loss does not depend on
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.trainable {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads)?;
        }

        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                out[i] = Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (k, c) = (bv.shape[0], bv.shape[1]);
                let r = av.len() / k;
                if wants(*a) {
                    // dA += dC · Bᵀ
                    let ga = grad_buf(grads, *a, &av.shape);
                    ops::gemm(
                        &g.data,
                        MatView::dense(r, c),
                        &bv.data,
                        MatView::dense(k, c).t(),
                        ga,
                        1.0,
                    );
                }
                if wants(*b) {
                    // dB += Aᵀ · dC
                    let gb = grad_buf(grads, *b, &bv.shape);
                    ops::gemm(
                        &av.data,
                        MatView::dense(r, k).t(),
                        &g.data,
                        MatView::dense(r, c),
                        gb,
                        1.0,
                    );
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (k, c) = (wv.shape[0], wv.shape[1]);
                let r = xv.len() / k;
                if wants(*x) {
                    let gx = grad_buf(grads, *x, &xv.shape);
                    ops::gemm(
                        &g.data,
                        MatView::dense(r, c),
                        &wv.data,
                        MatView::dense(k, c).t(),
                        gx,
                        1.0,
                    );
                }
                if wants(*w) {
                    let gw = grad_buf(grads, *w, &wv.shape);
                    ops::gemm(
                        &xv.data,
                        MatView::dense(r, k).t(),
                        &g.data,
                        MatView::dense(r, c),
                        gw,
                        1.0,
                    );
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, &[c]);
                    for row in g.data.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (s, r, k) = (av.shape[0], av.shape[1], av.shape[2]);
                let c = g.shape[2];
                let (sa, sb, sc) = (r * k, k * c, r * c);
                if wants(*a) {
                    let ga = grad_buf(grads, *a, &av.shape);
                    // b_i is K×C (or C×K when transposed); dA_i += dC_i · b_iᵀ
                    let bview = if *trans_b {
                        MatView::dense(c, k)
                    } else {
                        MatView::dense(k, c).t()
                    };
                    for i in 0..s {
                        ops::gemm(
                            &g.data[i * sc..(i + 1) * sc],
                            MatView::dense(r, c),
                            &bv.data[i * sb..(i + 1) * sb],
                            bview,
                            &mut ga[i * sa..(i + 1) * sa],
                            1.0,
                        );
                    }
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, &bv.shape);
                    for i in 0..s {
                        let gi = &g.data[i * sc..(i + 1) * sc];
                        let ai = &av.data[i * sa..(i + 1) * sa];
                        let out = &mut gb[i * sb..(i + 1) * sb];
                        if *trans_b {
                            // b_i is C×K: d b_i += dC_iᵀ · a_i
                            ops::gemm(gi, MatView::dense(r, c).t(), ai, MatView::dense(r, k), out, 1.0);
                        } else {
                            ops::gemm(ai, MatView::dense(r, k).t(), gi, MatView::dense(r, c), out, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ash, bsh) = (&val(*a).shape, &val(*b).shape);
                if wants(*b) {
                    if *bsh == g.shape {
                        let mut gb = g.clone();
                        if sign < 0.0 {
                            gb.data.iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(grads, *b, gb);
                    } else {
                        let gb = grad_buf(grads, *b, bsh);
                        ops::for_each_broadcast(ash, bsh, &g.shape, |o, _, j| gb[j] += sign * g.data[o]);
                    }
                }
                if wants(*a) {
                    if *ash == g.shape {
                        accumulate(grads, *a, g);
                    } else {
                        let ga = grad_buf(grads, *a, ash);
                        ops::for_each_broadcast(ash, bsh, &g.shape, |o, i, _| ga[i] += g.data[o]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = grad_buf(grads, *a, &av.shape);
                    ops::for_each_broadcast(&av.shape, &bv.shape, &g.shape, |o, i, j| {
                        ga[i] += g.data[o] * bv.data[j]
                    });
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, &bv.shape);
                    ops::for_each_broadcast(&av.shape, &bv.shape, &g.shape, |o, i, j| {
                        gb[j] += g.data[o] * av.data[i]
                    });
                }
            }
            Op::Scale(a, c) => {
                let mut g = g;
                g.data.iter_mut().for_each(|v| *v *= c);
                accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let mut g = g;
                for (s, &xv) in g.data.iter_mut().zip(&val(*a).data) {
                    *s *= ops::gelu_grad_scalar(xv);
                }
                accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape.last().expect("non-empty shape");
                let ga = grad_buf(grads, *a, &y.shape);
                for ((gr, yr), dr) in g.data.chunks(d).zip(y.data.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gainv = &val(*gain).data;
                let d = gainv.len();
                if wants(*x) {
                    let shape = val(*x).shape.clone();
                    let gx = grad_buf(grads, *x, &shape);
                    let mut gy = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &g.data[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..d {
                            gy[j] = go[j] * gainv[j];
                            mean_gy += gy[j];
                            mean_gyx += gy[j] * xh[j];
                        }
                        mean_gy /= d as f64;
                        mean_gyx /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (gy[j] - mean_gy - xh[j] * mean_gyx);
                        }
                    }
                }
                if wants(*gain) {
                    let shape = val(*gain).shape.clone();
                    let gg = grad_buf(grads, *gain, &shape);
                    for (go, xh) in g.data.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if wants(*bias) {
                    let shape = val(*bias).shape.clone();
                    let gb = grad_buf(grads, *bias, &shape);
                    for go in g.data.chunks(d) {
                        for j in 0..d {
                            gb[j] += go[j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let g = Tensor {
                    shape: val(*a).shape.clone(),
                    data: g.data,
                };
                accumulate(grads, *a, g);
            }
            Op::Permute { a, axes } => {
                accumulate(grads, *a, ops::permute(&g, &ops::inverse_axes(axes))?);
            }
            Op::Mask { a, mask } => {
                let mut g = g;
                g.data.iter_mut().zip(mask).for_each(|(s, m)| *s *= m);
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let shape = val(*a).shape.clone();
                let s = g.data[0];
                grad_buf(grads, *a, &shape).iter_mut().for_each(|d| *d += s);
            }
            Op::MeanSquaredError { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * g.data[0] / p.len() as f64;
                if wants(*pred) {
                    let gp = grad_buf(grads, *pred, &p.shape);
                    for ((d, a), b) in gp.iter_mut().zip(&p.data).zip(&t.data) {
                        *d += scale * (a - b);
                    }
                }
                if wants(*target) {
                    let gt = grad_buf(grads, *target, &t.shape);
                    for ((d, a), b) in gt.iter_mut().zip(&p.data).zip(&t.data) {
                        *d -= scale * (a - b);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `g` into node `i`'s gradient, taking ownership when it is the
/// first contribution.
fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(d, s)| *d += s),
        slot => *slot = Some(g),
    }
}

/// Lazily zero-initialized gradient accumulator for node `i`.
fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}
