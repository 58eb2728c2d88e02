//! Reverse-mode differentiation by operation recording.
//!
//! Every op appends one node holding its output value; `backward` walks the
//! nodes once in reverse, so the recording order is the topological order.

use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Per-channel statistics of one training-mode batchnorm call. `var` is the
/// unbiased estimate, which is what running averages track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        in_ch: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SqL2 {
        x: Var,
    },
    Log {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Gram {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    TileSpatial {
        x: Var,
        plane: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Act { .. } => "activation",
            Op::Linear { .. } => "linear",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Affine { .. } => "affine",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SqL2 { .. } => "sq_l2",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::Gram { .. } => "gram",
            Op::Reshape { .. } => "reshape",
            Op::TileSpatial { .. } => "tile_spatial",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<&str> = self.nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Tape").field("ops", &ops).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, false, Op::Leaf)
    }

    /// Records a trainable input whose gradient `backward` will populate.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, true, Op::Leaf)
    }

    /// Records `t` as a constant copy of `v`'s value; gradient does not flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor of `v`'s shape; zeros when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn push_unchecked(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, rg, op))
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::shape(op, format!("rank {rank}"), shape_str(s)));
        }
        Ok(s)
    }

    /// Strided 2-D cross-correlation: `x[N,C,H,W]`, `w[O,C,K,K]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.expect_rank(OP, x, 4)?.to_vec();
        let ws = self.expect_rank(OP, w, 4)?.to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c || k != k2 {
            return Err(Error::shape(OP, format!("weight [_, {c}, K, K]"), shape_str(&ws)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(OP, format!("bias [{o}]"), shape_str(self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let geom = ConvGeom::forward(c, h, wd, k, stride, pad).ok_or_else(|| {
            Error::invalid(OP, format!("kernel {k}, stride {stride}, pad {pad} do not tile {h}x{wd} exactly"))
        })?;
        let mut out = vec![T::zero(); n * o * geom.col_cols()];
        kernels::conv2d_batch(
            &geom,
            n,
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, &inputs, Op::Conv2d { x, w, b, geom, out_ch: o })
    }

    /// Fractionally strided convolution, the exact adjoint of [`Tape::conv2d`]
    /// with the same weight: `x[N,Ci,H,W]`, `w[Ci,Co,K,K]`, `b[Co]`, output
    /// side `(H-1)·stride - 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let xs = self.expect_rank(OP, x, 4)?.to_vec();
        let ws = self.expect_rank(OP, w, 4)?.to_vec();
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wi, co, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wi != ci || k != k2 {
            return Err(Error::shape(OP, format!("weight [{ci}, _, K, K]"), shape_str(&ws)));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape(OP, format!("bias [{co}]"), shape_str(self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let geom = ConvGeom::transposed(co, h, wd, k, stride, pad)
            .ok_or_else(|| Error::invalid(OP, format!("no valid output size for {h}x{wd}, K={k}, stride {stride}, pad {pad}")))?;
        let mut out = vec![T::zero(); n * co * geom.h * geom.w];
        kernels::conv_transpose2d_batch(
            &geom,
            n,
            ci,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(vec![n, co, geom.h, geom.w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, &inputs, Op::ConvTranspose2d { x, w, b, geom, in_ch: ci })
    }

    /// Per-channel batch normalization over `x[N,C,...]`. In training mode the
    /// returned [`BatchStats`] carry the batch mean and unbiased variance.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batchnorm";
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(OP, "rank >= 2", shape_str(&xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(OP, format!("{name} [{c}]"), shape_str(self.shape(v))));
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid(OP, "eps must be positive"));
        }
        let count = n * plane;
        let eps = lit::<T>(eps);
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch { count });
                }
                let cnt = T::of_f64(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for &v in &xv[base..base + plane] {
                            s = s + v;
                        }
                    }
                    let m = s / cnt;
                    let mut q = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for &v in &xv[base..base + plane] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / cnt;
                }
                let unbiased_scale = cnt / (cnt - T::one());
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased_scale).collect(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(OP, format!("running stats of length {c}"), format!("{}/{}", mean.len(), var.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            t,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Activation::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::Domain {
                        op: "activation",
                        reason: format!("leaky_relu slope {slope} outside (0, 1)"),
                    });
                }
                let s = lit::<T>(slope);
                Box::new(move |v: T| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => Box::new(|v: T| v.tanh()),
            Activation::Sigmoid => Box::new(sigmoid),
        };
        let xt = self.value(x);
        if !xt.is_finite() {
            return Err(Error::NonFinite { op: "activation" });
        }
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, &[x], Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// `y = x·w + b` with `x[N,F]`, `w[F,G]`, `b[G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.expect_rank(OP, x, 2)?.to_vec();
        let ws = self.expect_rank(OP, w, 2)?.to_vec();
        if xs[1] != ws[0] {
            return Err(Error::shape(OP, format!("weight [{}, _]", xs[1]), shape_str(&ws)));
        }
        if self.shape(b) != [ws[1]] {
            return Err(Error::shape(OP, format!("bias [{}]", ws[1]), shape_str(self.shape(b))));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * g];
        kernels::gemm_nn(n, f, g, self.value(x).data(), self.value(w).data(), &mut out);
        let bv = self.value(b).data();
        for row in out.chunks_mut(g) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let t = Tensor::new(vec![n, g], out)?;
        self.push(t, &[x, w, b], Op::Linear { x, w, b })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::shape(OP, shape_str(&sa), shape_str(&sb)));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return Err(Error::shape(OP, shape_str(&sa), shape_str(&sb)));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_inner = sa[axis] * inner;
        let b_inner = sb[axis] * inner;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let t = Tensor::new(shape, out)?;
        self.push(t, &[a, b], Op::Concat { a, b, outer, a_inner, b_inner })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, shape_str(self.shape(a)), shape_str(self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, &[a, b], Op::Sub { a, b })
    }

    /// Elementwise `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (lit::<T>(scale), lit::<T>(shift));
        let xt = self.value(x);
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| s * v + c).collect())?;
        self.push(out, &[x], Op::Affine { x, scale: s })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = seq_sum(self.value(x).data());
        self.push(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s = seq_sum(d) / T::of_f64(d.len() as f64);
        self.push(Tensor::scalar(s), &[x], Op::Mean { x })
    }

    /// `Σ x²` over all elements (the squared ℓ2 / Frobenius norm).
    pub fn sq_l2(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v * v;
        }
        self.push(Tensor::scalar(s), &[x], Op::SqL2 { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if let Some(bad) = xt.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("non-positive argument {bad}"),
            });
        }
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|v| v.ln()).collect())?;
        self.push(out, &[x], Op::Log { x })
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is the identity inside
    /// the interval and zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Domain {
                op: "clamp",
                reason: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let (l, h) = (lit::<T>(lo), lit::<T>(hi));
        let xt = self.value(x);
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| v.max(l).min(h)).collect())?;
        self.push(out, &[x], Op::Clamp { x, lo: l, hi: h })
    }

    /// Per-example Gram matrix `F·Fᵀ / (C·H·W)` where `F` is `A` reshaped to
    /// `C×(H·W)`; `A[N,C,H,W]` maps to `[N,C,C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xs = self.expect_rank("gram", x, 4)?.to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let norm = T::of_f64((c * hw) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * c];
        for i in 0..n {
            let f = &xv[i * c * hw..(i + 1) * c * hw];
            let s = &mut out[i * c * c..(i + 1) * c * c];
            kernels::gemm_nt(c, hw, c, f, f, s);
            s.iter_mut().for_each(|v| *v = *v / norm);
        }
        let t = Tensor::new(vec![n, c, c], out)?;
        self.push(t, &[x], Op::Gram { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, &[x], Op::Reshape { x })
    }

    /// Replicates `x[N,C]` over an `h×w` grid, giving `[N,C,h,w]`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.expect_rank("tile_spatial", x, 2)?.to_vec();
        if h == 0 || w == 0 {
            return Err(Error::invalid("tile_spatial", "empty grid"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(xs[0] * xs[1] * plane);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, plane));
        }
        let t = Tensor::new(vec![xs[0], xs[1], h, w], out)?;
        self.push(t, &[x], Op::TileSpatial { x, plane })
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.expect_rank("cross_entropy", logits, 2)?.to_vec();
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let lv = self.value(logits).data();
        let probs = softmax_rows(lv, k);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + seq_sum_iter(row.iter().map(|&v| (v - mx).exp())).ln();
            loss = loss + (lse - row[l]);
        }
        loss = loss / T::of_f64(n as f64);
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Records an op with a caller-supplied backward rule. The rule receives
    /// the input values, the output value and the output gradient, and returns
    /// one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + 'static,
    ) -> Result<Var> {
        self.push(
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    /// Populates gradients of the scalar `loss` on every node that requires
    /// them. Gradients from multiple uses of a value accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, dg) in contributions {
                let target = &mut self.nodes[v.0];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a = *a + *d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, out_ch } => {
                let n = self.shape(*x)[0];
                let per_out = out_ch * geom.col_cols();
                let cols = geom.col_cols();
                let xv = self.val(*x);
                let wv = self.val(*w);
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                kernels::conv2d_batch_backward(geom, n, *out_ch, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); *out_ch];
                    for i in 0..n {
                        kernels::accumulate_channel_sums(&g[i * per_out..(i + 1) * per_out], cols, &mut db);
                    }
                    out.push((b, db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, in_ch } => {
                let n = self.shape(*x)[0];
                let plane = geom.h * geom.w;
                let per_out = geom.channels * plane;
                let xv = self.val(*x);
                let wv = self.val(*w);
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                if dx.is_some() || dw.is_some() {
                    kernels::conv_transpose2d_batch_backward(geom, n, *in_ch, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut());
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); geom.channels];
                    for i in 0..n {
                        kernels::accumulate_channel_sums(&g[i * per_out..(i + 1) * per_out], plane, &mut db);
                    }
                    out.push((b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let plane: usize = xs[2..].iter().product();
                let gv = self.val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            sum_g[ch] = sum_g[ch] + g[j];
                            sum_gx[ch] = sum_gx[ch] + g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let cnt = T::of_f64((n * plane) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for j in base..base + plane {
                                dx[j] = if *batch_stats {
                                    k * (g[j] - sum_g[ch] / cnt - xhat[j] * sum_gx[ch] / cnt)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::Act { x, kind } => {
                let xv = self.val(*x);
                let yv = node.value.data();
                let dx: Vec<T> = match kind {
                    Activation::Relu => xv.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect(),
                    Activation::LeakyRelu(s) => {
                        let s = lit::<T>(*s);
                        xv.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { d * s }).collect()
                    }
                    Activation::Tanh => yv.iter().zip(g).map(|(&y, &d)| d * (T::one() - y * y)).collect(),
                    Activation::Sigmoid => yv.iter().zip(g).map(|(&y, &d)| d * y * (T::one() - y)).collect(),
                };
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f) = (xs[0], xs[1]);
                let gcols = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    kernels::gemm_nt(n, gcols, f, g, self.val(*w), &mut dx);
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); f * gcols];
                    kernels::gemm_tn(f, n, gcols, self.val(*x), g, &mut dw);
                    out.push((*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); gcols];
                    for row in g.chunks(gcols) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let stride = a_inner + b_inner;
                let mut da = Vec::with_capacity(outer * a_inner);
                let mut db = Vec::with_capacity(outer * b_inner);
                for o in 0..*outer {
                    da.extend_from_slice(&g[o * stride..o * stride + a_inner]);
                    db.extend_from_slice(&g[o * stride + a_inner..(o + 1) * stride]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Affine { x, scale } => out.push((*x, g.iter().map(|&v| v * *scale).collect())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.val(*x).len()])),
            Op::Mean { x } => {
                let len = self.val(*x).len();
                out.push((*x, vec![g[0] / T::of_f64(len as f64); len]));
            }
            Op::SqL2 { x } => {
                let two = lit::<T>(2.0);
                out.push((*x, self.val(*x).iter().map(|&v| two * v * g[0]).collect()));
            }
            Op::Log { x } => out.push((*x, self.val(*x).iter().zip(g).map(|(&v, &d)| d / v).collect())),
            Op::Clamp { x, lo, hi } => out.push((
                *x,
                self.val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect(),
            )),
            Op::Gram { x } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let norm = T::of_f64((c * hw) as f64);
                let xv = self.val(*x);
                let mut dx = vec![T::zero(); xv.len()];
                let mut sym = vec![T::zero(); c * c];
                for i in 0..n {
                    let gi = &g[i * c * c..(i + 1) * c * c];
                    for r in 0..c {
                        for s in 0..c {
                            sym[r * c + s] = (gi[r * c + s] + gi[s * c + r]) / norm;
                        }
                    }
                    kernels::gemm_nn(c, c, hw, &sym, &xv[i * c * hw..(i + 1) * c * hw], &mut dx[i * c * hw..(i + 1) * c * hw]);
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::TileSpatial { x, plane } => {
                out.push((*x, g.chunks(*plane).map(seq_sum).collect()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::of_f64(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * scale);
                out.push((*logits, d));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&vals, &node.value, g);
                for (v, dg) in inputs.iter().zip(grads) {
                    assert_eq!(dg.len(), self.val(*v).len(), "custom backward returned a mis-sized gradient");
                    out.push((*v, dg));
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn seq_sum<T: Real>(d: &[T]) -> T {
    seq_sum_iter(d.iter().copied())
}

fn seq_sum_iter<T: Real>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |a, v| a + v)
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
        }
        let s = seq_sum(dst);
        dst.iter_mut().for_each(|d| *d = *d / s);
    }
    out
}
