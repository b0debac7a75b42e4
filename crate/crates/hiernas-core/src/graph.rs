//! Reverse-mode autodiff over a define-by-run computation graph.
//!
//! A `Graph` is an arena of op records created in topological order (every
//! op consumes already-registered `Var`s). `backward` walks the arena in
//! reverse exactly once and finally pushes leaf gradients into their
//! `Param` handles. One graph serves one forward/backward episode and is
//! confined to a single thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dCfg, PoolKind};
use crate::numeric;
use crate::tensor::{Param, Tensor};

/// Forward mode: batch statistics vs running statistics in batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm statistics, owned by the operator and updated as a
/// side effect of train-mode forwards.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub type BnHandle = Rc<RefCell<BnStats>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<Param> },
    Conv2d { x: Var, w: Var, cfg: Conv2dCfg },
    Pool2d { x: Var, kind: PoolKind, k: usize, stride: usize, padding: usize, argmax: Vec<u32> },
    Relu { x: Var },
    BatchNorm { x: Var, affine: Option<(Var, Var)>, mean: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, c: f32 },
    MulScalarVar { x: Var, s: Var },
    ConcatChannels { xs: Vec<Var> },
    SoftmaxVec { x: Var },
    CrossEntropy { logits: Var, probs: Vec<f32> },
    SumAll { x: Var },
    Row { x: Var, i: usize },
    Index { x: Var, i: usize },
    Shift2d { x: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    col_buf: Vec<f32>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Scalar readout of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient accumulated at a node by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Register a plain tensor; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, rg, Op::Leaf { param: None })
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf { param: None })
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Register a shared parameter; `backward` accumulates into its handle.
    pub fn param(&mut self, p: &Param) -> Var {
        let value = p.value();
        let rg = value.requires_grad;
        self.push(value, rg, Op::Leaf { param: Some(p.clone()) })
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", xs, ws)));
        }
        if stride < 1 || dilation < 1 || groups < 1 || ws[2] < 1 {
            return Err(Error::InvalidArg(format!(
                "conv2d stride={stride} dilation={dilation} groups={groups} k={}",
                ws[2]
            )));
        }
        let (n, c, h, wdim) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if c % groups != 0 || f % groups != 0 {
            return Err(Error::InvalidArg(format!(
                "conv2d groups={groups} does not divide channels C={c} / filters F={f}"
            )));
        }
        if cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {cg} channels/group, input supplies {}", c / groups),
            ));
        }
        let cfg = Conv2dCfg { kernel: kh, stride, padding, dilation, groups };
        let ho = cfg.out_dim(h).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel span exceeds padded height {h}+2*{padding}"))
        })?;
        let wo = cfg.out_dim(wdim).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel span exceeds padded width {wdim}+2*{padding}"))
        })?;
        let mut out = vec![0.0; n * f * ho * wo];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let mut col = std::mem::take(&mut self.col_buf);
            kernels::conv2d_forward(xv, wv, n, c, h, wdim, f, &cfg, ho, wo, &mut out, &mut col);
            self.col_buf = col;
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        Ok(self.push(Tensor::new(vec![n, f, ho, wo], out)?, rg, Op::Conv2d { x, w, cfg }))
    }

    pub fn pool2d(
        &mut self,
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("pool2d", format!("input {:?}", xs)));
        }
        if k < 1 || stride < 1 {
            return Err(Error::InvalidArg(format!("pool2d k={k} stride={stride}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::shape(
                "pool2d",
                format!("window {k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = Vec::new();
        kernels::pool2d_forward(
            &self.nodes[x.0].value.data,
            n, c, h, w, kind, k, stride, padding, ho, wo,
            &mut out, &mut argmax,
        );
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], out)?,
            rg,
            Op::Pool2d { x, kind, k, stride, padding, argmax },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = &self.nodes[x.0].value;
        let data = value.data.iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor { shape: value.shape.clone(), data, requires_grad: false, grad: None };
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, rg, Op::Relu { x })
    }

    /// Per-channel batch norm over `[N,C,H,W]`. Train mode normalizes with
    /// batch statistics and updates the running buffers; eval mode uses the
    /// running buffers. `affine` supplies `(gamma, beta)` vars of shape `[C]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        affine: Option<(Var, Var)>,
        stats: &BnHandle,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n * h * w;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::InvalidArg(format!(
                "batch_norm train mode needs at least 2 elements per channel, got {m}"
            )));
        }
        let (eps, momentum) = {
            let s = stats.borrow();
            if s.running_mean.len() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("stats hold {} channels, input has {c}", s.running_mean.len()),
                ));
            }
            (s.eps, s.momentum)
        };
        if let Some((g, b)) = affine {
            if self.shape(g) != [c] || self.shape(b) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine params must be [{c}], got {:?}/{:?}", self.shape(g), self.shape(b)),
                ));
            }
        }

        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        if train {
            let xv = &self.nodes[x.0].value.data;
            let mut var_b = vec![0.0f64; c];
            for ci in 0..c {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for ni in 0..n {
                    let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for &v in plane {
                        sum += v as f64;
                        sumsq += (v as f64) * (v as f64);
                    }
                }
                let mu = sum / m as f64;
                let var = (sumsq / m as f64 - mu * mu).max(0.0);
                mean[ci] = mu as f32;
                inv_std[ci] = (1.0 / (var + eps as f64).sqrt()) as f32;
                var_b[ci] = var;
            }
            let mut s = stats.borrow_mut();
            for ci in 0..c {
                let unbiased = if m > 1 { var_b[ci] * m as f64 / (m - 1) as f64 } else { var_b[ci] };
                s.running_mean[ci] =
                    (1.0 - momentum) * s.running_mean[ci] + momentum * mean[ci];
                s.running_var[ci] =
                    (1.0 - momentum) * s.running_var[ci] + momentum * unbiased as f32;
            }
        } else {
            let s = stats.borrow();
            for ci in 0..c {
                mean[ci] = s.running_mean[ci];
                inv_std[ci] = 1.0 / (s.running_var[ci] + eps).sqrt();
            }
        }

        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0f32; xv.len()];
        let (gamma_v, beta_v) = match affine {
            Some((g, b)) => (
                Some(self.nodes[g.0].value.data.clone()),
                Some(self.nodes[b.0].value.data.clone()),
            ),
            None => (None, None),
        };
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (scale, shift) = match (&gamma_v, &beta_v) {
                    (Some(g), Some(b)) => (g[ci] * inv_std[ci], b[ci] - g[ci] * inv_std[ci] * mean[ci]),
                    _ => (inv_std[ci], -inv_std[ci] * mean[ci]),
                };
                for i in base..base + h * w {
                    out[i] = xv[i] * scale + shift;
                }
            }
        }
        let mut rg = self.nodes[x.0].requires_grad;
        if let Some((g, b)) = affine {
            rg |= self.nodes[g.0].requires_grad || self.nodes[b.0].requires_grad;
        }
        Ok(self.push(
            Tensor::new(xs, out)?,
            rg,
            Op::BatchNorm { x, affine, mean, inv_std, train },
        ))
    }

    /// `x[N,C] @ w[K,C]^T + b[K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let (n, c, k) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * k];
        kernels::matmul_nt(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            n, c, k,
            &mut out,
        );
        let bv = &self.nodes[b.0].value.data;
        for row in out.chunks_mut(k) {
            for (o, &bias) in row.iter_mut().zip(bv) {
                *o += bias;
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor::new(vec![n, k], out)?, rg, Op::Linear { x, w, b }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0f32; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let s: f32 = plane.iter().sum();
                out[ni * c + ci] = s / (h * w) as f32;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::GlobalAvgPool { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul { a, b }))
    }

    /// Multiply by a compile-time constant.
    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        let value = &self.nodes[x.0].value;
        let data = value.data.iter().map(|&v| v * c).collect();
        let t = Tensor { shape: value.shape.clone(), data, requires_grad: false, grad: None };
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, rg, Op::MulScalar { x, c })
    }

    /// Multiply by a one-element graph value (differentiable in both).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::shape(
                "mul_scalar_var",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.nodes[s.0].value.data[0];
        let value = &self.nodes[x.0].value;
        let data = value.data.iter().map(|&v| v * sv).collect();
        let t = Tensor { shape: value.shape.clone(), data, requires_grad: false, grad: None };
        let rg = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(self.push(t, rg, Op::MulScalarVar { x, s }))
    }

    /// Concatenate `[N,C_i,H,W]` inputs along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat_channels of empty list".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("input {:?}", first)));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} incompatible with {:?}", s, first),
                ));
            }
            c_total += s[1];
        }
        let mut out = vec![0.0f32; n * c_total * h * w];
        for ni in 0..n {
            let mut c_off = 0;
            for &v in xs {
                let s = &self.nodes[v.0].value;
                let ci = s.shape[1];
                let src = &s.data[ni * ci * h * w..(ni + 1) * ci * h * w];
                let dst_base = (ni * c_total + c_off) * h * w;
                out[dst_base..dst_base + ci * h * w].copy_from_slice(src);
                c_off += ci;
            }
        }
        let rg = xs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Tensor::new(vec![n, c_total, h, w], out)?,
            rg,
            Op::ConcatChannels { xs: xs.to_vec() },
        ))
    }

    /// Softmax over a 1-D vector (computed in f64, stored in f32).
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || xs[0] == 0 {
            return Err(Error::shape("softmax", format!("expected non-empty vector, got {:?}", xs)));
        }
        let logits: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| v as f64).collect();
        let probs = numeric::softmax64(&logits)?;
        let data: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(xs, data)?, rg, Op::SoftmaxVec { x }))
    }

    /// Mean negative log-softmax of `logits[N,K]` at `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits {:?}", ls)));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} logit rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArg(format!(
                "cross_entropy label {bad} out of range for {k} classes"
            )));
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for ni in 0..n {
            let row: Vec<f64> = lv[ni * k..(ni + 1) * k].iter().map(|&v| v as f64).collect();
            let lse = numeric::log_sum_exp64(&row);
            loss += lse - row[labels[ni]];
            for (j, &r) in row.iter().enumerate() {
                probs[ni * k + j] = (r - lse).exp() as f32;
            }
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        let rg = self.nodes[logits.0].requires_grad;
        let mut onehot_probs = probs;
        for (ni, &l) in labels.iter().enumerate() {
            // store p - onehot scaled by 1/n: the full logit gradient
            onehot_probs[ni * k + l] -= 1.0;
        }
        let inv_n = 1.0 / n as f32;
        onehot_probs.iter_mut().for_each(|v| *v *= inv_n);
        Ok(self.push(value, rg, Op::CrossEntropy { logits, probs: onehot_probs }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().map(|&v| v as f64).sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s as f32), rg, Op::SumAll { x })
    }

    /// Row `i` of a `[R,C]` matrix as a `[C]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || i >= xs[0] {
            return Err(Error::shape("row", format!("row {i} of {:?}", xs)));
        }
        let c = xs[1];
        let data = self.nodes[x.0].value.data[i * c..(i + 1) * c].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![c], data)?, rg, Op::Row { x, i }))
    }

    /// Element `i` of a vector as a scalar node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || i >= xs[0] {
            return Err(Error::shape("index", format!("element {i} of {:?}", xs)));
        }
        let v = self.nodes[x.0].value.data[i];
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::scalar(v), rg, Op::Index { x, i }))
    }

    /// Drop the first row and column of each spatial plane:
    /// `y[..,h,w] = x[..,h+1,w+1]`. Used by the factorized reduction.
    pub fn shift2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("shift2d", format!("input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0f32; n * c * (h - 1) * (w - 1)];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * (h - 1) * (w - 1)..(nc + 1) * (h - 1) * (w - 1)];
            for hh in 0..h - 1 {
                let s = (hh + 1) * w + 1;
                dst[hh * (w - 1)..(hh + 1) * (w - 1)].copy_from_slice(&src[s..s + w - 1]);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![n, c, h - 1, w - 1], out)?, rg, Op::Shift2d { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates node gradients and pushes
    /// leaf gradients into their `Param` handles (accumulating).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.clone().unwrap();
            self.backprop_node(id, &grad);
        }

        // Push into parameter handles.
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(p) }, Some(g), true) =
                (&node.op, node.grad.as_ref(), node.requires_grad)
            {
                p.0.borrow_mut().accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        debug_assert_eq!(numel, delta.len());
        let slot = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backprop_node(&mut self, id: usize, grad: &[f32]) {
        // Ops only reference earlier nodes, so reads below never alias the
        // accumulation targets' grads.
        enum Delta {
            None,
            One(Var, Vec<f32>),
            Two(Var, Vec<f32>, Var, Vec<f32>),
            Three(Var, Vec<f32>, Var, Vec<f32>, Var, Vec<f32>),
            Many(Vec<(Var, Vec<f32>)>),
        }

        let delta = match &self.nodes[id].op {
            Op::Leaf { .. } => Delta::None,
            Op::Conv2d { x, w, cfg } => {
                let (x, w, cfg) = (*x, *w, *cfg);
                let xs = &self.nodes[x.0].value.shape;
                let ws = &self.nodes[w.0].value.shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let f = ws[0];
                let os = &self.nodes[id].value.shape;
                let (ho, wo) = (os[2], os[3]);
                let mut dx = vec![0.0f32; n * c * h * wd];
                let mut dw = vec![0.0f32; self.nodes[w.0].value.numel()];
                kernels::conv2d_backward(
                    &self.nodes[x.0].value.data,
                    &self.nodes[w.0].value.data,
                    grad,
                    n, c, h, wd, f, &cfg, ho, wo,
                    &mut dx, &mut dw,
                );
                Delta::Two(x, dx, w, dw)
            }
            Op::Pool2d { x, kind, k, stride, padding, argmax } => {
                let (x, kind, k, stride, padding) = (*x, *kind, *k, *stride, *padding);
                let xs = &self.nodes[x.0].value.shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = &self.nodes[id].value.shape;
                let (ho, wo) = (os[2], os[3]);
                let mut dx = vec![0.0f32; n * c * h * w];
                kernels::pool2d_backward(
                    grad, n, c, h, w, kind, k, stride, padding, ho, wo, argmax, &mut dx,
                );
                Delta::One(x, dx)
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f32> = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Delta::One(x, dx)
            }
            Op::BatchNorm { x, affine, mean, inv_std, train } => {
                let (x, affine, train) = (*x, *affine, *train);
                let xs = &self.nodes[x.0].value.shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let m = (n * h * w) as f64;
                let xv = &self.nodes[x.0].value.data;
                let gamma: Option<Vec<f32>> =
                    affine.map(|(g, _)| self.nodes[g.0].value.data.clone());
                let mean = mean.clone();
                let inv_std = inv_std.clone();

                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ci in 0..c {
                    let gma = gamma.as_ref().map_or(1.0, |g| g[ci]);
                    let mu = mean[ci] as f64;
                    let istd = inv_std[ci] as f64;
                    // Channel reductions.
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            let dy = grad[i] as f64;
                            let xhat = (xv[i] as f64 - mu) * istd;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    dbeta[ci] = sum_dy as f32;
                    dgamma[ci] = sum_dy_xhat as f32;
                    let mean_dy = sum_dy / m;
                    let mean_dy_xhat = sum_dy_xhat / m;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            let dy = grad[i] as f64;
                            let g = if train {
                                let xhat = (xv[i] as f64 - mu) * istd;
                                gma as f64 * istd * (dy - mean_dy - xhat * mean_dy_xhat)
                            } else {
                                gma as f64 * istd * dy
                            };
                            dx[i] = g as f32;
                        }
                    }
                }
                match affine {
                    Some((g, b)) => Delta::Three(x, dx, g, dgamma, b, dbeta),
                    None => Delta::One(x, dx),
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = &self.nodes[x.0].value.shape;
                let (n, c) = (xs[0], xs[1]);
                let k = self.nodes[w.0].value.shape[0];
                // dx[N,C] = dout[N,K] * W[K,C]
                let mut dx = vec![0.0f32; n * c];
                kernels::matmul_nn(grad, &self.nodes[w.0].value.data, n, k, c, &mut dx);
                // dW[K,C] = dout^T[K,N] * x[N,C]
                let mut dw = vec![0.0f32; k * c];
                kernels::matmul_tn(grad, &self.nodes[x.0].value.data, k, n, c, &mut dw);
                let mut db = vec![0.0f32; k];
                for row in grad.chunks(k) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                Delta::Three(x, dx, w, dw, b, db)
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let xs = &self.nodes[x.0].value.shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = 1.0 / (h * w) as f32;
                let mut dx = vec![0.0f32; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = grad[ni * c + ci] * inv;
                        let base = (ni * c + ci) * h * w;
                        dx[base..base + h * w].iter_mut().for_each(|v| *v = g);
                    }
                }
                Delta::One(x, dx)
            }
            Op::Add { a, b } => Delta::Two(*a, grad.to_vec(), *b, grad.to_vec()),
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f32> = self.nodes[b.0]
                    .value
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| v * g)
                    .collect();
                let db: Vec<f32> = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| v * g)
                    .collect();
                Delta::Two(a, da, b, db)
            }
            Op::MulScalar { x, c } => {
                let (x, c) = (*x, *c);
                Delta::One(x, grad.iter().map(|&g| g * c).collect())
            }
            Op::MulScalarVar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s.0].value.data[0];
                let dx: Vec<f32> = grad.iter().map(|&g| g * sv).collect();
                let ds: f64 = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| v as f64 * g as f64)
                    .sum();
                Delta::Two(x, dx, s, vec![ds as f32])
            }
            Op::ConcatChannels { xs } => {
                let xs = xs.clone();
                let os = &self.nodes[id].value.shape;
                let (n, c_total, h, w) = (os[0], os[1], os[2], os[3]);
                let mut deltas = Vec::with_capacity(xs.len());
                let mut c_off = 0;
                for &v in &xs {
                    let ci = self.nodes[v.0].value.shape[1];
                    let mut d = vec![0.0f32; n * ci * h * w];
                    for ni in 0..n {
                        let src = (ni * c_total + c_off) * h * w;
                        let dst = ni * ci * h * w;
                        d[dst..dst + ci * h * w].copy_from_slice(&grad[src..src + ci * h * w]);
                    }
                    deltas.push((v, d));
                    c_off += ci;
                }
                Delta::Many(deltas)
            }
            Op::SoftmaxVec { x } => {
                let x = *x;
                let y = &self.nodes[id].value.data;
                let dot: f64 = y.iter().zip(grad).map(|(&p, &g)| p as f64 * g as f64).sum();
                let dx: Vec<f32> = y
                    .iter()
                    .zip(grad)
                    .map(|(&p, &g)| (p as f64 * (g as f64 - dot)) as f32)
                    .collect();
                Delta::One(x, dx)
            }
            Op::CrossEntropy { logits, probs } => {
                let logits = *logits;
                let g0 = grad[0];
                Delta::One(logits, probs.iter().map(|&p| p * g0).collect())
            }
            Op::SumAll { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                Delta::One(x, vec![grad[0]; n])
            }
            Op::Row { x, i } => {
                let (x, i) = (*x, *i);
                let c = self.nodes[x.0].value.shape[1];
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                dx[i * c..(i + 1) * c].copy_from_slice(grad);
                Delta::One(x, dx)
            }
            Op::Index { x, i } => {
                let (x, i) = (*x, *i);
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                dx[i] = grad[0];
                Delta::One(x, dx)
            }
            Op::Shift2d { x } => {
                let x = *x;
                let xs = &self.nodes[x.0].value.shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0f32; n * c * h * w];
                for nc in 0..n * c {
                    let src = nc * (h - 1) * (w - 1);
                    let dst = nc * h * w;
                    for hh in 0..h - 1 {
                        let d = dst + (hh + 1) * w + 1;
                        let s = src + hh * (w - 1);
                        dx[d..d + w - 1].copy_from_slice(&grad[s..s + w - 1]);
                    }
                }
                Delta::One(x, dx)
            }
        };

        match delta {
            Delta::None => {}
            Delta::One(a, da) => self.accum(a, &da),
            Delta::Two(a, da, b, db) => {
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Delta::Three(a, da, b, db, c, dc) => {
                self.accum(a, &da);
                self.accum(b, &db);
                self.accum(c, &dc);
            }
            Delta::Many(ds) => {
                for (v, d) in ds {
                    self.accum(v, &d);
                }
            }
        }
    }
}
