//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every forward operation is recorded on a [`Tape`]; [`Tape::backward`]
//! walks the recording in reverse and returns per-node gradients. The tape
//! is rebuilt for every minibatch, so no graph-level caching exists and
//! gradient clearing is explicit at the parameter level (see [`crate::nn`]).

use crate::error::{Error, Result};
use crate::tensor::{axpy, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// scale * x + shift, elementwise with scalar coefficients.
    Affine {
        x: Var,
        scale: f64,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    AddChanBias {
        x: Var,
        b: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        temp: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        /// Row-wise softmax probabilities saved for the backward pass.
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        dims: ConvDims,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        /// Normalized input, saved for backward.
        xhat: Vec<f64>,
        /// Per-channel 1/sqrt(var + eps) used in the forward pass.
        inv_std: Vec<f64>,
        train: bool,
    },
    Concat {
        parts: Vec<Var>,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    SliceRow {
        x: Var,
        row: usize,
    },
    StackRows {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const KL_CLAMP: f64 = 1e-12;

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), false, Op::Leaf)
    }

    /// Differentiable leaf (a model parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                av.shape, bv.shape
            )));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &av.data, &bv.data, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            needs,
            Op::Matmul { a, b },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    /// scale * x + shift applied elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data.iter().map(|v| scale * v + shift).collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::Affine { x, scale })
    }

    /// x: [N, C], b: [C]; adds b to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if xv.rank() != 2 || bv.numel() != xv.shape[1] {
            return Err(Error::Dimension(format!(
                "add_row_bias: {:?} + {:?}",
                xv.shape, bv.shape
            )));
        }
        let c = xv.shape[1];
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            for (r, bb) in row.iter_mut().zip(&bv.data) {
                *r += bb;
            }
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, Op::AddRowBias { x, b }))
    }

    /// x: [N, C, H, W], b: [C]; adds b per channel.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if xv.rank() != 4 || bv.numel() != xv.shape[1] {
            return Err(Error::Dimension(format!(
                "add_chan_bias: {:?} + {:?}",
                xv.shape, bv.shape
            )));
        }
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let hw = h * w;
        let mut data = xv.data.clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let bb = bv.data[ci];
                for v in &mut data[base..base + hw] {
                    *v += bb;
                }
            }
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, Op::AddChanBias { x, b }))
    }

    pub fn apply_activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv
            .data
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::Activation { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.apply_activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.apply_activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.apply_activation(x, Activation::Tanh)
    }

    /// Row-wise softmax of logits/temp with max-subtraction.
    pub fn softmax_with_temperature(&mut self, x: Var, temp: f64) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::Dimension(format!(
                "softmax expects [N, C], got {:?}",
                xv.shape
            )));
        }
        let c = xv.shape[1];
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data.chunks(c) {
            data.extend(softmax_row(row, temp));
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Softmax { x, temp }))
    }

    /// Mean over the batch of -log softmax(logits)[label]. Classes with
    /// `mask[c] == false` receive a -inf logit before the softmax.
    pub fn cross_entropy_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} vs {} labels",
                lv.shape,
                labels.len()
            )));
        }
        let (n, c) = (lv.shape[0], lv.shape[1]);
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::Dimension(format!(
                    "cross_entropy: mask length {} vs {} classes",
                    m.len(),
                    c
                )));
            }
        }
        for &y in labels {
            if y >= c {
                return Err(Error::Input(format!("label {y} out of range [0, {c})")));
            }
            if let Some(m) = mask {
                if !m[y] {
                    return Err(Error::Input(format!("label {y} is masked out")));
                }
            }
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, row) in lv.data.chunks(c).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if mask.map_or(true, |m| m[j]) && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut z = 0.0;
            for j in 0..c {
                if mask.map_or(true, |m| m[j]) {
                    let e = (row[j] - mx).exp();
                    probs[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            total += z.ln() - (row[labels[i]] - mx);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross_entropy produced non-finite loss".into()));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over the batch of sum_i p_i ln(p_i / q_i). `p` is treated as a
    /// constant (frozen teacher); the gradient flows only into `q`. `q` is
    /// clamped at 1e-12 before the log.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        if pv.shape != qv.shape || pv.rank() != 2 {
            return Err(Error::Dimension(format!(
                "kl_divergence: {:?} vs {:?}",
                pv.shape, qv.shape
            )));
        }
        let c = pv.shape[1];
        for (name, t) in [("p", pv), ("q", qv)] {
            for row in t.data.chunks(c) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-8 || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Input(format!(
                        "kl_divergence: {name} rows must be probability vectors (row sums to {s})"
                    )));
                }
            }
        }
        let n = pv.shape[0];
        let mut total = 0.0;
        for (prow, qrow) in pv.data.chunks(c).zip(qv.data.chunks(c)) {
            for (&pi, &qi) in prow.iter().zip(qrow) {
                if pi > 0.0 {
                    total += pi * (pi / qi.max(KL_CLAMP)).ln();
                }
            }
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("kl_divergence produced non-finite loss".into()));
        }
        let needs = self.needs(q);
        Ok(self.push(Tensor::scalar(loss), needs, Op::KlDiv { p, q }))
    }

    /// 2-D cross-correlation (no kernel flip). x: [N, C, H, W],
    /// k: [O, C, kH, kW].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        if xv.rank() != 4 || kv.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-D input and kernel, got {:?}, {:?}",
                xv.shape, kv.shape
            )));
        }
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if xv.shape[1] != kv.shape[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?}, kernel {:?}",
                xv.shape, kv.shape
            )));
        }
        let (n, cin, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (cout, kh, kw) = (kv.shape[0], kv.shape[2], kv.shape[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = cin * kh * kw;
        let spatial = ho * wo;
        let mut out = vec![0.0; n * cout * spatial];
        let mut col = vec![0.0; ckk * spatial];
        for ni in 0..n {
            im2col(&xv.data[ni * cin * h * w..(ni + 1) * cin * h * w], &dims, &mut col);
            gemm_nn(
                cout,
                ckk,
                spatial,
                &kv.data,
                &col,
                &mut out[ni * cout * spatial..(ni + 1) * cout * spatial],
            );
        }
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor {
                shape: vec![n, cout, ho, wo],
                data: out,
            },
            needs,
            Op::Conv2d { x, k, dims },
        ))
    }

    /// [N, C, H, W] -> [N, C], mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects 4-D, got {:?}",
                xv.shape
            )));
        }
        let (n, c, hw) = (xv.shape[0], xv.shape[1], xv.shape[2] * xv.shape[3]);
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = xv.data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data: out,
            },
            needs,
            Op::GlobalAvgPool { x },
        ))
    }

    /// Batch normalization over [N, C, H, W] with per-channel scale/shift.
    /// Train mode normalizes by batch statistics and updates `running`;
    /// eval mode normalizes by the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: &mut RunningStats,
        train: bool,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::Dimension(format!(
                "batch_norm expects 4-D, got {:?}",
                xv.shape
            )));
        }
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let sv = &self.nodes[scale.0].value;
        let bv = &self.nodes[shift.0].value;
        if sv.numel() != c || bv.numel() != c || running.mean.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm: {} channels, scale {}, shift {}, running {}",
                c,
                sv.numel(),
                bv.numel(),
                running.mean.len()
            )));
        }
        let m = n * h * w;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    mean[ci] += xv.data[base..base + hw].iter().sum::<f64>();
                }
            }
            for mu in &mut mean {
                *mu /= m as f64;
            }
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mu = mean[ci];
                    var[ci] += xv.data[base..base + hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m as f64;
            }
            for ci in 0..c {
                running.mean[ci] = (1.0 - BN_MOMENTUM) * running.mean[ci] + BN_MOMENTUM * mean[ci];
                running.var[ci] = (1.0 - BN_MOMENTUM) * running.var[ci] + BN_MOMENTUM * var[ci];
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, inv, g, b) = (mean[ci], inv_std[ci], sv.data[ci], bv.data[ci]);
                for j in base..base + hw {
                    let xh = (xv.data[j] - mu) * inv;
                    xhat[j] = xh;
                    out[j] = g * xh + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            Tensor {
                shape: xv.shape.clone(),
                data: out,
            },
            needs,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Concatenation along axis 1 ([N, C] or [N, C, H, W]).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let d0 = first.dim(0);
        let rest: usize = first.shape.iter().skip(2).product();
        let tail: Vec<usize> = first.shape.iter().skip(2).copied().collect();
        let mut ctot = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let vtail: Vec<usize> = v.shape.iter().skip(2).copied().collect();
            if v.dim(0) != d0 || vtail != tail || v.rank() != first.rank() {
                return Err(Error::Dimension(format!(
                    "concat_channels: {:?} vs {:?}",
                    first.shape, v.shape
                )));
            }
            ctot += v.dim(1);
        }
        let mut shape = first.shape.clone();
        if shape.len() < 2 {
            shape.push(ctot);
        } else {
            shape[1] = ctot;
        }
        let mut data = vec![0.0; d0 * ctot * rest];
        for i in 0..d0 {
            let mut off = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                let cp = v.dim(1) * rest;
                data[(i * ctot * rest + off)..(i * ctot * rest + off + cp)]
                    .copy_from_slice(&v.data[i * cp..(i + 1) * cp]);
                off += cp;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor { shape, data },
            needs,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Column subset of a [N, C] matrix.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::Dimension(format!(
                "gather_cols expects [N, C], got {:?}",
                xv.shape
            )));
        }
        let (n, c) = (xv.shape[0], xv.shape[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Input(format!("gather_cols: column {bad} out of range")));
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            for &j in cols {
                data.push(xv.data[i * c + j]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, cols.len()],
                data,
            },
            needs,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Single spatial row of a [N, C, H, W] tensor, kept 4-D as [N, C, 1, W].
    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 || row >= xv.shape[2] {
            return Err(Error::Dimension(format!(
                "slice_row {row} of {:?}",
                xv.shape
            )));
        }
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let mut data = Vec::with_capacity(n * c * w);
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h + row) * w;
                data.extend_from_slice(&xv.data[base..base + w]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, 1, w],
                data,
            },
            needs,
            Op::SliceRow { x, row },
        ))
    }

    /// Stack H row slices [N, C, 1, W] back into [N, C, H, W].
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_rows of zero slices".into()));
        }
        let first = self.nodes[parts[0].0].value.shape.clone();
        if first.len() != 4 || first[2] != 1 {
            return Err(Error::Dimension(format!(
                "stack_rows expects [N, C, 1, W] slices, got {first:?}"
            )));
        }
        let (n, c, w) = (first[0], first[1], first[3]);
        let h = parts.len();
        for p in parts {
            if self.nodes[p.0].value.shape != first {
                return Err(Error::Dimension("stack_rows: inconsistent slices".into()));
            }
        }
        let mut data = vec![0.0; n * c * h * w];
        for (t, p) in parts.iter().enumerate() {
            let pv = &self.nodes[p.0].value;
            for ni in 0..n {
                for ci in 0..c {
                    let src = (ni * c + ci) * w;
                    let dst = ((ni * c + ci) * h + t) * w;
                    data[dst..dst + w].copy_from_slice(&pv.data[src..src + w]);
                }
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor {
                shape: vec![n, c, h, w],
                data,
            },
            needs,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != xv.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?}",
                xv.shape, shape
            )));
        }
        let t = Tensor {
            shape,
            data: xv.data.clone(),
        };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape { x }))
    }

    /// Reverse pass from a scalar loss. Gradients for nodes that do not
    /// require gradients are not materialized.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let gout = match g[i].take() {
                Some(go) => go,
                None => continue,
            };
            self.backprop_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Grads { g })
    }

    fn accumulate(&self, g: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut g[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, gout: &[f64], g: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                self.accumulate(g, *a, |ga| gemm_nt(m, n, k, gout, &bv.data, ga));
                self.accumulate(g, *b, |gb| gemm_tn(k, m, n, &av.data, gout, gb));
            }
            Op::Add { a, b } => {
                self.accumulate(g, *a, |ga| axpy(1.0, gout, ga));
                self.accumulate(g, *b, |gb| axpy(1.0, gout, gb));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(g, *a, |ga| {
                    for ((gi, go), bvv) in ga.iter_mut().zip(gout).zip(&bv.data) {
                        *gi += go * bvv;
                    }
                });
                self.accumulate(g, *b, |gb| {
                    for ((gi, go), avv) in gb.iter_mut().zip(gout).zip(&av.data) {
                        *gi += go * avv;
                    }
                });
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(g, *x, |gx| axpy(s, gout, gx));
            }
            Op::AddRowBias { x, b } => {
                let c = self.nodes[b.0].value.numel();
                self.accumulate(g, *x, |gx| axpy(1.0, gout, gx));
                self.accumulate(g, *b, |gb| {
                    for row in gout.chunks(c) {
                        axpy(1.0, row, gb);
                    }
                });
            }
            Op::AddChanBias { x, b } => {
                let xv = &self.nodes[x.0].value;
                let (n, c, hw) = (xv.shape[0], xv.shape[1], xv.shape[2] * xv.shape[3]);
                self.accumulate(g, *x, |gx| axpy(1.0, gout, gx));
                self.accumulate(g, *b, |gb| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            gb[ci] += gout[base..base + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Activation { x, kind } => {
                let yv = &node.value;
                let xv = &self.nodes[x.0].value;
                self.accumulate(g, *x, |gx| match kind {
                    Activation::Relu => {
                        for ((gi, go), xi) in gx.iter_mut().zip(gout).zip(&xv.data) {
                            if *xi > 0.0 {
                                *gi += go;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((gi, go), yi) in gx.iter_mut().zip(gout).zip(&yv.data) {
                            *gi += go * yi * (1.0 - yi);
                        }
                    }
                    Activation::Tanh => {
                        for ((gi, go), yi) in gx.iter_mut().zip(gout).zip(&yv.data) {
                            *gi += go * (1.0 - yi * yi);
                        }
                    }
                });
            }
            Op::Softmax { x, temp } => {
                let yv = &node.value;
                let c = yv.shape[1];
                let t = *temp;
                self.accumulate(g, *x, |gx| {
                    for ((gxr, gor), yr) in gx
                        .chunks_mut(c)
                        .zip(gout.chunks(c))
                        .zip(yv.data.chunks(c))
                    {
                        let dot: f64 = gor.iter().zip(yr).map(|(go, y)| go * y).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gor[j] - dot) / t;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].value.shape[1];
                let n = labels.len();
                let go = gout[0] / n as f64;
                self.accumulate(g, *logits, |gl| {
                    for i in 0..n {
                        for j in 0..c {
                            let mut d = probs[i * c + j];
                            if j == labels[i] {
                                d -= 1.0;
                            }
                            gl[i * c + j] += go * d;
                        }
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let pv = &self.nodes[p.0].value;
                let qv = &self.nodes[q.0].value;
                let n = pv.shape[0];
                let go = gout[0] / n as f64;
                self.accumulate(g, *q, |gq| {
                    for ((gi, pi), qi) in gq.iter_mut().zip(&pv.data).zip(&qv.data) {
                        if *pi > 0.0 {
                            *gi -= go * pi / qi.max(KL_CLAMP);
                        }
                    }
                });
            }
            Op::Conv2d { x, k, dims } => {
                let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                let ckk = dims.cin * dims.kh * dims.kw;
                let spatial = dims.ho * dims.wo;
                let img = dims.cin * dims.h * dims.w;
                // im2col buffers are recomputed here rather than saved.
                let mut col = vec![0.0; ckk * spatial];
                if self.needs(*k) {
                    self.accumulate(g, *k, |gk| {
                        for ni in 0..dims.n {
                            im2col(&xv.data[ni * img..(ni + 1) * img], dims, &mut col);
                            gemm_nt(
                                dims.cout,
                                spatial,
                                ckk,
                                &gout[ni * dims.cout * spatial..(ni + 1) * dims.cout * spatial],
                                &col,
                                gk,
                            );
                        }
                    });
                }
                if self.needs(*x) {
                    let mut colgrad = vec![0.0; ckk * spatial];
                    self.accumulate(g, *x, |gx| {
                        for ni in 0..dims.n {
                            colgrad.iter_mut().for_each(|v| *v = 0.0);
                            gemm_tn(
                                ckk,
                                dims.cout,
                                spatial,
                                &kv.data,
                                &gout[ni * dims.cout * spatial..(ni + 1) * dims.cout * spatial],
                                &mut colgrad,
                            );
                            col2im(&colgrad, dims, &mut gx[ni * img..(ni + 1) * img]);
                        }
                    });
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = &self.nodes[x.0].value;
                let hw = xv.shape[2] * xv.shape[3];
                let scale = 1.0 / hw as f64;
                self.accumulate(g, *x, |gx| {
                    for (i, go) in gout.iter().enumerate() {
                        for v in &mut gx[i * hw..(i + 1) * hw] {
                            *v += go * scale;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[scale.0].value;
                let (n, c, hw) = (xv.shape[0], xv.shape[1], xv.shape[2] * xv.shape[3]);
                let m = (n * hw) as f64;
                // Per-channel sums of g and g * xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for j in base..base + hw {
                            sum_g[ci] += gout[j];
                            sum_gx[ci] += gout[j] * xhat[j];
                        }
                    }
                }
                self.accumulate(g, *shift, |gb| axpy(1.0, &sum_g, gb));
                self.accumulate(g, *scale, |gs| axpy(1.0, &sum_gx, gs));
                self.accumulate(g, *x, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let gamma_inv = sv.data[ci] * inv_std[ci];
                            if *train {
                                for j in base..base + hw {
                                    gx[j] += gamma_inv
                                        * (gout[j]
                                            - sum_g[ci] / m
                                            - xhat[j] * sum_gx[ci] / m);
                                }
                            } else {
                                for j in base..base + hw {
                                    gx[j] += gamma_inv * gout[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let yv = &node.value;
                let d0 = yv.dim(0);
                let rest: usize = yv.shape.iter().skip(2).product();
                let ctot_rest = yv.dim(1) * rest;
                let mut off = 0;
                for p in parts {
                    let cp = self.nodes[p.0].value.dim(1) * rest;
                    let start = off;
                    self.accumulate(g, *p, |gp| {
                        for i in 0..d0 {
                            axpy(
                                1.0,
                                &gout[i * ctot_rest + start..i * ctot_rest + start + cp],
                                &mut gp[i * cp..(i + 1) * cp],
                            );
                        }
                    });
                    off += cp;
                }
            }
            Op::GatherCols { x, cols } => {
                let c = self.nodes[x.0].value.shape[1];
                let n = self.nodes[x.0].value.shape[0];
                self.accumulate(g, *x, |gx| {
                    for i in 0..n {
                        for (jj, &j) in cols.iter().enumerate() {
                            gx[i * c + j] += gout[i * cols.len() + jj];
                        }
                    }
                });
            }
            Op::SliceRow { x, row } => {
                let xv = &self.nodes[x.0].value;
                let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
                self.accumulate(g, *x, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dst = ((ni * c + ci) * h + row) * w;
                            let src = (ni * c + ci) * w;
                            axpy(1.0, &gout[src..src + w], &mut gx[dst..dst + w]);
                        }
                    }
                });
            }
            Op::StackRows { parts } => {
                let yv = &node.value;
                let (n, c, h, w) = (yv.shape[0], yv.shape[1], yv.shape[2], yv.shape[3]);
                for (t, p) in parts.iter().enumerate() {
                    self.accumulate(g, *p, |gp| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let src = ((ni * c + ci) * h + t) * w;
                                let dst = (ni * c + ci) * w;
                                axpy(1.0, &gout[src..src + w], &mut gp[dst..dst + w]);
                            }
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                self.accumulate(g, *x, |gx| axpy(1.0, gout, gx));
            }
        }
    }
}

/// Numerically stable row softmax at temperature `t`.
pub fn softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - mx) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn im2col(img: &[f64], d: &ConvDims, col: &mut [f64]) {
    let spatial = d.ho * d.wo;
    col.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let krow = ((c * d.kh + ki) * d.kw + kj) * spatial;
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let irow = (c * d.h + ii as usize) * d.w;
                    let orow = krow + oi * d.wo;
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if jj >= 0 && jj < d.w as isize {
                            col[orow + oj] = img[irow + jj as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &ConvDims, img: &mut [f64]) {
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let krow = ((c * d.kh + ki) * d.kw + kj) * (d.ho * d.wo);
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let irow = (c * d.h + ii as usize) * d.w;
                    let orow = krow + oi * d.wo;
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if jj >= 0 && jj < d.w as isize {
                            img[irow + jj as usize] += col[orow + oj];
                        }
                    }
                }
            }
        }
    }
}
