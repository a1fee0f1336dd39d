use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Node, Tape, Var};
use super::{Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// User-supplied backward rule for [`Tape::custom`].
pub trait BackwardRule<T>: Send + Sync {
    /// Returns one optional gradient per input, each of the input's length.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T])
        -> Vec<Option<Vec<T>>>;
}

/// Registered differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    MixNodes,
    PoolNodes,
    Relu,
    Sigmoid,
    Tanh,
    Conv1d,
    ConvTranspose1d,
    MaskedSoftmax,
    BatchNorm1d,
    Dropout,
    Concat,
    Slice,
    Reshape,
    TransposeLast2,
    MeanAxis,
    Sum,
    CrossEntropy,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::MatMul,
        OpKind::MixNodes,
        OpKind::PoolNodes,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Conv1d,
        OpKind::ConvTranspose1d,
        OpKind::MaskedSoftmax,
        OpKind::BatchNorm1d,
        OpKind::Dropout,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::TransposeLast2,
        OpKind::MeanAxis,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::MatMul => "matmul",
            OpKind::MixNodes => "mix_nodes",
            OpKind::PoolNodes => "pool_nodes",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Conv1d => "conv1d",
            OpKind::ConvTranspose1d => "conv_transpose1d",
            OpKind::MaskedSoftmax => "rowwise_softmax",
            OpKind::BatchNorm1d => "batchnorm1d",
            OpKind::Dropout => "dropout",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::TransposeLast2 => "transpose_last2",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    Train { momentum: f64 },
    Eval,
}

/// Running mean/variance buffers of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var },
    MixNodes { adj: Var, h: Var },
    PoolNodes { alpha: Var, h: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv1d { x: Var, kernel: Var, bias: Var, padding: usize },
    ConvTranspose1d { z: Var, kernel: Var, bias: Var },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: Var, scale: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    TransposeLast2(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule<T>> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::MixNodes { adj, h } => vec![*adj, *h],
            Op::PoolNodes { alpha, h } => vec![*alpha, *h],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Tanh(x) => vec![*x],
            Op::Conv1d { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            Op::ConvTranspose1d { z, kernel, bias } => vec![*z, *kernel, *bias],
            Op::MaskedSoftmax { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Dropout { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::Reshape(x) | Op::TransposeLast2(x) => vec![*x],
            Op::MeanAxis { x, .. } => vec![*x],
            Op::Sum(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// Outer/axis/inner decomposition of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Scale(x, c))
    }

    /// Adds `bias[F]` along the last axis of `x[..., F]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let f = *vx.shape().last().unwrap_or(&1);
        if vb.shape() != [f] {
            return shape_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                vb.shape(),
                vx.shape()
            ));
        }
        let b = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + b[i % f])
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Propagates node features through an adjacency:
    /// `out[b,i,:] = sum_j adj[i,j] * h[b,j,:]`.
    pub fn mix_nodes(&mut self, adj: Var, h: Var) -> Result<Var> {
        let (va, vh) = (self.value(adj), self.value(h));
        let (sa, sh) = (va.shape(), vh.shape());
        if sa.len() != 2 || sa[0] != sa[1] || sh.len() != 3 || sh[1] != sa[0] {
            return shape_err(format!(
                "mix_nodes: adjacency {sa:?} incompatible with node features {sh:?}"
            ));
        }
        let (bn, n, d) = (sh[0], sh[1], sh[2]);
        let (ad, hd) = (va.data(), vh.data());
        let mut out = vec![T::zero(); bn * n * d];
        for b in 0..bn {
            for i in 0..n {
                let orow = &mut out[(b * n + i) * d..(b * n + i + 1) * d];
                for j in 0..n {
                    let w = ad[i * n + j];
                    if w == T::zero() {
                        continue;
                    }
                    let hrow = &hd[(b * n + j) * d..(b * n + j + 1) * d];
                    for (o, &hv) in orow.iter_mut().zip(hrow) {
                        *o = *o + w * hv;
                    }
                }
            }
        }
        let t = Tensor::new(sh.to_vec(), out)?;
        Ok(self.push(t, Op::MixNodes { adj, h }))
    }

    /// Weighted node sum: `out[b,:] = sum_i alpha[b,i] * h[b,i,:]`.
    pub fn pool_nodes(&mut self, alpha: Var, h: Var) -> Result<Var> {
        let (va, vh) = (self.value(alpha), self.value(h));
        let (sa, sh) = (va.shape(), vh.shape());
        if sa.len() != 2 || sh.len() != 3 || sa[0] != sh[0] || sa[1] != sh[1] {
            return shape_err(format!(
                "pool_nodes: weights {sa:?} incompatible with node features {sh:?}"
            ));
        }
        let (bn, n, d) = (sh[0], sh[1], sh[2]);
        let (ad, hd) = (va.data(), vh.data());
        let mut out = vec![T::zero(); bn * d];
        for b in 0..bn {
            for i in 0..n {
                let w = ad[b * n + i];
                for k in 0..d {
                    out[b * d + k] = out[b * d + k] + w * hd[(b * n + i) * d + k];
                }
            }
        }
        let t = Tensor::new(vec![bn, d], out)?;
        Ok(self.push(t, Op::PoolNodes { alpha, h }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| sigmoid(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.tanh()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Tanh(x))
    }

    /// Cross-correlation of `x[B,Cin,N]` with `kernel[Cout,Cin,k]`, zero
    /// padding on both ends, stride 1.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(kernel), self.value(bias));
        let (sx, sk) = (vx.shape(), vk.shape());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return shape_err(format!(
                "conv1d: input {sx:?} and kernel {sk:?} disagree on input channels"
            ));
        }
        let (bn, cin, n) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sk[0], sk[2]);
        if vb.shape() != [cout] {
            return shape_err(format!(
                "conv1d: bias {:?} does not match kernel {sk:?}",
                vb.shape()
            ));
        }
        if k == 0 || n + 2 * padding < k {
            return invalid(format!(
                "conv1d: kernel width {k} does not fit length {n} with padding {padding}"
            ));
        }
        let nout = n + 2 * padding - k + 1;
        let (xd, kd, bd) = (vx.data(), vk.data(), vb.data());
        let mut out = vec![T::zero(); bn * cout * nout];
        for b in 0..bn {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                orow.iter_mut().for_each(|e| *e = bd[o]);
                for c in 0..cin {
                    let xrow = &xd[(b * cin + c) * n..(b * cin + c + 1) * n];
                    for j in 0..k {
                        let w = kd[(o * cin + c) * k + j];
                        for (t, ov) in orow.iter_mut().enumerate() {
                            let src = t + j;
                            if src >= padding && src - padding < n {
                                *ov = *ov + w * xrow[src - padding];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bn, cout, nout], out)?;
        Ok(self.push(t, Op::Conv1d { x, kernel, bias, padding }))
    }

    /// Transposed convolution of `z[B,Cin,N]` with `kernel[Cin,Cout,k]`,
    /// output `[B,Cout,N+k-1]`.
    pub fn conv_transpose1d(&mut self, z: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (vz, vk, vb) = (self.value(z), self.value(kernel), self.value(bias));
        let (sz, sk) = (vz.shape(), vk.shape());
        if sz.len() != 3 || sk.len() != 3 || sz[1] != sk[0] {
            return shape_err(format!(
                "conv_transpose1d: input {sz:?} and kernel {sk:?} disagree on input channels"
            ));
        }
        let (bn, cin, n) = (sz[0], sz[1], sz[2]);
        let (cout, k) = (sk[1], sk[2]);
        if vb.shape() != [cout] {
            return shape_err(format!(
                "conv_transpose1d: bias {:?} does not match kernel {sk:?}",
                vb.shape()
            ));
        }
        if k == 0 {
            return invalid("conv_transpose1d: kernel width must be at least 1");
        }
        let nout = n + k - 1;
        let (zd, kd, bd) = (vz.data(), vk.data(), vb.data());
        let mut out = vec![T::zero(); bn * cout * nout];
        for b in 0..bn {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                orow.iter_mut().for_each(|e| *e = bd[o]);
                for c in 0..cin {
                    let zrow = &zd[(b * cin + c) * n..(b * cin + c + 1) * n];
                    for j in 0..k {
                        let w = kd[(c * cout + o) * k + j];
                        for (t, &zv) in zrow.iter().enumerate() {
                            orow[t + j] = orow[t + j] + w * zv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bn, cout, nout], out)?;
        Ok(self.push(t, Op::ConvTranspose1d { z, kernel, bias }))
    }

    /// Row-wise softmax of `x[R,C]` restricted to entries where `mask` is
    /// nonzero. Excluded entries come out as exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        if sx.len() != 2 || mask.shape() != sx {
            return shape_err(format!(
                "rowwise_softmax: input {sx:?} and mask {:?} must be equal 2-D shapes",
                mask.shape()
            ));
        }
        let (r, c) = (sx[0], sx[1]);
        let keep: Vec<bool> = mask.data().iter().map(|&m| m != T::zero()).collect();
        let xd = vx.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let kr = &keep[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for (&v, &k) in row.iter().zip(kr) {
                if k && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return invalid(format!(
                    "rowwise_softmax: row {i} has an empty support (all-zero mask)"
                ));
            }
            let mut total = T::zero();
            for j in 0..c {
                if kr[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total = total + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / total;
            }
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax { x, mask: keep }))
    }

    /// Batch normalization of `x[B,F]` over the batch axis.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let sx = vx.shape();
        if sx.len() != 2 {
            return shape_err(format!("batchnorm1d: expected [B,F] input, got {sx:?}"));
        }
        let (bn, f) = (sx[0], sx[1]);
        if vg.shape() != [f] || vb.shape() != [f] || stats.mean.len() != f || stats.var.len() != f
        {
            return shape_err(format!(
                "batchnorm1d: affine/statistics shapes {:?}/{:?} do not match {f} features",
                vg.shape(),
                vb.shape()
            ));
        }
        let eps = T::c(eps);
        let xd = vx.data();
        let (mean, var) = match mode {
            BatchNormMode::Train { momentum } => {
                if bn < 2 {
                    return invalid(format!(
                        "batchnorm1d: train mode needs a batch of at least 2 rows, got {bn}"
                    ));
                }
                let nb = T::c(bn as f64);
                let mut mean = vec![T::zero(); f];
                for row in xd.chunks(f) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nb);
                let mut var = vec![T::zero(); f];
                for row in xd.chunks(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nb);
                let mom = T::c(momentum);
                let unbias = nb / (nb - T::one());
                for j in 0..f {
                    stats.mean[j] = (T::one() - mom) * stats.mean[j] + mom * mean[j];
                    stats.var[j] = (T::one() - mom) * stats.var[j] + mom * var[j] * unbias;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (vg.data(), vb.data());
        let mut xhat = vec![T::zero(); bn * f];
        let mut out = vec![T::zero(); bn * f];
        for i in 0..bn {
            for j in 0..f {
                let h = (xd[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        let train = matches!(mode, BatchNormMode::Train { .. });
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Inverted dropout with a freshly drawn mask. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("dropout rate {p} outside [0, 1)"));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let scale = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mark_stochastic();
        self.dropout_with_mask(x, scale)
    }

    /// Dropout with a caller-supplied per-element scale (0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if scale.len() != v.len() {
            return shape_err(format!(
                "dropout: mask of {} entries for input {:?}",
                scale.len(),
                v.shape()
            ));
        }
        let data = v.data().iter().zip(&scale).map(|(&e, &s)| e * s).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, scale }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return invalid("concat: no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err(format!(
                "slice: [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            ));
        }
        let (outer, dim, inner) = split_at_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `[B,P,Q] -> [B,Q,P]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return shape_err(format!("transpose_last2: expected 3-D input, got {s:?}"));
        }
        let (b, p, q) = (s[0], s[1], s[2]);
        let d = v.data();
        let mut out = vec![T::zero(); b * p * q];
        for bi in 0..b {
            for i in 0..p {
                for j in 0..q {
                    out[(bi * q + j) * p + i] = d[(bi * p + i) * q + j];
                }
            }
        }
        let t = Tensor::new(vec![b, q, p], out)?;
        Ok(self.push(t, Op::TransposeLast2(x)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err(format!("mean_axis: axis {axis} invalid for {s:?}"));
        }
        let (outer, dim, inner) = split_at_axis(s, axis);
        let inv = T::c(1.0 / dim as f64);
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[(o * dim + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|e| *e = *e * inv);
        let mut shape = s.to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean cross-entropy of softmax(`logits[B,K]`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return invalid(format!("cross_entropy: label {bad} not below {k} classes"));
        }
        let d = v.data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &d[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[labels[i]];
        }
        loss = loss / T::c(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over all entries of `(pred - target)^2`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self, pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::c(p.len() as f64);
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred, target }))
    }

    /// Records an operation with a caller-provided value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn BackwardRule<T>>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// One LSTM step. `w` is `[I+H, 4H]` acting on `concat(x, h_prev)`,
    /// `b` is `[4H]`; gate blocks are ordered input, forget, candidate, output.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        w: Var,
        b: Var,
    ) -> Result<(Var, Var)> {
        let (sx, sh, sc, sw) = (
            self.shape(x).to_vec(),
            self.shape(h_prev).to_vec(),
            self.shape(c_prev).to_vec(),
            self.shape(w).to_vec(),
        );
        if sx.len() != 2 || sh.len() != 2 || sh != sc || sx[0] != sh[0] {
            return shape_err(format!(
                "lstm_cell: x {sx:?}, h {sh:?}, c {sc:?} are inconsistent"
            ));
        }
        let hid = sh[1];
        if sw != [sx[1] + hid, 4 * hid] {
            return shape_err(format!(
                "lstm_cell: weight {sw:?} should be [{}, {}]",
                sx[1] + hid,
                4 * hid
            ));
        }
        let xh = self.concat(&[x, h_prev], 1)?;
        let pre = self.linear(xh, w, b)?;
        let i_pre = self.slice(pre, 1, 0, hid)?;
        let f_pre = self.slice(pre, 1, hid, hid)?;
        let g_pre = self.slice(pre, 1, 2 * hid, hid)?;
        let o_pre = self.slice(pre, 1, 3 * hid, hid)?;
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c_prev)?;
        let ig = self.mul(i, g)?;
        let c = self.add(fc, ig)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok((h, c))
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Accumulates the contribution of node `id` (with upstream gradient `g`)
/// into its inputs' gradient slots.
pub(crate) fn backward<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(grads, nodes, v) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d - gi);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(s) = slot(grads, nodes, *a) {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * vb[i];
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * va[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *c);
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
            }
            if let Some(s) = slot(grads, nodes, *bias) {
                let f = s.len();
                for (i, &gi) in g.iter().enumerate() {
                    s[i % f] = s[i % f] + gi;
                }
            }
        }
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            if let Some(s) = slot(grads, nodes, *a) {
                // dA = G B^T
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        s[i * k + p] = s[i * k + p] + dot;
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                // dB = A^T G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == T::zero() {
                            continue;
                        }
                        let srow = &mut s[p * n..(p + 1) * n];
                        for (d, &gv) in srow.iter_mut().zip(grow) {
                            *d = *d + aip * gv;
                        }
                    }
                }
            }
        }
        Op::MixNodes { adj, h } => {
            let (ta, th) = (val(*adj), val(*h));
            let s3 = th.shape();
            let (bn, n, d) = (s3[0], s3[1], s3[2]);
            let (ad, hd) = (ta.data(), th.data());
            if let Some(s) = slot(grads, nodes, *adj) {
                for b in 0..bn {
                    for i in 0..n {
                        let grow = &g[(b * n + i) * d..(b * n + i + 1) * d];
                        for j in 0..n {
                            let hrow = &hd[(b * n + j) * d..(b * n + j + 1) * d];
                            let dot: T = grow.iter().zip(hrow).map(|(&x, &y)| x * y).sum();
                            s[i * n + j] = s[i * n + j] + dot;
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *h) {
                for b in 0..bn {
                    for i in 0..n {
                        let grow = &g[(b * n + i) * d..(b * n + i + 1) * d];
                        for j in 0..n {
                            let w = ad[i * n + j];
                            if w == T::zero() {
                                continue;
                            }
                            let srow = &mut s[(b * n + j) * d..(b * n + j + 1) * d];
                            for (dv, &gv) in srow.iter_mut().zip(grow) {
                                *dv = *dv + w * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::PoolNodes { alpha, h } => {
            let (ta, th) = (val(*alpha), val(*h));
            let s3 = th.shape();
            let (bn, n, d) = (s3[0], s3[1], s3[2]);
            let (ad, hd) = (ta.data(), th.data());
            if let Some(s) = slot(grads, nodes, *alpha) {
                for b in 0..bn {
                    let grow = &g[b * d..(b + 1) * d];
                    for i in 0..n {
                        let hrow = &hd[(b * n + i) * d..(b * n + i + 1) * d];
                        let dot: T = grow.iter().zip(hrow).map(|(&x, &y)| x * y).sum();
                        s[b * n + i] = s[b * n + i] + dot;
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *h) {
                for b in 0..bn {
                    let grow = &g[b * d..(b + 1) * d];
                    for i in 0..n {
                        let w = ad[b * n + i];
                        let srow = &mut s[(b * n + i) * d..(b * n + i + 1) * d];
                        for (dv, &gv) in srow.iter_mut().zip(grow) {
                            *dv = *dv + w * gv;
                        }
                    }
                }
            }
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..s.len() {
                    if vx[i] > T::zero() {
                        s[i] = s[i] + g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * (T::one() - y[i] * y[i]);
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            bias,
            padding,
        } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let (sx, sk) = (tx.shape(), tk.shape());
            let (bn, cin, n) = (sx[0], sx[1], sx[2]);
            let (cout, k) = (sk[0], sk[2]);
            let pad = *padding;
            let nout = node.value.shape()[2];
            let (xd, kd) = (tx.data(), tk.data());
            if let Some(s) = slot(grads, nodes, *x) {
                for b in 0..bn {
                    for o in 0..cout {
                        let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                        for c in 0..cin {
                            let srow = &mut s[(b * cin + c) * n..(b * cin + c + 1) * n];
                            for j in 0..k {
                                let w = kd[(o * cin + c) * k + j];
                                for (t, &gv) in grow.iter().enumerate() {
                                    let src = t + j;
                                    if src >= pad && src - pad < n {
                                        srow[src - pad] = srow[src - pad] + w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *kernel) {
                for b in 0..bn {
                    for o in 0..cout {
                        let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                        for c in 0..cin {
                            let xrow = &xd[(b * cin + c) * n..(b * cin + c + 1) * n];
                            for j in 0..k {
                                let mut acc = T::zero();
                                for (t, &gv) in grow.iter().enumerate() {
                                    let src = t + j;
                                    if src >= pad && src - pad < n {
                                        acc = acc + gv * xrow[src - pad];
                                    }
                                }
                                let idx = (o * cin + c) * k + j;
                                s[idx] = s[idx] + acc;
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *bias) {
                for b in 0..bn {
                    for (o, so) in s.iter_mut().enumerate() {
                        let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                        *so = *so + grow.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::ConvTranspose1d { z, kernel, bias } => {
            let (tz, tk) = (val(*z), val(*kernel));
            let (sz, sk) = (tz.shape(), tk.shape());
            let (bn, cin, n) = (sz[0], sz[1], sz[2]);
            let (cout, k) = (sk[1], sk[2]);
            let nout = n + k - 1;
            let (zd, kd) = (tz.data(), tk.data());
            if let Some(s) = slot(grads, nodes, *z) {
                for b in 0..bn {
                    for c in 0..cin {
                        let srow = &mut s[(b * cin + c) * n..(b * cin + c + 1) * n];
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                            for j in 0..k {
                                let w = kd[(c * cout + o) * k + j];
                                for (t, sv) in srow.iter_mut().enumerate() {
                                    *sv = *sv + w * grow[t + j];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *kernel) {
                for b in 0..bn {
                    for c in 0..cin {
                        let zrow = &zd[(b * cin + c) * n..(b * cin + c + 1) * n];
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                            for j in 0..k {
                                let acc: T =
                                    zrow.iter().enumerate().map(|(t, &zv)| zv * grow[t + j]).sum();
                                let idx = (c * cout + o) * k + j;
                                s[idx] = s[idx] + acc;
                            }
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *bias) {
                for b in 0..bn {
                    for (o, so) in s.iter_mut().enumerate() {
                        let grow = &g[(b * cout + o) * nout..(b * cout + o + 1) * nout];
                        *so = *so + grow.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::MaskedSoftmax { x, mask } => {
            let y = node.value.data();
            let c = node.value.shape()[1];
            if let Some(s) = slot(grads, nodes, *x) {
                for (r, yrow) in y.chunks(c).enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        if mask[r * c + j] {
                            let idx = r * c + j;
                            s[idx] = s[idx] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let f = inv_std.len();
            let bn = xhat.len() / f;
            let gd = val(*gamma).data().to_vec();
            let mut sum_g = vec![T::zero(); f];
            let mut sum_gx = vec![T::zero(); f];
            for i in 0..bn {
                for j in 0..f {
                    sum_g[j] = sum_g[j] + g[i * f + j];
                    sum_gx[j] = sum_gx[j] + g[i * f + j] * xhat[i * f + j];
                }
            }
            if let Some(s) = slot(grads, nodes, *x) {
                if *train {
                    let nb = T::c(bn as f64);
                    for i in 0..bn {
                        for j in 0..f {
                            let idx = i * f + j;
                            let t = nb * g[idx] - sum_g[j] - xhat[idx] * sum_gx[j];
                            s[idx] = s[idx] + gd[j] * inv_std[j] * t / nb;
                        }
                    }
                } else {
                    for i in 0..bn {
                        for j in 0..f {
                            let idx = i * f + j;
                            s[idx] = s[idx] + g[idx] * gd[j] * inv_std[j];
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *gamma) {
                for j in 0..f {
                    s[j] = s[j] + sum_gx[j];
                }
            }
            if let Some(s) = slot(grads, nodes, *beta) {
                for j in 0..f {
                    s[j] = s[j] + sum_g[j];
                }
            }
        }
        Op::Dropout { x, scale } => {
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * scale[i];
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_at_axis(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let dim = val(v).shape()[*axis];
                if let Some(s) = slot(grads, nodes, v) {
                    let block = dim * inner;
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = &mut s[o * block..(o + 1) * block];
                        for (d, &gv) in dst.iter_mut().zip(&g[src..src + block]) {
                            *d = *d + gv;
                        }
                    }
                }
                offset += dim;
            }
        }
        Op::Slice { x, axis, start } => {
            let len = node.value.shape()[*axis];
            let (outer, dim, inner) = split_at_axis(val(*x).shape(), *axis);
            if let Some(s) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &gv) in s[base..base + len * inner].iter_mut().zip(src) {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
            }
        }
        Op::TransposeLast2(x) => {
            let sx = val(*x).shape();
            let (b, p, q) = (sx[0], sx[1], sx[2]);
            if let Some(s) = slot(grads, nodes, *x) {
                for bi in 0..b {
                    for i in 0..p {
                        for j in 0..q {
                            let idx = (bi * p + i) * q + j;
                            s[idx] = s[idx] + g[(bi * q + j) * p + i];
                        }
                    }
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            let (outer, dim, inner) = split_at_axis(val(*x).shape(), *axis);
            let inv = T::c(1.0 / dim as f64);
            if let Some(s) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for a in 0..dim {
                        for i in 0..inner {
                            let idx = (o * dim + a) * inner + i;
                            s[idx] = s[idx] + g[o * inner + i] * inv;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let k = probs.len() / b;
            let scale = g[0] / T::c(b as f64);
            if let Some(s) = slot(grads, nodes, *logits) {
                for i in 0..b {
                    for j in 0..k {
                        let onehot = if labels[i] == j { T::one() } else { T::zero() };
                        let idx = i * k + j;
                        s[idx] = s[idx] + scale * (probs[idx] - onehot);
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let (p, t) = (val(*pred).data(), val(*target).data());
            let c = T::c(2.0) * g[0] / T::c(p.len() as f64);
            if let Some(s) = slot(grads, nodes, *pred) {
                for i in 0..s.len() {
                    s[i] = s[i] + c * (p[i] - t[i]);
                }
            }
            if let Some(s) = slot(grads, nodes, *target) {
                for i in 0..s.len() {
                    s[i] = s[i] - c * (p[i] - t[i]);
                }
            }
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let contribs = rule.backward(&ins, &node.value, g);
            for (&v, contrib) in inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if let Some(s) = slot(grads, nodes, v) {
                    s.iter_mut().zip(&c).for_each(|(d, &ci)| *d = *d + ci);
                }
            }
        }
    }
}
