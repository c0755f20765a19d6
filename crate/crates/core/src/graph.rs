//! Eager tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Every operation computes its value on creation and records enough
//! state to replay the chain rule in reverse. A [`Graph`] is confined
//! to one forward/backward pass; independent graphs may run in
//! parallel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Op<T>>>,
}

/// Gradient contribution per parent node.
type Contribs<T> = Vec<(NodeId, Vec<T>)>;

trait Op<T: Scalar>: Send + Sync {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T>;
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Option<Box<dyn Op<T>>>) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input node. Gradients flow into it iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let rg = tensor.requires_grad;
        self.push(tensor, rg, None)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for
    /// every node on a path to a grad-requiring leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.data(root).len() != 1 {
            return Err(Error::InvalidShape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(op) = &self.nodes[i].op {
                for (pid, contrib) in op.backward(self, &g) {
                    debug_assert_eq!(contrib.len(), self.data(pid).len());
                    match &mut grads[pid.0] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a = *a + *c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---- operations ------------------------------------------------

    /// 2-d cross-correlation of `input` [N,C,H,W] with `kernel`
    /// [F,C,kh,kw].
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::InvalidShape(format!("conv2d wants 4-d input/kernel, got {xs:?} / {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::InvalidShape(format!("conv2d channel mismatch: input {c}, kernel {kc}")));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidShape(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![T::zero(); n * f * oh * ow];
        {
            let x = self.data(input);
            let k = self.data(kernel);
            out.par_chunks_mut(f * oh * ow)
                .zip(x.par_chunks(c * h * w))
                .for_each(|(on, xn)| conv_forward_one(on, xn, k, (c, h, w), (f, kh, kw), stride, padding, (oh, ow)));
        }
        let rg = self.requires(input) || self.requires(kernel);
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(value, rg, Some(Box::new(Conv2dOp { input, kernel, stride, padding }))))
    }

    /// Adds a per-channel bias [C] to [N,C,H,W].
    pub fn bias_channel(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::InvalidShape(format!("bias_channel: input {xs:?}, bias {bs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = self.data(input).to_vec();
        let b = self.data(bias);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v = *v + b[ci];
                }
            }
        }
        let rg = self.requires(input) || self.requires(bias);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, rg, Some(Box::new(BiasChannelOp { input, bias }))))
    }

    /// x [N,I] · wᵀ [O,I] + b [O] -> [N,O].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::InvalidShape(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        {
            let x = self.data(input);
            let w = self.data(weight);
            let b = self.data(bias);
            for ni in 0..n {
                for oi in 0..o {
                    let mut acc = b[oi];
                    let xr = &x[ni * i..(ni + 1) * i];
                    let wr = &w[oi * i..(oi + 1) * i];
                    for (xv, wv) in xr.iter().zip(wr) {
                        acc = acc + *xv * *wv;
                    }
                    out[ni * o + oi] = acc;
                }
            }
        }
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, rg, Some(Box::new(LinearOp { input, weight, bias }))))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<T> = self.data(input).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out).unwrap();
        let rg = self.requires(input);
        self.push(value, rg, Some(Box::new(ReluOp { input })))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/cols dropped.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!("maxpool2 wants 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape(format!("maxpool2 on {h}x{w} map")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = xb + (2 * i) * w + 2 * j;
                    let mut best = x[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = xb + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[ob + i * ow + j] = best;
                    arg[ob + i * ow + j] = best_idx as u32;
                }
            }
        }
        let rg = self.requires(input);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Some(Box::new(MaxPool2Op { input, argmax: arg, in_len: n * c * h * w }))))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avgpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!("avgpool2 wants 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape(format!("avgpool2 on {h}x{w} map")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let quarter = T::from_f(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let s = x[xb + 2 * i * w + 2 * j]
                        + x[xb + 2 * i * w + 2 * j + 1]
                        + x[xb + (2 * i + 1) * w + 2 * j]
                        + x[xb + (2 * i + 1) * w + 2 * j + 1];
                    out[ob + i * ow + j] = s * quarter;
                }
            }
        }
        let rg = self.requires(input);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Some(Box::new(AvgPool2Op { input, in_shape: [n, c, h, w] }))))
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!("global_avg_pool wants 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let inv = T::one() / T::from_us(hw);
        let x = self.data(input);
        let mut out = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = T::zero();
            for v in &x[nc * hw..(nc + 1) * hw] {
                acc = acc + *v;
            }
            out[nc] = acc * inv;
        }
        let rg = self.requires(input);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, rg, Some(Box::new(GlobalAvgPoolOp { input, in_shape: [n, c, h, w] }))))
    }

    /// Channel-axis concatenation of [N,Ci,H,W] tensors in argument
    /// order.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::InvalidShape(format!("concat wants 4-d inputs, got {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::InvalidShape(format!("concat spatial mismatch: {first:?} vs {s:?}")));
            }
            channels.push(s[1]);
        }
        let ct: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = vec![T::zero(); n * ct * hw];
        for ni in 0..n {
            let mut coff = 0;
            for (&id, &ci) in inputs.iter().zip(&channels) {
                let x = self.data(id);
                let src = &x[ni * ci * hw..(ni + 1) * ci * hw];
                let dst = &mut out[(ni * ct + coff) * hw..(ni * ct + coff + ci) * hw];
                dst.copy_from_slice(src);
                coff += ci;
            }
        }
        let rg = inputs.iter().any(|&id| self.requires(id));
        let value = Tensor::new(vec![n, ct, h, w], out)?;
        Ok(self.push(
            value,
            rg,
            Some(Box::new(ConcatOp { inputs: inputs.to_vec(), channels, n, hw })),
        ))
    }

    /// Batch normalization with per-batch statistics (training mode).
    /// Works on [N,C,H,W] (stats over N,H,W) or [N,C] (stats over N).
    /// Returns the output node plus the batch mean/biased variance per
    /// channel for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let xs = self.shape(input).to_vec();
        let c = match xs.len() {
            4 => xs[1],
            2 => xs[1],
            _ => return Err(Error::InvalidShape(format!("batch_norm wants 2-d or 4-d input, got {xs:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::InvalidShape("batch_norm gamma/beta must be [C]".into()));
        }
        let layout = BnLayout::of(&xs);
        let m = layout.group_size(&xs);
        if m < 2 {
            return Err(Error::DegenerateInput("batch_norm over a single element per channel".into()));
        }
        let x = self.data(input);
        let inv_m = T::one() / T::from_us(m);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        layout.for_each(&xs, |ci, idx| mean[ci] = mean[ci] + x[idx]);
        for v in &mut mean {
            *v = *v * inv_m;
        }
        layout.for_each(&xs, |ci, idx| {
            let d = x[idx] - mean[ci];
            var[ci] = var[ci] + d * d;
        });
        for v in &mut var {
            *v = *v * inv_m;
        }
        let epsv = T::from_f(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let gam = self.data(gamma).to_vec();
        let bet = self.data(beta).to_vec();
        let mut out = vec![T::zero(); x.len()];
        layout.for_each(&xs, |ci, idx| {
            out[idx] = gam[ci] * (x[idx] - mean[ci]) * inv_std[ci] + bet[ci];
        });
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::new(xs.clone(), out)?;
        let id = self.push(
            value,
            rg,
            Some(Box::new(BatchNormTrainOp {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                shape: xs,
            })),
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let c = match xs.len() {
            4 | 2 => xs[1],
            _ => return Err(Error::InvalidShape(format!("batch_norm wants 2-d or 4-d input, got {xs:?}"))),
        };
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::InvalidShape("running stats must be [C]".into()));
        }
        let layout = BnLayout::of(&xs);
        let epsv = T::from_f(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let mean = running_mean.to_vec();
        let x = self.data(input);
        let gam = self.data(gamma).to_vec();
        let bet = self.data(beta).to_vec();
        let mut out = vec![T::zero(); x.len()];
        layout.for_each(&xs, |ci, idx| {
            out[idx] = gam[ci] * (x[idx] - mean[ci]) * inv_std[ci] + bet[ci];
        });
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::new(xs.clone(), out)?;
        Ok(self.push(
            value,
            rg,
            Some(Box::new(BatchNormEvalOp { input, gamma, beta, mean, inv_std, shape: xs })),
        ))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[input.0].value.reshaped(shape)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Some(Box::new(ReshapeOp { input }))))
    }

    /// Element-wise smooth-L1 of `pred` against constant targets:
    /// |x| beyond alpha, x²/alpha within.
    pub fn smooth_l1(&mut self, pred: NodeId, targets: &[T], alpha: f64) -> Result<NodeId> {
        if alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("smooth_l1 alpha {alpha} <= 0")));
        }
        if self.data(pred).len() != targets.len() {
            return Err(Error::InvalidShape(format!(
                "smooth_l1: {} predictions vs {} targets",
                self.data(pred).len(),
                targets.len()
            )));
        }
        let a = T::from_f(alpha);
        let out: Vec<T> = self
            .data(pred)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| smooth_l1_value(p - t, a))
            .collect();
        let rg = self.requires(pred);
        let value = Tensor::new(self.shape(pred).to_vec(), out)?;
        Ok(self.push(
            value,
            rg,
            Some(Box::new(SmoothL1Op { pred, targets: targets.to_vec(), alpha: a })),
        ))
    }

    /// Mean over all entries -> scalar node.
    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let x = self.data(input);
        let inv = T::one() / T::from_us(x.len());
        let mut acc = T::zero();
        for v in x {
            acc = acc + *v;
        }
        let rg = self.requires(input);
        let in_len = x.len();
        self.push(
            Tensor::scalar(acc * inv),
            rg,
            Some(Box::new(MeanAllOp { input, in_len })),
        )
    }

    /// Row-wise cosine similarity of [N,D] against [N,D] -> [N].
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sa != sb {
            return Err(Error::InvalidShape(format!("cosine_rows: {sa:?} vs {sb:?}")));
        }
        let (n, d) = (sa[0], sa[1]);
        let xa = self.data(a);
        let xb = self.data(b);
        let mut out = vec![T::zero(); n];
        for r in 0..n {
            let ra = &xa[r * d..(r + 1) * d];
            let rb = &xb[r * d..(r + 1) * d];
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for (&u, &v) in ra.iter().zip(rb) {
                dot = dot + u * v;
                na = na + u * u;
                nb = nb + v * v;
            }
            if na == T::zero() || nb == T::zero() {
                return Err(Error::DegenerateInput(format!("zero-norm vector in cosine row {r}")));
            }
            out[r] = dot / (na.sqrt() * nb.sqrt());
        }
        let rg = self.requires(a) || self.requires(b);
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, rg, Some(Box::new(CosineRowsOp { a, b, n, d }))))
    }

    /// Multiplies a [N] vector by constant per-row factors.
    pub fn scale_rows(&mut self, input: NodeId, factors: &[T]) -> Result<NodeId> {
        if self.data(input).len() != factors.len() {
            return Err(Error::InvalidShape("scale_rows length mismatch".into()));
        }
        let out: Vec<T> = self.data(input).iter().zip(factors).map(|(&x, &f)| x * f).collect();
        let rg = self.requires(input);
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(value, rg, Some(Box::new(ScaleRowsOp { input, factors: factors.to_vec() }))))
    }

    /// wa·a + wb·b for same-shape nodes.
    pub fn add_weighted(&mut self, a: NodeId, b: NodeId, wa: T, wb: T) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidShape("add_weighted shape mismatch".into()));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| wa * x + wb * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, rg, Some(Box::new(AddWeightedOp { a, b, wa, wb }))))
    }
}

pub(crate) fn smooth_l1_value<T: Scalar>(x: T, alpha: T) -> T {
    if x.abs() > alpha {
        x.abs()
    } else {
        x * x / alpha
    }
}

pub(crate) fn smooth_l1_grad<T: Scalar>(x: T, alpha: T) -> T {
    if x.abs() > alpha {
        if x > T::zero() {
            T::one()
        } else {
            -T::one()
        }
    } else {
        T::from_f(2.0) * x / alpha
    }
}

/// Standalone smooth-L1 for a single prediction/target pair: value and
/// gradient with respect to the prediction.
pub fn smooth_l1_scalar<T: Scalar>(prediction: T, target: T, alpha: f64) -> Result<(T, T)> {
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!("smooth_l1 alpha {alpha} <= 0")));
    }
    let a = T::from_f(alpha);
    let x = prediction - target;
    Ok((smooth_l1_value(x, a), smooth_l1_grad(x, a)))
}

/// Standalone cosine similarity of two vectors: value and gradients to
/// both arguments.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidShape("cosine_similarity wants equal non-empty vectors".into()));
    }
    let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
    for (&u, &v) in a.iter().zip(b) {
        dot = dot + u * v;
        na2 = na2 + u * u;
        nb2 = nb2 + v * v;
    }
    if na2 == T::zero() || nb2 == T::zero() {
        return Err(Error::DegenerateInput("zero-norm vector in cosine_similarity".into()));
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let cos = dot / (na * nb);
    let ga: Vec<T> = a
        .iter()
        .zip(b)
        .map(|(&u, &v)| v / (na * nb) - cos * u / na2)
        .collect();
    let gb: Vec<T> = a
        .iter()
        .zip(b)
        .map(|(&u, &v)| u / (na * nb) - cos * v / nb2)
        .collect();
    Ok((cos, ga, gb))
}

/// Splits a [N,C,H,W] tensor back into channel groups; inverse of
/// channel concatenation.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = t.shape();
    if s.len() != 4 || sizes.iter().sum::<usize>() != s[1] {
        return Err(Error::InvalidShape("split_channels sizes must sum to C".into()));
    }
    let (n, ct, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
    for ni in 0..n {
        let mut coff = 0;
        for (pi, &c) in sizes.iter().enumerate() {
            let src = &t.data()[(ni * ct + coff) * hw..(ni * ct + coff + c) * hw];
            parts[pi].extend_from_slice(src);
            coff += c;
        }
    }
    sizes
        .iter()
        .zip(parts)
        .map(|(&c, d)| Tensor::new(vec![n, c, h, w], d))
        .collect()
}

// ---- op implementations ---------------------------------------------

/// Lowers one sample to the [c*kh*kw, oh*ow] patch matrix; padding
/// cells stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ohw = oh * ow;
    let mut col = vec![T::zero(); c * kh * kw * ohw];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let rbase = ((ci * kh + i) * kw + j) * ohw;
                for oi in 0..oh {
                    let ih = (oi * stride + i) as isize - padding as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let xrow = ci * h * w + ih as usize * w;
                    let crow = rbase + oi * ow;
                    if stride == 1 {
                        let lo = padding.saturating_sub(j);
                        let hi = (w + padding).saturating_sub(j).min(ow);
                        if lo < hi {
                            let start = xrow + lo + j - padding;
                            col[crow + lo..crow + hi].copy_from_slice(&x[start..start + hi - lo]);
                        }
                    } else {
                        for oj in 0..ow {
                            let iw = (oj * stride + j) as isize - padding as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            col[crow + oj] = x[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dx: &mut [T],
    dcol: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let rbase = ((ci * kh + i) * kw + j) * ohw;
                for oi in 0..oh {
                    let ih = (oi * stride + i) as isize - padding as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let xrow = ci * h * w + ih as usize * w;
                    let crow = rbase + oi * ow;
                    for oj in 0..ow {
                        let iw = (oj * stride + j) as isize - padding as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        dx[xrow + iw as usize] = dx[xrow + iw as usize] + dcol[crow + oj];
                    }
                }
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[k,n], row major; ikj order keeps the inner
/// loop over contiguous rows.
fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_one<T: Scalar>(
    out: &mut [T],
    x: &[T],
    k: &[T],
    (c, h, w): (usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) {
    let col = im2col(x, (c, h, w), (kh, kw), stride, padding, (oh, ow));
    matmul_acc(out, k, &col, f, c * kh * kw, oh * ow);
}

struct Conv2dOp {
    input: NodeId,
    kernel: NodeId,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Op<T> for Conv2dOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let xs = g.shape(self.input).to_vec();
        let ks = g.shape(self.kernel).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h + 2 * self.padding - kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - kw) / self.stride + 1;
        let (s, p) = (self.stride, self.padding);
        let (ckk, ohw) = (c * kh * kw, oh * ow);
        let need_dx = g.requires(self.input);
        let need_dk = g.requires(self.kernel);
        let k = g.data(self.kernel);
        let x = g.data(self.input);
        // per-sample pieces, reduced in batch order for deterministic
        // summation
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let gn = &out_grad[ni * f * ohw..(ni + 1) * f * ohw];
                let mut dxn = Vec::new();
                if need_dx {
                    let mut dcol = vec![T::zero(); ckk * ohw];
                    for fi in 0..f {
                        let grow = &gn[fi * ohw..(fi + 1) * ohw];
                        for r in 0..ckk {
                            let kv = k[fi * ckk + r];
                            if kv == T::zero() {
                                continue;
                            }
                            let drow = &mut dcol[r * ohw..(r + 1) * ohw];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + kv * gv;
                            }
                        }
                    }
                    dxn = vec![T::zero(); c * h * w];
                    col2im_add(&mut dxn, &dcol, (c, h, w), (kh, kw), s, p, (oh, ow));
                }
                let mut dk = Vec::new();
                if need_dk {
                    let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
                    let col = im2col(xn, (c, h, w), (kh, kw), s, p, (oh, ow));
                    dk = vec![T::zero(); f * ckk];
                    for fi in 0..f {
                        let grow = &gn[fi * ohw..(fi + 1) * ohw];
                        for r in 0..ckk {
                            let crow = &col[r * ohw..(r + 1) * ohw];
                            let mut acc = T::zero();
                            for (&gv, &cv) in grow.iter().zip(crow) {
                                acc = acc + gv * cv;
                            }
                            dk[fi * ckk + r] = acc;
                        }
                    }
                }
                (dxn, dk)
            })
            .collect();
        let mut contribs = Vec::new();
        if need_dx {
            let mut dx = vec![T::zero(); n * c * h * w];
            for (ni, (dxn, _)) in partials.iter().enumerate() {
                dx[ni * c * h * w..(ni + 1) * c * h * w].copy_from_slice(dxn);
            }
            contribs.push((self.input, dx));
        }
        if need_dk {
            let mut dk = vec![T::zero(); f * ckk];
            for (_, part) in &partials {
                for (a, &b) in dk.iter_mut().zip(part) {
                    *a = *a + b;
                }
            }
            contribs.push((self.kernel, dk));
        }
        contribs
    }
}

struct BiasChannelOp {
    input: NodeId,
    bias: NodeId,
}

impl<T: Scalar> Op<T> for BiasChannelOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let xs = g.shape(self.input);
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut contribs = Vec::new();
        if g.requires(self.input) {
            contribs.push((self.input, out_grad.to_vec()));
        }
        if g.requires(self.bias) {
            let mut db = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for v in &out_grad[base..base + hw] {
                        db[ci] = db[ci] + *v;
                    }
                }
            }
            contribs.push((self.bias, db));
        }
        contribs
    }
}

struct LinearOp {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
}

impl<T: Scalar> Op<T> for LinearOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let xs = g.shape(self.input);
        let (n, i) = (xs[0], xs[1]);
        let o = g.shape(self.weight)[0];
        let mut contribs = Vec::new();
        if g.requires(self.input) {
            let w = g.data(self.weight);
            let mut dx = vec![T::zero(); n * i];
            for ni in 0..n {
                for oi in 0..o {
                    let gv = out_grad[ni * o + oi];
                    if gv == T::zero() {
                        continue;
                    }
                    let wr = &w[oi * i..(oi + 1) * i];
                    let dr = &mut dx[ni * i..(ni + 1) * i];
                    for (d, &wv) in dr.iter_mut().zip(wr) {
                        *d = *d + gv * wv;
                    }
                }
            }
            contribs.push((self.input, dx));
        }
        if g.requires(self.weight) {
            let x = g.data(self.input);
            let mut dw = vec![T::zero(); o * i];
            for ni in 0..n {
                let xr = &x[ni * i..(ni + 1) * i];
                for oi in 0..o {
                    let gv = out_grad[ni * o + oi];
                    if gv == T::zero() {
                        continue;
                    }
                    let dr = &mut dw[oi * i..(oi + 1) * i];
                    for (d, &xv) in dr.iter_mut().zip(xr) {
                        *d = *d + gv * xv;
                    }
                }
            }
            contribs.push((self.weight, dw));
        }
        if g.requires(self.bias) {
            let mut db = vec![T::zero(); o];
            for ni in 0..n {
                for oi in 0..o {
                    db[oi] = db[oi] + out_grad[ni * o + oi];
                }
            }
            contribs.push((self.bias, db));
        }
        contribs
    }
}

struct ReluOp {
    input: NodeId,
}

impl<T: Scalar> Op<T> for ReluOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let x = g.data(self.input);
        let dx = x
            .iter()
            .zip(out_grad)
            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
            .collect();
        vec![(self.input, dx)]
    }
}

struct MaxPool2Op {
    input: NodeId,
    argmax: Vec<u32>,
    in_len: usize,
}

impl<T: Scalar> Op<T> for MaxPool2Op {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); self.in_len];
        for (&idx, &gv) in self.argmax.iter().zip(out_grad) {
            dx[idx as usize] = dx[idx as usize] + gv;
        }
        vec![(self.input, dx)]
    }
}

struct AvgPool2Op {
    input: NodeId,
    in_shape: [usize; 4],
}

impl<T: Scalar> Op<T> for AvgPool2Op {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let [n, c, h, w] = self.in_shape;
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f(0.25);
        let mut dx = vec![T::zero(); n * c * h * w];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let gv = out_grad[ob + i * ow + j] * quarter;
                    dx[xb + 2 * i * w + 2 * j] = dx[xb + 2 * i * w + 2 * j] + gv;
                    dx[xb + 2 * i * w + 2 * j + 1] = dx[xb + 2 * i * w + 2 * j + 1] + gv;
                    dx[xb + (2 * i + 1) * w + 2 * j] = dx[xb + (2 * i + 1) * w + 2 * j] + gv;
                    dx[xb + (2 * i + 1) * w + 2 * j + 1] = dx[xb + (2 * i + 1) * w + 2 * j + 1] + gv;
                }
            }
        }
        vec![(self.input, dx)]
    }
}

struct GlobalAvgPoolOp {
    input: NodeId,
    in_shape: [usize; 4],
}

impl<T: Scalar> Op<T> for GlobalAvgPoolOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let [n, c, h, w] = self.in_shape;
        let hw = h * w;
        let inv = T::one() / T::from_us(hw);
        let mut dx = vec![T::zero(); n * c * hw];
        for nc in 0..n * c {
            let gv = out_grad[nc] * inv;
            for v in &mut dx[nc * hw..(nc + 1) * hw] {
                *v = gv;
            }
        }
        vec![(self.input, dx)]
    }
}

struct ConcatOp {
    inputs: Vec<NodeId>,
    channels: Vec<usize>,
    n: usize,
    hw: usize,
}

impl<T: Scalar> Op<T> for ConcatOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let ct: usize = self.channels.iter().sum();
        let mut contribs = Vec::new();
        let mut coff = 0;
        for (&id, &ci) in self.inputs.iter().zip(&self.channels) {
            if g.requires(id) {
                let mut dx = Vec::with_capacity(self.n * ci * self.hw);
                for ni in 0..self.n {
                    let base = (ni * ct + coff) * self.hw;
                    dx.extend_from_slice(&out_grad[base..base + ci * self.hw]);
                }
                contribs.push((id, dx));
            }
            coff += ci;
        }
        contribs
    }
}

/// Channel layout for batch-norm reductions over [N,C,H,W] or [N,C].
struct BnLayout;

impl BnLayout {
    fn of(_shape: &[usize]) -> BnLayout {
        BnLayout
    }

    fn group_size(&self, shape: &[usize]) -> usize {
        if shape.len() == 4 {
            shape[0] * shape[2] * shape[3]
        } else {
            shape[0]
        }
    }

    fn for_each(&self, shape: &[usize], mut f: impl FnMut(usize, usize)) {
        if shape.len() == 4 {
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for k in 0..hw {
                        f(ci, base + k);
                    }
                }
            }
        } else {
            let (n, c) = (shape[0], shape[1]);
            for ni in 0..n {
                for ci in 0..c {
                    f(ci, ni * c + ci);
                }
            }
        }
    }
}

struct BatchNormTrainOp<T> {
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mean: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Op<T> for BatchNormTrainOp<T> {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let c = self.mean.len();
        let layout = BnLayout::of(&self.shape);
        let m = layout.group_size(&self.shape);
        let inv_m = T::one() / T::from_us(m);
        let x = g.data(self.input);
        let gam = g.data(self.gamma);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        layout.for_each(&self.shape, |ci, idx| {
            let xh = (x[idx] - self.mean[ci]) * self.inv_std[ci];
            sum_g[ci] = sum_g[ci] + out_grad[idx];
            sum_gx[ci] = sum_gx[ci] + out_grad[idx] * xh;
        });
        let mut contribs = Vec::new();
        if g.requires(self.input) {
            let mut dx = vec![T::zero(); x.len()];
            layout.for_each(&self.shape, |ci, idx| {
                let xh = (x[idx] - self.mean[ci]) * self.inv_std[ci];
                dx[idx] = gam[ci]
                    * self.inv_std[ci]
                    * (out_grad[idx] - sum_g[ci] * inv_m - xh * sum_gx[ci] * inv_m);
            });
            contribs.push((self.input, dx));
        }
        if g.requires(self.gamma) {
            contribs.push((self.gamma, sum_gx));
        }
        if g.requires(self.beta) {
            contribs.push((self.beta, sum_g));
        }
        contribs
    }
}

struct BatchNormEvalOp<T> {
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mean: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Op<T> for BatchNormEvalOp<T> {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let c = self.mean.len();
        let layout = BnLayout::of(&self.shape);
        let x = g.data(self.input);
        let gam = g.data(self.gamma);
        let mut contribs = Vec::new();
        if g.requires(self.input) {
            let mut dx = vec![T::zero(); x.len()];
            layout.for_each(&self.shape, |ci, idx| {
                dx[idx] = out_grad[idx] * gam[ci] * self.inv_std[ci];
            });
            contribs.push((self.input, dx));
        }
        if g.requires(self.gamma) {
            let mut dg = vec![T::zero(); c];
            layout.for_each(&self.shape, |ci, idx| {
                let xh = (x[idx] - self.mean[ci]) * self.inv_std[ci];
                dg[ci] = dg[ci] + out_grad[idx] * xh;
            });
            contribs.push((self.gamma, dg));
        }
        if g.requires(self.beta) {
            let mut db = vec![T::zero(); c];
            layout.for_each(&self.shape, |ci, idx| {
                db[ci] = db[ci] + out_grad[idx];
            });
            contribs.push((self.beta, db));
        }
        contribs
    }
}

struct ReshapeOp {
    input: NodeId,
}

impl<T: Scalar> Op<T> for ReshapeOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        vec![(self.input, out_grad.to_vec())]
    }
}

struct SmoothL1Op<T> {
    pred: NodeId,
    targets: Vec<T>,
    alpha: T,
}

impl<T: Scalar> Op<T> for SmoothL1Op<T> {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.pred) {
            return Vec::new();
        }
        let p = g.data(self.pred);
        let dx = p
            .iter()
            .zip(&self.targets)
            .zip(out_grad)
            .map(|((&pv, &tv), &gv)| gv * smooth_l1_grad(pv - tv, self.alpha))
            .collect();
        vec![(self.pred, dx)]
    }
}

struct MeanAllOp {
    input: NodeId,
    in_len: usize,
}

impl<T: Scalar> Op<T> for MeanAllOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let gv = out_grad[0] / T::from_us(self.in_len);
        vec![(self.input, vec![gv; self.in_len])]
    }
}

struct CosineRowsOp {
    a: NodeId,
    b: NodeId,
    n: usize,
    d: usize,
}

impl<T: Scalar> Op<T> for CosineRowsOp {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let xa = g.data(self.a);
        let xb = g.data(self.b);
        let (need_a, need_b) = (g.requires(self.a), g.requires(self.b));
        let mut da = vec![T::zero(); xa.len()];
        let mut db = vec![T::zero(); xb.len()];
        for r in 0..self.n {
            let ra = &xa[r * self.d..(r + 1) * self.d];
            let rb = &xb[r * self.d..(r + 1) * self.d];
            let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
            for (&u, &v) in ra.iter().zip(rb) {
                dot = dot + u * v;
                na2 = na2 + u * u;
                nb2 = nb2 + v * v;
            }
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            let cos = dot / (na * nb);
            let gv = out_grad[r];
            for i in 0..self.d {
                if need_a {
                    da[r * self.d + i] = gv * (rb[i] / (na * nb) - cos * ra[i] / na2);
                }
                if need_b {
                    db[r * self.d + i] = gv * (ra[i] / (na * nb) - cos * rb[i] / nb2);
                }
            }
        }
        let mut contribs = Vec::new();
        if need_a {
            contribs.push((self.a, da));
        }
        if need_b {
            contribs.push((self.b, db));
        }
        contribs
    }
}

struct ScaleRowsOp<T> {
    input: NodeId,
    factors: Vec<T>,
}

impl<T: Scalar> Op<T> for ScaleRowsOp<T> {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        if !g.requires(self.input) {
            return Vec::new();
        }
        let dx = out_grad.iter().zip(&self.factors).map(|(&gv, &f)| gv * f).collect();
        vec![(self.input, dx)]
    }
}

struct AddWeightedOp<T> {
    a: NodeId,
    b: NodeId,
    wa: T,
    wb: T,
}

impl<T: Scalar> Op<T> for AddWeightedOp<T> {
    fn backward(&self, g: &Graph<T>, out_grad: &[T]) -> Contribs<T> {
        let mut contribs = Vec::new();
        if g.requires(self.a) {
            contribs.push((self.a, out_grad.iter().map(|&gv| gv * self.wa).collect()));
        }
        if g.requires(self.b) {
            contribs.push((self.b, out_grad.iter().map(|&gv| gv * self.wb).collect()));
        }
        contribs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        let k = g.leaf(t(vec![1, 1, 1, 1], vec![1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_ones_2x2() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let k = g.leaf(t(vec![1, 1, 2, 2], vec![1.0; 4]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_output_size_table_layer() {
        // 512 input, kernel 7, stride 3, no padding -> 169
        assert_eq!((512 + 2 * 0 - 7) / 3 + 1, 169);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 512, 8]));
        let k = g.leaf(Tensor::zeros(vec![1, 1, 7, 7]));
        let y = g.conv2d(x, k, 3, 0).unwrap();
        assert_eq!(g.value(y).shape()[2], 169);
    }

    #[test]
    fn conv_shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = g.leaf(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(g.conv2d(x, k, 1, 0).is_err());
        let k2 = g.leaf(Tensor::zeros(vec![1, 2, 6, 6]));
        assert!(g.conv2d(x, k2, 1, 0).is_err());
    }

    #[test]
    fn conv_linear_in_input() {
        let mut g = Graph::new();
        let xdata: Vec<f64> = (0..16).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x1 = g.leaf(t(vec![1, 1, 4, 4], xdata.clone()));
        let x2 = g.leaf(t(vec![1, 1, 4, 4], xdata.iter().map(|v| v * 2.5).collect()));
        let k = g.leaf(t(vec![1, 1, 3, 3], (0..9).map(|v| (v as f64) - 4.0).collect()));
        let y1 = g.conv2d(x1, k, 1, 1).unwrap();
        let y2 = g.conv2d(x2, k, 1, 1).unwrap();
        for (a, b) in g.value(y1).data().iter().zip(g.value(y2).data()) {
            assert!((a * 2.5 - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn concat_channel_sum_and_split_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2, 2, 2, 2], (0..16).map(|v| v as f64).collect()));
        let b = g.leaf(t(vec![2, 3, 2, 2], (0..24).map(|v| v as f64 + 100.0).collect()));
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 2, 2]);
        let parts = split_channels(g.value(y), &[2, 3]).unwrap();
        assert_eq!(parts[0].data(), g.value(a).data());
        assert_eq!(parts[1].data(), g.value(b).data());
    }

    #[test]
    fn concat_single_input_identical() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 3, 2, 2], (0..12).map(|v| v as f64).collect()));
        let y = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 2, 2, 2], vec![0.0; 8]).with_grad());
        let b = g.leaf(t(vec![1, 1, 2, 2], vec![0.0; 4]).with_grad());
        let y = g.concat_channels(&[a, b]).unwrap();
        let m = g.mean_all(y);
        let grads = g.backward(m).unwrap();
        // mean distributes 1/12 to every entry of both inputs
        assert!(grads.get(a).unwrap().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        assert!(grads.get(b).unwrap().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn concat_spatial_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        let b = g.leaf(Tensor::zeros(vec![1, 2, 3, 2]));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        let (v, _) = smooth_l1_scalar(0.5, 0.0, 1.0).unwrap();
        assert_eq!(v, 0.25);
        let (v, gr) = smooth_l1_scalar(2.0, 0.0, 1.0).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(gr, 1.0);
        // continuity at |x| = alpha
        let (v, _) = smooth_l1_scalar(1.0, 0.0, 1.0).unwrap();
        assert_eq!(v, 1.0);
        let (v, _) = smooth_l1_scalar(-1.0, 0.0, 1.0).unwrap();
        assert_eq!(v, 1.0);
        assert!(smooth_l1_scalar(1.0, 0.0, 0.0).is_err());
        assert!(smooth_l1_scalar(1.0, 0.0, -2.0).is_err());
    }

    #[test]
    fn smooth_l1_nonneg_zero_iff_equal() {
        for i in -20..20 {
            let x = i as f64 * 0.17;
            let (v, _) = smooth_l1_scalar(x, 0.0, 0.7).unwrap();
            assert!(v >= 0.0);
            assert_eq!(v == 0.0, x == 0.0);
        }
    }

    #[test]
    fn cosine_examples() {
        let (c, _, _) = cosine_similarity(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        let (c, _, _) = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
        let (c, _, _) = cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap();
        assert_eq!(c, -1.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn maxpool_and_avgpool_values() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let mp = g.maxpool2(x).unwrap();
        assert_eq!(g.value(mp).data(), &[6.0, 8.0]);
        let ap = g.avgpool2(x).unwrap();
        assert_eq!(g.value(ap).data(), &[3.5, 5.5]);
    }

    #[test]
    fn linear_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let w = g.leaf(t(vec![1, 2], vec![3.0, 4.0]).with_grad());
        let b = g.leaf(t(vec![1], vec![0.5]).with_grad());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.5]);
        let m = g.mean_all(y);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.leaf(t(vec![1], vec![1.0]));
        let beta = g.leaf(t(vec![1], vec![0.0]));
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-12);
        let out = g.value(y).data();
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9);
    }
}
