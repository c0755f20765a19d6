//! Training for the continuum formulation: density-guided patch
//! sampling, category-balanced batches, augmentation, and the
//! early-stopping Adam loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::inference::DensityMap;
use crate::net::{RegressionForward, RegressionNet};
use crate::optim::{adam_step, AdamState};
use crate::scalar::Scalar;
use crate::score::{quantize_k, PleomorphismScore};
use crate::synthdata::splitmix64;
use crate::tensor::Tensor;

/// Deterministic per-(epoch, iteration, stream) seed derivation.
pub fn child_seed(seed: u64, epoch: u64, iter: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ splitmix64(epoch)) ^ splitmix64(iter)) ^ stream)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_iters_per_epoch: usize,
    pub val_iters_per_epoch: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub alpha: f64,
    /// Category-balanced batches; disable only for single-category
    /// pools (overfit smoke tests).
    pub balanced: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 12,
            train_iters_per_epoch: 200,
            val_iters_per_epoch: 500,
            max_epochs: 100,
            patience_epochs: 10,
            alpha: 1.0,
            balanced: true,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule for the 64x64 synthetic datasets.
    pub fn desk_default() -> Self {
        TrainConfig {
            train_iters_per_epoch: 40,
            val_iters_per_epoch: 20,
            max_epochs: 40,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("train_iters_per_epoch", self.train_iters_per_epoch),
            ("val_iters_per_epoch", self.val_iters_per_epoch),
            ("max_epochs", self.max_epochs),
            ("patience_epochs", self.patience_epochs),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A source region with its density map and panel reference score.
#[derive(Clone, Debug)]
pub struct Roi<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub density: DensityMap,
    pub reference: PleomorphismScore,
}

#[derive(Clone, Debug)]
pub struct PatchSample<T> {
    pub image: Tensor<T>,
    pub reference: PleomorphismScore,
    pub roi_id: String,
}

/// Draws a patch top-left with probability proportional to the density
/// mass under the patch window.
pub fn sample_training_patch<T: Scalar>(
    roi: &Roi<T>,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSample<T>> {
    let shape = roi.image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape(format!("roi image must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h < patch_size || w < patch_size {
        return Err(Error::InvalidInput(format!(
            "roi {} is {w}x{h}, smaller than a {patch_size} px patch",
            roi.id
        )));
    }
    if roi.density.width != w || roi.density.height != h {
        return Err(Error::InvalidShape("density map extent differs from roi image".into()));
    }

    // summed-area table over the density
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                roi.density.at(x, y) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let window = |x: usize, y: usize| -> f64 {
        let (x1, y1) = (x + patch_size, y + patch_size);
        (sat[y1 * (w + 1) + x1] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x] + sat[y * (w + 1) + x]).max(0.0)
    };
    let (nx, ny) = (w - patch_size + 1, h - patch_size + 1);
    let mut cdf = Vec::with_capacity(nx * ny);
    let mut total = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            total += window(x, y);
            cdf.push(total);
        }
    }
    if total <= 0.0 {
        return Err(Error::InvalidInput(format!("roi {}: zero density everywhere", roi.id)));
    }
    let u: f64 = rng.random_range(0.0..total);
    let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
    let (oy, ox) = (idx / nx, idx % nx);

    let src = roi.image.data();
    let mut data = vec![T::zero(); 3 * patch_size * patch_size];
    for c in 0..3 {
        for y in 0..patch_size {
            let srow = c * w * h + (oy + y) * w + ox;
            let drow = c * patch_size * patch_size + y * patch_size;
            data[drow..drow + patch_size].copy_from_slice(&src[srow..srow + patch_size]);
        }
    }
    Ok(PatchSample {
        image: Tensor::new(vec![3, patch_size, patch_size], data)?,
        reference: roi.reference,
        roi_id: roi.id.clone(),
    })
}

/// Batch whose quantized (k=3) reference categories differ in count by
/// at most one; the remainder goes to a random category permutation.
pub fn make_balanced_batch<T: Scalar>(
    pool: &[Roi<T>],
    batch_size: usize,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchSample<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut by_cat: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, roi) in pool.iter().enumerate() {
        let cat = quantize_k(roi.reference, 3)?;
        by_cat[cat as usize - 1].push(i);
    }
    for (ci, members) in by_cat.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidInput(format!("pool has no ROI with quantized category {}", ci + 1)));
        }
    }
    let base = batch_size / 3;
    let remainder = batch_size % 3;
    let mut order = [0usize, 1, 2];
    // partial Fisher-Yates picks the categories receiving the remainder
    for i in 0..remainder {
        let j = rng.random_range(i..3);
        order.swap(i, j);
    }
    let mut counts = [base; 3];
    for &c in order.iter().take(remainder) {
        counts[c] += 1;
    }
    let mut batch = Vec::with_capacity(batch_size);
    for (cat, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let roi = &pool[by_cat[cat][rng.random_range(0..by_cat[cat].len())]];
            batch.push(sample_training_patch(roi, patch_size, rng)?);
        }
    }
    Ok(batch)
}

/// Batch from an unbalanced pool: uniform ROI choice.
pub fn make_uniform_batch<T: Scalar>(
    pool: &[Roi<T>],
    batch_size: usize,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchSample<T>>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty roi pool".into()));
    }
    (0..batch_size)
        .map(|_| sample_training_patch(&pool[rng.random_range(0..pool.len())], patch_size, rng))
        .collect()
}

// ---- augmentation ------------------------------------------------------

fn transform_image<T: Scalar>(image: &Tensor<T>, f: impl Fn(usize, usize, usize) -> (usize, usize)) -> Tensor<T> {
    let (channels, s) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = f(x, y, s);
                out[c * s * s + y * s + x] = src[c * s * s + sy * s + sx];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

pub fn flip_h<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    transform_image(image, |x, y, s| (s - 1 - x, y))
}

pub fn rot90<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    // 90 degrees counterclockwise: out(x,y) = in(s-1-y, x)
    transform_image(image, |x, y, s| (s - 1 - y, x))
}

/// One of the 8 square symmetries: rotate by 90k degrees, then an
/// optional horizontal flip.
pub fn dihedral<T: Scalar>(image: &Tensor<T>, element: u8) -> Tensor<T> {
    let mut out = image.clone();
    for _ in 0..(element & 3) {
        out = rot90(&out);
    }
    if element & 4 != 0 {
        out = flip_h(&out);
    }
    out
}

/// Realized augmentation draw; applying the same params twice to the
/// same patch is deterministic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub dihedral: u8,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    /// Rotation of the color basis around the gray axis, radians.
    pub color_angle: f64,
    pub blur_sigma: Option<f64>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { dihedral: 0, gain: [1.0; 3], offset: [0.0; 3], color_angle: 0.0, blur_sigma: None }
    }

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let dihedral = rng.random_range(0..8u8);
        let mut gain = [0.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            gain[c] = rng.random_range(0.8..1.25);
            offset[c] = rng.random_range(-0.08..0.08);
        }
        let color_angle = rng.random_range(-0.1..0.1);
        let blur = rng.random_range(0.0..1.0) < 0.25;
        let blur_sigma = if blur { Some(rng.random_range(0.5..1.5)) } else { None };
        AugmentParams { dihedral, gain, offset, color_angle, blur_sigma }
    }

    pub fn apply<T: Scalar>(&self, patch: &PatchSample<T>) -> PatchSample<T> {
        let mut image = dihedral(&patch.image, self.dihedral);
        let s = image.shape()[1];
        let plane = s * s;
        {
            let data = image.data_mut();
            for c in 0..3 {
                let gain = T::from_f(self.gain[c]);
                let offset = T::from_f(self.offset[c]);
                for v in data[c * plane..(c + 1) * plane].iter_mut() {
                    *v = (*v * gain + offset).max(T::zero()).min(T::one());
                }
            }
            if self.color_angle != 0.0 {
                rotate_gray_axis(data, plane, self.color_angle);
            }
        }
        if let Some(sigma) = self.blur_sigma {
            image = gaussian_blur(&image, sigma);
        }
        PatchSample { image, reference: patch.reference, roi_id: patch.roi_id.clone() }
    }
}

/// Rodrigues rotation of every RGB vector around (1,1,1)/sqrt(3),
/// clamped back to [0,1].
fn rotate_gray_axis<T: Scalar>(data: &mut [T], plane: usize, angle: f64) {
    let k = 1.0 / 3f64.sqrt();
    let (sin, cos) = angle.sin_cos();
    for i in 0..plane {
        let v = [data[i].to_f(), data[plane + i].to_f(), data[2 * plane + i].to_f()];
        let dot = k * (v[0] + v[1] + v[2]);
        let cross = [k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])];
        for c in 0..3 {
            let r = v[c] * cos + cross[c] * sin + k * dot * (1.0 - cos);
            data[c * plane + i] = T::from_f(r.clamp(0.0, 1.0));
        }
    }
}

/// Separable Gaussian blur with replicate padding; kernel truncated at
/// ceil(3 sigma).
pub fn gaussian_blur<T: Scalar>(image: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let s = image.shape()[1];
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        norm += w;
    }
    for w in kernel.iter_mut() {
        *w /= norm;
    }
    let clampi = |v: isize| -> usize { v.clamp(0, s as isize - 1) as usize };
    let src = image.data();
    let mut mid = vec![0.0f64; src.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + ki as isize - radius);
                    acc += w * src[c * s * s + y * s + sx].to_f();
                }
                mid[c * s * s + y * s + x] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); src.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + ki as isize - radius);
                    acc += w * mid[c * s * s + sy * s + x];
                }
                out[c * s * s + y * s + x] = T::from_f(acc);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

pub fn augment_patch<T: Scalar>(patch: &PatchSample<T>, rng: &mut ChaCha8Rng) -> PatchSample<T> {
    AugmentParams::draw(rng).apply(patch)
}

// ---- loss graph and training ------------------------------------------

/// Stacks patch images into one [N,3,s,s] tensor.
pub fn stack_batch<T: Scalar>(batch: &[PatchSample<T>]) -> Result<Tensor<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let shape = batch[0].image.shape().to_vec();
    let per = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(batch.len() * per);
    for p in batch {
        if p.image.shape() != shape.as_slice() {
            return Err(Error::InvalidShape("ragged batch".into()));
        }
        data.extend_from_slice(p.image.data());
    }
    Tensor::new(vec![batch.len(), shape[0], shape[1], shape[2]], data)
}

/// Regression forward plus mean smooth-L1 loss; the shared prefix of
/// the plain and joint training graphs.
pub fn regression_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &RegressionNet<T>,
    images: NodeId,
    targets: &[T],
    alpha: f64,
) -> Result<(NodeId, RegressionForward)> {
    let fwd = net.forward(g, images, true)?;
    let per_sample = g.smooth_l1(fwd.output, targets, alpha)?;
    let loss = g.mean_all(per_sample);
    Ok((loss, fwd))
}

/// One optimization step on a prepared batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    net: &mut RegressionNet<T>,
    batch: &[PatchSample<T>],
    alpha: f64,
    adam: &mut AdamState<T>,
) -> Result<f64> {
    let images = stack_batch(batch)?;
    let targets: Vec<T> = batch.iter().map(|p| T::from_f(p.reference.value())).collect();
    let mut g = Graph::new();
    let input = g.leaf(images);
    let (loss, fwd) = regression_loss_graph(&mut g, net, input, &targets, alpha)?;
    let loss_value = g.value(loss).item().to_f();
    if !loss_value.is_finite() {
        return Err(Error::DegenerateInput(format!("non-finite training loss {loss_value}")));
    }
    let grads = g.backward(loss)?;
    apply_param_grads(net, &fwd.param_nodes, &grads, adam)
        .map(|_| loss_value)
}

pub(crate) fn apply_param_grads<T: Scalar>(
    net: &mut RegressionNet<T>,
    param_nodes: &[NodeId],
    grads: &crate::graph::Gradients<T>,
    adam: &mut AdamState<T>,
) -> Result<()> {
    let mut flat_grads = Vec::new();
    for &node in param_nodes {
        match grads.get(node) {
            Some(gs) => flat_grads.extend_from_slice(gs),
            None => {
                // parameter off the loss path gets a zero gradient
                flat_grads.extend(std::iter::repeat_n(T::zero(), grad_len_of(net, param_nodes, node)));
            }
        }
    }
    let mut flat_params = Vec::new();
    for t in net.params_mut() {
        flat_params.extend_from_slice(t.data());
    }
    adam_step(&mut flat_params, &flat_grads, adam)?;
    let mut off = 0;
    for t in net.params_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat_params[off..off + n]);
        off += n;
    }
    Ok(())
}

fn grad_len_of<T: Scalar>(net: &RegressionNet<T>, param_nodes: &[NodeId], node: NodeId) -> usize {
    let idx = param_nodes.iter().position(|&n| n == node).unwrap();
    net.named_params()[idx].1.len()
}

/// Mean smooth-L1 loss of a batch without touching parameters.
pub fn eval_loss<T: Scalar>(net: &RegressionNet<T>, batch: &[PatchSample<T>], alpha: f64) -> Result<f64> {
    let images = stack_batch(batch)?;
    let targets: Vec<T> = batch.iter().map(|p| T::from_f(p.reference.value())).collect();
    let scores = net.score_batch(&images)?;
    let mut acc = 0.0;
    for (s, t) in scores.iter().zip(&targets) {
        let (l, _) = crate::graph::smooth_l1_scalar(*s, *t, alpha)?;
        acc += l.to_f();
    }
    Ok(acc / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn snapshot<T: Scalar>(net: &RegressionNet<T>) -> Vec<Vec<T>> {
    net.named_params().iter().map(|(_, t)| t.data().to_vec()).collect()
}

fn restore<T: Scalar>(net: &mut RegressionNet<T>, snap: &[Vec<T>]) {
    for (t, s) in net.params_mut().into_iter().zip(snap) {
        t.data_mut().copy_from_slice(s);
    }
}

fn draw_batch<T: Scalar>(
    pool: &[Roi<T>],
    config: &TrainConfig,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchSample<T>>> {
    if config.balanced {
        make_balanced_batch(pool, config.batch_size, patch_size, rng)
    } else {
        make_uniform_batch(pool, config.batch_size, patch_size, rng)
    }
}

/// Early-stopping training loop. Ends with the best-validation
/// parameters loaded into `net`; fully deterministic given the seed.
pub fn train<T: Scalar>(
    net: &mut RegressionNet<T>,
    pool: &[Roi<T>],
    val_pool: &[Roi<T>],
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if pool.is_empty() || val_pool.is_empty() {
        return Err(Error::InvalidInput("training and validation pools must be non-empty".into()));
    }
    let patch_size = net.config.input_size;
    let param_len: usize = net.named_params().iter().map(|(_, t)| t.len()).sum();
    let mut adam = AdamState::new(param_len, config.learning_rate);
    let mut history = Vec::new();
    let mut best = snapshot(net);
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..config.max_epochs {
        let mut train_acc = 0.0;
        for iter in 0..config.train_iters_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64, iter as u64, 0));
            let mut batch = draw_batch(pool, config, patch_size, &mut rng)?;
            if config.augment {
                batch = batch.iter().map(|p| augment_patch(p, &mut rng)).collect();
            }
            let loss = train_step(net, &batch, config.alpha, &mut adam).map_err(|e| match e {
                Error::DegenerateInput(detail) => Error::TrainingDiverged { epoch, detail },
                other => other,
            })?;
            train_acc += loss;
        }
        let mut val_acc = 0.0;
        for iter in 0..config.val_iters_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64, iter as u64, 1));
            let batch = draw_batch(val_pool, config, patch_size, &mut rng)?;
            val_acc += eval_loss(net, &batch, config.alpha)?;
        }
        let train_loss = train_acc / config.train_iters_per_epoch as f64;
        let val_loss = val_acc / config.val_iters_per_epoch as f64;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, detail: format!("non-finite validation loss {val_loss}") });
        }
        history.push(EpochStats { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best = snapshot(net);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience_epochs {
                break;
            }
        }
    }
    restore(net, &best);
    Ok(history)
}
