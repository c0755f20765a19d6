//! Normal-epithelium baseline extension: the score-parameterized
//! cosine loss against normal-patch embeddings, and joint training of
//! the regression and embedding networks.

use crate::error::{Error, Result};
use crate::graph::{cosine_similarity, Graph};
use crate::net::{EmbeddingNet, RegressionNet};
use crate::optim::{adam_step, AdamState};
use crate::regressor::{regression_loss_graph, stack_batch, PatchSample};
use crate::scalar::Scalar;
use crate::score::PleomorphismScore;

/// phi(y) = 0.5 y - 1, mapping [1,3] onto [-0.5, 0.5].
pub fn phi(reference: PleomorphismScore) -> Result<f64> {
    let y = reference.value();
    if !(1.0..=3.0).contains(&y) {
        return Err(Error::InvalidInput(format!("reference score {y} outside [1,3]")));
    }
    Ok(0.5 * y - 1.0)
}

/// max(0, phi(y) * cos(tumor, normal)); gradients are zero on the
/// clipped branch.
pub fn normal_baseline_loss<T: Scalar>(
    tumor_features: &[T],
    normal_embedding: &[T],
    reference: PleomorphismScore,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let p = T::from_f(phi(reference)?);
    let (cos, dt, dn) = cosine_similarity(tumor_features, normal_embedding)?;
    let raw = p * cos;
    if raw > T::zero() {
        Ok((
            raw,
            dt.into_iter().map(|g| g * p).collect(),
            dn.into_iter().map(|g| g * p).collect(),
        ))
    } else {
        Ok((T::zero(), vec![T::zero(); dt.len()], vec![T::zero(); dn.len()]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossWeights {
    pub weight_t: f64,
    pub weight_n: f64,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        JointLossWeights { weight_t: 1.0, weight_n: 1.0 }
    }
}

impl JointLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.weight_t < 0.0 || self.weight_n < 0.0 || (self.weight_t == 0.0 && self.weight_n == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights ({}, {}) must be non-negative and not both zero",
                self.weight_t, self.weight_n
            )));
        }
        Ok(())
    }
}

/// Optimizer state pair for joint training.
pub struct JointAdam<T> {
    pub regression: AdamState<T>,
    pub embedding: AdamState<T>,
}

impl<T: Scalar> JointAdam<T> {
    pub fn new(net: &RegressionNet<T>, embed: &EmbeddingNet<T>, learning_rate: f64) -> Self {
        let rp: usize = net.named_params().iter().map(|(_, t)| t.len()).sum();
        let ep: usize = embed.named_params().iter().map(|(_, t)| t.len()).sum();
        JointAdam { regression: AdamState::new(rp, learning_rate), embedding: AdamState::new(ep, learning_rate) }
    }
}

/// One joint optimization step: total loss = weight_t * mean(loss_t) +
/// weight_n * mean(loss_n), positional tumor/normal pairing, one Adam
/// step per network. Returns (loss_t, loss_n).
pub fn joint_train_step<T: Scalar>(
    net: &mut RegressionNet<T>,
    embed: &mut EmbeddingNet<T>,
    tumor_batch: &[PatchSample<T>],
    normal_batch: &[PatchSample<T>],
    weights: &JointLossWeights,
    alpha: f64,
    adam: &mut JointAdam<T>,
) -> Result<(f64, f64)> {
    weights.validate()?;
    if tumor_batch.len() != normal_batch.len() {
        return Err(Error::InvalidInput(format!(
            "tumor batch ({}) and normal batch ({}) must pair positionally",
            tumor_batch.len(),
            normal_batch.len()
        )));
    }
    let targets: Vec<T> = tumor_batch.iter().map(|p| T::from_f(p.reference.value())).collect();
    let phis: Vec<T> = tumor_batch
        .iter()
        .map(|p| phi(p.reference).map(T::from_f))
        .collect::<Result<_>>()?;

    let mut g = Graph::new();
    let tumor_input = g.leaf(stack_batch(tumor_batch)?);
    let (loss_t, fwd) = regression_loss_graph(&mut g, net, tumor_input, &targets, alpha)?;
    let normal_input = g.leaf(stack_batch(normal_batch)?);
    let efwd = embed.forward_train(&mut g, normal_input)?;
    let cos = g.cosine_rows(fwd.head_features, efwd.output)?;
    let scaled = g.scale_rows(cos, &phis)?;
    let clipped = g.relu(scaled);
    let loss_n = g.mean_all(clipped);
    let total = g.add_weighted(loss_t, loss_n, T::from_f(weights.weight_t), T::from_f(weights.weight_n))?;

    let lt = g.value(loss_t).item().to_f();
    let ln = g.value(loss_n).item().to_f();
    if !lt.is_finite() || !ln.is_finite() {
        return Err(Error::DegenerateInput(format!("non-finite joint losses ({lt}, {ln})")));
    }
    let grads = g.backward(total)?;
    crate::regressor::apply_param_grads(net, &fwd.param_nodes, &grads, &mut adam.regression)?;

    let mut eg = Vec::new();
    let lens: Vec<usize> = embed.named_params().iter().map(|(_, t)| t.len()).collect();
    for (&node, &len) in efwd.param_nodes.iter().zip(&lens) {
        match grads.get(node) {
            Some(gs) => eg.extend_from_slice(gs),
            None => eg.extend(std::iter::repeat_n(T::zero(), len)),
        }
    }
    let mut flat = Vec::new();
    for t in embed.params_mut() {
        flat.extend_from_slice(t.data());
    }
    adam_step(&mut flat, &eg, &mut adam.embedding)?;
    let mut off = 0;
    for t in embed.params_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok((lt, ln))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointEpochStats {
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_n: f64,
    pub val_loss: f64,
}

/// Joint early-stopping loop mirroring the plain trainer; normal
/// patches are drawn uniformly (with replacement) from the normal
/// pool and paired positionally with the tumor batch.
pub fn joint_train<T: Scalar>(
    net: &mut RegressionNet<T>,
    embed: &mut EmbeddingNet<T>,
    tumor_pool: &[crate::regressor::Roi<T>],
    normal_pool: &[crate::regressor::Roi<T>],
    val_pool: &[crate::regressor::Roi<T>],
    config: &crate::regressor::TrainConfig,
    weights: &JointLossWeights,
) -> Result<Vec<JointEpochStats>> {
    use crate::regressor::{augment_patch, child_seed, eval_loss, make_balanced_batch, make_uniform_batch};
    use rand::SeedableRng;

    config.validate()?;
    weights.validate()?;
    if tumor_pool.is_empty() || normal_pool.is_empty() || val_pool.is_empty() {
        return Err(Error::InvalidInput("joint training pools must be non-empty".into()));
    }
    let patch_size = net.config.input_size;
    if embed.config.input_size != patch_size || embed.config.output_width != net.config.head_features {
        return Err(Error::InvalidConfig(format!(
            "embedding net ({} px, width {}) incompatible with regression net ({} px, head {})",
            embed.config.input_size, embed.config.output_width, patch_size, net.config.head_features
        )));
    }
    let mut adam = JointAdam::new(net, embed, config.learning_rate);
    let mut history = Vec::new();
    let mut best: Vec<Vec<T>> = net.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..config.max_epochs {
        let mut acc_t = 0.0;
        let mut acc_n = 0.0;
        for iter in 0..config.train_iters_per_epoch {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64, iter as u64, 0));
            let mut tumor = if config.balanced {
                make_balanced_batch(tumor_pool, config.batch_size, patch_size, &mut rng)?
            } else {
                make_uniform_batch(tumor_pool, config.batch_size, patch_size, &mut rng)?
            };
            if config.augment {
                tumor = tumor.iter().map(|p| augment_patch(p, &mut rng)).collect();
            }
            let mut nrng =
                rand_chacha::ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64, iter as u64, 2));
            let normal = make_uniform_batch(normal_pool, config.batch_size, patch_size, &mut nrng)?;
            let (lt, ln) =
                joint_train_step(net, embed, &tumor, &normal, weights, config.alpha, &mut adam).map_err(
                    |e| match e {
                        Error::DegenerateInput(detail) => Error::TrainingDiverged { epoch, detail },
                        other => other,
                    },
                )?;
            acc_t += lt;
            acc_n += ln;
        }
        let mut val_acc = 0.0;
        for iter in 0..config.val_iters_per_epoch {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64, iter as u64, 1));
            let batch = if config.balanced {
                make_balanced_batch(val_pool, config.batch_size, patch_size, &mut rng)?
            } else {
                make_uniform_batch(val_pool, config.batch_size, patch_size, &mut rng)?
            };
            val_acc += eval_loss(net, &batch, config.alpha)?;
        }
        let val_loss = val_acc / config.val_iters_per_epoch as f64;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, detail: format!("non-finite validation loss {val_loss}") });
        }
        history.push(JointEpochStats {
            epoch,
            loss_t: acc_t / config.train_iters_per_epoch as f64,
            loss_n: acc_n / config.train_iters_per_epoch as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = net.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience_epochs {
                break;
            }
        }
    }
    for (t, s) in net.params_mut().into_iter().zip(&best) {
        t.data_mut().copy_from_slice(s);
    }
    Ok(history)
}
