//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builds a scalar-valued graph from a single input leaf. The closure
/// must be deterministic; it is re-run for every perturbed evaluation.
pub trait ScalarMap<T: Scalar>: Fn(&mut Graph<T>, NodeId) -> Result<NodeId> {}
impl<T: Scalar, F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>> ScalarMap<T> for F {}

/// Central finite differences against the tape gradient at `point`,
/// over every coordinate. Returns the max relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<T: Scalar>(f: impl ScalarMap<T>, point: &Tensor<T>, h: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// Like [`grad_check`] but restricted to the given coordinates; used
/// for large inputs where probing every coordinate is too slow.
pub fn grad_check_coords<T: Scalar>(
    f: impl ScalarMap<T>,
    point: &Tensor<T>,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!("grad_check h {h} <= 0")));
    }
    let eval = |data: &Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let leaf = g.leaf(data.clone());
        let out = f(&mut g, leaf)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::DegenerateInput("non-finite function value in grad_check".into()));
        }
        Ok(v)
    };

    // analytic gradient at the point
    let analytic: Vec<T> = {
        let mut g = Graph::new();
        let mut p = point.clone();
        p.requires_grad = true;
        let leaf = g.leaf(p);
        let out = f(&mut g, leaf)?;
        if !g.value(out).item().is_finite() {
            return Err(Error::DegenerateInput("non-finite function value in grad_check".into()));
        }
        let grads = g.backward(out)?;
        grads
            .get(leaf)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![T::zero(); point.len()])
    };

    let hv = T::from_f(h);
    let mut max_err = 0.0f64;
    let mut perturbed = point.clone();
    perturbed.requires_grad = false;
    for &i in coords {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + hv;
        let fp = eval(&perturbed)?.to_f();
        perturbed.data_mut()[i] = orig - hv;
        let fm = eval(&perturbed)?.to_f();
        perturbed.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].to_f();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// One differentiable-op probe: name, measured max relative error,
/// and its tolerance.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn randn_tensor(shape: Vec<usize>, seed: u64, scale: f64, offset: f64) -> Tensor<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale + offset
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Finite-difference probes for every differentiable op, double
/// precision, h = 1e-5. Linear ops carry the tighter 1e-6 bar.
pub fn run_op_grad_checks() -> Result<Vec<OpCheck>> {
    const H: f64 = 1e-5;
    const LINEAR: f64 = 1e-6;
    const NONLINEAR: f64 = 1e-4;
    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     tolerance: f64,
                     point: Tensor<f64>,
                     f: &dyn Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>|
     -> Result<()> {
        let max_rel_err = grad_check(f, &point, H)?;
        out.push(OpCheck { name, max_rel_err, tolerance });
        Ok(())
    };

    let kernel = randn_tensor(vec![2, 3, 3, 3], 11, 0.5, 0.0);
    check("conv2d/input", LINEAR, randn_tensor(vec![2, 3, 6, 6], 1, 1.0, 0.0), &|g, x| {
        let k = g.leaf(kernel.clone());
        let y = g.conv2d(x, k, 1, 1)?;
        Ok(g.mean_all(y))
    })?;
    let image = randn_tensor(vec![2, 3, 6, 6], 2, 1.0, 0.0);
    check("conv2d/kernel", LINEAR, randn_tensor(vec![2, 3, 3, 3], 12, 0.5, 0.0), &|g, k| {
        let x = g.leaf(image.clone());
        let y = g.conv2d(x, k, 2, 0)?;
        Ok(g.mean_all(y))
    })?;
    let weight = randn_tensor(vec![3, 5], 13, 0.7, 0.0);
    let bias = randn_tensor(vec![3], 14, 0.3, 0.0);
    check("linear", LINEAR, randn_tensor(vec![4, 5], 3, 1.0, 0.0), &|g, x| {
        let w = g.leaf(weight.clone());
        let b = g.leaf(bias.clone());
        let y = g.linear(x, w, b)?;
        Ok(g.mean_all(y))
    })?;
    check("bias_channel", LINEAR, randn_tensor(vec![2, 3, 4, 4], 4, 1.0, 0.0), &|g, x| {
        let b = g.leaf(randn_tensor(vec![3], 15, 0.3, 0.0));
        let y = g.bias_channel(x, b)?;
        Ok(g.mean_all(y))
    })?;
    // relu probed away from its kink at 0
    check("relu", NONLINEAR, randn_tensor(vec![2, 3, 4, 4], 5, 1.0, 1.0), &|g, x| {
        let y = g.relu(x);
        Ok(g.mean_all(y))
    })?;
    // maxpool probed on well-separated values so h cannot flip argmax
    let mut spread = randn_tensor(vec![1, 2, 4, 4], 6, 1.0, 0.0);
    for (i, v) in spread.data_mut().iter_mut().enumerate() {
        *v += i as f64;
    }
    check("maxpool2", NONLINEAR, spread, &|g, x| {
        let y = g.maxpool2(x)?;
        Ok(g.mean_all(y))
    })?;
    check("avgpool2", LINEAR, randn_tensor(vec![2, 2, 4, 4], 7, 1.0, 0.0), &|g, x| {
        let y = g.avgpool2(x)?;
        Ok(g.mean_all(y))
    })?;
    check("global_avg_pool", LINEAR, randn_tensor(vec![2, 3, 4, 4], 8, 1.0, 0.0), &|g, x| {
        let y = g.global_avg_pool(x)?;
        Ok(g.mean_all(y))
    })?;
    check("concat_channels", LINEAR, randn_tensor(vec![2, 3, 4, 4], 9, 1.0, 0.0), &|g, x| {
        let other = g.leaf(randn_tensor(vec![2, 2, 4, 4], 16, 1.0, 0.0));
        let y = g.concat_channels(&[x, other])?;
        Ok(g.mean_all(y))
    })?;
    check("batch_norm_train", NONLINEAR, randn_tensor(vec![6, 3], 10, 1.0, 0.5), &|g, x| {
        let gamma = g.leaf(randn_tensor(vec![3], 17, 0.2, 1.0));
        let beta = g.leaf(randn_tensor(vec![3], 18, 0.2, 0.0));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5)?;
        Ok(g.mean_all(y))
    })?;
    // smooth_l1 probed away from |x| = alpha
    check("smooth_l1", NONLINEAR, Tensor::new(vec![4], vec![0.3, -0.4, 1.8, -2.2]).unwrap(), &|g, x| {
        let y = g.smooth_l1(x, &[0.0; 4], 1.0)?;
        Ok(g.mean_all(y))
    })?;
    check("cosine_rows", NONLINEAR, randn_tensor(vec![2, 4], 19, 1.0, 0.3), &|g, x| {
        let other = g.leaf(randn_tensor(vec![2, 4], 20, 1.0, 0.2));
        let y = g.cosine_rows(x, other)?;
        Ok(g.mean_all(y))
    })?;
    check("reshape", LINEAR, randn_tensor(vec![2, 6], 21, 1.0, 0.0), &|g, x| {
        let y = g.reshape(x, vec![3, 4])?;
        Ok(g.mean_all(y))
    })?;
    check("scale_rows", LINEAR, randn_tensor(vec![4], 22, 1.0, 0.0), &|g, x| {
        let y = g.scale_rows(x, &[0.5, -1.5, 2.0, 0.25])?;
        Ok(g.mean_all(y))
    })?;
    check("add_weighted", LINEAR, randn_tensor(vec![5], 23, 1.0, 0.0), &|g, x| {
        let other = g.leaf(randn_tensor(vec![5], 24, 1.0, 0.0));
        let y = g.add_weighted(x, other, 0.7, -1.3)?;
        Ok(g.mean_all(y))
    })?;
    Ok(out)
}
