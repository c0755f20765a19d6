//! Dense-block regression network and the normal-epithelium feature
//! embedding network, built on the graph engine.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f(z * sd)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Tracks parameter leaves inserted during one forward pass, in the
/// same order as `named_params`.
pub struct Bound {
    pub nodes: Vec<NodeId>,
    train: bool,
}

impl Bound {
    fn new(train: bool) -> Self {
        Bound { nodes: Vec::new(), train }
    }

    fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, t: &Tensor<T>) -> NodeId {
        let mut c = t.clone();
        c.requires_grad = self.train;
        let id = g.leaf(c);
        self.nodes.push(id);
        id
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2dLayer {
            weight: he_normal(vec![out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng),
            bias: Tensor::zeros(vec![out_c]),
            stride,
            padding,
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: NodeId, bound: &mut Bound) -> Result<NodeId> {
        let w = bound.bind(g, &self.weight);
        let b = bound.bind(g, &self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.bias_channel(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: he_normal(vec![out_f, in_f], in_f, rng),
            bias: Tensor::zeros(vec![out_f]),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: NodeId, bound: &mut Bound) -> Result<NodeId> {
        let w = bound.bind(g, &self.weight);
        let b = bound.bind(g, &self.bias);
        g.linear(x, w, b)
    }
}

/// Batch normalization: per-batch statistics in training, running
/// averages (momentum 0.1) at inference.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward_train(&mut self, g: &mut Graph<T>, x: NodeId, bound: &mut Bound) -> Result<NodeId> {
        let gamma = bound.bind(g, &self.gamma);
        let beta = bound.bind(g, &self.beta);
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
        let mom = T::from_f(self.momentum);
        let keep = T::one() - mom;
        for (r, b) in self.running_mean.iter_mut().zip(&mean) {
            *r = keep * *r + mom * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&var) {
            *r = keep * *r + mom * *b;
        }
        Ok(y)
    }

    fn forward_eval(&self, g: &mut Graph<T>, x: NodeId, bound: &mut Bound) -> Result<NodeId> {
        let gamma = bound.bind(g, &self.gamma);
        let beta = bound.bind(g, &self.beta);
        g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)
    }
}

// ---- regression network ----------------------------------------------

/// Geometry of the dense-block regression network.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionNetConfig {
    /// Square input size in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    /// (layers, growth) per dense block.
    pub blocks: Vec<(usize, usize)>,
    pub transition_compression: f64,
    /// Penultimate fully-connected width; must match the embedding
    /// network output width when joint training is enabled.
    pub head_features: usize,
}

impl RegressionNetConfig {
    /// 64x64 desk-scale geometry with paper tiling ratios preserved.
    pub fn desk_default() -> Self {
        RegressionNetConfig {
            input_size: 64,
            stem_channels: 16,
            blocks: vec![(4, 12), (4, 12)],
            transition_compression: 0.5,
            head_features: 128,
        }
    }

    /// Total spatial downsampling: stem stride 2, stem pool 2, one
    /// transition pool between consecutive blocks.
    pub fn downsample_factor(&self) -> usize {
        4 << (self.blocks.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("regression net needs at least one dense block".into()));
        }
        if !(0.0..=1.0).contains(&self.transition_compression) || self.transition_compression == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "transition_compression {} not in (0,1]",
                self.transition_compression
            )));
        }
        let f = self.downsample_factor();
        if self.input_size % f != 0 || self.input_size / f == 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} not divisible by downsampling factor {f}",
                self.input_size
            )));
        }
        if self.stem_channels == 0 || self.head_features == 0 {
            return Err(Error::InvalidConfig("zero width in regression net config".into()));
        }
        Ok(())
    }
}

pub struct RegressionForward {
    /// Raw scalar scores, shape [N].
    pub output: NodeId,
    /// Penultimate feature vectors, shape [N, head_features].
    pub head_features: NodeId,
    /// Output of the last dense block, shape [N,C,h,w]; Grad-CAM target.
    pub last_block: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Dense-block deep regression network: stem conv, alternating dense
/// blocks and channel-compressing transition layers, global average
/// pooling, and an unbounded linear score head.
#[derive(Clone, Debug)]
pub struct RegressionNet<T> {
    pub config: RegressionNetConfig,
    stem: Conv2dLayer<T>,
    blocks: Vec<Vec<Conv2dLayer<T>>>,
    transitions: Vec<Conv2dLayer<T>>,
    head: LinearLayer<T>,
    out: LinearLayer<T>,
}

impl<T: Scalar> RegressionNet<T> {
    pub fn build(config: RegressionNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2dLayer::new(3, config.stem_channels, 3, 2, 1, &mut rng);
        let mut channels = config.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &(layers, growth)) in config.blocks.iter().enumerate() {
            let mut block = Vec::new();
            for _ in 0..layers {
                block.push(Conv2dLayer::new(channels, growth, 3, 1, 1, &mut rng));
                channels += growth;
            }
            blocks.push(block);
            if bi + 1 < config.blocks.len() {
                let compressed = ((channels as f64 * config.transition_compression) as usize).max(1);
                transitions.push(Conv2dLayer::new(channels, compressed, 1, 1, 0, &mut rng));
                channels = compressed;
            }
        }
        let head = LinearLayer::new(channels, config.head_features, &mut rng);
        let out = LinearLayer::new(config.head_features, 1, &mut rng);
        Ok(RegressionNet { config, stem, blocks, transitions, head, out })
    }

    /// Channels entering each transition / the final pooling.
    pub fn final_channels(&self) -> usize {
        self.head.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, input: NodeId, train: bool) -> Result<RegressionForward> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.config.input_size || shape[3] != self.config.input_size {
            return Err(Error::InvalidShape(format!(
                "regression net wants [N,3,{0},{0}], got {shape:?}",
                self.config.input_size
            )));
        }
        let n = shape[0];
        let mut bound = Bound::new(train);
        let mut x = self.stem.forward(g, input, &mut bound)?;
        x = g.relu(x);
        x = g.maxpool2(x)?;
        let mut last_block = x;
        for (bi, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let y = layer.forward(g, x, &mut bound)?;
                let y = g.relu(y);
                x = g.concat_channels(&[x, y])?;
            }
            last_block = x;
            if bi + 1 < self.blocks.len() {
                let t = self.transitions[bi].forward(g, x, &mut bound)?;
                let t = g.relu(t);
                x = g.avgpool2(t)?;
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let feat = self.head.forward(g, pooled, &mut bound)?;
        let feat = g.relu(feat);
        let scores = self.out.forward(g, feat, &mut bound)?;
        let output = g.reshape(scores, vec![n])?;
        Ok(RegressionForward { output, head_features: feat, last_block, param_nodes: bound.nodes })
    }

    /// Raw scores for a batch of images, inference mode, no gradients.
    pub fn score_batch(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let input = g.leaf(images.clone());
        let fwd = self.forward(&mut g, input, false)?;
        Ok(g.value(fwd.output).data().to_vec())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.iter().enumerate() {
                out.push((format!("block{bi}.layer{li}.weight"), &layer.weight));
                out.push((format!("block{bi}.layer{li}.bias"), &layer.bias));
            }
            if bi < self.transitions.len() {
                out.push((format!("transition{bi}.weight"), &self.transitions[bi].weight));
                out.push((format!("transition{bi}.bias"), &self.transitions[bi].bias));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out.push(("out.weight".to_string(), &self.out.weight));
        out.push(("out.bias".to_string(), &self.out.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.stem.weight, &mut self.stem.bias];
        let n_trans = self.transitions.len();
        let mut trans = self.transitions.iter_mut();
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for layer in block.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
            if bi < n_trans {
                let t = trans.next().unwrap();
                out.push(&mut t.weight);
                out.push(&mut t.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.push(&mut self.out.weight);
        out.push(&mut self.out.bias);
        out
    }
}

// ---- embedding network -----------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

/// Feature embedding network for normal patches: conv + maxpool + ReLU
/// + BN stages, then two fully-connected layers. A maxpool whose input
/// map is already 1x1 is skipped and the first fully-connected input
/// width is recomputed from the shape walk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetConfig {
    pub input_size: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub fc_hidden: usize,
    /// Must equal the regression network's head_features for joint
    /// training.
    pub output_width: usize,
}

impl EmbeddingNetConfig {
    /// The tabulated architecture at 512-pixel input.
    pub fn paper_default() -> Self {
        EmbeddingNetConfig {
            input_size: 512,
            conv_layers: vec![
                ConvSpec { kernel: 7, stride: 3, padding: 0, channels: 32 },
                ConvSpec { kernel: 5, stride: 2, padding: 0, channels: 64 },
                ConvSpec { kernel: 3, stride: 3, padding: 0, channels: 64 },
                ConvSpec { kernel: 3, stride: 3, padding: 0, channels: 128 },
            ],
            fc_hidden: 256,
            output_width: 1024,
        }
    }

    pub fn desk_default() -> Self {
        EmbeddingNetConfig {
            input_size: 64,
            conv_layers: vec![
                ConvSpec { kernel: 5, stride: 2, padding: 0, channels: 32 },
                ConvSpec { kernel: 3, stride: 2, padding: 0, channels: 64 },
                ConvSpec { kernel: 3, stride: 1, padding: 0, channels: 64 },
                ConvSpec { kernel: 1, stride: 1, padding: 0, channels: 128 },
            ],
            fc_hidden: 64,
            output_width: 128,
        }
    }

    /// Spatial size after each stage plus the flatten width feeding
    /// the first fully-connected layer.
    pub fn shape_walk(&self) -> Result<(Vec<usize>, usize)> {
        let mut sizes = Vec::new();
        let mut h = self.input_size;
        let mut channels = 0;
        for (i, spec) in self.conv_layers.iter().enumerate() {
            let padded = h + 2 * spec.padding;
            if spec.kernel > padded {
                return Err(Error::InvalidConfig(format!(
                    "embedding conv layer {i}: kernel {} exceeds input {padded}",
                    spec.kernel
                )));
            }
            h = (padded - spec.kernel) / spec.stride + 1;
            if h >= 2 {
                h /= 2; // maxpool(2,2)
            }
            sizes.push(h);
            channels = spec.channels;
        }
        Ok((sizes, channels * h * h))
    }
}

pub struct EmbeddingForward {
    /// [N, output_width] embedding vectors.
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Debug)]
pub struct EmbeddingNet<T> {
    pub config: EmbeddingNetConfig,
    convs: Vec<Conv2dLayer<T>>,
    bns: Vec<BatchNormLayer<T>>,
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
    /// Forward invocations; inference paths must never touch this net.
    pub forward_count: AtomicU64,
}

impl<T: Scalar> Clone for EmbeddingNet<T> {
    fn clone(&self) -> Self {
        EmbeddingNet {
            config: self.config.clone(),
            convs: self.convs.clone(),
            bns: self.bns.clone(),
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> EmbeddingNet<T> {
    pub fn build(config: EmbeddingNetConfig, seed: u64) -> Result<Self> {
        let (_, flatten) = config.shape_walk()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut in_c = 3;
        for spec in &config.conv_layers {
            convs.push(Conv2dLayer::new(in_c, spec.channels, spec.kernel, spec.stride, spec.padding, &mut rng));
            bns.push(BatchNormLayer::new(spec.channels));
            in_c = spec.channels;
        }
        let fc1 = LinearLayer::new(flatten, config.fc_hidden, &mut rng);
        let fc2 = LinearLayer::new(config.fc_hidden, config.output_width, &mut rng);
        Ok(EmbeddingNet { config, convs, bns, fc1, fc2, forward_count: AtomicU64::new(0) })
    }

    pub fn forward_train(&mut self, g: &mut Graph<T>, input: NodeId) -> Result<EmbeddingForward> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut bound = Bound::new(true);
        let mut x = input;
        let n = g.value(input).shape()[0];
        let n_convs = self.convs.len();
        for i in 0..n_convs {
            x = self.convs[i].forward(g, x, &mut bound)?;
            if g.value(x).shape()[2] >= 2 && g.value(x).shape()[3] >= 2 {
                x = g.maxpool2(x)?;
            }
            x = g.relu(x);
            x = self.bns[i].forward_train(g, x, &mut bound)?;
        }
        let flat: usize = g.value(x).shape()[1..].iter().product();
        x = g.reshape(x, vec![n, flat])?;
        x = self.fc1.forward(g, x, &mut bound)?;
        x = g.relu(x);
        x = self.fc2.forward(g, x, &mut bound)?;
        let output = g.relu(x);
        Ok(EmbeddingForward { output, param_nodes: bound.nodes })
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, input: NodeId) -> Result<EmbeddingForward> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut bound = Bound::new(false);
        let mut x = input;
        let n = g.value(input).shape()[0];
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            x = conv.forward(g, x, &mut bound)?;
            if g.value(x).shape()[2] >= 2 && g.value(x).shape()[3] >= 2 {
                x = g.maxpool2(x)?;
            }
            x = g.relu(x);
            x = bn.forward_eval(g, x, &mut bound)?;
        }
        let flat: usize = g.value(x).shape()[1..].iter().product();
        x = g.reshape(x, vec![n, flat])?;
        x = self.fc1.forward(g, x, &mut bound)?;
        x = g.relu(x);
        x = self.fc2.forward(g, x, &mut bound)?;
        let output = g.relu(x);
        Ok(EmbeddingForward { output, param_nodes: bound.nodes })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            out.push((format!("conv{i}.weight"), &conv.weight));
            out.push((format!("conv{i}.bias"), &conv.bias));
            out.push((format!("bn{i}.gamma"), &bn.gamma));
            out.push((format!("bn{i}.beta"), &bn.beta));
        }
        out.push(("fc1.weight".to_string(), &self.fc1.weight));
        out.push(("fc1.bias".to_string(), &self.fc1.bias));
        out.push(("fc2.weight".to_string(), &self.fc2.weight));
        out.push(("fc2.bias".to_string(), &self.fc2.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (conv, bn) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }
}
