//! Plain-text run configuration: dotted keys, one `key = value` per
//! line, unknown keys rejected, resolved form echoed back out.

use crate::baseline::JointLossWeights;
use crate::error::{Error, Result};
use crate::inference::SlidePooling;
use crate::net::{EmbeddingNetConfig, RegressionNetConfig};
use crate::regressor::TrainConfig;
use crate::synthdata::SimulatedPanelConfig;

/// Synthetic dataset layout for gen-data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    /// Square ROI size; must be >= the network input size.
    pub roi_size: usize,
    pub cell_density: f64,
    /// One severity-1 normal ROI per this many tumor cases.
    pub normal_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_cases: 18,
            val_cases: 9,
            test_cases: 12,
            roi_size: 96,
            cell_density: 0.008,
            normal_every: 3,
        }
    }
}

/// Inference-side knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub block_size: usize,
    pub mask_threshold: u64,
    pub density_sigma: f64,
    pub pooling: SlidePooling,
    pub quantize_k: usize,
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            tile_size: 64,
            overlap: 56,
            block_size: 8,
            mask_threshold: 1,
            density_sigma: 4.0,
            pooling: SlidePooling::PerRegion,
            quantize_k: 3,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: RegressionNetConfig,
    pub embed_fc_hidden: usize,
    pub train: TrainConfig,
    pub panel: SimulatedPanelConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
    pub weights: JointLossWeights,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: RegressionNetConfig::desk_default(),
            embed_fc_hidden: EmbeddingNetConfig::desk_default().fc_hidden,
            train: TrainConfig::desk_default(),
            panel: SimulatedPanelConfig::default(),
            data: DataConfig::default(),
            infer: InferConfig::default(),
            weights: JointLossWeights::default(),
            seed: 0,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("key {key}: expected true/false, got {value:?}"))),
    }
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let (l, g) = part
                .split_once('x')
                .ok_or_else(|| Error::InvalidConfig(format!("key {key}: block spec {part:?} wants LAYERSxGROWTH")))?;
            Ok((parse_as(key, l.trim())?, parse_as(key, g.trim())?))
        })
        .collect()
}

fn blocks_to_string(blocks: &[(usize, usize)]) -> String {
    blocks.iter().map(|(l, g)| format!("{l}x{g}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one dotted-key assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "net.input_size" => self.net.input_size = parse_as(key, value)?,
            "net.stem_channels" => self.net.stem_channels = parse_as(key, value)?,
            "net.blocks" => self.net.blocks = parse_blocks(key, value)?,
            "net.transition_compression" => self.net.transition_compression = parse_as(key, value)?,
            "net.head_features" => self.net.head_features = parse_as(key, value)?,
            "embed.fc_hidden" => self.embed_fc_hidden = parse_as(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_as(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_as(key, value)?,
            "train.train_iters_per_epoch" => self.train.train_iters_per_epoch = parse_as(key, value)?,
            "train.val_iters_per_epoch" => self.train.val_iters_per_epoch = parse_as(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse_as(key, value)?,
            "train.patience_epochs" => self.train.patience_epochs = parse_as(key, value)?,
            "train.alpha" => self.train.alpha = parse_as(key, value)?,
            "train.balanced" => self.train.balanced = parse_bool(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "panel.n_raters" => self.panel.n_raters = parse_as(key, value)?,
            "panel.score_noise_sd" => self.panel.score_noise_sd = parse_as(key, value)?,
            "panel.certain_threshold" => self.panel.certain_threshold = parse_as(key, value)?,
            "panel.fairly_certain_threshold" => self.panel.fairly_certain_threshold = parse_as(key, value)?,
            "data.train_cases" => self.data.train_cases = parse_as(key, value)?,
            "data.val_cases" => self.data.val_cases = parse_as(key, value)?,
            "data.test_cases" => self.data.test_cases = parse_as(key, value)?,
            "data.roi_size" => self.data.roi_size = parse_as(key, value)?,
            "data.cell_density" => self.data.cell_density = parse_as(key, value)?,
            "data.normal_every" => self.data.normal_every = parse_as(key, value)?,
            "infer.tile_size" => self.infer.tile_size = parse_as(key, value)?,
            "infer.overlap" => self.infer.overlap = parse_as(key, value)?,
            "infer.block_size" => self.infer.block_size = parse_as(key, value)?,
            "infer.mask_threshold" => self.infer.mask_threshold = parse_as(key, value)?,
            "infer.density_sigma" => self.infer.density_sigma = parse_as(key, value)?,
            "infer.batch_size" => self.infer.batch_size = parse_as(key, value)?,
            "infer.quantize_k" => self.infer.quantize_k = parse_as(key, value)?,
            "infer.pooling" => {
                self.infer.pooling = match value {
                    "per_region" => SlidePooling::PerRegion,
                    "per_block" => SlidePooling::PerBlock,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "key {key}: expected per_region or per_block, got {value:?}"
                        )))
                    }
                }
            }
            "loss.weight_t" => self.weights.weight_t = parse_as(key, value)?,
            "loss.weight_n" => self.weights.weight_n = parse_as(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a whole config file: `key = value` lines, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", ln + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.data.roi_size < self.net.input_size {
            return Err(Error::InvalidConfig(format!(
                "data.roi_size {} smaller than net.input_size {}",
                self.data.roi_size, self.net.input_size
            )));
        }
        if self.infer.quantize_k < 2 {
            return Err(Error::InvalidConfig("infer.quantize_k must be >= 2".into()));
        }
        if self.data.normal_every == 0 {
            return Err(Error::InvalidConfig("data.normal_every must be positive".into()));
        }
        Ok(())
    }

    /// Embedding geometry implied by the regression net.
    pub fn embed_config(&self) -> EmbeddingNetConfig {
        EmbeddingNetConfig {
            input_size: self.net.input_size,
            fc_hidden: self.embed_fc_hidden,
            output_width: self.net.head_features,
            ..EmbeddingNetConfig::desk_default()
        }
    }

    /// Fully resolved dotted-key form, defaults included; parsing the
    /// echo reproduces the config.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("seed", self.seed.to_string());
        push("net.input_size", self.net.input_size.to_string());
        push("net.stem_channels", self.net.stem_channels.to_string());
        push("net.blocks", blocks_to_string(&self.net.blocks));
        push("net.transition_compression", self.net.transition_compression.to_string());
        push("net.head_features", self.net.head_features.to_string());
        push("embed.fc_hidden", self.embed_fc_hidden.to_string());
        push("train.learning_rate", self.train.learning_rate.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.train_iters_per_epoch", self.train.train_iters_per_epoch.to_string());
        push("train.val_iters_per_epoch", self.train.val_iters_per_epoch.to_string());
        push("train.max_epochs", self.train.max_epochs.to_string());
        push("train.patience_epochs", self.train.patience_epochs.to_string());
        push("train.alpha", self.train.alpha.to_string());
        push("train.balanced", self.train.balanced.to_string());
        push("train.augment", self.train.augment.to_string());
        push("panel.n_raters", self.panel.n_raters.to_string());
        push("panel.score_noise_sd", self.panel.score_noise_sd.to_string());
        push("panel.certain_threshold", self.panel.certain_threshold.to_string());
        push("panel.fairly_certain_threshold", self.panel.fairly_certain_threshold.to_string());
        push("data.train_cases", self.data.train_cases.to_string());
        push("data.val_cases", self.data.val_cases.to_string());
        push("data.test_cases", self.data.test_cases.to_string());
        push("data.roi_size", self.data.roi_size.to_string());
        push("data.cell_density", self.data.cell_density.to_string());
        push("data.normal_every", self.data.normal_every.to_string());
        push("infer.tile_size", self.infer.tile_size.to_string());
        push("infer.overlap", self.infer.overlap.to_string());
        push("infer.block_size", self.infer.block_size.to_string());
        push("infer.mask_threshold", self.infer.mask_threshold.to_string());
        push("infer.density_sigma", self.infer.density_sigma.to_string());
        push(
            "infer.pooling",
            match self.infer.pooling {
                SlidePooling::PerRegion => "per_region".to_string(),
                SlidePooling::PerBlock => "per_block".to_string(),
            },
        );
        push("infer.quantize_k", self.infer.quantize_k.to_string());
        push("infer.batch_size", self.infer.batch_size.to_string());
        push("loss.weight_t", self.weights.weight_t.to_string());
        push("loss.weight_n", self.weights.weight_n.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_echo() {
        let config = RunConfig::default();
        let echoed = RunConfig::parse(&config.resolved()).unwrap();
        assert_eq!(echoed, config);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "\n# comment\ntrain.batch_size = 6  # trailing\nnet.blocks = 3x8,2x4\nseed = 42\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.train.batch_size, 6);
        assert_eq!(config.net.blocks, vec![(3, 8), (2, 4)]);
        assert_eq!(config.seed, 42);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("net.depth = 5\n"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn malformed_value_rejected() {
        assert!(RunConfig::parse("train.batch_size = twelve\n").is_err());
        assert!(RunConfig::parse("train.balanced = yes\n").is_err());
        assert!(RunConfig::parse("net.blocks = 4-12\n").is_err());
    }

    #[test]
    fn cross_field_validation() {
        assert!(RunConfig::parse("data.roi_size = 32\n").is_err());
        assert!(RunConfig::parse("loss.weight_t = 0\nloss.weight_n = 0\n").is_err());
    }

    #[test]
    fn embed_config_tracks_net() {
        let config = RunConfig::parse("net.head_features = 96\n").unwrap();
        let e = config.embed_config();
        assert_eq!(e.output_width, 96);
        assert_eq!(e.input_size, config.net.input_size);
    }
}
