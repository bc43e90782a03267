//! Full segmentation model: pad → CNN features → transformer encoder with the
//! CNN injected before and after → dense decoder → crop back to the input size.
//!
//! There is no prompt pathway; semantic segmentation never feeds prompts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cnn::{CnnConfig, CnnEncoder};
use crate::encoder::{apply_freeze, EncoderConfig, FreezePolicy, ImageEncoder};
use crate::error::{config_err, Error, Result};
use crate::layers::activation::Activation;
use crate::layers::conv::ConvSpec;
use crate::layers::norm::NormAxis;
use crate::macs::CostReport;
use crate::nn::{Conv2d, Init, LayerNorm};
use crate::params::ParamRegistry;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cnn: CnnConfig,
    pub num_classes: usize,
    /// One decoder stage (conv 3×3, norm, activation, 2× upsample) per entry.
    pub decoder_channels: Vec<usize>,
    pub decoder_activation: Activation,
    pub freeze: FreezePolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            cnn: CnnConfig::default(),
            num_classes: 4,
            decoder_channels: vec![64, 32, 16],
            decoder_activation: Activation::Relu,
            freeze: FreezePolicy::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cnn.validate()?;
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(config_err(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.decoder_channels.contains(&0) {
            return Err(config_err("decoder channels must be positive"));
        }
        if self.cnn.in_channels != self.encoder.in_channels {
            return Err(config_err("CNN and encoder must read the same image channels"));
        }
        Ok(())
    }

    /// Small configuration for end-to-end gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.encoder.embed_dim = 16;
        c.encoder.depth = 1;
        c.encoder.num_heads = 2;
        c.encoder.mlp_ratio = 2;
        c.encoder.patch_size = 8;
        c.encoder.adapter.embed_dim = 16;
        c.encoder.adapter.bottleneck_dim = 4;
        c.cnn.stage_channels = vec![4, 4, 8];
        c.decoder_channels = vec![8, 4];
        c.num_classes = 3;
        c
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    conv: Conv2d,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Decoder {
    stages: Vec<DecoderStage>,
    classifier: Conv2d,
    activation: Activation,
}

impl Decoder {
    fn new(embed_dim: usize, channels: &[usize], num_classes: usize, activation: Activation) -> Self {
        let mut cin = embed_dim;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = DecoderStage {
                    conv: Conv2d::new(format!("decoder.stages.{i}.conv"), ConvSpec::same(cin, c, 3, 1), true),
                    norm: LayerNorm::new(format!("decoder.stages.{i}.norm"), c, NormAxis::Channels),
                };
                cin = c;
                s
            })
            .collect();
        Self {
            stages,
            classifier: Conv2d::new("decoder.classifier", ConvSpec::new(cin, num_classes, 1), true),
            activation,
        }
    }

    fn init(&self, params: &mut ParamRegistry, rng: &mut ChaCha8Rng) -> Result<()> {
        for s in &self.stages {
            s.conv.init(params, Init::Kaiming, rng)?;
            s.norm.init(params)?;
        }
        self.classifier.init(params, Init::LeCun, rng)
    }

    /// `[B, Ht, Wt, D]` tokens → `[B, classes, out_h, out_w]` logits.
    fn forward(&self, tape: &mut Tape, params: &ParamRegistry, tokens: Var, out: (usize, usize)) -> Result<Var> {
        let mut x = tape.nhwc_to_nchw(tokens)?;
        for s in &self.stages {
            x = s.conv.forward(tape, params, x)?;
            x = s.norm.forward(tape, params, x)?;
            x = tape.activation(x, self.activation)?;
            let [_, _, h, w] = tape.value(x).dims4()?;
            x = tape.resize_bilinear(x, 2 * h, 2 * w)?;
        }
        let logits = self.classifier.forward(tape, params, x)?;
        tape.resize_bilinear(logits, out.0, out.1)
    }

    fn cost(&self, report: &mut CostReport, embed_dim: usize, grid: (usize, usize), out: (usize, usize)) -> Result<()> {
        let mut dims = [embed_dim, grid.0, grid.1];
        for s in &self.stages {
            dims = s.conv.cost(report, dims)?;
            s.norm.cost(report, dims.to_vec());
            report.push(&format!("{}.upsample", s.conv.name), "resize", dims.to_vec(), 0, 0);
            dims = [dims[0], 2 * dims[1], 2 * dims[2]];
        }
        let d = self.classifier.cost(report, dims)?;
        report.push("decoder.resize", "resize", vec![d[0], out.0, out.1], 0, 0);
        Ok(())
    }
}

/// The network structure derived from a config, without parameter values.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub cnn: CnnEncoder,
    pub encoder: ImageEncoder,
    decoder: Decoder,
}

impl ModelGraph {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            cnn: CnnEncoder::new(&config.cnn, config.encoder.embed_dim)?,
            encoder: ImageEncoder::new(&config.encoder)?,
            decoder: Decoder::new(
                config.encoder.embed_dim,
                &config.decoder_channels,
                config.num_classes,
                config.decoder_activation,
            ),
            config: config.clone(),
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamRegistry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        self.cnn.init(&mut params, &mut rng)?;
        self.encoder.init(&mut params, &mut rng)?;
        self.decoder.init(&mut params, &mut rng)?;
        Ok(params)
    }

    /// Input size rounded up to a multiple of the patch size.
    pub fn padded_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.config.encoder.patch_size;
        if height < p || width < p {
            return Err(Error::Precondition(format!(
                "image {height}x{width} is smaller than the patch size {p}; pad it to at least {p}x{p}"
            )));
        }
        Ok((height.div_ceil(p) * p, width.div_ceil(p) * p))
    }

    /// Records a forward pass; the returned logits have the input's spatial size.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamRegistry, image: &FeatureMap) -> Result<Var> {
        if image.channels() != self.config.encoder.in_channels {
            return Err(config_err(format!(
                "model expects {} image channels, got {}",
                self.config.encoder.in_channels,
                image.channels()
            )));
        }
        image.tensor().ensure_finite("input image")?;
        let (h, w) = (image.height(), image.width());
        let (ph, pw) = self.padded_size(h, w)?;
        let padded = image.pad_bottom_right(ph, pw)?;
        let x = tape.input(padded.into_tensor());
        let grid = self.encoder.grid_dims(ph, pw)?;
        let feat = self.cnn.features_tape(tape, params, x)?;
        let (pre, post) = self.cnn.fuse_tape(tape, params, feat, grid)?;
        let tokens = self.encoder.encode_tape(tape, params, x, Some(pre), Some(post))?;
        let logits = self.decoder.forward(tape, params, tokens, (ph, pw))?;
        tape.crop(logits, h, w)
    }

    pub fn cost(&self, input_size: (usize, usize)) -> Result<CostReport> {
        let (h, w) = input_size;
        let (ph, pw) = self.padded_size(h, w)?;
        let mut report = CostReport::new();
        self.cnn.cost(&mut report, ph, pw)?;
        let grid = self.encoder.cost(&mut report, ph, pw)?;
        self.decoder
            .cost(&mut report, self.config.encoder.embed_dim, grid, (ph, pw))?;
        Ok(report)
    }
}

/// Logits `[B, classes, H, W]` at the original input size.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits(Tensor);

impl SegLogits {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4().expect("logits are rank 4")
    }

    /// Per-image class maps (row-major `H·W`), ties resolved to the lower class id.
    pub fn argmax(&self) -> Vec<Vec<u8>> {
        let [b, c, h, w] = self.dims();
        let hw = h * w;
        let d = self.0.data();
        (0..b)
            .map(|bi| {
                (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        for ci in 1..c {
                            if d[(bi * c + ci) * hw + p] > d[(bi * c + best) * hw + p] {
                                best = ci;
                            }
                        }
                        best as u8
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: u64,
    pub learnable: u64,
    pub frozen: u64,
}

/// Model structure plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub graph: ModelGraph,
    pub params: ParamRegistry,
}

impl Model {
    /// Builds, initializes from `seed`, and applies the config's freeze policy.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let graph = ModelGraph::new(config)?;
        let mut params = graph.init_params(seed)?;
        apply_freeze(&mut params, &config.freeze)?;
        Ok(Self { graph, params })
    }

    /// Rebuilds the structure for `config` around existing parameters, checking
    /// that names and shapes agree.
    pub fn from_parts(config: &ModelConfig, params: ParamRegistry) -> Result<Self> {
        let graph = ModelGraph::new(config)?;
        let reference = graph.init_params(0)?;
        if reference.len() != params.len() {
            return Err(config_err(format!(
                "expected {} parameter tensors, got {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, p) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| config_err(format!("missing parameter {name:?}")))?;
            if got.value.shape() != p.value.shape() {
                return Err(config_err(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { graph, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.graph.config
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> Result<()> {
        apply_freeze(&mut self.params, &policy)?;
        self.graph.config.freeze = policy;
        Ok(())
    }

    pub fn forward_tape(&self, tape: &mut Tape, image: &FeatureMap) -> Result<Var> {
        self.graph.forward_tape(tape, &self.params, image)
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<SegLogits> {
        let mut tape = Tape::new();
        let y = self.forward_tape(&mut tape, image)?;
        Ok(SegLogits(tape.value(y).clone()))
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<Vec<Vec<u8>>> {
        Ok(self.forward(image)?.argmax())
    }

    pub fn parameter_summary(&self) -> ParamSummary {
        ParamSummary {
            total: self.params.num_elements(),
            learnable: self.params.num_learnable(),
            frozen: self.params.num_frozen(),
        }
    }

    /// Frozen fraction over the `encoder.*` parameters only.
    pub fn encoder_frozen_fraction(&self) -> f64 {
        let (mut total, mut frozen) = (0u64, 0u64);
        for (name, p) in self.params.iter() {
            if name.starts_with("encoder.") {
                total += p.value.len() as u64;
                if p.frozen {
                    frozen += p.value.len() as u64;
                }
            }
        }
        frozen as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(SegLogits(t).argmax(), vec![vec![0, 1]]);
    }

    #[test]
    fn padding_rounds_up() {
        let g = ModelGraph::new(&ModelConfig::default()).unwrap();
        assert_eq!(g.padded_size(100, 130).unwrap(), (112, 144));
        assert_eq!(g.padded_size(16, 16).unwrap(), (16, 16));
        assert!(g.padded_size(15, 64).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { num_classes: 1, ..ModelConfig::default() }.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.in_channels = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn from_parts_checks_names_and_shapes() {
        let m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        assert!(Model::from_parts(&ModelConfig::tiny(), m.params.clone()).is_ok());
        assert!(Model::from_parts(&ModelConfig::default(), m.params.clone()).is_err());
        let rebuild = |skip: usize, reshape: Option<usize>| {
            let mut out = ParamRegistry::new();
            for (i, (n, p)) in m.params.iter().enumerate() {
                if i == skip {
                    continue;
                }
                let v = if reshape == Some(i) { Tensor::zeros(&[p.value.len() + 1]) } else { p.value.clone() };
                out.insert(n, v).unwrap();
            }
            out
        };
        assert!(Model::from_parts(&ModelConfig::tiny(), rebuild(0, None)).is_err());
        assert!(Model::from_parts(&ModelConfig::tiny(), rebuild(usize::MAX, Some(2))).is_err());
    }
}
