//! Auxiliary residual CNN. Its tapped stage is projected to the transformer
//! width and added to the token grid before and after the transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::layers::activation::Activation;
use crate::layers::conv::ConvSpec;
use crate::layers::norm::NormAxis;
use crate::macs::CostReport;
use crate::nn::{Conv2d, Init, LayerNorm};
use crate::params::ParamRegistry;
use crate::tensor::{FeatureMap, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Index of the stage whose output is fused (2 = third stage).
    pub tap_stage: usize,
    /// Separate 1×1 projections for the pre- and post-transformer injections.
    pub separate_projections: bool,
    pub activation: Activation,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            tap_stage: 2,
            separate_projections: false,
            activation: Activation::Relu,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(config_err("CNN stage channels must be positive"));
        }
        if self.tap_stage >= self.stage_channels.len() {
            return Err(config_err(format!(
                "tap stage {} out of range for {} stages",
                self.tap_stage,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Each stage halves the resolution.
    pub fn tap_stride(&self) -> usize {
        1 << (self.tap_stage + 1)
    }

    pub fn tap_channels(&self) -> usize {
        self.stage_channels[self.tap_stage]
    }
}

/// Downsampling conv (4×4, stride 2, pad 1, so `⌊H/2⌋`) then a residual pair of 3×3 convs.
#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    down_norm: LayerNorm,
    conv1: Conv2d,
    norm1: LayerNorm,
    conv2: Conv2d,
    norm2: LayerNorm,
}

impl Stage {
    fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            down: Conv2d::new(format!("{name}.down"), ConvSpec::new(cin, cout, 4).with_stride(2).with_padding(1), true),
            down_norm: LayerNorm::new(format!("{name}.down_norm"), cout, NormAxis::Channels),
            conv1: Conv2d::new(format!("{name}.conv1"), ConvSpec::same(cout, cout, 3, 1), true),
            norm1: LayerNorm::new(format!("{name}.norm1"), cout, NormAxis::Channels),
            conv2: Conv2d::new(format!("{name}.conv2"), ConvSpec::same(cout, cout, 3, 1), true),
            norm2: LayerNorm::new(format!("{name}.norm2"), cout, NormAxis::Channels),
        }
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.down.init(params, Init::Kaiming, rng)?;
        self.down_norm.init(params)?;
        self.conv1.init(params, Init::Kaiming, rng)?;
        self.norm1.init(params)?;
        self.conv2.init(params, Init::Kaiming, rng)?;
        self.norm2.init(params)
    }

    fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var, act: Activation) -> Result<Var> {
        let d = self.down.forward(tape, params, x)?;
        let d = self.down_norm.forward(tape, params, d)?;
        let d = tape.activation(d, act)?;
        let h = self.conv1.forward(tape, params, d)?;
        let h = self.norm1.forward(tape, params, h)?;
        let h = tape.activation(h, act)?;
        let h = self.conv2.forward(tape, params, h)?;
        let h = self.norm2.forward(tape, params, h)?;
        let s = tape.add(d, h)?;
        tape.activation(s, act)
    }

    fn cost(&self, report: &mut CostReport, input: [usize; 3]) -> Result<[usize; 3]> {
        let d = self.down.cost(report, input)?;
        self.down_norm.cost(report, d.to_vec());
        let h = self.conv1.cost(report, d)?;
        self.norm1.cost(report, h.to_vec());
        let h = self.conv2.cost(report, h)?;
        self.norm2.cost(report, h.to_vec());
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub config: CnnConfig,
    stages: Vec<Stage>,
    proj_pre: Conv2d,
    proj_post: Option<Conv2d>,
}

impl CnnEncoder {
    pub fn new(config: &CnnConfig, embed_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        // stages past the tap never influence the output, so they are not built
        let stages = config.stage_channels[..=config.tap_stage]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = Stage::new(&format!("cnn.stages.{i}"), cin, c);
                cin = c;
                s
            })
            .collect();
        let proj = |name: &str| Conv2d::new(name, ConvSpec::new(config.tap_channels(), embed_dim, 1), true);
        Ok(Self {
            stages,
            proj_pre: proj(if config.separate_projections { "cnn.proj_pre" } else { "cnn.proj" }),
            proj_post: config.separate_projections.then(|| proj("cnn.proj_post")),
            config: config.clone(),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        for s in &self.stages {
            s.init(params, rng)?;
        }
        self.proj_pre.init(params, Init::LeCun, rng)?;
        if let Some(p) = &self.proj_post {
            p.init(params, Init::LeCun, rng)?;
        }
        Ok(())
    }

    pub fn projection_names(&self) -> Vec<String> {
        let mut v = vec![self.proj_pre.weight_name(), self.proj_pre.bias_name()];
        if let Some(p) = &self.proj_post {
            v.push(p.weight_name());
            v.push(p.bias_name());
        }
        v
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.tap_stride();
        if h < s || w < s {
            return Err(Error::Precondition(format!(
                "image {h}x{w} is smaller than the CNN tap stride {s}"
            )));
        }
        Ok(())
    }

    /// Tapped stage output `[B, C_tap, ⌊H/s⌋, ⌊W/s⌋]`.
    pub fn features_tape(&self, tape: &mut Tape, params: &ParamRegistry, image: Var) -> Result<Var> {
        let [_, _, h, w] = tape.value(image).dims4()?;
        self.check_size(h, w)?;
        let mut x = image;
        for s in &self.stages {
            x = s.forward(tape, params, x, self.config.activation)?;
        }
        Ok(x)
    }

    /// Projects to the embed dim, resizes to the token grid, and converts to
    /// channels-last. Returns the pre- and post-transformer injections (the same
    /// node twice unless projections are separate).
    pub fn fuse_tape(
        &self,
        tape: &mut Tape,
        params: &ParamRegistry,
        feat: Var,
        grid: (usize, usize),
    ) -> Result<(Var, Var)> {
        let one = |tape: &mut Tape, proj: &Conv2d| -> Result<Var> {
            let p = proj.forward(tape, params, feat)?;
            let r = tape.resize_bilinear(p, grid.0, grid.1)?;
            tape.nchw_to_nhwc(r)
        };
        let pre = one(tape, &self.proj_pre)?;
        let post = match &self.proj_post {
            Some(p) => one(tape, p)?,
            None => pre,
        };
        Ok((pre, post))
    }

    pub fn features(&self, params: &ParamRegistry, image: &FeatureMap) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let x = tape.input(image.tensor().clone());
        let y = self.features_tape(&mut tape, params, x)?;
        FeatureMap::new(tape.value(y).clone())
    }

    pub fn fuse(&self, params: &ParamRegistry, feat: &FeatureMap, grid: (usize, usize)) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let x = tape.input(feat.tensor().clone());
        let (pre, _) = self.fuse_tape(&mut tape, params, x, grid)?;
        TokenGrid::new(tape.value(pre).clone())
    }

    pub fn cost(&self, report: &mut CostReport, height: usize, width: usize) -> Result<()> {
        self.check_size(height, width)?;
        let mut dims = [self.config.in_channels, height, width];
        for s in &self.stages {
            dims = s.cost(report, dims)?;
        }
        for p in std::iter::once(&self.proj_pre).chain(&self.proj_post) {
            let out = p.cost(report, dims)?;
            report.push(&format!("{}.resize", p.name), "resize", out.to_vec(), 0, 0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(embed: usize) -> (CnnEncoder, ParamRegistry) {
        let cnn = CnnEncoder::new(&CnnConfig::default(), embed).unwrap();
        let mut params = ParamRegistry::new();
        cnn.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (cnn, params)
    }

    #[test]
    fn stride_arithmetic() {
        let (cnn, params) = build(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ((h, w), (eh, ew)) in [((64, 64), (8, 8)), ((128, 96), (16, 12)), ((100, 130), (12, 16))] {
            let img = FeatureMap::new(Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)).unwrap();
            let f = cnn.features(&params, &img).unwrap();
            assert_eq!((f.channels(), f.height(), f.width()), (64, eh, ew));
        }
    }

    #[test]
    fn zero_image_is_finite() {
        let (cnn, params) = build(8);
        let f = cnn.features(&params, &FeatureMap::zeros(1, 3, 32, 32)).unwrap();
        assert!(f.tensor().all_finite());
    }

    #[test]
    fn too_small_is_rejected() {
        let (cnn, params) = build(8);
        let err = cnn.features(&params, &FeatureMap::zeros(1, 3, 7, 32)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn constant_map_fuses_to_constant() {
        let (cnn, mut params) = build(4);
        let feat = FeatureMap::new(Tensor::full(&[1, 64, 8, 8], 0.5)).unwrap();
        let w: Vec<f64> = (0..4 * 64).map(|i| (i % 7) as f64 * 0.01).collect();
        params.set_value("cnn.proj.weight", Tensor::new(vec![4, 64, 1, 1], w.clone()).unwrap()).unwrap();
        let inj = cnn.fuse(&params, &feat, (4, 4)).unwrap();
        assert_eq!(inj.tensor().shape(), &[1, 4, 4, 4]);
        for o in 0..4 {
            let expected: f64 = w[o * 64..(o + 1) * 64].iter().map(|v| v * 0.5).sum();
            for p in 0..16 {
                assert!((inj.tensor().data()[p * 4 + o] - expected).abs() < 1e-12);
            }
        }
        params.set_value("cnn.proj.weight", Tensor::zeros(&[4, 64, 1, 1])).unwrap();
        let zero = cnn.fuse(&params, &feat, (3, 5)).unwrap();
        assert_eq!(zero.grid_dims(), (3, 5));
        assert!(zero.tensor().data().iter().all(|&v| v == 0.0));
    }
}
