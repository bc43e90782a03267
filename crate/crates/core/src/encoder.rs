//! Variable-input-size ViT encoder: patch embedding, positional encoding
//! generator, and transformer blocks that each carry a bottleneck adapter in
//! parallel with the FFN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterLayer};
use crate::autograd::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::layers::activation::Activation;
use crate::layers::conv::ConvSpec;
use crate::layers::norm::NormAxis;
use crate::macs::CostReport;
use crate::nn::{Conv2d, Init, LayerNorm, Linear};
use crate::params::ParamRegistry;
use crate::peg::PegLayer;
use crate::tensor::{FeatureMap, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub adapter: AdapterConfig,
    pub use_peg: bool,
    pub peg_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch_size: 16,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            adapter: AdapterConfig::default(),
            use_peg: true,
            peg_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 {
            return Err(config_err("encoder sizes must be positive"));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(config_err(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err("mlp ratio must be positive"));
        }
        if self.adapter.embed_dim != self.embed_dim {
            return Err(config_err(format!(
                "adapter embed dim {} differs from encoder embed dim {}",
                self.adapter.embed_dim, self.embed_dim
            )));
        }
        self.adapter.validate()
    }
}

/// Parameter-name patterns (glob syntax, `*` matches across dots) marking
/// which weights stay fixed during fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePolicy {
    pub frozen_name_patterns: Vec<String>,
}

impl Default for FreezePolicy {
    /// Attention and FFN projections inside the transformer blocks. Norms,
    /// patch embedding, positional encoding generator and adapters train.
    fn default() -> Self {
        Self {
            frozen_name_patterns: vec!["encoder.blocks.*.attn.*".into(), "encoder.blocks.*.mlp.*".into()],
        }
    }
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self {
            frozen_name_patterns: Vec::new(),
        }
    }

    pub fn all() -> Self {
        Self {
            frozen_name_patterns: vec!["*".into()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeOutcome {
    pub frozen_tensors: usize,
    /// Patterns that matched no parameter; usually a typo.
    pub unmatched_patterns: Vec<String>,
}

/// Marks every parameter matching a policy pattern frozen and every other
/// parameter learnable.
pub fn apply_freeze(params: &mut ParamRegistry, policy: &FreezePolicy) -> Result<FreezeOutcome> {
    let patterns = policy
        .frozen_name_patterns
        .iter()
        .map(|p| {
            glob::Pattern::new(p)
                .map(|g| (p.clone(), g))
                .map_err(|e| config_err(format!("bad freeze pattern {p:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hits = vec![0usize; patterns.len()];
    let mut outcome = FreezeOutcome::default();
    for (name, p) in params.iter_mut() {
        let mut frozen = false;
        for (i, (_, g)) in patterns.iter().enumerate() {
            if g.matches(name) {
                hits[i] += 1;
                frozen = true;
            }
        }
        p.frozen = frozen;
        outcome.frozen_tensors += frozen as usize;
    }
    for ((pattern, _), n) in patterns.iter().zip(hits) {
        if n == 0 {
            log::warn!("freeze pattern {pattern:?} matched no parameter");
            outcome.unmatched_patterns.push(pattern.clone());
        }
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    adapter: AdapterLayer,
    heads: usize,
    attn_label: String,
}

impl Block {
    fn new(name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(format!("{name}.norm1"), d, NormAxis::Last),
            qkv: Linear::new(format!("{name}.attn.qkv"), d, 3 * d),
            proj: Linear::new(format!("{name}.attn.proj"), d, d),
            norm2: LayerNorm::new(format!("{name}.norm2"), d, NormAxis::Last),
            fc1: Linear::new(format!("{name}.mlp.fc1"), d, cfg.mlp_ratio * d),
            fc2: Linear::new(format!("{name}.mlp.fc2"), cfg.mlp_ratio * d, d),
            adapter: AdapterLayer::new(&format!("{name}.adapter"), cfg.adapter.clone())?,
            heads: cfg.num_heads,
            attn_label: format!("{name}.attn"),
        })
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.norm1.init(params)?;
        self.qkv.init(params, Init::LeCun, rng)?;
        self.proj.init(params, Init::LeCun, rng)?;
        self.norm2.init(params)?;
        self.fc1.init(params, Init::LeCun, rng)?;
        self.fc2.init(params, Init::LeCun, rng)?;
        self.adapter.init(params, rng)
    }

    fn base_params(&self) -> u64 {
        [&self.qkv, &self.proj, &self.fc1, &self.fc2]
            .iter()
            .map(|l| l.num_params())
            .sum::<u64>()
            + 4 * self.norm1.dim as u64
    }

    /// `x + attn(norm1(x))`, then `x + mlp(norm2(x)) + adapter(norm2(x))`.
    fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        let [b, h, w, d] = tape.value(x).dims4()?;
        let n1 = self.norm1.forward(tape, params, x)?;
        let qkv = self.qkv.forward(tape, params, n1)?;
        let qkv = tape.reshape(qkv, &[b, h * w, 3 * d])?;
        let att = tape.attention(qkv, self.heads, &self.attn_label)?;
        let att = tape.reshape(att, &[b, h, w, d])?;
        let att = self.proj.forward(tape, params, att)?;
        let x = tape.add(x, att)?;

        let n2 = self.norm2.forward(tape, params, x)?;
        let hid = self.fc1.forward(tape, params, n2)?;
        let hid = tape.activation(hid, Activation::Gelu)?;
        let mlp = self.fc2.forward(tape, params, hid)?;
        let adapted = self.adapter.forward(tape, params, n2)?;
        tape.add_all(&[x, mlp, adapted])
    }

    fn cost(&self, report: &mut CostReport, grid: (usize, usize)) -> Result<()> {
        let n = grid.0 * grid.1;
        let d = self.norm1.dim;
        let dims = vec![grid.0, grid.1, d];
        self.norm1.cost(report, dims.clone());
        self.qkv.cost(report, n, dims.clone());
        let scores = (n * n * d) as u64;
        report.push(&format!("{}.scores", self.attn_label), "attention_scores", vec![n, d], scores, 0);
        report.push(
            &format!("{}.weighted_sum", self.attn_label),
            "attention_weighted_sum",
            vec![n, d],
            scores,
            0,
        );
        self.proj.cost(report, n, dims.clone());
        self.norm2.cost(report, dims.clone());
        self.fc1.cost(report, n, dims.clone());
        self.fc2.cost(report, n, vec![grid.0, grid.1, self.fc1.out_features]);
        self.adapter.cost(report, grid)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    patch_embed: Conv2d,
    peg: Option<PegLayer>,
    blocks: Vec<Block>,
}

impl ImageEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let patch_embed = Conv2d::new(
            "encoder.patch_embed",
            ConvSpec::new(config.in_channels, config.embed_dim, p).with_stride(p),
            true,
        );
        let peg = if config.use_peg {
            Some(PegLayer::new("encoder.peg", config.embed_dim, config.peg_kernel)?)
        } else {
            None
        };
        let blocks = (0..config.depth)
            .map(|i| Block::new(&format!("encoder.blocks.{i}"), config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            peg,
            blocks,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.patch_embed.init(params, Init::LeCun, rng)?;
        if let Some(peg) = &self.peg {
            peg.init(params, rng)?;
        }
        for b in &self.blocks {
            b.init(params, rng)?;
        }
        Ok(())
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "image {height}x{width} is not a multiple of the patch size {p}; pad it first"
            )));
        }
        Ok((height / p, width / p))
    }

    /// Adapter parameter count of one block vs. that block's attention/FFN/norm count.
    pub fn adapter_to_block_ratio(&self) -> f64 {
        let b = &self.blocks[0];
        b.adapter.num_params() as f64 / b.base_params() as f64
    }

    /// Token grid `[B, H/p, W/p, D]` for an image `[B, C, H, W]`, with optional
    /// additive injections before the positional encoding and after the last block.
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        params: &ParamRegistry,
        image: Var,
        injected_pre: Option<Var>,
        injected_post: Option<Var>,
    ) -> Result<Var> {
        let [b, _, h, w] = tape.value(image).dims4()?;
        let (gh, gw) = self.grid_dims(h, w)?;
        let expected = [b, gh, gw, self.config.embed_dim];
        for inj in [injected_pre, injected_post].into_iter().flatten() {
            if tape.shape(inj) != expected {
                return Err(config_err(format!(
                    "injected grid {:?} does not match token grid {:?}",
                    tape.shape(inj),
                    expected
                )));
            }
        }
        let patches = self.patch_embed.forward(tape, params, image)?;
        let mut x = tape.nchw_to_nhwc(patches)?;
        if let Some(pre) = injected_pre {
            x = tape.add(x, pre)?;
        }
        if let Some(peg) = &self.peg {
            x = peg.forward(tape, params, x)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, params, x)?;
        }
        if let Some(post) = injected_post {
            x = tape.add(x, post)?;
        }
        Ok(x)
    }

    pub fn encode(
        &self,
        params: &ParamRegistry,
        image: &FeatureMap,
        injected_pre: Option<&TokenGrid>,
        injected_post: Option<&TokenGrid>,
    ) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let x = tape.input(image.tensor().clone());
        let pre = injected_pre.map(|t| tape.input(t.tensor().clone()));
        let post = injected_post.map(|t| tape.input(t.tensor().clone()));
        let y = self.encode_tape(&mut tape, params, x, pre, post)?;
        TokenGrid::new(tape.value(y).clone())
    }

    pub fn cost(&self, report: &mut CostReport, height: usize, width: usize) -> Result<(usize, usize)> {
        let grid = self.grid_dims(height, width)?;
        self.patch_embed
            .cost(report, [self.config.in_channels, height, width])?;
        if let Some(peg) = &self.peg {
            peg.cost(report, grid)?;
        }
        for b in &self.blocks {
            b.cost(report, grid)?;
        }
        Ok(grid)
    }
}
