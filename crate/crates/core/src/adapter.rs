//! Spatial-multiscale bottleneck adapter.
//!
//! Tokens are projected down to a small bottleneck, laid out spatially, passed
//! through up to five parallel convolutions (1×1, 3×3, and three dilated 3×3
//! with growing rates), summed, activated, and projected back up. With no
//! branches enabled the adapter is the plain FC–activation–FC bottleneck.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::layers::activation::Activation;
use crate::layers::conv::ConvSpec;
use crate::macs::CostReport;
use crate::nn::{Conv2d, Init, Linear};
use crate::params::ParamRegistry;
use crate::tensor::{Tensor, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Conv1x1,
    Conv3x3,
    DilatedR1,
    DilatedR2,
    DilatedR3,
}

impl Branch {
    pub const ALL: [Branch; 5] = [
        Branch::Conv1x1,
        Branch::Conv3x3,
        Branch::DilatedR1,
        Branch::DilatedR2,
        Branch::DilatedR3,
    ];

    pub const DILATED: [Branch; 3] = [Branch::DilatedR1, Branch::DilatedR2, Branch::DilatedR3];

    fn key(self) -> &'static str {
        match self {
            Branch::Conv1x1 => "conv1x1",
            Branch::Conv3x3 => "conv3x3",
            Branch::DilatedR1 => "dilated_r1",
            Branch::DilatedR2 => "dilated_r2",
            Branch::DilatedR3 => "dilated_r3",
        }
    }

    /// `(kernel, dilation)` for the given rate triple.
    pub fn geometry(self, rates: [usize; 3]) -> (usize, usize) {
        match self {
            Branch::Conv1x1 => (1, 1),
            Branch::Conv3x3 => (3, 1),
            Branch::DilatedR1 => (3, rates[0]),
            Branch::DilatedR2 => (3, rates[1]),
            Branch::DilatedR3 => (3, rates[2]),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    pub branches: BTreeSet<Branch>,
    pub rates: [usize; 3],
    pub scale: f64,
    pub activation: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            embed_dim: 96,
            bottleneck_dim: 12,
            branches: Branch::ALL.into_iter().collect(),
            rates: [12, 24, 36],
            scale: 1.0,
            activation: Activation::Relu,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.bottleneck_dim == 0 {
            return Err(config_err("adapter dims must be positive"));
        }
        if self.bottleneck_dim >= self.embed_dim {
            return Err(config_err(format!(
                "bottleneck {} must be smaller than embed dim {}",
                self.bottleneck_dim, self.embed_dim
            )));
        }
        if self.rates[0] == 0 || !(self.rates[0] < self.rates[1] && self.rates[1] < self.rates[2]) {
            return Err(config_err(format!("dilation rates {:?} must be positive and strictly increasing", self.rates)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(config_err("adapter scale must be a positive real"));
        }
        Ok(())
    }

    pub fn is_plain(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn without(&self, remove: &[Branch]) -> Self {
        let mut c = self.clone();
        for b in remove {
            c.branches.remove(b);
        }
        c
    }
}

/// One row of the adapter ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    /// Short identifier used on the command line.
    pub key: String,
    /// Human-readable row label.
    pub row_name: String,
    pub config: AdapterConfig,
}

/// Plain AdaptFormer runs with its customary residual scale.
pub const PLAIN_ADAPTFORMER_SCALE: f64 = 0.1;

/// The nine ablation rows, from plain AdaptFormer to the full adapter.
pub fn ablation_variants(full: &AdapterConfig) -> Vec<AblationVariant> {
    let [r1, r2, r3] = full.rates;
    let mut base = full.clone();
    base.branches = Branch::ALL.into_iter().collect();
    let plain = AdapterConfig {
        scale: PLAIN_ADAPTFORMER_SCALE,
        ..base.without(&Branch::ALL)
    };
    let row = |key: &str, name: String, config: AdapterConfig| AblationVariant {
        key: key.to_string(),
        row_name: name,
        config,
    };
    vec![
        row("adaptformer", "AdaptFormer".into(), plain),
        row("no_conv", "w/o ALL Convolutions".into(), base.without(&Branch::ALL)),
        row("no_dilated", "w/o ALL Dilated Convolutions".into(), base.without(&Branch::DILATED)),
        row("no_conv1x1", "w/o 1x1 Convolution".into(), base.without(&[Branch::Conv1x1])),
        row("no_conv3x3", "w/o 3x3 Convolution".into(), base.without(&[Branch::Conv3x3])),
        row("no_dilated_r1", format!("w/o Dilated Convolution(r={r1})"), base.without(&[Branch::DilatedR1])),
        row("no_dilated_r2", format!("w/o Dilated Convolution(r={r2})"), base.without(&[Branch::DilatedR2])),
        row("no_dilated_r3", format!("w/o Dilated Convolution(r={r3})"), base.without(&[Branch::DilatedR3])),
        row("full", "SM-AdaptFormer".into(), base),
    ]
}

/// Looks up an ablation row by its key.
pub fn ablation_variant(full: &AdapterConfig, key: &str) -> Result<AblationVariant> {
    let all = ablation_variants(full);
    let keys: Vec<_> = all.iter().map(|v| v.key.clone()).collect();
    all.into_iter()
        .find(|v| v.key == key)
        .ok_or_else(|| config_err(format!("unknown adapter variant {key:?}; expected one of {keys:?}")))
}

#[derive(Clone, Debug)]
pub struct AdapterLayer {
    pub config: AdapterConfig,
    down: Linear,
    branches: Vec<(Branch, Conv2d)>,
    up: Linear,
}

impl AdapterLayer {
    pub fn new(name: &str, config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let b = config.bottleneck_dim;
        let branches = config
            .branches
            .iter()
            .map(|&br| {
                let (k, r) = br.geometry(config.rates);
                (br, Conv2d::new(format!("{name}.branch.{br}"), ConvSpec::same(b, b, k, r), true))
            })
            .collect();
        Ok(Self {
            down: Linear::new(format!("{name}.down"), config.embed_dim, b),
            up: Linear::new(format!("{name}.up"), b, config.embed_dim),
            branches,
            config,
        })
    }

    /// Up-projection starts at zero so the adapter contributes nothing initially.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.down.init(params, Init::LeCun, rng)?;
        for (_, conv) in &self.branches {
            conv.init(params, Init::LeCun, rng)?;
        }
        self.up.init(params, Init::Zeros, rng)
    }

    pub fn up_weight_name(&self) -> String {
        self.up.weight_name()
    }

    pub fn num_params(&self) -> u64 {
        self.down.num_params()
            + self.up.num_params()
            + self.branches.iter().map(|(_, c)| c.spec.num_params(true)).sum::<u64>()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[3] != self.config.embed_dim {
            return Err(config_err(format!(
                "adapter expects [B, H, W, {}] tokens, got {:?}",
                self.config.embed_dim, s
            )));
        }
        Ok(())
    }

    /// Sum of the enabled branches applied to the down-projected tokens, as a
    /// `[B, H, W, bottleneck]` grid. `None` when no branch is enabled.
    pub fn branch_sum(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Option<Var>> {
        self.check_input(tape, x)?;
        let h = self.down.forward(tape, params, x)?;
        self.branch_sum_from(tape, params, h)
    }

    fn branch_sum_from(&self, tape: &mut Tape, params: &ParamRegistry, h: Var) -> Result<Option<Var>> {
        if self.branches.is_empty() {
            return Ok(None);
        }
        let spatial = tape.nhwc_to_nchw(h)?;
        let outs = self
            .branches
            .iter()
            .map(|(_, conv)| conv.forward(tape, params, spatial))
            .collect::<Result<Vec<_>>>()?;
        let sum = tape.add_all(&outs)?;
        Ok(Some(tape.nchw_to_nhwc(sum)?))
    }

    /// `scale · up(act(Σ branches(down(x))))`, or `scale · up(act(down(x)))`
    /// for the plain variant. The caller adds the result to the FFN output.
    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let h = self.down.forward(tape, params, x)?;
        let s = self.branch_sum_from(tape, params, h)?.unwrap_or(h);
        let a = tape.activation(s, self.config.activation)?;
        let up = self.up.forward(tape, params, a)?;
        if self.config.scale == 1.0 {
            Ok(up)
        } else {
            tape.scale(up, self.config.scale)
        }
    }

    pub fn apply(&self, params: &ParamRegistry, tokens: &TokenGrid) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let x = tape.input(tokens.tensor().clone());
        let y = self.forward(&mut tape, params, x)?;
        TokenGrid::new(tape.value(y).clone())
    }

    /// Pre-activation branch sum as a plain tensor (zeros when no branch is enabled).
    pub fn branch_sum_value(&self, params: &ParamRegistry, tokens: &TokenGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(tokens.tensor().clone());
        match self.branch_sum(&mut tape, params, x)? {
            Some(v) => Ok(tape.value(v).clone()),
            None => {
                let [b, h, w, _] = tokens.tensor().dims4()?;
                Ok(Tensor::zeros(&[b, h, w, self.config.bottleneck_dim]))
            }
        }
    }

    pub fn cost(&self, report: &mut CostReport, grid: (usize, usize)) -> Result<()> {
        let n = grid.0 * grid.1;
        let d = self.config.embed_dim;
        let b = self.config.bottleneck_dim;
        self.down.cost(report, n, vec![grid.0, grid.1, d]);
        for (_, conv) in &self.branches {
            conv.cost(report, [b, grid.0, grid.1])?;
        }
        self.up.cost(report, n, vec![grid.0, grid.1, b]);
        Ok(())
    }
}
