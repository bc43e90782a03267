//! Parameterized building blocks shared by the encoders and the decoder.
//! Each block owns its parameter names, initializes them into a registry,
//! records its forward on a tape, and reports its analytical cost.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::layers::conv::ConvSpec;
use crate::layers::norm::NormAxis;
use crate::macs::CostReport;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// `N(0, 2 / fan_in)`
    Kaiming,
    /// `N(0, 1 / fan_in)`
    LeCun,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Kaiming => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::LeCun => Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, spec: ConvSpec, bias: bool) -> Self {
        Self {
            name: name.into(),
            spec,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, init: Init, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        let shape = self.spec.weight_shape();
        let fan_in = self.spec.in_per_group() * self.spec.kernel * self.spec.kernel;
        params.insert(self.weight_name(), init.sample(&shape, fan_in, rng))?;
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.spec.out_channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight_name())?;
        let b = if self.bias {
            Some(tape.param(params, &self.bias_name())?)
        } else {
            None
        };
        tape.conv2d(x, w, b, self.spec)
    }

    /// Appends this layer's entry for a `[C, H, W]` input and returns the output dims.
    pub fn cost(&self, report: &mut CostReport, input: [usize; 3]) -> Result<[usize; 3]> {
        let (oh, ow) = self.spec.output_dims(input[1], input[2])?;
        report.push(
            &self.name,
            "conv",
            input.to_vec(),
            self.spec.macs(oh, ow),
            self.spec.num_params(self.bias),
        );
        Ok([self.spec.out_channels, oh, ow])
    }
}

/// Affine map over the trailing axis, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> u64 {
        ((self.in_features + 1) * self.out_features) as u64
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, init: Init, rng: &mut R) -> Result<()> {
        params.insert(
            self.weight_name(),
            init.sample(&[self.out_features, self.in_features], self.in_features, rng),
        )?;
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_features]))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight_name())?;
        let b = tape.param(params, &self.bias_name())?;
        tape.linear(x, w, Some(b))
    }

    /// Entry for `tokens` rows; MACs `tokens · in · out`.
    pub fn cost(&self, report: &mut CostReport, tokens: usize, input: Vec<usize>) {
        report.push(
            &self.name,
            "linear",
            input,
            (tokens * self.in_features * self.out_features) as u64,
            self.num_params(),
        );
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub axis: NormAxis,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize, axis: NormAxis) -> Self {
        Self {
            name: name.into(),
            dim,
            axis,
        }
    }

    pub fn init(&self, params: &mut ParamRegistry) -> Result<()> {
        params.insert(format!("{}.weight", self.name), Tensor::ones(&[self.dim]))?;
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        let g = tape.param(params, &format!("{}.weight", self.name))?;
        let b = tape.param(params, &format!("{}.bias", self.name))?;
        tape.layer_norm(x, g, b, self.axis)
    }

    /// Normalization is not counted as multiply-accumulates.
    pub fn cost(&self, report: &mut CostReport, input: Vec<usize>) {
        report.push(&self.name, "norm", input, 0, 2 * self.dim as u64);
    }
}
