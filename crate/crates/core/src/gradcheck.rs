//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Each case builds a graph from registry parameters (inputs are registered as
//! parameters too, so their gradients are checked as well) and reduces the
//! output to a scalar with a fixed random projection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{ablation_variants, AdapterConfig, AdapterLayer};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::exec::Exec;
use crate::layers::activation::Activation;
use crate::layers::conv::ConvSpec;
use crate::layers::norm::NormAxis;
use crate::model::{ModelConfig, ModelGraph};
use crate::params::ParamRegistry;
use crate::peg::PegLayer;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements checked per tensor; `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements: Some(24),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub case: String,
    pub tensor: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |a − n| / max(|a|, |n|, 1e-2)` over the checked elements.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.checks.iter().filter(|c| c.max_rel_error >= self.tolerance).collect()
    }

    /// Worst error per case, in first-seen order.
    pub fn per_case(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(name, _)| *name == c.case) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.case.clone(), c.max_rel_error)),
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Compares analytic and central-difference gradients for every unfrozen
/// tensor in `params`.
pub fn check_case<F>(case: &str, params: &ParamRegistry, opts: &GradCheckOptions, forward: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape, &ParamRegistry) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut tape = Tape::with_exec(Exec::Sequential);
    let out = forward(&mut tape, params)?;
    let projection = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let loss = tape.dot_const(out, &projection)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamRegistry| -> Result<f64> {
        let mut t = Tape::with_exec(Exec::Sequential);
        let o = forward(&mut t, p)?;
        let l = t.dot_const(o, &projection)?;
        Ok(t.value(l).data()[0])
    };

    let mut work = params.clone();
    let mut checks = Vec::new();
    for (name, p) in params.iter() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let indices: Vec<usize> = match opts.max_elements {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let zeros = Tensor::zeros(p.value.shape());
        let analytic = grads.param(name).unwrap_or(&zeros);
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for &i in &indices {
            let orig = p.value.data()[i];
            let set = |work: &mut ParamRegistry, v: f64| {
                work.get_mut(name).expect("cloned registry").value.data_mut()[i] = v;
            };
            set(&mut work, orig + opts.step);
            let plus = eval(&work)?;
            set(&mut work, orig - opts.step);
            let minus = eval(&work)?;
            set(&mut work, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        checks.push(TensorCheck {
            case: case.to_string(),
            tensor: name.to_string(),
            checked: indices.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(checks)
}

fn registry(entries: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> Result<ParamRegistry> {
    let mut reg = ParamRegistry::new();
    for (name, shape) in entries {
        reg.insert(*name, Tensor::randn(shape, 1.0, rng))?;
    }
    Ok(reg)
}

fn conv_case(
    name: &str,
    spec: ConvSpec,
    input: [usize; 4],
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TensorCheck>> {
    let w = spec.weight_shape();
    let params = registry(&[("input", &input), ("weight", &w), ("bias", &[spec.out_channels])], rng)?;
    check_case(name, &params, opts, |t, p| {
        let x = t.param(p, "input")?;
        let w = t.param(p, "weight")?;
        let b = t.param(p, "bias")?;
        t.conv2d(x, w, Some(b), spec)
    })
}

/// Conv (plain, strided, grouped, depthwise, dilated at the three default
/// rates), linear, both norms, attention, activations, resize, loss, PEG,
/// every adapter ablation variant, and a tiny end-to-end model.
pub fn layer_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();

    checks.extend(conv_case("conv3x3", ConvSpec::same(3, 4, 3, 1), [2, 3, 7, 6], opts, &mut rng)?);
    checks.extend(conv_case(
        "conv4x4_stride2",
        ConvSpec::new(3, 4, 4).with_stride(2).with_padding(1),
        [1, 3, 9, 8],
        opts,
        &mut rng,
    )?);
    checks.extend(conv_case("conv_grouped", ConvSpec::same(4, 6, 3, 1).with_groups(2), [1, 4, 5, 5], opts, &mut rng)?);
    checks.extend(conv_case("conv_depthwise", ConvSpec::same(4, 4, 3, 1).with_groups(4), [1, 4, 6, 5], opts, &mut rng)?);
    for r in [12, 24, 36] {
        checks.extend(conv_case(
            &format!("conv_dilated_r{r}"),
            ConvSpec::same(2, 2, 3, r),
            [1, 2, 2 * r + 3, 2 * r + 1],
            opts,
            &mut rng,
        )?);
    }

    let params = registry(&[("input", &[2, 5, 6]), ("weight", &[4, 6]), ("bias", &[4])], &mut rng)?;
    checks.extend(check_case("linear", &params, opts, |t, p| {
        let x = t.param(p, "input")?;
        let w = t.param(p, "weight")?;
        let b = t.param(p, "bias")?;
        t.linear(x, w, Some(b))
    })?);

    for (case, axis, shape) in [
        ("layer_norm_last", NormAxis::Last, vec![2, 3, 6]),
        ("layer_norm_channels", NormAxis::Channels, vec![2, 5, 3, 4]),
    ] {
        let dim = if axis == NormAxis::Last { shape[2] } else { shape[1] };
        let params = registry(&[("input", &shape), ("gamma", &[dim]), ("beta", &[dim])], &mut rng)?;
        checks.extend(check_case(case, &params, opts, |t, p| {
            let x = t.param(p, "input")?;
            let g = t.param(p, "gamma")?;
            let b = t.param(p, "beta")?;
            t.layer_norm(x, g, b, axis)
        })?);
    }

    let params = registry(&[("qkv", &[2, 5, 24])], &mut rng)?;
    checks.extend(check_case("attention", &params, opts, |t, p| {
        let qkv = t.param(p, "qkv")?;
        t.attention(qkv, 2, "attn")
    })?);

    for act in [Activation::Relu, Activation::Gelu] {
        let params = registry(&[("input", &[3, 7])], &mut rng)?;
        checks.extend(check_case(&format!("activation_{act:?}").to_lowercase(), &params, opts, |t, p| {
            let x = t.param(p, "input")?;
            t.activation(x, act)
        })?);
    }

    for (case, out) in [("resize_up", (7, 9)), ("resize_down", (2, 3))] {
        let params = registry(&[("input", &[1, 2, 4, 5])], &mut rng)?;
        checks.extend(check_case(case, &params, opts, |t, p| {
            let x = t.param(p, "input")?;
            t.resize_bilinear(x, out.0, out.1)
        })?);
    }

    let params = registry(&[("logits", &[2, 3, 3, 4])], &mut rng)?;
    let labels: Vec<u8> = (0..24).map(|i| (i * 7 % 3) as u8).collect();
    checks.extend(check_case("cross_entropy", &params, opts, |t, p| {
        let x = t.param(p, "logits")?;
        t.cross_entropy(x, &labels)
    })?);

    let peg = PegLayer::new("peg", 6, 3)?;
    let mut params = ParamRegistry::new();
    peg.init(&mut params, &mut rng)?;
    params.randomize(0.5, &mut rng);
    params.insert("input", Tensor::randn(&[2, 4, 5, 6], 1.0, &mut rng))?;
    checks.extend(check_case("peg", &params, opts, |t, p| {
        let x = t.param(p, "input")?;
        peg.forward(t, p, x)
    })?);

    let full = AdapterConfig {
        embed_dim: 6,
        bottleneck_dim: 3,
        ..AdapterConfig::default()
    };
    for variant in ablation_variants(&full) {
        let layer = AdapterLayer::new("adapter", variant.config.clone())?;
        let mut params = ParamRegistry::new();
        layer.init(&mut params, &mut rng)?;
        params.randomize(0.5, &mut rng);
        // a grid wider than the largest rate so every dilated tap lands inside
        params.insert("input", Tensor::randn(&[1, 38, 39, 6], 1.0, &mut rng))?;
        checks.extend(check_case(&format!("adapter_{}", variant.key), &params, opts, |t, p| {
            let x = t.param(p, "input")?;
            layer.forward(t, p, x)
        })?);
    }

    checks.extend(end_to_end_case(opts, &mut rng)?);

    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        checks,
    })
}

/// Tiny model with smooth activations, every parameter learnable, and an
/// input size that is not a patch multiple so padding and cropping are covered.
fn end_to_end_case(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let mut config = ModelConfig::tiny();
    config.encoder.adapter.activation = Activation::Gelu;
    config.cnn.activation = Activation::Gelu;
    config.decoder_activation = Activation::Gelu;
    config.encoder.adapter.rates = [1, 2, 3];
    let graph = ModelGraph::new(&config)?;
    let mut params = graph.init_params(opts.seed)?;
    params.randomize(0.3, rng);
    let image = FeatureMap::new(Tensor::rand_uniform(&[1, 3, 19, 17], 0.0, 1.0, rng))?;
    check_case("model_end_to_end", &params, opts, |t, p| graph.forward_tape(t, p, &image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-6, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn linear_op_matches_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = registry(&[("x", &[4])], &mut rng).unwrap();
        let checks = check_case("scale", &params, &GradCheckOptions::default(), |t, p| {
            let x = t.param(p, "x")?;
            t.scale(x, 3.0)
        })
        .unwrap();
        assert!(checks[0].max_rel_error < 1e-8);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = registry(&[("a", &[3]), ("b", &[3])], &mut rng).unwrap();
        params.get_mut("b").unwrap().frozen = true;
        let checks = check_case("add", &params, &GradCheckOptions::default(), |t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            t.add(a, b)
        })
        .unwrap();
        assert_eq!(checks.len(), 1);
        assert_eq!(checks[0].tensor, "a");
    }
}
