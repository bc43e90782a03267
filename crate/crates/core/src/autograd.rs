//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every op evaluates eagerly, stores its output, and registers a closure that
//! maps the output gradient to input gradients. Leaves bound to a
//! [`ParamRegistry`](crate::params::ParamRegistry) entry that is frozen do not
//! require gradients, so no gradient is ever produced for them.

use std::collections::BTreeMap;

use crate::error::{config_err, Error, Result};
use crate::exec::Exec;
use crate::layers::activation::Activation;
use crate::layers::attention::{attention_backward, attention_forward};
use crate::layers::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvSpec,
};
use crate::layers::linear::{linear_backward_bias, linear_backward_input, linear_backward_weight, linear_forward};
use crate::layers::loss::{cross_entropy_backward, cross_entropy_forward};
use crate::layers::norm::{layer_norm_backward, layer_norm_forward, NormAxis};
use crate::layers::resize::{resize_bilinear_backward, resize_bilinear_forward};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct BackwardArgs<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<String>,
}

/// Multiply-accumulate count reported by one op during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacsRecord {
    pub label: String,
    pub kind: &'static str,
    pub macs: u64,
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
    macs: Vec<MacsRecord>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient of a non-parameter leaf created with [`Tape::leaf`].
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            macs: Vec::new(),
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn macs_records(&self) -> &[MacsRecord] {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().map(|r| r.macs).sum()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, label: String, kind: &'static str, macs: u64) {
        self.macs.push(MacsRecord { label, kind, macs });
    }

    fn label_of(&self, weight: Var) -> String {
        match &self.nodes[weight.0].param {
            Some(name) => name.strip_suffix(".weight").unwrap_or(name).to_string(),
            None => format!("node{}", weight.0),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a registry parameter. Frozen parameters become constants.
    pub fn param(&mut self, params: &ParamRegistry, name: &str) -> Result<Var> {
        let p = params
            .get(name)
            .ok_or_else(|| config_err(format!("unknown parameter {name:?}")))?;
        self.nodes.push(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: !p.frozen,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let exec = self.exec;
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &spec,
            exec,
        )?;
        let [batch, _, oh, ow] = y.dims4()?;
        let label = self.label_of(w);
        self.record(label, "conv", spec.macs(oh, ow) * batch as u64);
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|b| b.0));
        let in_dims = self.value(x).dims4()?;
        Ok(self.push(
            y,
            parents,
            Some(Box::new(move |a| {
                let dx = if a.needs[0] {
                    Some(conv2d_backward_input(a.grad, a.inputs[1], &spec, in_dims, exec)?)
                } else {
                    None
                };
                let dw = if a.needs[1] {
                    Some(conv2d_backward_weight(a.grad, a.inputs[0], &spec, exec)?)
                } else {
                    None
                };
                let mut out = vec![dx, dw];
                if a.inputs.len() == 3 {
                    out.push(if a.needs[2] { Some(conv2d_backward_bias(a.grad)?) } else { None });
                }
                Ok(out)
            })),
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let exec = self.exec;
        let y = linear_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), exec)?;
        let (out_f, in_f) = (self.shape(w)[0], self.shape(w)[1]);
        let rows = (self.value(x).len() / in_f) as u64;
        let label = self.label_of(w);
        self.record(label, "linear", rows * (in_f * out_f) as u64);
        let in_shape = self.shape(x).to_vec();
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|b| b.0));
        Ok(self.push(
            y,
            parents,
            Some(Box::new(move |a| {
                let dx = if a.needs[0] {
                    Some(linear_backward_input(a.grad, a.inputs[1], &in_shape, exec)?)
                } else {
                    None
                };
                let dw = if a.needs[1] {
                    Some(linear_backward_weight(a.grad, a.inputs[0], out_f, exec)?)
                } else {
                    None
                };
                let mut out = vec![dx, dw];
                if a.inputs.len() == 3 {
                    out.push(if a.needs[2] { Some(linear_backward_bias(a.grad, out_f)?) } else { None });
                }
                Ok(out)
            })),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: NormAxis) -> Result<Var> {
        let y = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), axis)?;
        Ok(self.push(
            y,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |a| {
                let (dx, dg, db) = layer_norm_backward(a.grad, a.inputs[0], a.inputs[1], axis)?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            })),
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| act.apply(v));
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| {
                let mut g = a.grad.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(a.inputs[0].data()) {
                    *gi *= act.derivative(xi);
                }
                Ok(vec![Some(g)])
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(
            y,
            vec![a.0, b.0],
            Some(Box::new(|a| Ok(vec![Some(a.grad.clone()), Some(a.grad.clone())]))),
        ))
    }

    /// Sums any number of equally shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| config_err("add_all needs at least one operand"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| Ok(vec![Some(a.grad.map(|g| g * factor))]))),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| Ok(vec![Some(a.grad.clone().reshape(&old)?)]))),
        ))
    }

    pub fn nchw_to_nhwc(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).nchw_to_nhwc()?;
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(|a| Ok(vec![Some(a.grad.nhwc_to_nchw()?)]))),
        ))
    }

    pub fn nhwc_to_nchw(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).nhwc_to_nchw()?;
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(|a| Ok(vec![Some(a.grad.nchw_to_nhwc()?)]))),
        ))
    }

    /// Global multi-head attention over `qkv: [B, N, 3D]`, returning `[B, N, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, label: &str) -> Result<Var> {
        let exec = self.exec;
        let (y, cache) = attention_forward(self.value(qkv), heads, exec)?;
        let &[b, n, d] = y.shape() else { unreachable!() };
        let scores = (b * n * n * d) as u64;
        self.record(format!("{label}.scores"), "attention_scores", scores);
        self.record(format!("{label}.weighted_sum"), "attention_weighted_sum", scores);
        Ok(self.push(
            y,
            vec![qkv.0],
            Some(Box::new(move |a| {
                Ok(vec![Some(attention_backward(a.grad, a.inputs[0], heads, &cache, exec)?)])
            })),
        ))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let exec = self.exec;
        let in_dims = self.value(x).dims4()?;
        let y = resize_bilinear_forward(self.value(x), out_h, out_w, exec)?;
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| Ok(vec![Some(resize_bilinear_backward(a.grad, in_dims, exec)?)]))),
        ))
    }

    /// Keeps the top-left `height × width` window of a `[B, C, H, W]` map.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if height > h || width > w {
            return Err(config_err(format!("cannot crop {h}x{w} to {height}x{width}")));
        }
        if (height, width) == (h, w) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * height * width);
        for plane in 0..b * c {
            for y in 0..height {
                out.extend_from_slice(&src[plane * h * w + y * w..][..width]);
            }
        }
        let y = Tensor::new(vec![b, c, height, width], out)?;
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| {
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let g = a.grad.data();
                let d = dx.data_mut();
                for plane in 0..b * c {
                    for y in 0..height {
                        d[plane * h * w + y * w..][..width]
                            .copy_from_slice(&g[(plane * height + y) * width..][..width]);
                    }
                }
                Ok(vec![Some(dx)])
            })),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.push(
            y,
            vec![x.0],
            Some(Box::new(move |a| Ok(vec![Some(Tensor::full(&shape, a.grad.data()[0]))]))),
        ))
    }

    /// `Σ x·weights` for a constant tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(config_err(format!(
                "dot_const shape mismatch: {:?} vs {:?}",
                self.shape(x),
                weights.shape()
            )));
        }
        let y: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let w = weights.clone();
        Ok(self.push(
            Tensor::scalar(y),
            vec![x.0],
            Some(Box::new(move |a| {
                let g = a.grad.data()[0];
                Ok(vec![Some(w.map(|v| v * g))])
            })),
        ))
    }

    /// Mean per-pixel cross-entropy of `[B, C, H, W]` logits against `[B·H·W]` class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let dims = self.value(logits).dims4()?;
        let (loss, probs) = cross_entropy_forward(self.value(logits), labels)?;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |a| {
                Ok(vec![Some(cross_entropy_backward(a.grad.data()[0], &probs, &labels, dims))])
            })),
        ))
    }

    /// Back-propagates from `root`, seeding its gradient with ones, which is the
    /// gradient of `sum(root)`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at {}",
                    node.param.as_deref().unwrap_or("intermediate value")
                )));
            }
            let Some(backward) = &node.backward else {
                match &node.param {
                    Some(name) => {
                        out.params
                            .entry(name.clone())
                            .and_modify(|acc| acc.add_assign(&g))
                            .or_insert(g);
                    }
                    None => {
                        out.leaves.insert(i, g);
                    }
                }
                continue;
            };
            let args = BackwardArgs {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&args)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_inputs_accumulate_gradients() {
        let mut params = ParamRegistry::new();
        params.insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, "x").unwrap();
        let y = tape.add(x, x).unwrap();
        let y = tape.scale(y, 3.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[6.0, 6.0, 6.0]);
    }

    #[test]
    fn crop_routes_gradient_to_the_kept_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 4]));
        let c = tape.crop(x, 2, 3).unwrap();
        assert_eq!(tape.shape(c), &[1, 1, 2, 3]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let expected = [1., 1., 1., 0., 1., 1., 1., 0., 0., 0., 0., 0.];
        assert_eq!(g.leaf(x).unwrap().data(), &expected);
        assert!(tape.crop(x, 4, 4).is_err());
    }

    #[test]
    fn frozen_and_constant_leaves_get_nothing() {
        let mut params = ParamRegistry::new();
        params.insert("w", Tensor::ones(&[2])).unwrap();
        params.get_mut("w").unwrap().frozen = true;
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let c = tape.input(Tensor::ones(&[2]));
        let y = tape.add(w, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.params.is_empty());
        assert!(tape.param(&params, "missing").is_err());
    }

    #[test]
    fn layout_round_trip_is_exact() {
        use rand::SeedableRng;
        let t = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = tape.nchw_to_nhwc(x).unwrap();
        let z = tape.nhwc_to_nchw(y).unwrap();
        assert!(tape.value(z).bit_eq(&t));
        let r = tape.reshape(z, &[6, 20]).unwrap();
        let s = tape.dot_const(r, &Tensor::full(&[6, 20], 2.0)).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.leaf(x).unwrap().bit_eq(&Tensor::full(&[2, 3, 4, 5], 2.0)));
    }
}
