use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::error::Result;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Frozen parameters are skipped and never get
/// moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, params: &mut ParamRegistry, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - BETA1.powf(self.step as f64);
        let c2 = 1.0 - BETA2.powf(self.step as f64);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.param(name) else { continue };
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let values = p.value.data_mut();
            for (((x, &gi), mi), vi) in values
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn sum_grad(params: &ParamRegistry) -> Gradients {
        let mut tape = Tape::new();
        let x = tape.param(params, "x").unwrap();
        let y = tape.param(params, "frozen").unwrap();
        let s = tape.add(x, y).unwrap();
        let total = tape.sum(s).unwrap();
        tape.backward(total).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamRegistry::new();
        params.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
        params.insert("frozen", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        params.get_mut("frozen").unwrap().frozen = true;
        let grads = sum_grad(&params);
        let mut adam = Adam::new();
        adam.update(&mut params, &grads, 0.1).unwrap();
        // bias-corrected first step is lr·sign(g)
        let x = params.value("x").unwrap().data();
        assert!((x[0] - 2.9).abs() < 1e-8 && (x[1] + 2.1).abs() < 1e-8);
        assert_eq!(params.value("frozen").unwrap().data(), &[1.0, 1.0]);
        assert!(!adam.first_moment.contains_key("frozen"));
    }
}
