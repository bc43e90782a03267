//! Positional encoding generator: a residual depthwise convolution over the
//! token grid. Position information comes from the zero-padded borders, so the
//! layer works for any grid size instead of a fixed-size embedding table.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::layers::conv::ConvSpec;
use crate::macs::CostReport;
use crate::nn::{Conv2d, Init};
use crate::params::ParamRegistry;
use crate::tensor::TokenGrid;

#[derive(Clone, Debug)]
pub struct PegLayer {
    pub embed_dim: usize,
    pub kernel: usize,
    conv: Conv2d,
}

impl PegLayer {
    pub fn new(name: impl Into<String>, embed_dim: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(config_err("PEG kernel must be odd to preserve the grid size"));
        }
        let spec = ConvSpec::same(embed_dim, embed_dim, kernel, 1).with_groups(embed_dim);
        spec.validate()?;
        Ok(Self {
            embed_dim,
            kernel,
            conv: Conv2d::new(name, spec, true),
        })
    }

    pub fn name(&self) -> &str {
        &self.conv.name
    }

    /// Zero weights: the layer starts as the identity map.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamRegistry, rng: &mut R) -> Result<()> {
        self.conv.init(params, Init::Zeros, rng)
    }

    /// `tokens + dwconv(tokens)` on a `[B, Ht, Wt, D]` grid.
    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens);
        if shape.len() != 4 || shape[3] != self.embed_dim {
            return Err(config_err(format!(
                "PEG expects [B, H, W, {}] tokens, got {:?}",
                self.embed_dim, shape
            )));
        }
        let spatial = tape.nhwc_to_nchw(tokens)?;
        let conv = self.conv.forward(tape, params, spatial)?;
        let back = tape.nchw_to_nhwc(conv)?;
        tape.add(tokens, back)
    }

    pub fn apply(&self, params: &ParamRegistry, tokens: &TokenGrid) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let x = tape.input(tokens.tensor().clone());
        let y = self.forward(&mut tape, params, x)?;
        TokenGrid::new(tape.value(y).clone())
    }

    pub fn cost(&self, report: &mut CostReport, grid: (usize, usize)) -> Result<()> {
        self.conv.cost(report, [self.embed_dim, grid.0, grid.1])?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(dim: usize) -> (PegLayer, ParamRegistry, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let peg = PegLayer::new("peg", dim, 3).unwrap();
        let mut params = ParamRegistry::new();
        peg.init(&mut params, &mut rng).unwrap();
        (peg, params, rng)
    }

    #[test]
    fn shapes_follow_the_grid() {
        let (peg, mut params, mut rng) = layer(6);
        params.randomize(0.3, &mut rng);
        for (h, w) in [(4, 4), (7, 5), (1, 1)] {
            let t = TokenGrid::new(Tensor::randn(&[1, h, w, 6], 1.0, &mut rng)).unwrap();
            let out = peg.apply(&params, &t).unwrap();
            assert_eq!(out.tensor().shape(), &[1, h, w, 6]);
        }
    }

    #[test]
    fn zero_init_is_identity() {
        let (peg, params, mut rng) = layer(4);
        let t = TokenGrid::new(Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng)).unwrap();
        assert!(peg.apply(&params, &t).unwrap().tensor().bit_eq(t.tensor()));
    }

    #[test]
    fn interior_is_translation_equivariant() {
        let (peg, mut params, mut rng) = layer(3);
        params.randomize(0.5, &mut rng);
        let (h, w, c) = (8, 9, 3);
        let base = Tensor::randn(&[1, h, w, c], 1.0, &mut rng);
        // shifted[y, x] = base[y-1, x-1]
        let mut shifted = Tensor::zeros(&[1, h, w, c]);
        for y in 1..h {
            for x in 1..w {
                for ch in 0..c {
                    shifted.data_mut()[(y * w + x) * c + ch] = base.data()[((y - 1) * w + x - 1) * c + ch];
                }
            }
        }
        let a = peg.apply(&params, &TokenGrid::new(base).unwrap()).unwrap();
        let b = peg.apply(&params, &TokenGrid::new(shifted).unwrap()).unwrap();
        // outputs away from both the border and the zero-filled first row/col
        for y in 2..h - 1 {
            for x in 2..w - 1 {
                for ch in 0..c {
                    let va = a.tensor().data()[((y - 1) * w + x - 1) * c + ch];
                    let vb = b.tensor().data()[(y * w + x) * c + ch];
                    assert!((va - vb).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (peg, params, _) = layer(4);
        let t = TokenGrid::zeros(1, 2, 2, 5);
        assert!(peg.apply(&params, &t).is_err());
    }
}
