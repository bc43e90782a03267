//! Layer normalization over one axis of a tensor viewed as `[outer, C, inner]`.
//!
//! Channels-last grids normalize the trailing axis (`inner = 1`); channels-first
//! maps normalize `C` at every pixel (`inner = H·W`).

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Last axis of any-rank tensor.
    Last,
    /// Axis 1 of a `[B, C, H, W]` map.
    Channels,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormLayout {
    pub fn of(x: &Tensor, axis: NormAxis) -> Result<Self> {
        match axis {
            NormAxis::Last => {
                let c = *x.shape().last().ok_or_else(|| config_err("layer norm on scalar"))?;
                Ok(Self { outer: x.len() / c, channels: c, inner: 1 })
            }
            NormAxis::Channels => {
                let [b, c, h, w] = x.dims4()?;
                Ok(Self { outer: b, channels: c, inner: h * w })
            }
        }
    }

    #[inline]
    fn index(&self, o: usize, c: usize, i: usize) -> usize {
        (o * self.channels + c) * self.inner + i
    }
}

pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: NormAxis) -> Result<Tensor> {
    let l = NormLayout::of(x, axis)?;
    if gamma.shape() != [l.channels] || beta.shape() != [l.channels] {
        return Err(config_err(format!(
            "layer norm affine params must have shape [{}]",
            l.channels
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..l.outer {
        for i in 0..l.inner {
            let (mean, rstd) = stats(xd, &l, o, i);
            for c in 0..l.channels {
                let idx = l.index(o, c, i);
                out[idx] = (xd[idx] - mean) * rstd * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn stats(xd: &[f64], l: &NormLayout, o: usize, i: usize) -> (f64, f64) {
    let n = l.channels as f64;
    let mean = (0..l.channels).map(|c| xd[l.index(o, c, i)]).sum::<f64>() / n;
    let var = (0..l.channels)
        .map(|c| {
            let d = xd[l.index(o, c, i)] - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    grad_out: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    axis: NormAxis,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = NormLayout::of(x, axis)?;
    let xd = x.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; l.channels];
    let mut dbeta = vec![0.0; l.channels];
    let n = l.channels as f64;
    let mut xhat = vec![0.0; l.channels];
    let mut dxhat = vec![0.0; l.channels];
    for o in 0..l.outer {
        for i in 0..l.inner {
            let (mean, rstd) = stats(xd, &l, o, i);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for c in 0..l.channels {
                let idx = l.index(o, c, i);
                xhat[c] = (xd[idx] - mean) * rstd;
                dxhat[c] = gd[idx] * gamma.data()[c];
                dgamma[c] += gd[idx] * xhat[c];
                dbeta[c] += gd[idx];
                sum_d += dxhat[c];
                sum_dx += dxhat[c] * xhat[c];
            }
            for c in 0..l.channels {
                dx[l.index(o, c, i)] = rstd * (dxhat[c] - sum_d / n - xhat[c] * sum_dx / n);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![l.channels], dgamma)?,
        Tensor::new(vec![l.channels], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_position() {
        let x = Tensor::new(vec![2, 4], vec![1., 2., 3., 4., -2., 0., 2., 4.]).unwrap();
        let y = layer_norm_forward(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), NormAxis::Last).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_axis_matches_last_axis_after_transpose() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 5, 3, 2], 1.0, &mut rng);
        let g = Tensor::randn(&[5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let a = layer_norm_forward(&x, &g, &b, NormAxis::Channels).unwrap();
        let c = layer_norm_forward(&x.nchw_to_nhwc().unwrap(), &g, &b, NormAxis::Last)
            .unwrap()
            .nhwc_to_nchw()
            .unwrap();
        for (p, q) in a.data().iter().zip(c.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
