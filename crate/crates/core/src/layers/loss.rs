//! Per-pixel softmax cross-entropy averaged over all labelled pixels.

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, labels: &[u8]) -> Result<[usize; 4]> {
    let dims = logits.dims4()?;
    let [b, c, h, w] = dims;
    if labels.len() != b * h * w {
        return Err(config_err(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(config_err(format!("label {bad} out of range for {c} classes")));
    }
    Ok(dims)
}

/// Returns the mean loss and the per-pixel softmax probabilities.
pub fn cross_entropy_forward(logits: &Tensor, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let [b, c, h, w] = check(logits, labels)?;
    let hw = h * w;
    let ld = logits.data();
    let mut probs = vec![0.0; ld.len()];
    let mut total = 0.0;
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let m = (0..c).map(|ci| ld[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ci| (ld[at(ci)] - m).exp()).sum();
            for ci in 0..c {
                probs[at(ci)] = (ld[at(ci)] - m).exp() / z;
            }
            let y = labels[bi * hw + p] as usize;
            total += z.ln() + m - ld[at(y)];
        }
    }
    let loss = total / (b * hw) as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy evaluated to {loss}")));
    }
    Ok((loss, probs))
}

pub fn cross_entropy_backward(upstream: f64, probs: &[f64], labels: &[u8], dims: [usize; 4]) -> Tensor {
    let [b, c, h, w] = dims;
    let hw = h * w;
    let scale = upstream / (b * hw) as f64;
    let mut grad: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for bi in 0..b {
        for p in 0..hw {
            let y = labels[bi * hw + p] as usize;
            grad[(bi * c + y) * hw + p] -= scale;
        }
    }
    Tensor::new(dims.to_vec(), grad).expect("dims match probs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let (loss, _) = cross_entropy_forward(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(cross_entropy_forward(&logits, &[2]).is_err());
    }
}
