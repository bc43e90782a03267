use crate::error::{config_err, Result};

/// Cosine decay from `lr0` at epoch 0 to zero at epoch `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(config_err("cosine schedule needs at least one epoch"));
    }
    if epoch > total {
        return Err(config_err(format!("epoch {epoch} past the schedule end {total}")));
    }
    if epoch == total {
        return Ok(0.0);
    }
    let t = epoch as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 20, 0.005).unwrap(), 0.005);
        assert_eq!(cosine_lr(20, 20, 0.005).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 20, 0.005).unwrap(), 0.0025);
        assert!(cosine_lr(0, 0, 0.005).is_err());
        assert!(cosine_lr(21, 20, 0.005).is_err());
    }

    proptest! {
        #[test]
        fn non_increasing(total in 1usize..300, lr0 in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let lr = cosine_lr(e, total, lr0).unwrap();
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
        }
    }
}
