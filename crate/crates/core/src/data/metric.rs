use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// `counts[gt][pred]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(config_err("num_classes must be positive"));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(config_err(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= k) {
            return Err(config_err(format!("label {bad} outside 0..{k}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(config_err("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(config_err("mIoU of an empty set of pixels"));
        }
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let gt_c: u64 = (0..k).map(|p| self.count(c, p)).sum();
                let pred_c: u64 = (0..k).map(|g| self.count(g, c)).sum();
                let union = gt_c + pred_c - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<MiouReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(config_err("mIoU of empty input"));
    }
    let mut cm = ConfusionMatrix::new(num_classes)?;
    cm.add(pred, gt)?;
    cm.report()
}
