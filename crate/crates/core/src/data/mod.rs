//! Synthetic segmentation data, augmentation, dataset files and the mIoU metric.

mod augment;
mod io;
mod metric;
mod shapes;

pub use augment::{augment, sample_seed, AugmentConfig};
pub use io::{export_dataset, import_dataset, DatasetManifest};
pub use metric::{miou, ConfusionMatrix, MiouReport};
pub use shapes::generate_shapes;

use crate::error::{config_err, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Row-major map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(config_err(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// One image `[1, 3, H, W]` in `[0, 1]` with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: FeatureMap,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: FeatureMap, label: LabelMap) -> Result<Self> {
        if image.batch() != 1 || image.height() != label.height || image.width() != label.width {
            return Err(config_err(format!(
                "image {:?} does not match label {}x{}",
                image.tensor().shape(),
                label.height,
                label.width
            )));
        }
        Ok(Self { image, label })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.label.height, self.label.width)
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.label.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(bad) => Err(config_err(format!("label {bad} outside 0..{num_classes}"))),
            None => Ok(()),
        }
    }
}

/// Stacks equally sized samples into one batch, labels concatenated.
pub fn collate(samples: &[Sample]) -> Result<(FeatureMap, Vec<u8>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| s.image.tensor()).collect();
    let batch = FeatureMap::new(Tensor::stack_batch(&images)?)?;
    let labels = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    Ok((batch, labels))
}
