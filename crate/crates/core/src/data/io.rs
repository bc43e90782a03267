//! Dataset directories: `images/NNNNN.png` (8-bit RGB), `labels/NNNNN.png`
//! (8-bit gray holding class ids) and `manifest.json`.

use std::fs;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// `(image, label)` paths relative to the dataset directory.
    pub files: Vec<(String, String)>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples as PNG pairs. Pixel values are quantized to 8 bits.
pub fn export_dataset(dir: &Path, samples: &[Sample], num_classes: usize, seed: u64) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot export an empty dataset".into()))?;
    let (height, width) = first.dims();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate_labels(num_classes)?;
        let (h, w) = s.dims();
        if (h, w) != (height, width) || s.image.channels() != 3 {
            return Err(Error::Config(format!("sample {i} is not a {height}x{width} RGB image")));
        }
        let data = s.image.tensor().data();
        let plane = h * w;
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([to_u8(data[p]), to_u8(data[plane + p]), to_u8(data[2 * plane + p])])
        });
        let gray = GrayImage::from_raw(w as u32, h as u32, s.label.data.clone()).expect("label size checked");
        let img_rel = format!("images/{i:05}.png");
        let lbl_rel = format!("labels/{i:05}.png");
        rgb.save(dir.join(&img_rel))?;
        gray.save(dir.join(&lbl_rel))?;
        files.push((img_rel, lbl_rel));
    }
    let manifest = DatasetManifest {
        num_samples: samples.len(),
        height,
        width,
        num_classes,
        seed,
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.files.len() != manifest.num_samples {
        return Err(Error::Format(format!(
            "manifest lists {} files for {} samples",
            manifest.files.len(),
            manifest.num_samples
        )));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.num_samples);
    for (img_rel, lbl_rel) in &manifest.files {
        let rgb = image::open(dir.join(img_rel))?.into_rgb8();
        let gray = image::open(dir.join(lbl_rel))?.into_luma8();
        if rgb.dimensions() != (w as u32, h as u32) || gray.dimensions() != (w as u32, h as u32) {
            return Err(Error::Format(format!("{img_rel} or {lbl_rel} is not {h}x{w}")));
        }
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let p = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + p] = px[c] as f64 / 255.0;
            }
        }
        let image = FeatureMap::new(Tensor::new(vec![1, 3, h, w], data)?)?;
        let sample = Sample::new(image, LabelMap::new(h, w, gray.into_raw())?)?;
        sample.validate_labels(manifest.num_classes)?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}
