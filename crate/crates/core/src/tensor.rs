//! Dense row-major `f64` tensors plus the two rank-4 layouts used throughout
//! the crate: channels-first feature maps and channels-last token grids.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(config_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            other => Err(config_err(format!("expected a rank-4 tensor, got shape {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(config_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or infinity")))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `[B, C, H, W]` → `[B, H, W, C]`.
    pub fn nchw_to_nhwc(&self) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        let mut out = vec![0.0; self.data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = &self.data[(bi * c + ci) * h * w..][..h * w];
                for (p, &v) in src.iter().enumerate() {
                    out[(bi * h * w + p) * c + ci] = v;
                }
            }
        }
        Ok(Self {
            shape: vec![b, h, w, c],
            data: out,
        })
    }

    /// `[B, H, W, C]` → `[B, C, H, W]`.
    pub fn nhwc_to_nchw(&self) -> Result<Self> {
        let [b, h, w, c] = self.dims4()?;
        let mut out = vec![0.0; self.data.len()];
        for bi in 0..b {
            for p in 0..h * w {
                let src = &self.data[(bi * h * w + p) * c..][..c];
                for (ci, &v) in src.iter().enumerate() {
                    out[(bi * c + ci) * h * w + p] = v;
                }
            }
        }
        Ok(Self {
            shape: vec![b, c, h, w],
            data: out,
        })
    }

    /// Stacks equally shaped `[1, ...]` tensors along the leading axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| config_err("cannot stack an empty batch"))?;
        if first.shape.first() != Some(&1) {
            return Err(config_err("stacked tensors must have a leading batch of 1"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(config_err(format!(
                    "batch members differ in shape: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = items.len();
        Ok(Self { shape, data })
    }

    /// Extracts batch element `index` as a `[1, ...]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let b = *self.shape.first().ok_or_else(|| config_err("scalar has no batch"))?;
        if index >= b {
            return Err(config_err(format!("batch index {index} out of range {b}")));
        }
        let stride = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }
}

/// Channels-first activation `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims4()?;
        if dims.contains(&0) {
            return Err(config_err(format!("feature map dims must be positive: {dims:?}")));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[batch, channels, height, width]))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Zero-pads on the bottom and right edges.
    pub fn pad_bottom_right(&self, height: usize, width: usize) -> Result<Self> {
        let [b, c, h, w] = self.0.dims4()?;
        if height < h || width < w {
            return Err(config_err("padded size must not shrink the map"));
        }
        if height == h && width == w {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(&[b, c, height, width]);
        let dst = out.data_mut();
        for plane in 0..b * c {
            for y in 0..h {
                let s = &self.0.data()[plane * h * w + y * w..][..w];
                dst[plane * height * width + y * width..][..w].copy_from_slice(s);
            }
        }
        Ok(Self(out))
    }
}

/// Channels-last transformer activation `[batch, height_tokens, width_tokens, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid(Tensor);

impl TokenGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims4()?;
        if dims.contains(&0) {
            return Err(config_err(format!("token grid dims must be positive: {dims:?}")));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(batch: usize, height: usize, width: usize, dim: usize) -> Self {
        Self(Tensor::zeros(&[batch, height, width, dim]))
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn embed_dim(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}
