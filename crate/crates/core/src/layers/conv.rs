//! Grouped, dilated 2-D cross-correlation on `[B, C, H, W]` maps.
//!
//! `y[b, o, i, j] = bias[o] + Σ_{c,ky,kx} x[b, c, i·s + ky·r − p, j·s + kx·r − p] · w[o, c, ky, kx]`
//! with taps that land outside the input reading zero.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side.
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    /// Zero padding in pixels on every side.
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }

    /// Stride-1 conv whose padding `dilation·(kernel−1)/2` preserves spatial dims.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            dilation,
            padding: dilation * (kernel - 1) / 2,
            ..Self::new(in_channels, out_channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("conv {name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(config_err(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Span of the dilated kernel: `k + (k−1)(r−1)`.
    pub fn effective_kernel(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.dilation - 1)
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn num_params(&self, bias: bool) -> u64 {
        let w: usize = self.weight_shape().iter().product();
        (w + if bias { self.out_channels } else { 0 }) as u64
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let ext = self.effective_kernel();
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if ph < ext || pw < ext {
            return Err(config_err(format!(
                "input {height}x{width} (padded {ph}x{pw}) smaller than kernel extent {ext}"
            )));
        }
        Ok(((ph - ext) / self.stride + 1, (pw - ext) / self.stride + 1))
    }

    /// Multiply-accumulates for one image: `out_C · (in_C/groups) · k² · H_out · W_out`.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * self.in_per_group() * self.kernel * self.kernel * out_h * out_w) as u64
    }
}

/// Output columns `[lo, hi)` whose tap at kernel column `kx` falls inside a row of `width`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k_off: usize, stride: usize, padding: usize) -> (usize, usize) {
    // input index = o·stride + k_off − padding
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let max_in = in_len as isize - 1 + padding as isize - k_off as isize;
    let hi = if max_in < 0 {
        0
    } else {
        (max_in as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

fn check_shapes(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<[usize; 4]> {
    spec.validate()?;
    let dims = x.dims4()?;
    if dims[1] != spec.in_channels {
        return Err(config_err(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels, dims[1]
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(config_err(format!(
            "conv weight shape {:?} does not match {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(config_err(format!("conv bias shape {:?}", b.shape())));
        }
    }
    Ok(dims)
}

fn direct_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    exec: Exec,
) -> Result<Tensor> {
    let [batch, _, h, wd] = x.dims4()?;
    let (oh, ow) = spec.output_dims(h, wd)?;
    let k = spec.kernel;
    let (s, r, p) = (spec.stride, spec.dilation, spec.padding);
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let xd = x.data();
    let wdat = w.data();

    let mut out = vec![0.0; batch * spec.out_channels * oh * ow];
    exec.for_each_chunk(&mut out, oh * ow, |plane, dst| {
        let b = plane / spec.out_channels;
        let oc = plane % spec.out_channels;
        let g = oc / opg;
        if let Some(bias) = bias {
            dst.fill(bias.data()[oc]);
        }
        for icl in 0..ipg {
            let ic = g * ipg + icl;
            let src = &xd[(b * spec.in_channels + ic) * h * wd..][..h * wd];
            let wk = &wdat[(oc * ipg + icl) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky * r, s, p);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, wd, kx * r, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky * r - p;
                        let row = &src[iy * wd..][..wd];
                        let orow = &mut dst[oy * ow..][..ow];
                        let ix0 = ox_lo * s + kx * r - p;
                        if s == 1 {
                            let n = ox_hi - ox_lo;
                            for (o, &v) in orow[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *o += wv * v;
                            }
                        } else {
                            for (j, o) in orow[ox_lo..ox_hi].iter_mut().enumerate() {
                                *o += wv * row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![batch, spec.out_channels, oh, ow], out)
}

fn direct_backward_input(
    grad_out: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    in_dims: [usize; 4],
    exec: Exec,
) -> Result<Tensor> {
    let [batch, _, h, wd] = in_dims;
    let [_, _, oh, ow] = grad_out.dims4()?;
    let k = spec.kernel;
    let (s, r, p) = (spec.stride, spec.dilation, spec.padding);
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let gd = grad_out.data();
    let wdat = w.data();

    let mut dx = vec![0.0; batch * spec.in_channels * h * wd];
    exec.for_each_chunk(&mut dx, h * wd, |plane, dst| {
        let b = plane / spec.in_channels;
        let ic = plane % spec.in_channels;
        let g = ic / ipg;
        let icl = ic % ipg;
        for oc in g * opg..(g + 1) * opg {
            let gplane = &gd[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            let wk = &wdat[(oc * ipg + icl) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky * r, s, p);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, wd, kx * r, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky * r - p;
                        let grow = &gplane[oy * ow..][..ow];
                        let drow = &mut dst[iy * wd..][..wd];
                        let ix0 = ox_lo * s + kx * r - p;
                        if s == 1 {
                            let n = ox_hi - ox_lo;
                            for (d, &g) in drow[ix0..ix0 + n].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *d += wv * g;
                            }
                        } else {
                            for (j, &g) in grow[ox_lo..ox_hi].iter().enumerate() {
                                drow[ix0 + j * s] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(in_dims.to_vec(), dx)
}

fn direct_backward_weight(grad_out: &Tensor, x: &Tensor, spec: &ConvSpec, exec: Exec) -> Result<Tensor> {
    let [batch, _, h, wd] = x.dims4()?;
    let [_, _, oh, ow] = grad_out.dims4()?;
    let k = spec.kernel;
    let (s, r, p) = (spec.stride, spec.dilation, spec.padding);
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let gd = grad_out.data();
    let xd = x.data();

    let mut dw = vec![0.0; spec.out_channels * ipg * k * k];
    exec.for_each_chunk(&mut dw, ipg * k * k, |oc, dst| {
        let g = oc / opg;
        for icl in 0..ipg {
            let ic = g * ipg + icl;
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky * r, s, p);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(ow, wd, kx * r, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for b in 0..batch {
                        let gplane = &gd[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
                        let src = &xd[(b * spec.in_channels + ic) * h * wd..][..h * wd];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * r - p;
                            let grow = &gplane[oy * ow..][..ow];
                            let row = &src[iy * wd..][..wd];
                            let ix0 = ox_lo * s + kx * r - p;
                            if s == 1 {
                                let n = ox_hi - ox_lo;
                                acc += crate::exec::dot(&grow[ox_lo..ox_hi], &row[ix0..ix0 + n]);
                            } else {
                                for (j, &g) in grow[ox_lo..ox_hi].iter().enumerate() {
                                    acc += g * row[ix0 + j * s];
                                }
                            }
                        }
                    }
                    dst[(icl * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    Tensor::new(spec.weight_shape().to_vec(), dw)
}

/// Dense convolutions go through im2col and a GEMM; depthwise and other
/// narrow ones use the direct loops.
fn use_gemm(spec: &ConvSpec) -> bool {
    spec.out_per_group() >= 4 && spec.in_per_group() * spec.kernel * spec.kernel >= 8
}

/// Unfolds one group of one image into `[ipg·k·k, oh·ow]` columns.
fn im2col(src: &[f64], spec: &ConvSpec, h: usize, wd: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = spec.kernel;
    let (s, r, p) = (spec.stride, spec.dilation, spec.padding);
    let n = oh * ow;
    cols.fill(0.0);
    for icl in 0..spec.in_per_group() {
        let plane = &src[icl * h * wd..][..h * wd];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky * r, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, wd, kx * r, s, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &mut cols[((icl * k + ky) * k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * r - p;
                    let irow = &plane[iy * wd..][..wd];
                    let ix0 = ox_lo * s + kx * r - p;
                    let orow = &mut row[oy * ow..][..ow];
                    if s == 1 {
                        orow[ox_lo..ox_hi].copy_from_slice(&irow[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for (j, o) in orow[ox_lo..ox_hi].iter_mut().enumerate() {
                            *o = irow[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adds `[ipg·k·k, oh·ow]` columns back onto one group of one image.
fn col2im(cols: &[f64], spec: &ConvSpec, h: usize, wd: usize, oh: usize, ow: usize, dst: &mut [f64]) {
    let k = spec.kernel;
    let (s, r, p) = (spec.stride, spec.dilation, spec.padding);
    let n = oh * ow;
    for icl in 0..spec.in_per_group() {
        let plane = &mut dst[icl * h * wd..][..h * wd];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky * r, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, wd, kx * r, s, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &cols[((icl * k + ky) * k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * r - p;
                    let drow = &mut plane[iy * wd..][..wd];
                    let ix0 = ox_lo * s + kx * r - p;
                    let crow = &row[oy * ow..][..ow];
                    if s == 1 {
                        for (d, &c) in drow[ix0..ix0 + ox_hi - ox_lo].iter_mut().zip(&crow[ox_lo..ox_hi]) {
                            *d += c;
                        }
                    } else {
                        for (j, &c) in crow[ox_lo..ox_hi].iter().enumerate() {
                            drow[ix0 + j * s] += c;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` with explicit strides `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, kk: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, kk, n, 1.0,
            a.as_ptr(), sa.0 as isize, sa.1 as isize,
            b.as_ptr(), sb.0 as isize, sb.1 as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    exec: Exec,
) -> Result<Tensor> {
    let [batch, _, h, wd] = check_shapes(x, w, bias, spec)?;
    if !x.all_finite() {
        return Err(Error::Numeric("conv2d input contains NaN or infinity".into()));
    }
    if !use_gemm(spec) {
        return direct_forward(x, w, bias, spec, exec);
    }
    let (oh, ow) = spec.output_dims(h, wd)?;
    let (ipg, opg, n) = (spec.in_per_group(), spec.out_per_group(), oh * ow);
    let kk = ipg * spec.kernel * spec.kernel;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; batch * spec.out_channels * n];
    exec.for_each_chunk(&mut out, spec.out_channels * n, |b, dst| {
        let mut cols = vec![0.0; kk * n];
        if let Some(bias) = bias {
            for (oc, plane) in dst.chunks_mut(n).enumerate() {
                plane.fill(bias.data()[oc]);
            }
        }
        for g in 0..spec.groups {
            let src = &xd[(b * spec.in_channels + g * ipg) * h * wd..][..ipg * h * wd];
            im2col(src, spec, h, wd, oh, ow, &mut cols);
            let wg = &wdat[g * opg * kk..][..opg * kk];
            gemm(opg, kk, n, wg, (kk, 1), &cols, (n, 1), 1.0, &mut dst[g * opg * n..][..opg * n]);
        }
    });
    Tensor::new(vec![batch, spec.out_channels, oh, ow], out)
}

/// Gradient with respect to the input, shaped like `x` (`in_dims`).
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    in_dims: [usize; 4],
    exec: Exec,
) -> Result<Tensor> {
    if !use_gemm(spec) {
        return direct_backward_input(grad_out, w, spec, in_dims, exec);
    }
    let [batch, _, h, wd] = in_dims;
    let [_, _, oh, ow] = grad_out.dims4()?;
    let (ipg, opg, n) = (spec.in_per_group(), spec.out_per_group(), oh * ow);
    let kk = ipg * spec.kernel * spec.kernel;
    let (gd, wdat) = (grad_out.data(), w.data());
    let mut dx = vec![0.0; batch * spec.in_channels * h * wd];
    exec.for_each_chunk(&mut dx, spec.in_channels * h * wd, |b, dst| {
        let mut cols = vec![0.0; kk * n];
        for g in 0..spec.groups {
            let wg = &wdat[g * opg * kk..][..opg * kk];
            let gg = &gd[(b * spec.out_channels + g * opg) * n..][..opg * n];
            // columns = Wᵀ · G
            gemm(kk, opg, n, wg, (1, kk), gg, (n, 1), 0.0, &mut cols);
            col2im(&cols, spec, h, wd, oh, ow, &mut dst[g * ipg * h * wd..][..ipg * h * wd]);
        }
    });
    Tensor::new(in_dims.to_vec(), dx)
}

/// Gradient with respect to the weights, shaped `spec.weight_shape()`.
pub fn conv2d_backward_weight(grad_out: &Tensor, x: &Tensor, spec: &ConvSpec, exec: Exec) -> Result<Tensor> {
    if !use_gemm(spec) {
        return direct_backward_weight(grad_out, x, spec, exec);
    }
    let [batch, _, h, wd] = x.dims4()?;
    let [_, _, oh, ow] = grad_out.dims4()?;
    let (ipg, opg, n) = (spec.in_per_group(), spec.out_per_group(), oh * ow);
    let kk = ipg * spec.kernel * spec.kernel;
    let (gd, xd) = (grad_out.data(), x.data());
    // per-image partials summed in a fixed order keep both modes bit-identical
    let partials = exec.map(batch, |b| {
        let mut cols = vec![0.0; kk * n];
        let mut dw = vec![0.0; spec.out_channels * kk];
        for g in 0..spec.groups {
            let src = &xd[(b * spec.in_channels + g * ipg) * h * wd..][..ipg * h * wd];
            im2col(src, spec, h, wd, oh, ow, &mut cols);
            let gg = &gd[(b * spec.out_channels + g * opg) * n..][..opg * n];
            // dW = G · colsᵀ
            gemm(opg, n, kk, gg, (n, 1), &cols, (1, n), 0.0, &mut dw[g * opg * kk..][..opg * kk]);
        }
        dw
    });
    let mut dw = vec![0.0; spec.out_channels * kk];
    for part in partials {
        for (d, v) in dw.iter_mut().zip(part) {
            *d += v;
        }
    }
    Tensor::new(spec.weight_shape().to_vec(), dw)
}

/// Gradient with respect to the bias: per-channel sum of `grad_out`.
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Result<Tensor> {
    let [batch, c, oh, ow] = grad_out.dims4()?;
    let mut db = vec![0.0; c];
    for b in 0..batch {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += grad_out.data()[(b * c + oc) * oh * ow..][..oh * ow].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the dilated cross-correlation with explicit
    /// bounds checks, used as the reference for the optimized kernels.
    pub(crate) fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let [b, _, h, wd] = x.dims4().unwrap();
        let (oh, ow) = spec.output_dims(h, wd).unwrap();
        let k = spec.kernel;
        let ipg = spec.in_per_group();
        let opg = spec.out_per_group();
        let mut out = Tensor::zeros(&[b, spec.out_channels, oh, ow]);
        for bi in 0..b {
            for oc in 0..spec.out_channels {
                let g = oc / opg;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[oc]);
                        for icl in 0..ipg {
                            let ic = g * ipg + icl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (i * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (j * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * spec.in_channels + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * ipg + icl) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bi * spec.out_channels + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn impulse_hits_dilated_taps() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let spec = ConvSpec::new(1, 1, 3).with_dilation(2).with_padding(2);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, &spec, Exec::Sequential).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        let expected = conv_oracle(&x, &w, None, &spec);
        assert_eq!(y, expected);
        for i in 0..5 {
            for j in 0..5 {
                let on = [0, 2, 4].contains(&i) && [0, 2, 4].contains(&j);
                assert_eq!(y.data()[i * 5 + j] != 0.0, on, "({i},{j})");
            }
        }
    }

    #[test]
    fn ones_box_filter_counts_neighbors() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let spec = ConvSpec::new(1, 1, 3).with_padding(1);
        let y = conv2d_forward(&x, &Tensor::ones(&[1, 1, 3, 3]), None, &spec, Exec::Sequential).unwrap();
        let expected = [4., 6., 6., 4., 6., 9., 9., 6., 6., 9., 9., 6., 4., 6., 6., 4.];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 7, 6], 1.0, &mut r);
        let spec = ConvSpec::new(4, 6, 3).with_stride(2).with_padding(1).with_groups(2);
        let w = Tensor::zeros(&spec.weight_shape());
        let y = conv2d_forward(&x, &w, Some(&Tensor::zeros(&[6])), &spec, Exec::Sequential).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_oracle_across_configs() {
        let mut r = rng();
        let configs = [
            ConvSpec::new(3, 5, 3).with_padding(1),
            ConvSpec::new(4, 4, 3).with_groups(4).with_padding(1),
            ConvSpec::new(2, 3, 3).with_dilation(3).with_padding(3),
            ConvSpec::new(3, 4, 4).with_stride(4),
            ConvSpec::new(4, 6, 3).with_stride(2).with_padding(2).with_dilation(2).with_groups(2),
            ConvSpec::new(2, 2, 1),
        ];
        for spec in configs {
            let x = Tensor::randn(&[2, spec.in_channels, 9, 8], 1.0, &mut r);
            let w = Tensor::randn(&spec.weight_shape(), 1.0, &mut r);
            let b = Tensor::randn(&[spec.out_channels], 1.0, &mut r);
            let fast = conv2d_forward(&x, &w, Some(&b), &spec, Exec::Sequential).unwrap();
            let slow = conv_oracle(&x, &w, Some(&b), &spec);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{spec:?}");
            }
            let par = conv2d_forward(&x, &w, Some(&b), &spec, Exec::Parallel).unwrap();
            assert!(par.bit_eq(&fast));
        }
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut r = rng();
        let configs = [
            ConvSpec::same(4, 6, 3, 1),
            ConvSpec::same(8, 8, 3, 5),
            ConvSpec::new(3, 8, 4).with_stride(2).with_padding(1),
            ConvSpec::new(3, 8, 4).with_stride(4),
            ConvSpec::new(16, 8, 1),
            ConvSpec::same(8, 8, 3, 2).with_groups(2),
        ];
        for spec in configs {
            assert!(use_gemm(&spec), "{spec:?}");
            let x = Tensor::randn(&[2, spec.in_channels, 9, 11], 1.0, &mut r);
            let w = Tensor::randn(&spec.weight_shape(), 1.0, &mut r);
            let b = Tensor::randn(&[spec.out_channels], 1.0, &mut r);
            let close = |a: &Tensor, e: &Tensor| {
                assert_eq!(a.shape(), e.shape());
                for (u, v) in a.data().iter().zip(e.data()) {
                    assert!((u - v).abs() < 1e-10, "{spec:?}");
                }
            };
            let y = conv2d_forward(&x, &w, Some(&b), &spec, Exec::Sequential).unwrap();
            close(&y, &direct_forward(&x, &w, Some(&b), &spec, Exec::Sequential).unwrap());
            close(&y, &conv_oracle(&x, &w, Some(&b), &spec));
            let g = Tensor::randn(y.shape(), 1.0, &mut r);
            let dims = x.dims4().unwrap();
            let dx = conv2d_backward_input(&g, &w, &spec, dims, Exec::Sequential).unwrap();
            close(&dx, &direct_backward_input(&g, &w, &spec, dims, Exec::Sequential).unwrap());
            let dw = conv2d_backward_weight(&g, &x, &spec, Exec::Sequential).unwrap();
            close(&dw, &direct_backward_weight(&g, &x, &spec, Exec::Sequential).unwrap());
            assert!(conv2d_backward_input(&g, &w, &spec, dims, Exec::Parallel).unwrap().bit_eq(&dx));
            assert!(conv2d_backward_weight(&g, &x, &spec, Exec::Parallel).unwrap().bit_eq(&dw));
        }
    }

    #[test]
    fn output_dims_formula() {
        let spec = ConvSpec::new(1, 1, 3).with_dilation(12).with_padding(12);
        assert_eq!(spec.effective_kernel(), 25);
        assert_eq!(spec.output_dims(8, 8).unwrap(), (8, 8));
        let strided = ConvSpec::new(1, 1, 3).with_stride(2).with_padding(1);
        assert_eq!(strided.output_dims(7, 8).unwrap(), (4, 4));
        assert!(ConvSpec::new(1, 1, 5).output_dims(3, 3).is_err());
    }

    #[test]
    fn rejects_bad_specs_and_inputs() {
        let spec = ConvSpec::new(3, 4, 3).with_groups(2);
        assert!(spec.validate().is_err());
        let ok = ConvSpec::new(2, 2, 3).with_padding(1);
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&ok.weight_shape()), None, &ok, Exec::Sequential).is_err());
        let mut bad = Tensor::zeros(&[1, 2, 4, 4]);
        bad.data_mut()[0] = f64::NAN;
        let err = conv2d_forward(&bad, &Tensor::zeros(&ok.weight_shape()), None, &ok, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
