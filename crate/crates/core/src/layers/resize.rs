//! Bilinear resampling of `[B, C, H, W]` maps with half-pixel centers
//! (the `align_corners = false` convention) and edge clamping.

use crate::error::{config_err, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// `a + t·(b − a)`, clamped to the segment so the result never leaves `[min, max]`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

pub fn resize_bilinear_forward(x: &Tensor, out_h: usize, out_w: usize, exec: Exec) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(config_err("resize target must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; b * c * out_h * out_w];
    exec.for_each_chunk(&mut out, out_h * out_w, |plane, dst| {
        let src = &xd[plane * h * w..][..h * w];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..][..w];
            let r1 = &src[t.i1 * w..][..w];
            for (ox, s) in tx.iter().enumerate() {
                let top = lerp(r0[s.i0], r0[s.i1], s.frac);
                let bot = lerp(r1[s.i0], r1[s.i1], s.frac);
                dst[oy * out_w + ox] = lerp(top, bot, t.frac);
            }
        }
    });
    Tensor::new(vec![b, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(grad_out: &Tensor, in_dims: [usize; 4], exec: Exec) -> Result<Tensor> {
    let [_, _, h, w] = in_dims;
    let [_, _, out_h, out_w] = grad_out.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let gd = grad_out.data();
    let mut dx = vec![0.0; in_dims.iter().product()];
    exec.for_each_chunk(&mut dx, h * w, |plane, dst| {
        let g = &gd[plane * out_h * out_w..][..out_h * out_w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let (wy0, wy1) = (1.0 - t.frac, t.frac);
                let (wx0, wx1) = (1.0 - s.frac, s.frac);
                dst[t.i0 * w + s.i0] += v * wy0 * wx0;
                dst[t.i0 * w + s.i1] += v * wy0 * wx1;
                dst[t.i1 * w + s.i0] += v * wy1 * wx0;
                dst[t.i1 * w + s.i1] += v * wy1 * wx1;
            }
        }
    });
    Tensor::new(in_dims.to_vec(), dx)
}
