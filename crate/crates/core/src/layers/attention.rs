//! Global multi-head scaled dot-product attention over a flattened token
//! sequence. The fused input holds `[q | k | v]` along the last axis.

use crate::error::{config_err, Result};
use crate::exec::{dot, Exec};
use crate::tensor::Tensor;

/// Per-(batch, head) softmax matrices, saved by the forward for the backward.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub probs: Vec<Vec<f64>>,
}

fn dims(qkv: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let &[b, n, three_d] = qkv.shape() else {
        return Err(config_err(format!("attention expects [B, N, 3D], got {:?}", qkv.shape())));
    };
    if three_d % 3 != 0 {
        return Err(config_err("fused qkv width must be a multiple of 3"));
    }
    let d = three_d / 3;
    if heads == 0 || d % heads != 0 {
        return Err(config_err(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    Ok((b, n, d, d / heads))
}

/// Returns the `[B, N, D]` output and the softmax cache.
pub fn attention_forward(qkv: &Tensor, heads: usize, exec: Exec) -> Result<(Tensor, AttentionCache)> {
    let (b, n, d, hd) = dims(qkv, heads)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let src = qkv.data();
    let per_head = exec.map(b * heads, |job| {
        let bi = job / heads;
        let h = job % heads;
        let row = |t: usize, part: usize| &src[(bi * n + t) * 3 * d + part * d + h * hd..][..hd];
        let mut probs = vec![0.0; n * n];
        for i in 0..n {
            let q = row(i, 0);
            let p = &mut probs[i * n..(i + 1) * n];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = dot(q, row(j, 1)) * scale;
            }
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - m).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
        }
        let mut out = vec![0.0; n * hd];
        for i in 0..n {
            let o = &mut out[i * hd..(i + 1) * hd];
            for j in 0..n {
                crate::exec::axpy(probs[i * n + j], row(j, 2), o);
            }
        }
        (probs, out)
    });
    let mut out = vec![0.0; b * n * d];
    let mut probs = Vec::with_capacity(b * heads);
    for (job, (p, o)) in per_head.into_iter().enumerate() {
        let bi = job / heads;
        let h = job % heads;
        for i in 0..n {
            out[(bi * n + i) * d + h * hd..][..hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
        }
        probs.push(p);
    }
    Ok((Tensor::new(vec![b, n, d], out)?, AttentionCache { probs }))
}

/// Gradient with respect to the fused `qkv` input.
pub fn attention_backward(
    grad_out: &Tensor,
    qkv: &Tensor,
    heads: usize,
    cache: &AttentionCache,
    exec: Exec,
) -> Result<Tensor> {
    let (b, n, d, hd) = dims(qkv, heads)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let src = qkv.data();
    let gsrc = grad_out.data();
    let per_head = exec.map(b * heads, |job| {
        let bi = job / heads;
        let h = job % heads;
        let row = |t: usize, part: usize| &src[(bi * n + t) * 3 * d + part * d + h * hd..][..hd];
        let grow = |t: usize| &gsrc[(bi * n + t) * d + h * hd..][..hd];
        let p = &cache.probs[job];
        let mut dq = vec![0.0; n * hd];
        let mut dk = vec![0.0; n * hd];
        let mut dv = vec![0.0; n * hd];
        let mut ds = vec![0.0; n];
        for i in 0..n {
            let go = grow(i);
            let pi = &p[i * n..(i + 1) * n];
            let mut inner = 0.0;
            for j in 0..n {
                let dp = dot(go, row(j, 2));
                ds[j] = dp;
                inner += dp * pi[j];
                crate::exec::axpy(pi[j], go, &mut dv[j * hd..(j + 1) * hd]);
            }
            for j in 0..n {
                let g = pi[j] * (ds[j] - inner) * scale;
                crate::exec::axpy(g, row(j, 1), &mut dq[i * hd..(i + 1) * hd]);
                crate::exec::axpy(g, row(i, 0), &mut dk[j * hd..(j + 1) * hd]);
            }
        }
        (dq, dk, dv)
    });
    let mut dqkv = vec![0.0; qkv.len()];
    for (job, (dq, dk, dv)) in per_head.into_iter().enumerate() {
        let bi = job / heads;
        let h = job % heads;
        for t in 0..n {
            let base = (bi * n + t) * 3 * d + h * hd;
            dqkv[base..][..hd].copy_from_slice(&dq[t * hd..(t + 1) * hd]);
            dqkv[base + d..][..hd].copy_from_slice(&dk[t * hd..(t + 1) * hd]);
            dqkv[base + 2 * d..][..hd].copy_from_slice(&dv[t * hd..(t + 1) * hd]);
        }
    }
    Tensor::new(qkv.shape().to_vec(), dqkv)
}
