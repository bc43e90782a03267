//! Affine map over the last axis: `y = x·Wᵀ + b` with `W` stored `[out, in]`.

use crate::error::{config_err, Result};
use crate::exec::{axpy, dot, Exec};
use crate::tensor::Tensor;

fn rows_of(x: &Tensor, in_features: usize) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d == in_features => Ok(x.len() / in_features),
        other => Err(config_err(format!(
            "linear expects last dim {in_features}, got {other:?}"
        ))),
    }
}

pub fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, exec: Exec) -> Result<Tensor> {
    let &[out_f, in_f] = w.shape() else {
        return Err(config_err(format!("linear weight must be rank 2, got {:?}", w.shape())));
    };
    let rows = rows_of(x, in_f)?;
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(config_err(format!("linear bias shape {:?}", b.shape())));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; rows * out_f];
    exec.for_each_chunk(&mut out, out_f, |m, dst| {
        let xr = &xd[m * in_f..][..in_f];
        for (o, y) in dst.iter_mut().enumerate() {
            *y = dot(xr, &wd[o * in_f..][..in_f]) + bias.map_or(0.0, |b| b.data()[o]);
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

pub fn linear_backward_input(grad_out: &Tensor, w: &Tensor, in_shape: &[usize], exec: Exec) -> Result<Tensor> {
    let &[out_f, in_f] = w.shape() else {
        return Err(config_err("linear weight must be rank 2"));
    };
    let gd = grad_out.data();
    let wd = w.data();
    let mut dx = vec![0.0; gd.len() / out_f * in_f];
    exec.for_each_chunk(&mut dx, in_f, |m, dst| {
        let gr = &gd[m * out_f..][..out_f];
        for (o, &g) in gr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &wd[o * in_f..][..in_f], dst);
            }
        }
    });
    Tensor::new(in_shape.to_vec(), dx)
}

pub fn linear_backward_weight(grad_out: &Tensor, x: &Tensor, out_f: usize, exec: Exec) -> Result<Tensor> {
    let in_f = *x.shape().last().ok_or_else(|| config_err("scalar input to linear"))?;
    let rows = x.len() / in_f;
    let gd = grad_out.data();
    let xd = x.data();
    let mut dw = vec![0.0; out_f * in_f];
    exec.for_each_chunk(&mut dw, in_f, |o, dst| {
        for m in 0..rows {
            let g = gd[m * out_f + o];
            if g != 0.0 {
                axpy(g, &xd[m * in_f..][..in_f], dst);
            }
        }
    });
    Tensor::new(vec![out_f, in_f], dw)
}

pub fn linear_backward_bias(grad_out: &Tensor, out_f: usize) -> Result<Tensor> {
    let mut db = vec![0.0; out_f];
    for row in grad_out.data().chunks_exact(out_f) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Tensor::new(vec![out_f], db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_affine_map() {
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![10., 0.]).unwrap();
        let y = linear_forward(&x, &w, Some(&b), Exec::Sequential).unwrap();
        assert_eq!(y.data(), &[8., 3., 8., 7.5]);
    }

    #[test]
    fn zero_weight_gradient_is_outer_product() {
        // d(sum(xWᵀ))/dW[o, i] = Σ_m x[m, i]
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., -1., 0.5, 2.]).unwrap();
        let g = Tensor::ones(&[2, 4]);
        let dw = linear_backward_weight(&g, &x, 4, Exec::Sequential).unwrap();
        for o in 0..4 {
            assert_eq!(&dw.data()[o * 3..o * 3 + 3], &[0., 2.5, 5.]);
        }
        let w = Tensor::zeros(&[4, 3]);
        let dx = linear_backward_input(&g, &w, &[2, 3], Exec::Sequential).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_dim_mismatch_errors() {
        let x = Tensor::zeros(&[2, 5]);
        assert!(linear_forward(&x, &Tensor::zeros(&[3, 4]), None, Exec::Sequential).is_err());
    }
}
