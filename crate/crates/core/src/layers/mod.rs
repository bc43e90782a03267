//! Tensor kernels with forward and backward passes.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod resize;
