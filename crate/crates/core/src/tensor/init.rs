use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::scalar::Scalar;

/// Uniform Xavier/Glorot initialization for a [rows, cols] weight matrix.
///
/// Values are drawn in f64 and then narrowed so that f32 and f64 models
/// built from the same seed hold the same numbers.
pub fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("xavier shape")
}

/// Embedding initialization: N(0, dim^{-1/2}).
pub fn normal_embedding<T: Scalar, R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Tensor<T> {
    let std = (dim as f64).powf(-0.5);
    let data: Vec<T> = (0..vocab * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(vec![vocab, dim], data).expect("embedding shape")
}
