use alloc::vec;

use crate::error::{shape_err, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("global_avg_pool expects NCHW, got {:?}", s));
    }
    let spatial = s[2] * s[3];
    let inv = T::one() / cast::<T>(spatial as f64);
    let data = x.data().chunks_exact(spatial).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[s[0], s[1]], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || dy.shape() != [input_shape[0], input_shape[1]] {
        return Err(shape_err!("global_avg_pool backward: {:?} vs {:?}", input_shape, dy.shape()));
    }
    let spatial = input_shape[2] * input_shape[3];
    let inv = T::one() / cast::<T>(spatial as f64);
    let mut out = vec![T::zero(); dy.len() * spatial];
    for (plane, &g) in out.chunks_exact_mut(spatial).zip(dy.data()) {
        plane.fill(g * inv);
    }
    Tensor::new(input_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, random_tensor};

    #[test]
    fn constant_and_small_cases() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.75).unwrap();
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn matches_loop_oracle() {
        let x = random_tensor(&[2, 3, 4, 5], 9);
        let mut expect = Tensor::zeros(&[2, 3]).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..5 {
                        acc += x.at(&[n, c, i, j]);
                    }
                }
                expect.set(&[n, c], acc / 20.0);
            }
        }
        assert_close(&global_avg_pool(&x).unwrap(), &expect, 1e-12);
    }
}
