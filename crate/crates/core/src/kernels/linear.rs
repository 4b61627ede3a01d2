use alloc::vec;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        (&[n, d], &[wd, e]) if d == wd => Ok((n, d, e)),
        (xs, ws) => Err(shape_err!("linear: input {:?} incompatible with weight {:?}", xs, ws)),
    }
}

/// Affine map `x[N,D] · w[D,E] + b[E]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d, e) = dims(x, w)?;
    let mut out = vec![T::zero(); n * e];
    if let Some(b) = b {
        if b.shape() != [e] {
            return Err(shape_err!("linear: bias {:?} does not match output width {}", b.shape(), e));
        }
        for row in out.chunks_exact_mut(e) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nn(n, d, e, x.data(), w.data(), &mut out);
    Tensor::new(&[n, e], out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d, e) = dims(x, w)?;
    if dy.shape() != [n, e] {
        return Err(shape_err!("linear: upstream gradient {:?} expected [{}, {}]", dy.shape(), n, e));
    }
    let mut dx = vec![T::zero(); n * d];
    gemm_nt(n, e, d, dy.data(), w.data(), &mut dx);
    let mut dw = vec![T::zero(); d * e];
    gemm_tn(d, n, e, x.data(), dy.data(), &mut dw);
    let mut db = vec![T::zero(); e];
    for row in dy.data().chunks_exact(e) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok((Tensor::new(&[n, d], dx)?, Tensor::new(&[d, e], dw)?, Tensor::new(&[e], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, random_tensor};

    #[test]
    fn identity_weight_zero_bias() {
        let x = random_tensor(&[3, 4], 1);
        let mut w = Tensor::<f64>::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            w.set(&[i, i], 1.0);
        }
        let b = Tensor::zeros(&[4]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap(), x);
    }

    #[test]
    fn dot_plus_bias() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let w = Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let b = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let x = random_tensor(&[5, 7], 2);
        let w = random_tensor(&[7, 3], 3);
        let b = random_tensor(&[3], 4);
        let mut expect = Tensor::zeros(&[5, 3]).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = b.data()[j];
                for k in 0..7 {
                    acc += x.at(&[i, k]) * w.at(&[k, j]);
                }
                expect.set(&[i, j], acc);
            }
        }
        assert_close(&linear(&x, &w, Some(&b)).unwrap(), &expect, 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let w = Tensor::zeros(&[4, 2]).unwrap();
        assert!(linear(&x, &w, None).is_err());
    }
}
