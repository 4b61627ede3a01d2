//! Gate-weighted aggregation of stacked factor-module outputs.
//!
//! A block's factor-module outputs are stacked along a trailing axis into
//! `M[..., K]` and contracted against the selection vector `S[K]`:
//! `out[...] = Σ_i S[i] · M[..., i]`. With a leading batch axis the
//! selection is per sample, `S[N, K]` against `M[N, ..., K]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of independent selection rows and the per-row slab length.
fn layout<T: Scalar>(m: &Tensor<T>, s: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let ms = m.shape();
    let k = *ms.last().unwrap();
    if ms.len() < 2 {
        return Err(shape_err!("mode-4 product needs a stacked tensor, got {:?}", ms));
    }
    match s.shape() {
        &[sk] if sk == k => Ok((1, m.len() / k, k)),
        &[n, sk] if sk == k && ms[0] == n && ms.len() >= 3 => Ok((n, m.len() / (n * k), k)),
        other => Err(shape_err!("selection {:?} incompatible with stacked tensor {:?}", other, ms)),
    }
}

fn out_shape(m: &Tensor<impl Scalar>) -> Vec<usize> {
    m.shape()[..m.rank() - 1].to_vec()
}

pub fn mode4_product<T: Scalar>(m: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, slab, k) = layout(m, s)?;
    let mut out = vec![T::zero(); rows * slab];
    for r in 0..rows {
        let gates = &s.data()[r * k..(r + 1) * k];
        let src = &m.data()[r * slab * k..(r + 1) * slab * k];
        for (o, fibre) in out[r * slab..(r + 1) * slab].iter_mut().zip(src.chunks_exact(k)) {
            *o = fibre.iter().zip(gates).map(|(&a, &g)| a * g).sum();
        }
    }
    Tensor::new(&out_shape(m), out)
}

/// Returns `(dm, ds)`.
pub fn mode4_product_backward<T: Scalar>(m: &Tensor<T>, s: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, slab, k) = layout(m, s)?;
    if dy.shape() != out_shape(m).as_slice() {
        return Err(shape_err!("mode-4 upstream gradient {:?} mismatches {:?}", dy.shape(), out_shape(m)));
    }
    let mut dm = vec![T::zero(); m.len()];
    let mut ds = vec![T::zero(); s.len()];
    for r in 0..rows {
        let gates = &s.data()[r * k..(r + 1) * k];
        let dgates = &mut ds[r * k..(r + 1) * k];
        let src = &m.data()[r * slab * k..(r + 1) * slab * k];
        let dsrc = &mut dm[r * slab * k..(r + 1) * slab * k];
        let g_out = &dy.data()[r * slab..(r + 1) * slab];
        for ((&g, fibre), dfibre) in g_out.iter().zip(src.chunks_exact(k)).zip(dsrc.chunks_exact_mut(k)) {
            for i in 0..k {
                dfibre[i] = g * gates[i];
                dgates[i] += g * fibre[i];
            }
        }
    }
    Ok((Tensor::new(m.shape(), dm)?, Tensor::new(s.shape(), ds)?))
}

/// Stack equally-shaped tensors along a new trailing axis.
pub fn stack_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("stack_last of nothing"))?;
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(shape_err!("stack_last: parts differ in shape"));
    }
    let k = parts.len();
    let mut out = vec![T::zero(); first.len() * k];
    for (i, p) in parts.iter().enumerate() {
        for (j, &v) in p.data().iter().enumerate() {
            out[j * k + i] = v;
        }
    }
    let mut shape = first.shape().to_vec();
    shape.push(k);
    Tensor::new(&shape, out)
}

/// Inverse of [`stack_last`].
pub fn unstack_last<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if t.rank() < 2 {
        return Err(shape_err!("unstack_last needs rank ≥ 2"));
    }
    let k = *t.shape().last().unwrap();
    let inner = &t.shape()[..t.rank() - 1];
    (0..k)
        .map(|i| Tensor::new(inner, t.data().iter().skip(i).step_by(k).copied().collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, random_tensor};

    #[test]
    fn weighted_sum_of_slices() {
        let m = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let s = Tensor::from_f64(&[2], &[0.5, 1.0]).unwrap();
        assert_eq!(mode4_product(&m, &s).unwrap().data(), &[2.5]);
    }

    #[test]
    fn one_hot_selects_slice() {
        let m = random_tensor(&[2, 2, 3, 4], 1);
        let slices = unstack_last(&m).unwrap();
        for i in 0..4 {
            let mut s = Tensor::zeros(&[4]).unwrap();
            s.data_mut()[i] = 1.0;
            assert_eq!(mode4_product(&m, &s).unwrap(), slices[i]);
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let m = random_tensor(&[2, 2, 3, 4], 2);
        let s = random_tensor(&[4], 3);
        let mut expect = Tensor::zeros(&[2, 2, 3]).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..4 {
                        acc += s.data()[i] * m.at(&[h, w, c, i]);
                    }
                    expect.set(&[h, w, c], acc);
                }
            }
        }
        assert_close(&mode4_product(&m, &s).unwrap(), &expect, 1e-12);
    }

    #[test]
    fn batched_rows_use_their_own_gates() {
        let m = random_tensor(&[3, 2, 2, 2, 4], 4);
        let s = random_tensor(&[3, 4], 5);
        let batched = mode4_product(&m, &s).unwrap();
        let inner = 2 * 2 * 2 * 4;
        for n in 0..3 {
            let mn = Tensor::new(&[2, 2, 2, 4], m.data()[n * inner..(n + 1) * inner].to_vec()).unwrap();
            let sn = Tensor::new(&[4], s.data()[n * 4..(n + 1) * 4].to_vec()).unwrap();
            let single = mode4_product(&mn, &sn).unwrap();
            assert_eq!(&batched.data()[n * 8..(n + 1) * 8], single.data());
        }
    }

    #[test]
    fn extent_mismatch() {
        let m = Tensor::<f64>::zeros(&[2, 2, 3, 4]).unwrap();
        assert!(mode4_product(&m, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn stack_roundtrip() {
        let a = random_tensor(&[2, 3], 6);
        let b = random_tensor(&[2, 3], 7);
        let s = stack_last(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 3, 2]);
        assert_eq!(unstack_last(&s).unwrap(), alloc::vec![a, b]);
    }
}
