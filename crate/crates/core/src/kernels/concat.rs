use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Concatenate `[N, D_i]` parts along the last axis, preserving order.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
    if first.rank() != 2 {
        return Err(shape_err!("concat expects [N, D] parts, got {:?}", first.shape()));
    }
    let n = first.shape()[0];
    for p in parts {
        if p.rank() != 2 || p.shape()[0] != n {
            return Err(shape_err!("concat: part {:?} does not share leading extent {}", p.shape(), n));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total);
    for row in 0..n {
        for p in parts {
            let d = p.shape()[1];
            out.extend_from_slice(&p.data()[row * d..(row + 1) * d]);
        }
    }
    Tensor::new(&[n, total], out)
}

/// Split `[N, ΣD_i]` back into parts of the given widths.
pub fn split_last<T: Scalar>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if t.rank() != 2 || t.shape()[1] != total {
        return Err(shape_err!("split {:?} into widths summing to {}", t.shape(), total));
    }
    let n = t.shape()[0];
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    for row in t.data().chunks_exact(total) {
        let mut at = 0;
        for (p, &d) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&row[at..at + d]);
            at += d;
        }
    }
    parts.into_iter().zip(widths).map(|(p, &d)| Tensor::new(&[n, d], p)).collect()
}
