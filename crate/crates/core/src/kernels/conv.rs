//! 2-D cross-correlation over NCHW tensors, lowered to im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Output spatial extents for an input of `(h, w)`.
    pub fn output_hw(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(shape_err!("degenerate conv spec {:?}", self));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err!("kernel {:?} larger than padded input {}x{}", self.kernel, h, w));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self, spec: &ConvSpec) -> usize {
        self.c * spec.kernel.0 * spec.kernel.1
    }
}

fn check(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, bias_len: Option<usize>, spec: &ConvSpec) -> Result<Geometry> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err!("conv2d input must be NCHW, got {:?}", xs));
    }
    if xs[1] != spec.in_channels {
        return Err(shape_err!("conv2d input has {} channels, spec expects {}", xs[1], spec.in_channels));
    }
    if w.shape() != spec.weight_shape() {
        return Err(shape_err!("conv2d weight {:?} does not match spec {:?}", w.shape(), spec.weight_shape()));
    }
    if let Some(b) = bias_len {
        if b != spec.out_channels {
            return Err(shape_err!("conv2d bias has {} entries, expected {}", b, spec.out_channels));
        }
    }
    let (oh, ow) = spec.output_hw((xs[2], xs[3]))?;
    Ok(Geometry { n: xs[0], c: xs[1], h: xs[2], w: xs[3], oh, ow })
}

/// Unfold one image `[C,H,W]` into columns `[C·kh·kw, oh·ow]`.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((c * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let out = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold columns back onto an image gradient, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, spec: &ConvSpec, img: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((c * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with optional bias: `x[N,C,H,W] ⋆ w[O,C,kh,kw] + b[O]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = check(x, w, b.map(|b| b.len()), spec)?;
    let p = g.oh * g.ow;
    let patch = g.patch(spec);
    let o = spec.out_channels;
    let mut out = vec![T::zero(); g.n * o * p];
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * p] };
    let img_len = g.c * g.h * g.w;
    for (img, dst) in x.data().chunks_exact(img_len).zip(out.chunks_exact_mut(o * p)) {
        if let Some(b) = b {
            for (row, &bv) in dst.chunks_exact_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        let cols_ref: &[T] = if spec.is_pointwise() {
            img
        } else {
            im2col(img, &g, spec, &mut cols);
            &cols
        };
        gemm_nn(o, patch, p, w.data(), cols_ref, dst);
    }
    Tensor::new(&[g.n, o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
/// Returns `(dx, dw, db)`; `db` is always computed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = check(x, w, None, spec)?;
    let p = g.oh * g.ow;
    let patch = g.patch(spec);
    let o = spec.out_channels;
    if dy.shape() != [g.n, o, g.oh, g.ow] {
        return Err(shape_err!("conv2d upstream gradient {:?} mismatches output", dy.shape()));
    }
    let img_len = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); o];
    let pointwise = spec.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * p] };
    let mut dcols = vec![T::zero(); patch * p];
    for ((img, dimg), dyn_) in x
        .data()
        .chunks_exact(img_len)
        .zip(dx.chunks_exact_mut(img_len))
        .zip(dy.data().chunks_exact(o * p))
    {
        for (dbo, row) in db.iter_mut().zip(dyn_.chunks_exact(p)) {
            *dbo += row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if pointwise {
            img
        } else {
            im2col(img, &g, spec, &mut cols);
            &cols
        };
        // dw[O, patch] += dy[O, P] · cols[patch, P]ᵀ
        gemm_nt(o, p, patch, dyn_, cols_ref, &mut dw);
        // dcols[patch, P] = w[O, patch]ᵀ · dy[O, P]
        if pointwise {
            gemm_tn(patch, o, p, w.data(), dyn_, dimg);
        } else {
            dcols.fill(T::zero());
            gemm_tn(patch, o, p, w.data(), dyn_, &mut dcols);
            col2im(&dcols, &g, spec, dimg);
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new(&[o], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, random_tensor};

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (oh, ow) = spec.output_hw((h, wd)).unwrap();
        let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]).unwrap();
        for ni in 0..n {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ki in 0..spec.kernel.0 {
                                for kj in 0..spec.kernel.1 {
                                    let iy = (oy * spec.stride.0 + ki) as isize - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kj) as isize - spec.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[o, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        out.set(&[ni, o, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let spec = ConvSpec::new(1, 1, 3, 1, 0);
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]).unwrap();
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let spec = ConvSpec::new(3, 3, 1, 1, 0);
        let x = random_tensor(&[2, 3, 4, 5], 11);
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        for (spec, seed) in [
            (ConvSpec::new(3, 4, 3, 1, 1), 1),
            (ConvSpec::new(3, 2, 3, 2, 1), 2),
            (ConvSpec::new(3, 5, 1, 2, 0), 3),
            (ConvSpec::new(3, 4, 1, 1, 0), 4),
            (
                ConvSpec { in_channels: 3, out_channels: 2, kernel: (2, 3), stride: (1, 2), padding: (0, 1) },
                5,
            ),
        ] {
            let x = random_tensor(&[2, 3, 5, 4], seed);
            let w = random_tensor(&spec.weight_shape(), seed + 100);
            let b = random_tensor(&[spec.out_channels], seed + 200);
            let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
            let slow = naive_conv(&x, &w, &b, &spec);
            assert_close(&fast, &slow, 1e-10);
        }
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, None, &ConvSpec::new(3, 1, 3, 1, 0)).is_err());
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(conv2d(&x, &w, None, &ConvSpec::new(3, 1, 3, 1, 0)).is_err());
    }

    #[test]
    fn backward_matches_naive_adjoint() {
        // <dy, conv(x)> is bilinear: check dx, dw via the adjoint identity on the naive oracle
        let spec = ConvSpec::new(2, 3, 3, 2, 1);
        let x = random_tensor(&[2, 2, 5, 4], 7);
        let w = random_tensor(&spec.weight_shape(), 8);
        let zero_b = Tensor::zeros(&[3]).unwrap();
        let y = naive_conv(&x, &w, &zero_b, &spec);
        let dy = random_tensor(y.shape(), 9);
        let (dx, dw, db) = conv2d_backward(&x, &w, &spec, &dy).unwrap();
        let inner = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let base = inner(&dy, &y);
        // linear in x and w separately: <dx, x> = <dy, y> = <dw, w>
        assert!((inner(&dx, &x) - base).abs() < 1e-10);
        assert!((inner(&dw, &w) - base).abs() < 1e-10);
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        for o in 0..3 {
            let mut expect = 0.0;
            for n in 0..2 {
                for i in 0..oh {
                    for j in 0..ow {
                        expect += dy.at(&[n, o, i, j]);
                    }
                }
            }
            assert!((db.data()[o] - expect).abs() < 1e-12);
        }
    }
}
