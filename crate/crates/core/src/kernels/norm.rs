//! Batch normalisation over the channel axis of `[N, C, ...]` tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Exponential-moving-average statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m: T = cast(momentum);
        let rest = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = m * *r + rest * b;
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Saved values needed to differentiate a train-mode normalisation.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn layout(x: &Tensor<impl Scalar>, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(shape_err!("batch_norm expects [N, {}, ...], got {:?}", channels, s));
    }
    Ok((s[0], s[2..].iter().product()))
}

/// Train-mode normalisation with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>, BatchStats<T>)> {
    let c = gamma.len();
    let (n, spatial) = layout(x, c)?;
    if beta.len() != c {
        return Err(shape_err!("batch_norm beta has {} entries, expected {}", beta.len(), c));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(alloc::format!(
            "train-mode batch norm needs at least 2 samples, got {}",
            n
        )));
    }
    let count = n * spatial;
    let inv_count = T::one() / cast::<T>(count as f64);
    let eps: T = cast(eps);
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..n).map(move |i| (i * c + ch) * spatial);
        let mut sum = T::zero();
        for o in planes() {
            sum += xd[o..o + spatial].iter().copied().sum::<T>();
        }
        let mu = sum * inv_count;
        let mut sq = T::zero();
        for o in planes() {
            for &v in &xd[o..o + spatial] {
                let d = v - mu;
                sq += d * d;
            }
        }
        let var = sq * inv_count;
        let is = T::one() / (var + eps).sqrt();
        for o in planes() {
            for k in o..o + spatial {
                let h = (xd[k] - mu) * is;
                xhat[k] = h;
                y[k] = gamma[ch] * h + beta[ch];
            }
        }
        inv_std[ch] = is;
        mean[ch] = mu;
        var_unbiased[ch] = sq / cast::<T>((count - 1).max(1) as f64);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnCache { xhat: Tensor::new(x.shape(), xhat)?, inv_std },
        BatchStats { mean, var_unbiased },
    ))
}

/// Eval-mode normalisation with running statistics. Also returns the
/// normalised input, which is what the affine parameters' gradients need.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = gamma.len();
    let (n, spatial) = layout(x, c)?;
    if beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(shape_err!("batch_norm eval parameters do not match {} channels", c));
    }
    let eps: T = cast(eps);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * spatial;
            for k in o..o + spatial {
                let h = (xd[k] - stats.mean[ch]) * inv_std[ch];
                xhat[k] = h;
                y[k] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape(), y)?, BnCache { xhat: Tensor::new(x.shape(), xhat)?, inv_std }))
}

/// Gradients of train-mode normalisation: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gamma.len();
    let (n, spatial) = layout(dy, c)?;
    let count = cast::<T>((n * spatial) as f64);
    let (dgamma, dbeta) = affine_param_grads(dy, &cache.xhat, c, n, spatial);
    let dyd = dy.data();
    let xh = cache.xhat.data();
    let mut dx = vec![T::zero(); dyd.len()];
    for ch in 0..c {
        // dxhat = dy · gamma; sums reuse dbeta/dgamma
        let sum_dxhat = dbeta[ch] * gamma[ch];
        let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
        let scale = cache.inv_std[ch] / count;
        for i in 0..n {
            let o = (i * c + ch) * spatial;
            for k in o..o + spatial {
                dx[k] = scale * (count * dyd[k] * gamma[ch] - sum_dxhat - xh[k] * sum_dxhat_xhat);
            }
        }
    }
    Ok((Tensor::new(dy.shape(), dx)?, dgamma, dbeta))
}

/// Gradients of eval-mode normalisation, a per-channel affine map.
pub fn batch_norm_eval_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gamma.len();
    let (n, spatial) = layout(dy, c)?;
    let (dgamma, dbeta) = affine_param_grads(dy, &cache.xhat, c, n, spatial);
    let mut dx = dy.clone();
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * spatial;
            let s = gamma[ch] * cache.inv_std[ch];
            dx.data_mut()[o..o + spatial].iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn affine_param_grads<T: Scalar>(dy: &Tensor<T>, xhat: &Tensor<T>, c: usize, n: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let (dyd, xh) = (dy.data(), xhat.data());
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * spatial;
            for k in o..o + spatial {
                dgamma[ch] += dyd[k] * xh[k];
                dbeta[ch] += dyd[k];
            }
        }
    }
    (dgamma, dbeta)
}

/// Mode-switching entry point. In train mode the batch statistics are folded
/// into `state` with the given momentum.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &mut RunningStats<T>,
    phase: Phase,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    match phase {
        Phase::Train => {
            let (y, _, stats) = batch_norm_train(x, gamma, beta, eps)?;
            state.update(&stats, momentum);
            Ok(y)
        }
        Phase::Eval => Ok(batch_norm_eval(x, gamma, beta, state, eps)?.0),
    }
}
