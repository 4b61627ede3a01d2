//! Central finite-difference checks of reverse-mode gradients.
//!
//! Checks always run in `f64`. The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! coordinates whose true gradient is (numerically) zero from dividing by
//! rounding noise.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    /// Upper bound on coordinates checked per tensor; `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    pub floor: f64,
    pub seed: u64,
    /// Combine the differences at `step` and `step / 2` into a fourth-order
    /// estimate, `(4·D(h/2) − D(h)) / 3`.
    pub extrapolate: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-4, max_coords_per_tensor: None, floor: 1e-8, seed: 0, extrapolate: false }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose first difference straddled a kink.
    pub kink_retries: usize,
    /// Coordinates left unchecked because the retry straddled one too.
    pub kink_skips: usize,
}

impl FdReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            tensor: 0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            kink_retries: 0,
            kink_skips: 0,
        }
    }

    fn merge(&mut self, other: &FdReport) {
        let checked = self.coords_checked + other.coords_checked;
        let retries = self.kink_retries + other.kink_retries;
        let skips = self.kink_skips + other.kink_skips;
        if other.max_rel_err > self.max_rel_err || self.coords_checked == 0 {
            *self = other.clone();
        }
        self.coords_checked = checked;
        self.kink_retries = retries;
        self.kink_skips = skips;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check analytic gradients of `loss` with respect to a set of tensors.
///
/// `loss` is evaluated on the current contents of `values`; each checked
/// coordinate is perturbed by `±step` in place and restored afterwards.
pub fn check_tensors<L>(values: &mut [Tensor<f64>], analytic: &[Tensor<f64>], mut loss: L, cfg: &FdConfig) -> Result<FdReport>
where
    L: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    check_piecewise(values, analytic, |v| Ok((loss(v)?, 0)), cfg)
}

/// [`check_tensors`] for piecewise-smooth losses.
///
/// `loss` also returns a fingerprint of the smooth piece it was evaluated on
/// (see [`Tape::kink_fingerprint`]). A central difference whose endpoints
/// land on different pieces straddles a kink and says nothing about the
/// derivative; such coordinates are retried at a tenth of the step and
/// skipped (and counted) if the retry straddles as well.
pub fn check_piecewise<L>(values: &mut [Tensor<f64>], analytic: &[Tensor<f64>], mut loss: L, cfg: &FdConfig) -> Result<FdReport>
where
    L: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Contract(String::from("finite-difference step must be positive")));
    }
    if values.len() != analytic.len() {
        return Err(Error::Contract(alloc::format!("{} values but {} gradients", values.len(), analytic.len())));
    }
    let (first, piece) = loss(values)?;
    let (second, _) = loss(values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(alloc::format!("loss {} then {}", first, second)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FdReport::empty();
    for t in 0..values.len() {
        let n = values[t].len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut local = FdReport::empty();
        local.tensor = t;
        for &k in &coords {
            let mut numeric = None;
            for step in [cfg.step, cfg.step / 10.0] {
                let Some(d) = central(values, t, k, step, piece, &mut loss)? else {
                    local.kink_retries += 1;
                    continue;
                };
                if !cfg.extrapolate {
                    numeric = Some(d);
                    break;
                }
                if let Some(half) = central(values, t, k, step / 2.0, piece, &mut loss)? {
                    numeric = Some((4.0 * half - d) / 3.0);
                    break;
                }
                local.kink_retries += 1;
            }
            let Some(numeric) = numeric else {
                local.kink_skips += 1;
                continue;
            };
            let a = analytic[t].data()[k];
            let err = relative_error(a, numeric, cfg.floor);
            if err > local.max_rel_err || local.coords_checked == 0 {
                local = FdReport { max_rel_err: err, tensor: t, index: k, analytic: a, numeric, ..local };
            }
            local.coords_checked += 1;
        }
        report.merge(&local);
    }
    Ok(report)
}

/// Central difference in coordinate `k` of tensor `t`; `None` when either
/// endpoint leaves the smooth piece `piece`.
fn central<L>(values: &mut [Tensor<f64>], t: usize, k: usize, step: f64, piece: u64, loss: &mut L) -> Result<Option<f64>>
where
    L: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    let orig = values[t].data()[k];
    values[t].data_mut()[k] = orig + step;
    let plus = loss(values);
    values[t].data_mut()[k] = orig - step;
    let minus = loss(values);
    values[t].data_mut()[k] = orig;
    let ((plus, p_plus), (minus, p_minus)) = (plus?, minus?);
    if p_plus != piece || p_minus != piece {
        return Ok(None);
    }
    Ok(Some((plus - minus) / (2.0 * step)))
}

/// Check `f` (a scalar function built on a fresh tape) against its own
/// reverse-mode gradient with respect to a single input tensor.
pub fn finite_diff_check<F>(mut f: F, value: &Tensor<f64>, cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|t, v| f(t, v[0]), core::slice::from_ref(value), cfg)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(mut f: F, inputs: &[Tensor<f64>], cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
    let mut values = inputs.to_vec();
    check_piecewise(
        &mut values,
        &analytic,
        |vals| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
            let l = f(&mut tape, &vars)?;
            Ok((tape.value(l).item()?, tape.kink_fingerprint()))
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ConvSpec, Phase, RunningStats};
    use crate::testutil::random_tensor;

    fn square(t: &mut Tape<f64>, v: Var) -> Result<Var> {
        // x·x as a one-slice mode-4 product of [x] against x
        let m = t.stack_last(&[v])?;
        let y = t.mode4_product(m, v)?;
        t.sum(y)
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let l = square(&mut tape, v).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).data()[0], 6.0);
        let r = finite_diff_check(square, &x, &FdConfig::default()).unwrap();
        assert!((r.numeric - 6.0).abs() < 1e-7);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn sigmoid_of_double() {
        let x = Tensor::scalar(0.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let d = tape.add(v, v).unwrap();
        let s = tape.sigmoid(d).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).data()[0], 0.5);
        let r = finite_diff_check(
            |t, v| {
                let d = t.add(v, v)?;
                let s = t.sigmoid(d)?;
                t.sum(s)
            },
            &x,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        let mut calls = 0.0;
        let r = finite_diff_check(
            |t, v| {
                calls += 1.0;
                let s = t.scale(v, calls)?;
                t.sum(s)
            },
            &Tensor::scalar(1.0),
            &FdConfig::default(),
        );
        assert!(matches!(r, Err(Error::Determinism(_))));
    }

    #[test]
    fn kink_straddling_difference_is_retried() {
        // relu at 3e-5: a 1e-4 step straddles the kink, a 1e-5 step does not
        let x = Tensor::from_f64(&[2], &[3e-5, 1.0]).unwrap();
        let relu_sum = |t: &mut Tape<f64>, v: Var| {
            let r = t.relu(v)?;
            t.sum(r)
        };
        let r = finite_diff_check(relu_sum, &x, &FdConfig::default()).unwrap();
        assert_eq!(r.kink_retries, 1);
        assert_eq!(r.kink_skips, 0);
        assert_eq!(r.coords_checked, 2);
        assert!(r.max_rel_err < 1e-10);
        let at_kink = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = finite_diff_check(relu_sum, &at_kink, &FdConfig::default()).unwrap();
        assert_eq!((r.kink_skips, r.coords_checked), (1, 0));
    }

    fn per_kernel_cfg() -> FdConfig {
        FdConfig { step: 1e-5, ..FdConfig::default() }
    }

    #[test]
    fn conv_gradient() {
        let spec = ConvSpec::new(2, 3, 3, 2, 1);
        let w = random_tensor(&spec.weight_shape(), 2);
        let probe = random_tensor(&[2, 3, 3, 2], 3);
        let x = random_tensor(&[2, 2, 5, 4], 1);
        let r = finite_diff_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let y = t.conv2d(v, wv, None, spec)?;
                t.dot(y, probe.clone())
            },
            &x,
            &per_kernel_cfg(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{:?}", r);
    }

    #[test]
    fn batch_norm_gradient() {
        let x = random_tensor(&[4, 3, 2, 2], 4);
        let probe = random_tensor(&[4, 3, 2, 2], 5);
        let running = RunningStats::new(3);
        let r = finite_diff_check(
            |t, v| {
                let g = t.constant(Tensor::from_f64(&[3], &[1.0, 0.5, 2.0])?);
                let b = t.constant(Tensor::from_f64(&[3], &[0.1, -0.2, 0.3])?);
                let (y, _) = t.batch_norm(v, g, b, &running, Phase::Train, 1e-5)?;
                t.dot(y, probe.clone())
            },
            &x,
            &per_kernel_cfg(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{:?}", r);
    }
}
