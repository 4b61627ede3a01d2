//! Finite-difference suites for the kernels and for a whole network.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{check_piecewise, finite_diff_check_many, FdConfig, FdReport, Tape, Var};
use crate::error::Result;
use crate::kernels::{ConvSpec, Phase, RunningStats};
use crate::model::{Gates, Mlfn, MlfnConfig, ParamId};
use crate::tensor::Tensor;

/// Step, floor and bound for single-kernel checks.
pub const KERNEL_FD: FdConfig = FdConfig { step: 1e-5, max_coords_per_tensor: None, floor: 1e-8, seed: 0, extrapolate: false };
pub const KERNEL_TOLERANCE: f64 = 1e-6;

/// Step, floor and bound for whole-network checks.
///
/// Small-batch normalisation gives the loss sharp curvature, so the plain
/// central difference at this step carries truncation error near the bound;
/// the extrapolated estimate removes the `h²` term. Exactly-zero gradients
/// (the shift of a batch-norm whose output every consumer re-normalises)
/// come back as rounding noise of a few `ulp(loss) / step`, up to about
/// 2e-11; the floor turns that into a relative error near 2e-6, so
/// coordinates below it are held to an absolute error of 1e-10.
pub const MODEL_FD: FdConfig = FdConfig { step: 1e-4, max_coords_per_tensor: None, floor: 1e-5, seed: 0, extrapolate: true };
pub const MODEL_TOLERANCE: f64 = 1e-5;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Named report per differentiable kernel; every input of each kernel is
/// checked through a random linear probe of its output.
pub fn kernel_suite(cfg: &FdConfig) -> Result<Vec<(&'static str, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut probe_check = |name: &'static str,
                           inputs: Vec<Tensor<f64>>,
                           out_shape: &[usize],
                           rng: &mut ChaCha8Rng,
                           f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let probe = normal(out_shape, rng)?;
        let report = finite_diff_check_many(
            |t, v| {
                let y = f(t, v)?;
                t.dot(y, probe.clone())
            },
            &inputs,
            cfg,
        )?;
        out.push((name, report));
        Ok(())
    };

    let spec = ConvSpec::new(2, 3, 3, 2, 1);
    let conv_in = vec_of(&mut rng, &[&[2, 2, 5, 4], &spec.weight_shape(), &[3]])?;
    probe_check("conv2d", conv_in, &[2, 3, 3, 2], &mut rng, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), spec))?;

    let lin_in = vec_of(&mut rng, &[&[3, 4], &[4, 5], &[5]])?;
    probe_check("linear", lin_in, &[3, 5], &mut rng, &|t, v| t.linear(v[0], v[1], Some(v[2])))?;

    let running = RunningStats { mean: alloc::vec![0.3, -0.2, 0.1], var: alloc::vec![1.5, 0.7, 2.0] };
    for (name, phase) in [("batch_norm_train", Phase::Train), ("batch_norm_eval", Phase::Eval)] {
        let bn_in = vec_of(&mut rng, &[&[4, 3, 2, 2], &[3], &[3]])?;
        let running = running.clone();
        probe_check(name, bn_in, &[4, 3, 2, 2], &mut rng, &move |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], &running, phase, 1e-5)?.0)
        })?;
    }

    let act_in = vec_of(&mut rng, &[&[3, 7]])?;
    probe_check("sigmoid", act_in.clone(), &[3, 7], &mut rng, &|t, v| t.sigmoid(v[0]))?;
    probe_check("relu", act_in, &[3, 7], &mut rng, &|t, v| t.relu(v[0]))?;

    let gap_in = vec_of(&mut rng, &[&[2, 3, 4, 5]])?;
    probe_check("global_avg_pool", gap_in, &[2, 3], &mut rng, &|t, v| t.global_avg_pool(v[0]))?;

    let m4_in = vec_of(&mut rng, &[&[2, 3, 2, 2, 4], &[2, 4]])?;
    probe_check("mode4_product", m4_in, &[2, 3, 2, 2], &mut rng, &|t, v| t.mode4_product(v[0], v[1]))?;

    let cat_in = vec_of(&mut rng, &[&[2, 3], &[2, 5]])?;
    probe_check("concat", cat_in, &[2, 8], &mut rng, &|t, v| t.concat(v))?;

    let ar_in = vec_of(&mut rng, &[&[2, 3], &[2, 3]])?;
    probe_check("add_scale", ar_in, &[2, 3], &mut rng, &|t, v| {
        let s = t.add(v[0], v[1])?;
        t.scale(s, 0.5)
    })?;

    let logits = vec_of(&mut rng, &[&[4, 6]])?;
    let report = finite_diff_check_many(|t, v| t.cross_entropy(v[0], &[0, 3, 5, 3]), &logits, cfg)?;
    out.push(("softmax_cross_entropy", report));
    Ok(out)
}

fn vec_of(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Result<Vec<Tensor<f64>>> {
    shapes.iter().map(|s| normal(s, rng)).collect()
}

/// Cross-entropy of a freshly initialised network on a random batch,
/// checked against central differences in every trainable scalar (or a
/// sample of them, per `cfg`). Runs in train mode, so the batch needs at
/// least two images.
pub fn model_gradient_check(config: MlfnConfig, seed: u64, batch: usize, cfg: &FdConfig) -> Result<FdReport> {
    let model: Mlfn<f64> = Mlfn::init(config, seed)?;
    let [c, h, w] = model.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = normal(&[batch, c, h, w], &mut rng)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % model.config().num_classes).collect();

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &bound, xv, Phase::Train, &Gates::Learned)?;
    let loss = tape.cross_entropy(out.logits, &labels)?;
    tape.backward(loss)?;
    let ids: Vec<ParamId> = model.params().trainable_ids().collect();
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad(bound.var(id))).collect();
    let mut values: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params().value(id).clone()).collect();

    let mut scratch = model.clone();
    check_piecewise(
        &mut values,
        &analytic,
        |vals| {
            for (&id, v) in ids.iter().zip(vals) {
                scratch.params_mut().value_mut(id).data_mut().copy_from_slice(v.data());
            }
            let mut tape = Tape::new();
            let bound = scratch.params().bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = scratch.forward(&mut tape, &bound, xv, Phase::Train, &Gates::Learned)?;
            let l = tape.cross_entropy(out.logits, &labels)?;
            Ok((tape.value(l).item()?, tape.kink_fingerprint()))
        },
        cfg,
    )
}
