//! Optimisers, augmentation and the identity-classification training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kernels::Phase;
use crate::model::{Gates, Mlfn, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdNesterov { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd_nesterov() -> Self {
        OptimizerKind::SgdNesterov { momentum: 0.9 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::SgdNesterov { .. } => "sgd_nesterov",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` every `period` iterations.
    StepDecay { factor: f64, period: u64 },
}

impl Schedule {
    /// Rate at a 0-based iteration. Each drop is one multiplication of the
    /// previous rate, so logged rates show exact `factor` ratios.
    pub fn lr_at(&self, base: f64, iteration: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::StepDecay { factor, period } => {
                let mut lr = base;
                for _ in 0..iteration / period.max(1) {
                    lr *= factor;
                }
                lr
            }
        }
    }
}

/// Optimiser state. Moment buffers are indexed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, base_lr: f64, schedule: Schedule) -> Self {
        Self { kind, base_lr, schedule, weight_decay: 0.0, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Completed update count.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.base_lr, self.step)
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step;
        let ids: Vec<_> = params.trainable_ids().collect();
        self.first.resize(params.len(), None);
        self.second.resize(params.len(), None);
        let wd: T = cast(self.weight_decay);
        for id in ids {
            let (value, grad) = params.value_and_grad_mut(id);
            if value.shape() != grad.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", grad.shape(), value.shape())));
            }
            if self.weight_decay != 0.0 {
                for (g, &v) in grad.data_mut().iter_mut().zip(value.data()) {
                    *g += wd * v;
                }
            }
            let m = self.first[id.index()].get_or_insert_with(|| value.zeros_like());
            if m.shape() != value.shape() {
                return Err(Error::Shape(format!("moment {:?} for parameter {:?}", m.shape(), value.shape())));
            }
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[id.index()].get_or_insert_with(|| value.zeros_like());
                    let (b1, b2): (T, T) = (cast(beta1), cast(beta2));
                    let c1: T = cast(1.0 - beta1.powi(t as i32));
                    let c2: T = cast(1.0 - beta2.powi(t as i32));
                    let (lr, eps): (T, T) = (cast(lr), cast(eps));
                    let one = T::one();
                    for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = b1 * *mi + (one - b1) * g;
                        *vi = b2 * *vi + (one - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::SgdNesterov { momentum } => {
                    let (mu, lr): (T, T) = (cast(momentum), cast(lr));
                    for ((p, &g), b) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()) {
                        *b = mu * *b + g;
                        *p -= lr * (g + mu * *b);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }

    /// Named state tensors, for checkpoints: the step count and every
    /// allocated moment buffer.
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = alloc::vec![(String::from("optim.step"), Tensor::scalar(T::from_f64_lossy(self.step as f64)))];
        for (i, m) in self.first.iter().enumerate() {
            if let Some(m) = m {
                out.push((format!("optim.m.{}", params.entries()[i].name), m.clone()));
            }
        }
        for (i, v) in self.second.iter().enumerate() {
            if let Some(v) = v {
                out.push((format!("optim.v.{}", params.entries()[i].name), v.clone()));
            }
        }
        out
    }

    /// Inverse of [`Optimizer::state_tensors`].
    pub fn load_state(&mut self, params: &ParamStore<T>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        self.first = alloc::vec![None; params.len()];
        self.second = alloc::vec![None; params.len()];
        for (name, t) in tensors {
            if name == "optim.step" {
                self.step = t.item()?.as_f64() as u64;
                continue;
            }
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (&mut self.first, p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (&mut self.second, p)
            } else {
                continue;
            };
            let id = params.find(pname).ok_or_else(|| Error::Contract(format!("optimiser state for unknown {}", pname)))?;
            if params.value(id).shape() != t.shape() {
                return Err(Error::Shape(format!("optimiser state {} has shape {:?}", name, t.shape())));
            }
            slot[id.index()] = Some(t.clone());
        }
        Ok(())
    }
}

/// Mirror image `i` of an NCHW batch left to right, in place.
pub fn flip_horizontal<T: Scalar>(batch: &mut Tensor<T>, i: usize) {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let img = &mut batch.data_mut()[i * c * h * w..(i + 1) * c * h * w];
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Mirror each image independently with probability `p`; returns the
/// indices that were flipped.
pub fn augment_flip<T: Scalar, R: Rng>(batch: &mut Tensor<T>, p: f64, rng: &mut R) -> Vec<usize> {
    let n = batch.shape()[0];
    let mut flipped = Vec::new();
    for i in 0..n {
        if rng.gen_bool(p) {
            flip_horizontal(batch, i);
            flipped.push(i);
        }
    }
    flipped
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    /// Accuracy of the pre-update logits on this mini-batch.
    pub batch_acc: f64,
}

/// Forward, cross-entropy, backward, running-statistic update and one
/// optimiser step.
pub fn train_step<T: Scalar>(model: &mut Mlfn<T>, opt: &mut Optimizer<T>, x: &Tensor<T>, labels: &[usize]) -> Result<StepResult> {
    if labels.len() < 2 {
        return Err(Error::DegenerateBatch(format!("training batches need at least 2 images, got {}", labels.len())));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &bound, xv, Phase::Train, &Gates::Learned)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item()?.as_f64();
    let batch_acc = accuracy(&argmax_rows(tape.value(out.logits)), labels);
    model.params_mut().accumulate_grads(&tape, &bound)?;
    model.apply_bn_updates(&out.bn_updates);
    opt.step(model.params_mut())?;
    Ok(StepResult { loss: loss_value, batch_acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: u64,
    pub seed: u64,
    pub flip: bool,
    /// Full training-set accuracy is measured every `eval_every` iterations
    /// (0 disables it).
    pub eval_every: u64,
    /// Stop once the measured training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.00035,
            iterations: 2000,
            seed: 0,
            flip: true,
            eval_every: 100,
            target_train_acc: None,
            optimizer: OptimizerKind::adam(),
            schedule: Schedule::Constant,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(String::from("learning rate and weight decay must be non-negative")));
        }
        if let Schedule::StepDecay { period: 0, .. } = self.schedule {
            return Err(Error::Config(String::from("step-decay period must be positive")));
        }
        Ok(())
    }

    pub fn make_optimizer<T: Scalar>(&self) -> Optimizer<T> {
        let mut opt = Optimizer::new(self.optimizer, self.lr, self.schedule);
        opt.weight_decay = self.weight_decay;
        opt
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based count of completed updates.
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub train_acc: f64,
}

/// Abort rule: a non-finite loss, or a loss above ten times the first one
/// for fifty consecutive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    over: u32,
}

impl DivergenceGuard {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: u32 = 50;

    pub fn new() -> Self {
        Self { initial: None, over: 0 }
    }

    pub fn observe(&mut self, iteration: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, reason: format!("loss is {}", loss) });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > Self::FACTOR * initial {
            self.over += 1;
            if self.over >= Self::PATIENCE {
                return Err(Error::Divergence {
                    iteration,
                    reason: format!("loss above {}x the initial {:.4} for {} steps", Self::FACTOR, initial, self.over),
                });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }

    /// Restore from a checkpoint.
    pub fn resume(initial: Option<f64>, over: u32) -> Self {
        Self { initial, over }
    }

    pub fn streak(&self) -> u32 {
        self.over
    }
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

/// Mini-batch indices and flip decisions for one iteration. Depends only on
/// the seed and the iteration number, which is what makes resumed runs
/// retrace uninterrupted ones.
pub fn batch_plan(seed: u64, iteration: u64, n: usize, batch: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let mut idx = sample(&mut rng, n, batch.min(n)).into_vec();
    idx.sort_unstable();
    let flips = idx.iter().map(|_| flip && rng.gen_bool(0.5)).collect();
    (idx, flips)
}

/// Gather images into a batch tensor, mirroring where requested.
pub fn gather<T: Scalar>(images: &Tensor<T>, idx: &[usize], flips: &[bool]) -> Result<Tensor<T>> {
    let mut batch = images.select_rows(idx)?;
    for (i, &f) in flips.iter().enumerate() {
        if f {
            flip_horizontal(&mut batch, i);
        }
    }
    Ok(batch)
}

/// Eval-mode forward in chunks; returns the concatenated outputs.
pub fn predict<T: Scalar>(model: &Mlfn<T>, images: &Tensor<T>, chunk: usize) -> Result<crate::model::Outputs<T>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(model.evaluate(&images.select_rows(&idx)?, Phase::Eval, &Gates::Learned)?);
        start = end;
    }
    let cat = |f: &dyn Fn(&crate::model::Outputs<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let cols = f(&parts[0]).shape()[1];
        let mut data = Vec::with_capacity(n * cols);
        for p in &parts {
            data.extend_from_slice(f(p).data());
        }
        Tensor::new(&[n, cols], data)
    };
    Ok(crate::model::Outputs {
        logits: cat(&|o| &o.logits)?,
        features: cat(&|o| &o.features)?,
        pooled: cat(&|o| &o.pooled)?,
        signature: if parts[0].signature.is_some() {
            Some(cat(&|o| o.signature.as_ref().expect("uniform across chunks"))?)
        } else {
            None
        },
    })
}

/// Mutable training run state: the pieces a checkpoint must capture.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Mlfn<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    pub guard: DivergenceGuard,
    pub last_train_acc: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Mlfn<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = config.make_optimizer();
        Ok(Self { model, optimizer, config, guard: DivergenceGuard::new(), last_train_acc: None })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn finished(&self) -> bool {
        if self.iteration() >= self.config.iterations {
            return true;
        }
        matches!((self.config.target_train_acc, self.last_train_acc), (Some(t), Some(a)) if a >= t)
    }

    /// One iteration on `(images, labels)`.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<LogRow> {
        let it = self.iteration();
        let lr = self.optimizer.current_lr();
        let (idx, flips) = batch_plan(self.config.seed, it, labels.len(), self.config.batch_size, self.config.flip);
        let x = gather(images, &idx, &flips)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let r = match train_step(&mut self.model, &mut self.optimizer, &x, &y) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Divergence { iteration: it + 1, reason: format!("non-finite value in {}", what) })
            }
            Err(e) => return Err(e),
        };
        self.guard.observe(it + 1, r.loss)?;
        let done = self.iteration();
        if self.config.eval_every > 0 && done % self.config.eval_every == 0 {
            self.last_train_acc = Some(self.train_accuracy(images, labels)?);
        }
        Ok(LogRow { iteration: done, loss: r.loss, lr, train_acc: r.batch_acc })
    }

    /// Eval-mode accuracy on the whole training set.
    pub fn train_accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let out = predict(&self.model, images, 64)?;
        Ok(accuracy(&argmax_rows(&out.logits), labels))
    }

    /// Run until the iteration budget or accuracy target is reached.
    pub fn run(&mut self, images: &Tensor<T>, labels: &[usize], mut on_row: impl FnMut(&Self, &LogRow) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let row = self.step(images, labels)?;
            on_row(self, &row)?;
        }
        Ok(())
    }
}
