//! The gated multi-branch network, its fusion head and the ablation variants.
//!
//! Block `n` runs `K_n` factor modules on its input `X_n`, stacks their
//! outputs along a trailing axis and contracts that axis against the gate
//! vector `S_n` produced by the block's selection module:
//!
//! ```text
//! Y_n = Σ_i S_{n,i} · F_{n,i}(X_n) + shortcut(X_n)
//! ```
//!
//! The gate vectors of all blocks, concatenated bottom to top, form the
//! factor signature `Ŝ`. The classifier reads
//! `R = ½ (T_Y(GAP(Y_N)) + T_S(Ŝ))`.

mod config;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{BlockConfig, MlfnConfig, Mode};
pub use params::{Bound, ParamEntry, ParamId, ParamKind, ParamStore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{BatchStats, ConvSpec, Phase, RunningStats};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Batch-norm layer: affine parameters plus running-statistic buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBn {
    weight: ParamId,
    spec: ConvSpec,
    bn: BnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FactorModule {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SelectionModule {
    fc1: Dense,
    bn1: BnIds,
    fc2: Dense,
    bn2: BnIds,
    fc3: Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    modules: Vec<FactorModule>,
    selection: Option<SelectionModule>,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Head {
    proj_y: Dense,
    proj_s: Option<Dense>,
    classifier: Dense,
}

/// How the gate vectors of a forward pass are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Gates<T> {
    /// Selection modules where present, constant ones otherwise.
    Learned,
    /// One constant per block, shaped `[K_n]` (shared by the batch) or
    /// `[batch, K_n]`. Selection modules are bypassed.
    Constant(Vec<Tensor<T>>),
}

impl<T: Scalar> Gates<T> {
    /// The same value for every gate of every block.
    pub fn uniform(config: &MlfnConfig, value: T) -> Self {
        Gates::Constant(
            config
                .blocks
                .iter()
                .map(|b| Tensor::full(&[b.factor_modules], value).expect("positive extents"))
                .collect(),
        )
    }
}

/// Batch statistics of one normalisation layer, to be folded into its
/// running estimates after a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub layer: BnIds,
    pub stats: BatchStats<T>,
}

/// Tape handles produced by [`Mlfn::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Representation `R` read by the classifier; the re-identification feature.
    pub features: Var,
    /// `Ŝ = [S_1, …, S_N]`, present in the modes that select factors.
    pub signature: Option<Var>,
    /// Gate values used by each block, `[batch, K_n]`.
    pub gates: Vec<Var>,
    /// `Y_1 … Y_N`.
    pub block_outputs: Vec<Var>,
    /// `GAP(Y_N)`.
    pub pooled: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Plain tensors extracted from a gradient-free forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
    pub signature: Option<Tensor<T>>,
    pub pooled: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlfn<T> {
    config: MlfnConfig,
    params: ParamStore<T>,
    stem: ConvBn,
    blocks: Vec<Block>,
    head: Head,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor::new(shape, data)
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BnIds> {
        let p = &mut self.params;
        Ok(BnIds {
            gamma: p.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, ParamKind::Trainable),
            beta: p.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamKind::Trainable),
            running_mean: p.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, ParamKind::Buffer),
            running_var: p.add(format!("{name}.running_var"), Tensor::ones(&[channels])?, ParamKind::Buffer),
        })
    }

    fn conv_bn(&mut self, name: &str, spec: ConvSpec) -> Result<ConvBn> {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = self.he_normal(&spec.weight_shape(), fan_in)?;
        let weight = self.params.add(format!("{name}.conv.w"), w, ParamKind::Trainable);
        let bn = self.bn(&format!("{name}.bn"), spec.out_channels)?;
        Ok(ConvBn { weight, spec, bn })
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize, bias: bool) -> Result<Dense> {
        let w = self.he_normal(&[inputs, outputs], inputs)?;
        let weight = self.params.add(format!("{name}.w"), w, ParamKind::Trainable);
        let bias = if bias {
            Some(self.params.add(format!("{name}.b"), Tensor::zeros(&[outputs])?, ParamKind::Trainable))
        } else {
            None
        };
        Ok(Dense { weight, bias })
    }

    fn factor_module(&mut self, name: &str, c_in: usize, width: usize, c_out: usize, stride: usize) -> Result<FactorModule> {
        Ok(FactorModule {
            reduce: self.conv_bn(&format!("{name}.reduce"), ConvSpec::new(c_in, width, 1, 1, 0))?,
            spatial: self.conv_bn(&format!("{name}.spatial"), ConvSpec::new(width, width, 3, stride, 1))?,
            expand: self.conv_bn(&format!("{name}.expand"), ConvSpec::new(width, c_out, 1, 1, 0))?,
        })
    }
}

/// Trainable scalars in one factor module of bottleneck width `w`.
pub fn factor_module_params(c_in: usize, width: usize, c_out: usize) -> usize {
    c_in * width + 9 * width * width + width * c_out + 4 * width + 2 * c_out
}

/// Bottleneck width of the single holistic module that replaces `k`
/// modules of width `width` with the closest parameter count.
pub fn holistic_width(c_in: usize, width: usize, c_out: usize, k: usize) -> usize {
    let target = (k * factor_module_params(c_in, width, c_out)) as f64;
    let a = 9.0;
    let b = (c_in + c_out + 4) as f64;
    let c = (2 * c_out) as f64 - target;
    let root = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
    let lo = (root.floor() as usize).max(1);
    let dist = |w: usize| (factor_module_params(c_in, w, c_out) as f64 - target).abs();
    if dist(lo + 1) < dist(lo) {
        lo + 1
    } else {
        lo
    }
}

struct Pass<'a, T> {
    tape: &'a mut Tape<T>,
    bound: &'a Bound,
    params: &'a ParamStore<T>,
    phase: Phase,
    eps: f64,
    updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Pass<'_, T> {
    fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn bn(&mut self, x: Var, ids: BnIds) -> Result<Var> {
        let running = RunningStats {
            mean: self.params.value(ids.running_mean).data().to_vec(),
            var: self.params.value(ids.running_var).data().to_vec(),
        };
        let (g, b) = (self.var(ids.gamma), self.var(ids.beta));
        let (y, stats) = self.tape.batch_norm(x, g, b, &running, self.phase, self.eps)?;
        if let Some(stats) = stats {
            self.updates.push(BnUpdate { layer: ids, stats });
        }
        Ok(y)
    }

    fn conv_bn(&mut self, x: Var, layer: &ConvBn) -> Result<Var> {
        let w = self.var(layer.weight);
        let y = self.tape.conv2d(x, w, None, layer.spec)?;
        self.bn(y, layer.bn)
    }

    fn dense(&mut self, x: Var, layer: &Dense) -> Result<Var> {
        let w = self.var(layer.weight);
        let b = layer.bias.map(|b| self.var(b));
        self.tape.linear(x, w, b)
    }

    fn factor_module(&mut self, x: Var, fm: &FactorModule) -> Result<Var> {
        let h = self.conv_bn(x, &fm.reduce)?;
        let h = self.tape.relu(h)?;
        let h = self.conv_bn(h, &fm.spatial)?;
        let h = self.tape.relu(h)?;
        self.conv_bn(h, &fm.expand)
    }

    fn selection(&mut self, x: Var, sm: &SelectionModule) -> Result<Var> {
        let pooled = self.tape.global_avg_pool(x)?;
        let h = self.dense(pooled, &sm.fc1)?;
        let h = self.bn(h, sm.bn1)?;
        let h = self.tape.relu(h)?;
        let h = self.dense(h, &sm.fc2)?;
        let h = self.bn(h, sm.bn2)?;
        let h = self.tape.relu(h)?;
        let a = self.dense(h, &sm.fc3)?;
        self.tape.sigmoid(a)
    }
}

impl<T: Scalar> Mlfn<T> {
    /// Deterministic initialisation: fan-in scaled normal weights, zero
    /// biases, unit batch-norm scales.
    pub fn init(config: MlfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamStore::new(), rng: &mut rng };
        let stem = b.conv_bn(
            "stem",
            ConvSpec::new(config.in_channels, config.stem_channels, config.stem_kernel, config.stem_stride, config.stem_kernel / 2),
        )?;
        let mode = config.mode;
        let mut blocks = Vec::with_capacity(config.depth());
        for (n, bc) in config.blocks.iter().enumerate() {
            let name = format!("block{}", n + 1);
            let c_in = config.block_in_channels(n);
            let modules = if mode == Mode::ResNet {
                let w = holistic_width(c_in, bc.fm_width, bc.out_channels, bc.factor_modules);
                vec![b.factor_module(&format!("{name}.fm1"), c_in, w, bc.out_channels, bc.stride)?]
            } else {
                (0..bc.factor_modules)
                    .map(|i| b.factor_module(&format!("{name}.fm{}", i + 1), c_in, bc.fm_width, bc.out_channels, bc.stride))
                    .collect::<Result<Vec<_>>>()?
            };
            let selection = if mode.has_selection() {
                let (h1, h2) = bc.fsm_hidden;
                Some(SelectionModule {
                    fc1: b.dense(&format!("{name}.fsm.fc1"), c_in, h1, false)?,
                    bn1: b.bn(&format!("{name}.fsm.bn1"), h1)?,
                    fc2: b.dense(&format!("{name}.fsm.fc2"), h1, h2, false)?,
                    bn2: b.bn(&format!("{name}.fsm.bn2"), h2)?,
                    fc3: b.dense(&format!("{name}.fsm.fc3"), h2, bc.factor_modules, true)?,
                })
            } else {
                None
            };
            let shortcut = if bc.stride != 1 || c_in != bc.out_channels {
                Some(b.conv_bn(&format!("{name}.shortcut"), ConvSpec::new(c_in, bc.out_channels, 1, bc.stride, 0))?)
            } else {
                None
            };
            blocks.push(Block { modules, selection, shortcut });
        }
        let c_last = config.blocks.last().expect("validated").out_channels;
        let d = config.fusion_dim;
        let head = Head {
            proj_y: b.dense("head.proj_y", c_last, d, true)?,
            proj_s: if mode.fuses_signature() {
                Some(b.dense("head.proj_s", config.signature_dim(), d, true)?)
            } else {
                None
            },
            classifier: b.dense("head.classifier", d, config.num_classes, true)?,
        };
        let params = b.params;
        Ok(Self { config, params, stem, blocks, head })
    }

    pub fn config(&self) -> &MlfnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter tensors of factor module `i` in block `n` (both 0-based).
    pub fn factor_module_param_ids(&self, n: usize, i: usize) -> Result<Vec<ParamId>> {
        let fm = self
            .blocks
            .get(n)
            .and_then(|b| b.modules.get(i))
            .ok_or_else(|| Error::Contract(format!("no factor module ({}, {})", n, i)))?;
        let mut ids = Vec::new();
        for layer in [fm.reduce, fm.spatial, fm.expand] {
            ids.extend([layer.weight, layer.bn.gamma, layer.bn.beta]);
        }
        Ok(ids)
    }

    /// `(weight, bias)` of the last affine layer of the selection module of
    /// block `n` (0-based).
    pub fn selection_output_layer(&self, n: usize) -> Option<(ParamId, ParamId)> {
        let fc3 = self.blocks.get(n)?.selection.as_ref()?.fc3;
        Some((fc3.weight, fc3.bias?))
    }

    /// Input extents `[C, H, W]` expected per image.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.input_hw.0, self.config.input_hw.1]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape() {
            return Err(Error::Shape(format!("model expects [N, {:?}], got {:?}", self.input_shape(), s)));
        }
        Ok(())
    }

    fn constant_gates(&self, tape: &mut Tape<T>, n: usize, batch: usize, given: Option<&Tensor<T>>) -> Result<Var> {
        let k = self.blocks[n].modules.len();
        let t = match given {
            None => Tensor::ones(&[batch, k])?,
            Some(g) => match g.shape() {
                [gk] if *gk == k => {
                    let mut data = Vec::with_capacity(batch * k);
                    for _ in 0..batch {
                        data.extend_from_slice(g.data());
                    }
                    Tensor::new(&[batch, k], data)?
                }
                [gn, gk] if *gn == batch && *gk == k => g.clone(),
                other => {
                    return Err(Error::Shape(format!("block {} gates {:?}, expected [{}] or [{}, {}]", n + 1, other, k, batch, k)))
                }
            },
        };
        Ok(tape.constant(t))
    }

    /// Full forward pass on a tape whose parameters were bound with
    /// [`ParamStore::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, phase: Phase, gates: &Gates<T>) -> Result<ForwardOutput<T>> {
        self.check_input(tape.value(x))?;
        let batch = tape.value(x).shape()[0];
        if let Gates::Constant(g) = gates {
            if g.len() != self.blocks.len() {
                return Err(Error::Contract(format!("{} gate tensors for {} blocks", g.len(), self.blocks.len())));
            }
        }
        let mut pass = Pass { tape, bound, params: &self.params, phase, eps: self.config.bn_eps(), updates: Vec::new() };
        let h = pass.conv_bn(x, &self.stem)?;
        let mut h = pass.tape.relu(h)?;
        let mut gate_vars = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (n, block) in self.blocks.iter().enumerate() {
            let s = match (gates, &block.selection) {
                (Gates::Learned, Some(sm)) => pass.selection(h, sm)?,
                (Gates::Learned, None) => self.constant_gates(pass.tape, n, batch, None)?,
                (Gates::Constant(g), _) => self.constant_gates(pass.tape, n, batch, Some(&g[n]))?,
            };
            let outs = block.modules.iter().map(|fm| pass.factor_module(h, fm)).collect::<Result<Vec<_>>>()?;
            let stacked = pass.tape.stack_last(&outs)?;
            let gated = pass.tape.mode4_product(stacked, s)?;
            let skip = match &block.shortcut {
                Some(proj) => pass.conv_bn(h, proj)?,
                None => h,
            };
            h = pass.tape.add(gated, skip)?;
            gate_vars.push(s);
            block_outputs.push(h);
        }
        let pooled = pass.tape.global_avg_pool(h)?;
        let phi_y = pass.dense(pooled, &self.head.proj_y)?;
        let signature = if self.config.mode.has_selection() { Some(pass.tape.concat(&gate_vars)?) } else { None };
        let features = match (&self.head.proj_s, signature) {
            (Some(proj_s), Some(sig)) => {
                let phi_s = pass.dense(sig, proj_s)?;
                let sum = pass.tape.add(phi_y, phi_s)?;
                pass.tape.scale(sum, cast(0.5))?
            }
            _ => phi_y,
        };
        let logits = pass.dense(features, &self.head.classifier)?;
        Ok(ForwardOutput {
            logits,
            features,
            signature,
            gates: gate_vars,
            block_outputs,
            pooled,
            bn_updates: pass.updates,
        })
    }

    /// Gradient-free forward pass over a batch.
    pub fn evaluate(&self, x: &Tensor<T>, phase: Phase, gates: &Gates<T>) -> Result<Outputs<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, phase, gates)?;
        Ok(Outputs {
            logits: tape.value(out.logits).clone(),
            features: tape.value(out.features).clone(),
            signature: out.signature.map(|s| tape.value(s).clone()),
            pooled: tape.value(out.pooled).clone(),
        })
    }

    /// Fold training-batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let momentum = self.config.bn_momentum();
        for u in updates {
            let mut running = RunningStats {
                mean: self.params.value(u.layer.running_mean).data().to_vec(),
                var: self.params.value(u.layer.running_var).data().to_vec(),
            };
            running.update(&u.stats, momentum);
            self.params.value_mut(u.layer.running_mean).data_mut().copy_from_slice(&running.mean);
            self.params.value_mut(u.layer.running_var).data_mut().copy_from_slice(&running.var);
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Mlfn<U> {
        Mlfn {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    /// Human-readable parameter summary, one tensor per line.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in self.params.entries() {
            s.push_str(&format!("{} {:?} {:?}\n", e.name, e.value.shape(), e.kind));
        }
        s
    }
}
