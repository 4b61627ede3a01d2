//! Run configuration: an INI file, overridden by flags, written back in full
//! as `config_resolved` in every run directory.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use mlfn_core::data::{DataConfig, FactorSpec, Nuisance};
use mlfn_core::eval::{FeatureKind, PairMatcherConfig, ProbeConfig};
use mlfn_core::model::{Mode, MlfnConfig};
use mlfn_core::train::{OptimizerKind, Schedule, TrainConfig};

use crate::error::{CliError, Result};

pub const RESOLVED_NAME: &str = "config_resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Reid,
    Cifar,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Reid => "reid",
            Preset::Cifar => "cifar",
        }
    }

    fn base(self, classes: usize) -> MlfnConfig {
        match self {
            Preset::Toy => MlfnConfig::toy(classes),
            Preset::Reid => MlfnConfig::reid(classes),
            Preset::Cifar => MlfnConfig::cifar(classes),
        }
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "reid" => Ok(Preset::Reid),
            "cifar" => Ok(Preset::Cifar),
            _ => Err(CliError::Usage(format!("unknown preset `{}` (toy, reid, cifar)", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub preset: Preset,
    pub mode: Mode,
    pub fusion_dim: usize,
    pub channel_scale: usize,
    pub stem_stride: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelSection {
    fn for_preset(preset: Preset) -> Self {
        let base = preset.base(1);
        Self {
            preset,
            mode: Mode::Mlfn,
            fusion_dim: base.fusion_dim,
            channel_scale: 1,
            stem_stride: base.stem_stride,
            bn_eps: base.bn_eps(),
            bn_momentum: base.bn_momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub ranks: Vec<usize>,
    pub features: FeatureKind,
    pub pair: PairMatcherConfig,
    pub probe: ProbeConfig,
    /// Images kept at each end of a unit ranking.
    pub inspect_top: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ranks: vec![1, 5, 10],
            features: FeatureKind::R,
            pair: PairMatcherConfig::default(),
            probe: ProbeConfig::default(),
            inspect_top: 20,
        }
    }
}

/// Everything a run needs; `seed` drives data, initialisation and batching.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Iterations between checkpoints (0: only at the end).
    pub checkpoint_every: u64,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig { batch_size: 32, lr: 0.003, eval_every: 50, target_train_acc: Some(0.99), ..TrainConfig::default() };
        Self {
            seed: 0,
            model: ModelSection::for_preset(Preset::Toy),
            data: DataConfig::default(),
            train,
            checkpoint_every: 500,
            eval: EvalSection::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("[{}] {}: cannot parse `{}`", section, key, value)))
}

pub fn parse_list(value: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| CliError::Usage(format!("bad list entry `{}` in `{}`", v, value))))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(CliError::Usage(format!("`{}` must list positive integers", value)));
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("[{}] {}: expected a boolean, got `{}`", section, key, value))),
    }
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e)))?;
        let mut cfg = RunConfig::default();
        // the preset decides the defaults the other model keys override
        if let Some(p) = ini.section(Some("model")).and_then(|s| s.get("preset")) {
            let mode = cfg.model.mode;
            cfg.model = ModelSection::for_preset(p.parse()?);
            cfg.model.mode = mode;
        }
        let (mut decay_factor, mut decay_period, mut schedule) = (0.1, 100u64, String::from("constant"));
        let mut data_seed = None;
        for (section, props) in ini.iter() {
            let sec = section.unwrap_or("");
            for (key, value) in props.iter() {
                let v = value.trim();
                match (sec, key) {
                    ("run", "seed") => cfg.seed = parse(sec, key, v)?,
                    ("run", "digest") => {}
                    ("model", "preset") => {}
                    ("model", "mode") => cfg.model.mode = v.parse()?,
                    ("model", "fusion_dim") => cfg.model.fusion_dim = parse(sec, key, v)?,
                    ("model", "channel_scale") => cfg.model.channel_scale = parse(sec, key, v)?,
                    ("model", "stem_stride") => cfg.model.stem_stride = parse(sec, key, v)?,
                    ("model", "bn_eps") => cfg.model.bn_eps = parse(sec, key, v)?,
                    ("model", "bn_momentum") => cfg.model.bn_momentum = parse(sec, key, v)?,
                    ("data", "seed") => data_seed = Some(parse(sec, key, v)?),
                    ("data", "train_ids") => cfg.data.train_ids = parse(sec, key, v)?,
                    ("data", "test_ids") => cfg.data.test_ids = parse(sec, key, v)?,
                    ("data", "imgs_per_view") => cfg.data.imgs_per_view = parse(sec, key, v)?,
                    ("data", "views") => cfg.data.views = parse(sec, key, v)?,
                    ("data", "colors") => cfg.data.spec.colors = parse(sec, key, v)?,
                    ("data", "textures") => cfg.data.spec.textures = parse(sec, key, v)?,
                    ("data", "layouts") => cfg.data.spec.layouts = parse(sec, key, v)?,
                    ("data", "carry") => cfg.data.spec.carry = parse(sec, key, v)?,
                    ("data", "jitter_x") => cfg.data.nuisance.jitter_x = parse(sec, key, v)?,
                    ("data", "jitter_y") => cfg.data.nuisance.jitter_y = parse(sec, key, v)?,
                    ("data", "mirror") => cfg.data.nuisance.mirror = parse_bool(sec, key, v)?,
                    ("data", "clutter") => cfg.data.nuisance.clutter = parse(sec, key, v)?,
                    ("data", "brightness") => cfg.data.nuisance.brightness = parse(sec, key, v)?,
                    ("data", "noise") => cfg.data.nuisance.noise = parse(sec, key, v)?,
                    ("data", "camera") => cfg.data.nuisance.camera = parse(sec, key, v)?,
                    ("train", "optimizer") => {
                        cfg.train.optimizer = match v {
                            "adam" => OptimizerKind::adam(),
                            "sgd_nesterov" => OptimizerKind::sgd_nesterov(),
                            _ => return Err(CliError::Usage(format!("[train] optimizer: unknown `{}`", v))),
                        }
                    }
                    ("train", "lr") => cfg.train.lr = parse(sec, key, v)?,
                    ("train", "batch_size") => cfg.train.batch_size = parse(sec, key, v)?,
                    ("train", "iterations") => cfg.train.iterations = parse(sec, key, v)?,
                    ("train", "flip") => cfg.train.flip = parse_bool(sec, key, v)?,
                    ("train", "eval_every") => cfg.train.eval_every = parse(sec, key, v)?,
                    ("train", "target_train_acc") => {
                        cfg.train.target_train_acc = if v == "none" { None } else { Some(parse(sec, key, v)?) }
                    }
                    ("train", "weight_decay") => cfg.train.weight_decay = parse(sec, key, v)?,
                    ("train", "schedule") => schedule = v.to_string(),
                    ("train", "decay_factor") => decay_factor = parse(sec, key, v)?,
                    ("train", "decay_period") => decay_period = parse(sec, key, v)?,
                    ("train", "checkpoint_every") => cfg.checkpoint_every = parse(sec, key, v)?,
                    ("eval", "ranks") => cfg.eval.ranks = parse_list(v)?,
                    ("eval", "features") => cfg.eval.features = v.parse()?,
                    ("eval", "pair_l2") => cfg.eval.pair.l2 = parse(sec, key, v)?,
                    ("eval", "pair_newton_steps") => cfg.eval.pair.newton_steps = parse(sec, key, v)?,
                    ("eval", "pairs_per_image") => cfg.eval.pair.pairs_per_image = parse(sec, key, v)?,
                    ("eval", "probe_l2") => cfg.eval.probe.l2 = parse(sec, key, v)?,
                    ("eval", "probe_lr") => cfg.eval.probe.lr = parse(sec, key, v)?,
                    ("eval", "probe_iterations") => cfg.eval.probe.iterations = parse(sec, key, v)?,
                    ("eval", "inspect_top") => cfg.eval.inspect_top = parse(sec, key, v)?,
                    _ => return Err(CliError::Usage(format!("unknown config key [{}] {}", sec, key))),
                }
            }
        }
        cfg.train.schedule = match schedule.as_str() {
            "constant" => Schedule::Constant,
            "step" => Schedule::StepDecay { factor: decay_factor, period: decay_period },
            _ => return Err(CliError::Usage(format!("[train] schedule: unknown `{}` (constant, step)", schedule))),
        };
        cfg.set_seed(cfg.seed);
        if let Some(s) = data_seed {
            cfg.data.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_ini_str(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    /// Set the seed of every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.spec.validate()?;
        self.data.nuisance.validate()?;
        self.model_config()?;
        if self.model.channel_scale == 0 {
            return Err(CliError::Usage("[model] channel_scale must be positive".into()));
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(CliError::Usage("[eval] ranks must be positive".into()));
        }
        Ok(())
    }

    /// Network configuration; one class per training identity.
    pub fn model_config(&self) -> Result<MlfnConfig> {
        let m = &self.model;
        let mut c = m.preset.base(self.data.train_ids.max(1)).with_mode(m.mode).with_fusion_dim(m.fusion_dim);
        if m.channel_scale > 1 {
            c = c.scale_channels(m.channel_scale);
        }
        c.stem_stride = m.stem_stride;
        c.set_bn(m.bn_eps, m.bn_momentum);
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the network's canonical description; stamped into
    /// checkpoints and `config_resolved`.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(model_digest(&self.model_config()?))
    }

    /// Complete INI rendering; parsing it back yields `self`.
    pub fn to_ini(&self) -> Result<String> {
        let mut s = String::new();
        let d = &self.data;
        let n = &d.nuisance;
        let t = &self.train;
        let m = &self.model;
        let e = &self.eval;
        let w = &mut s;
        let _ = writeln!(w, "[run]\nseed = {}\ndigest = {}\n", self.seed, hex::encode(self.digest()?));
        let _ = writeln!(
            w,
            "[model]\npreset = {}\nmode = {}\nfusion_dim = {}\nchannel_scale = {}\nstem_stride = {}\nbn_eps = {:e}\nbn_momentum = {}\n",
            m.preset.as_str(),
            m.mode,
            m.fusion_dim,
            m.channel_scale,
            m.stem_stride,
            m.bn_eps,
            m.bn_momentum
        );
        let _ = writeln!(
            w,
            "[data]\nseed = {}\ntrain_ids = {}\ntest_ids = {}\nimgs_per_view = {}\nviews = {}\ncolors = {}\ntextures = {}\nlayouts = {}\ncarry = {}",
            d.seed, d.train_ids, d.test_ids, d.imgs_per_view, d.views, d.spec.colors, d.spec.textures, d.spec.layouts, d.spec.carry
        );
        let _ = writeln!(
            w,
            "jitter_x = {}\njitter_y = {}\nmirror = {}\nclutter = {}\nbrightness = {}\nnoise = {}\ncamera = {}\n",
            n.jitter_x, n.jitter_y, n.mirror, n.clutter, n.brightness, n.noise, n.camera
        );
        let (schedule, factor, period) = match t.schedule {
            Schedule::Constant => ("constant", 0.1, 100),
            Schedule::StepDecay { factor, period } => ("step", factor, period),
        };
        let target = t.target_train_acc.map_or_else(|| "none".to_string(), |a| a.to_string());
        let _ = writeln!(
            w,
            "[train]\noptimizer = {}\nlr = {}\nbatch_size = {}\niterations = {}\nflip = {}\neval_every = {}\ntarget_train_acc = {}\nweight_decay = {}\nschedule = {}\ndecay_factor = {}\ndecay_period = {}\ncheckpoint_every = {}\n",
            t.optimizer.name(),
            t.lr,
            t.batch_size,
            t.iterations,
            t.flip,
            t.eval_every,
            target,
            t.weight_decay,
            schedule,
            factor,
            period,
            self.checkpoint_every
        );
        let _ = writeln!(
            w,
            "[eval]\nranks = {}\nfeatures = {}\npair_l2 = {}\npair_newton_steps = {}\npairs_per_image = {}\nprobe_l2 = {}\nprobe_lr = {}\nprobe_iterations = {}\ninspect_top = {}",
            join(&e.ranks),
            e.features,
            e.pair.l2,
            e.pair.newton_steps,
            e.pair.pairs_per_image,
            e.probe.l2,
            e.probe.lr,
            e.probe.iterations,
            e.inspect_top
        );
        Ok(s)
    }

    pub fn factor_spec(&self) -> FactorSpec {
        self.data.spec
    }

    pub fn nuisance(&self) -> Nuisance {
        self.data.nuisance
    }
}

pub fn model_digest(config: &MlfnConfig) -> [u8; 32] {
    Sha256::digest(config.canonical_text().as_bytes()).into()
}

/// Read the `digest` recorded in a `config_resolved` file.
pub fn recorded_digest(text: &str) -> Option<String> {
    let ini = Ini::load_from_str(text).ok()?;
    ini.section(Some("run"))?.get("digest").map(|s| s.trim().to_string())
}
