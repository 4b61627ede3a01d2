//! The pipelines behind each subcommand.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mlfn_core::data::{generate, split_gallery_probe, Dataset, GalleryProbe, Split, FACTOR_NAMES};
use mlfn_core::eval::{attribute_probe, evaluate, EvalReport, FeatureKind, FeatureSet, PairMatcher, ProbeReport};
use mlfn_core::inspect::{correlate_units, montage, rank_by_unit, unit_labels, Correlations};
use mlfn_core::model::{Mlfn, Mode, Outputs};
use mlfn_core::tensor::Tensor;
use mlfn_core::train::{predict, LogRow, Trainer};
use mlfn_core::verify::{kernel_suite, model_gradient_check, KERNEL_FD, KERNEL_TOLERANCE, MODEL_FD, MODEL_TOLERANCE};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::error::{CliError, Result};
use crate::io;
use crate::report::{fmt, median, MetricRow, Table};

pub const CHECKPOINT: &str = "checkpoint.mlfn";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const METRICS: &str = "metrics.csv";
const PREDICT_CHUNK: usize = 64;

/// Worker count from `MLFN_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("MLFN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("MLFN_THREADS must be a positive integer, got `{}`", v))),
        },
    }
}

/// Eval-mode forward over contiguous slices of `images` on `threads` workers.
/// Every image is processed independently, so the result does not depend on
/// the worker count.
pub fn predict_parallel(model: &Mlfn<f32>, images: &Tensor<f32>, threads: usize) -> Result<Outputs<f32>> {
    let n = images.shape()[0];
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return Ok(predict(model, images, PREDICT_CHUNK)?);
    }
    let per = n.div_ceil(threads);
    let ranges: Vec<Vec<usize>> = (0..n).step_by(per).map(|s| (s..(s + per).min(n)).collect()).collect();
    let parts: Vec<mlfn_core::Result<Outputs<f32>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|idx| scope.spawn(move || predict(model, &images.select_rows(idx)?, PREDICT_CHUNK)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let parts = parts.into_iter().collect::<mlfn_core::Result<Vec<_>>>()?;
    let cat = |f: &dyn Fn(&Outputs<f32>) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let cols = f(&parts[0]).shape()[1];
        let data: Vec<f32> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Ok(Tensor::new(&[n, cols], data)?)
    };
    Ok(Outputs {
        logits: cat(&|o| &o.logits)?,
        features: cat(&|o| &o.features)?,
        pooled: cat(&|o| &o.pooled)?,
        signature: match parts[0].signature {
            Some(_) => Some(cat(&|o| o.signature.as_ref().expect("uniform across workers"))?),
            None => None,
        },
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(RESOLVED_NAME);
    fs::write(&path, cfg.to_ini()?).map_err(CliError::io(&path))
}

/// The configuration a run directory was produced with.
pub fn read_resolved(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(RESOLVED_NAME))
}

pub fn dataset(cfg: &RunConfig) -> Result<Dataset<f32>> {
    Ok(generate(&cfg.data)?)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let ds = dataset(cfg)?;
    write_resolved(cfg, out)?;
    io::export_dataset(&ds, out)?;
    Ok(ds.len())
}

/// Train from scratch without touching the filesystem.
pub fn fit(cfg: &RunConfig, ds: &Dataset<f32>) -> Result<Trainer<f32>> {
    let (x, y) = ds.train_set()?;
    let model = Mlfn::init(cfg.model_config()?, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.run(&x, &y, |_, _| Ok(()))?;
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub resumed_from: Option<u64>,
    pub last_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub metrics: Vec<MetricRow>,
}

fn log_row(r: &LogRow) -> String {
    format!("{},{},{},{}\n", r.iteration, r.loss, r.lr, r.train_acc)
}

/// Keep the header and the rows up to `iteration`.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || it.is_some_and(|it| it <= iteration) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(CliError::io(path))
}

/// Train into `out`: `config_resolved`, a loss log, periodic checkpoints and
/// final metrics. With `resume`, continue from `out/checkpoint.mlfn`.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool, threads: usize, mut on_row: impl FnMut(&LogRow)) -> Result<TrainSummary> {
    write_resolved(cfg, out)?;
    let digest = cfg.digest()?;
    let ds = dataset(cfg)?;
    let (x, y) = ds.train_set()?;
    let model = Mlfn::init(cfg.model_config()?, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let ckpt_path = out.join(CHECKPOINT);
    let log_path = out.join(LOSS_LOG);
    let mut resumed_from = None;
    if resume && ckpt_path.exists() {
        Checkpoint::load(&ckpt_path, &digest)?.apply_to_trainer(&mut trainer)?;
        resumed_from = Some(trainer.iteration());
        if log_path.exists() {
            truncate_log(&log_path, trainer.iteration())?;
        }
    }
    let fresh_log = resumed_from.is_none() || !log_path.exists();
    let mut log = OpenOptions::new().create(true).append(!fresh_log).write(true).truncate(fresh_log).open(&log_path).map_err(CliError::io(&log_path))?;
    if fresh_log {
        log.write_all(b"iteration,loss,lr,train_acc\n").map_err(CliError::io(&log_path))?;
    }
    let mut last_loss = None;
    while !trainer.finished() {
        let row = match trainer.step(&x, &y) {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(CliError::io(&log_path))?;
                return Err(e.into());
            }
        };
        log.write_all(log_row(&row).as_bytes()).map_err(CliError::io(&log_path))?;
        last_loss = Some(row.loss);
        on_row(&row);
        if cfg.checkpoint_every > 0 && row.iteration % cfg.checkpoint_every == 0 {
            log.flush().map_err(CliError::io(&log_path))?;
            Checkpoint::from_trainer(&trainer, digest).save(&ckpt_path)?;
        }
    }
    log.flush().map_err(CliError::io(&log_path))?;
    Checkpoint::from_trainer(&trainer, digest).save(&ckpt_path)?;

    let outputs = predict_parallel(&trainer.model, &ds.images, threads)?;
    let metrics = matching_metrics(cfg, &ds, &outputs, &default_kinds(cfg.model.mode))?;
    let table = Table::metrics("features", &metrics);
    table.write_csv(&out.join(METRICS))?;
    table.write_text(&out.join("metrics.txt"))?;
    Ok(TrainSummary { iterations: trainer.iteration(), resumed_from, last_loss, train_acc: trainer.last_train_acc, metrics })
}

fn default_kinds(mode: Mode) -> Vec<FeatureKind> {
    if mode.has_selection() {
        vec![FeatureKind::R, FeatureKind::Fs]
    } else {
        vec![FeatureKind::R]
    }
}

/// Restore the trained network stored in a run directory.
pub fn load_model(cfg: &RunConfig, run_dir: &Path) -> Result<Mlfn<f32>> {
    let ck = Checkpoint::load(&run_dir.join(CHECKPOINT), &cfg.digest()?)?;
    let mut model = Mlfn::init(cfg.model_config()?, cfg.seed)?;
    ck.apply_to_model(&mut model)?;
    Ok(model)
}

pub fn gallery_probe(cfg: &RunConfig, ds: &Dataset<f32>) -> Result<GalleryProbe> {
    Ok(split_gallery_probe(ds, cfg.data.seed)?)
}

/// Cross-view matching of held-out identities. `Fs` yields two rows: plain
/// L2 on the signature and the pair matcher trained on training identities.
pub fn matching_metrics(cfg: &RunConfig, ds: &Dataset<f32>, outputs: &Outputs<f32>, kinds: &[FeatureKind]) -> Result<Vec<MetricRow>> {
    let gp = gallery_probe(cfg, ds)?;
    let ranks = &cfg.eval.ranks;
    let mut rows = Vec::new();
    for &kind in kinds {
        let all = FeatureSet::from_outputs(outputs, kind, ds.ids.clone(), ds.views.clone())?;
        let (p, g) = (all.subset(&gp.probes)?, all.subset(&gp.gallery)?);
        rows.push(MetricRow::from_report(kind.as_str(), &evaluate(&p, &g, ranks)?));
        if kind == FeatureKind::Fs {
            let matcher = PairMatcher::train(&all.subset(&ds.indices(Split::Train))?, &cfg.eval.pair)?;
            let dist = matcher.distance_matrix(&p.data, &g.data)?;
            rows.push(MetricRow::from_report("FS-pair", &EvalReport::from_distances(kind, &dist, &p.ids, &g.ids, ranks)?));
        }
    }
    Ok(rows)
}

/// Nearest neighbour on raw pixels over the same split.
pub fn pixel_baseline(cfg: &RunConfig, ds: &Dataset<f32>) -> Result<MetricRow> {
    let gp = gallery_probe(cfg, ds)?;
    let n = ds.len();
    let flat: Tensor<f64> = ds.images.clone().reshape(&[n, ds.images.len() / n])?.cast();
    let all = FeatureSet::new(FeatureKind::R, flat, ds.ids.clone(), ds.views.clone())?;
    let report = evaluate(&all.subset(&gp.probes)?, &all.subset(&gp.gallery)?, &cfg.eval.ranks)?;
    Ok(MetricRow::from_report("pixels", &report))
}

/// Evaluate a trained run; writes `eval.csv` and `eval.txt` into `out`.
pub fn eval(cfg: &RunConfig, run_dir: &Path, out: &Path, kinds: &[FeatureKind], threads: usize) -> Result<Vec<MetricRow>> {
    let model = load_model(cfg, run_dir)?;
    let ds = dataset(cfg)?;
    let outputs = predict_parallel(&model, &ds.images, threads)?;
    let mut rows = matching_metrics(cfg, &ds, &outputs, kinds)?;
    rows.push(pixel_baseline(cfg, &ds)?);
    create_dir(out)?;
    let table = Table::metrics("features", &rows);
    table.write_csv(&out.join("eval.csv"))?;
    let text = format!("config digest {}\n{}", hex::encode(cfg.digest()?), table.to_text());
    let path = out.join("eval.txt");
    fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(rows)
}

/// Attribute read-out from features of training identities, scored on
/// held-out identities.
pub fn probe_features(cfg: &RunConfig, ds: &Dataset<f32>, outputs: &Outputs<f32>, kind: FeatureKind) -> Result<ProbeReport> {
    let all = FeatureSet::from_outputs(outputs, kind, ds.ids.clone(), ds.views.clone())?;
    let (tr, te) = (ds.indices(Split::Train), ds.indices(Split::Test));
    let labels = |ix: &[usize]| ix.iter().map(|&i| ds.image_attributes(i).to_vec()).collect::<Vec<_>>();
    Ok(attribute_probe(
        &all.data.select_rows(&tr)?,
        &labels(&tr),
        &all.data.select_rows(&te)?,
        &labels(&te),
        &FACTOR_NAMES,
        &cfg.eval.probe,
    )?)
}

pub fn probe_attrs(cfg: &RunConfig, run_dir: &Path, out: &Path, kind: FeatureKind, threads: usize) -> Result<ProbeReport> {
    let model = load_model(cfg, run_dir)?;
    let ds = dataset(cfg)?;
    let outputs = predict_parallel(&model, &ds.images, threads)?;
    let report = probe_features(cfg, &ds, &outputs, kind)?;
    create_dir(out)?;
    let mut t = Table::new(["attribute", "accuracy", "majority"]);
    for r in &report.results {
        t.push([r.name.clone(), fmt(r.accuracy), fmt(r.majority)]);
    }
    t.push(["mean".to_string(), fmt(report.mean_accuracy()), fmt(report.mean_majority())]);
    t.write_csv(&out.join("probe.csv"))?;
    t.write_text(&out.join("probe.txt"))?;
    Ok(report)
}

/// Per-unit montages and score lists under `out/inspect`, plus
/// `correlations.csv`, computed on held-out identities.
pub fn inspect(cfg: &RunConfig, run_dir: &Path, out: &Path, threads: usize) -> Result<Correlations> {
    let model = load_model(cfg, run_dir)?;
    if !cfg.model.mode.has_selection() {
        return Err(CliError::Usage(format!("mode {} has no selection modules to inspect", cfg.model.mode)));
    }
    let ds = dataset(cfg)?;
    let test = ds.indices(Split::Test);
    let images = ds.images.select_rows(&test)?;
    let outputs = predict_parallel(&model, &images, threads)?;
    let signature: Tensor<f64> = outputs.signature.expect("selection modes report a signature").cast();
    let mc = cfg.model_config()?;
    let m = cfg.eval.inspect_top.min(test.len() / 2);
    let root = out.join("inspect");
    for (block, unit) in unit_labels(&mc) {
        let r = rank_by_unit(&signature, &mc, block, unit, m)?;
        let dir = root.join(format!("{}_{}", block, unit));
        create_dir(&dir)?;
        io::write_ppm(&dir.join("top.ppm"), &montage(&images, &[&r.top], m.max(1))?)?;
        io::write_ppm(&dir.join("bottom.ppm"), &montage(&images, &[&r.bottom], m.max(1))?)?;
        let mut t = Table::new(["rank", "image", "id", "view", "score"]);
        for (k, &i) in r.order.iter().enumerate() {
            let g = test[i];
            t.push([(k + 1).to_string(), g.to_string(), ds.ids[g].to_string(), ds.views[g].to_string(), fmt(r.scores[i])]);
        }
        t.write_csv(&dir.join("scores.csv"))?;
    }
    let attrs: Vec<Vec<usize>> = test.iter().map(|&i| ds.image_attributes(i).to_vec()).collect();
    let cor = correlate_units(&signature, &mc, &attrs, &FACTOR_NAMES)?;
    let mut t = Table::new(["block", "unit"].into_iter().chain(FACTOR_NAMES));
    for (u, &(b, k)) in cor.units.iter().enumerate() {
        t.push([b.to_string(), k.to_string()].into_iter().chain(cor.values[u].iter().map(|v| fmt(*v))));
    }
    t.write_csv(&root.join("correlations.csv"))?;
    Ok(cor)
}

/// R-feature CMC(1) and mAP of one fresh training run.
pub fn train_and_score(cfg: &RunConfig, threads: usize) -> Result<MetricRow> {
    let ds = dataset(cfg)?;
    let trainer = fit(cfg, &ds)?;
    let outputs = predict_parallel(&trainer.model, &ds.images, threads)?;
    let mut c = cfg.clone();
    c.eval.ranks = vec![1];
    Ok(matching_metrics(&c, &ds, &outputs, &[FeatureKind::R])?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub r1: f64,
    pub map: f64,
}

fn median_row(label: String, runs: &[MetricRow]) -> AblationRow {
    let mut r1: Vec<f64> = runs.iter().map(|r| r.cmc[0]).collect();
    let mut map: Vec<f64> = runs.iter().map(|r| r.map).collect();
    AblationRow { label, r1: median(&mut r1), map: median(&mut map) }
}

/// Train every mode over `seeds`, medians into `ablation.csv`; with
/// `fusion_dims`, also sweep the fusion width of the full model into
/// `fusion_sweep.csv`.
pub fn ablate(
    cfg: &RunConfig,
    out: &Path,
    seeds: &[u64],
    fusion_dims: &[usize],
    threads: usize,
    mut progress: impl FnMut(&str, u64, &MetricRow),
) -> Result<(Vec<AblationRow>, Vec<AblationRow>)> {
    if seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    write_resolved(cfg, out)?;
    let mut runs = Table::new(["mode", "seed", "R1", "mAP"]);
    let mut run_set = |c: &RunConfig, label: String, runs: &mut Table| -> Result<AblationRow> {
        let mut rows = Vec::new();
        for &seed in seeds {
            let mut c = c.clone();
            c.set_seed(seed);
            let r = train_and_score(&c, threads)?;
            progress(&label, seed, &r);
            runs.push([label.clone(), seed.to_string(), fmt(r.cmc[0]), fmt(r.map)]);
            rows.push(r);
        }
        Ok(median_row(label, &rows))
    };
    let mut modes = Vec::new();
    for mode in Mode::ALL {
        let mut c = cfg.clone();
        c.model.mode = mode;
        modes.push(run_set(&c, mode.as_str().to_string(), &mut runs)?);
    }
    let mut sweep = Vec::new();
    for &d in fusion_dims {
        let mut c = cfg.clone();
        c.model.mode = Mode::Mlfn;
        c.model.fusion_dim = d;
        sweep.push(run_set(&c, format!("d={}", d), &mut runs)?);
    }
    let write = |name: &str, first: &str, rows: &[AblationRow], label: &dyn Fn(&str) -> String| -> Result<()> {
        let mut t = Table::new([first, "R1", "mAP"]);
        for r in rows {
            t.push([label(&r.label), fmt(r.r1), fmt(r.map)]);
        }
        t.write_csv(&out.join(format!("{}.csv", name)))?;
        t.write_text(&out.join(format!("{}.txt", name)))
    };
    write("ablation", "mode", &modes, &|l| l.to_string())?;
    if !sweep.is_empty() {
        write("fusion_sweep", "fusion_dim", &sweep, &|l| l.trim_start_matches("d=").to_string())?;
    }
    runs.write_csv(&out.join("ablation_runs.csv"))?;
    Ok((modes, sweep))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.coords > 0
    }
}

/// Every kernel, then every trainable scalar of the configured network in
/// each mode, against finite differences in `f64`. `max_coords` samples
/// that many coordinates per parameter tensor instead of all of them.
pub fn grad_check(cfg: &RunConfig, max_coords: Option<usize>, mut progress: impl FnMut(&GradCheckLine)) -> Result<Vec<GradCheckLine>> {
    let mut lines = Vec::new();
    for (name, r) in kernel_suite(&KERNEL_FD)? {
        let l = GradCheckLine { name: format!("kernel {}", name), max_rel_err: r.max_rel_err, tolerance: KERNEL_TOLERANCE, coords: r.coords_checked };
        progress(&l);
        lines.push(l);
    }
    let fd = mlfn_core::autodiff::FdConfig { max_coords_per_tensor: max_coords, ..MODEL_FD };
    for mode in Mode::ALL {
        let mc = cfg.model_config()?.with_mode(mode);
        let r = model_gradient_check(mc, cfg.seed, 4, &fd)?;
        let l = GradCheckLine { name: format!("model {}", mode), max_rel_err: r.max_rel_err, tolerance: MODEL_TOLERANCE, coords: r.coords_checked };
        progress(&l);
        lines.push(l);
    }
    Ok(lines)
}

pub fn default_out(sub: &str) -> PathBuf {
    PathBuf::from("runs").join(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.train_ids = 4;
        c.data.test_ids = 3;
        c.data.imgs_per_view = 2;
        c.train.iterations = 6;
        c.train.batch_size = 8;
        c.train.eval_every = 3;
        c.train.target_train_acc = None;
        c.checkpoint_every = 3;
        c
    }

    #[test]
    fn threaded_prediction_matches_serial() {
        let c = tiny();
        let ds = dataset(&c).unwrap();
        let model = Mlfn::init(c.model_config().unwrap(), 1).unwrap();
        let one = predict_parallel(&model, &ds.images, 1).unwrap();
        let three = predict_parallel(&model, &ds.images, 3).unwrap();
        assert_eq!(one.features, three.features);
        assert_eq!(one.signature, three.signature);
        assert_eq!(one.logits, three.logits);
    }

    #[test]
    fn log_truncation_keeps_header_and_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        fs::write(&p, "iteration,loss,lr,train_acc\n1,2,3,4\n2,2,3,4\n3,2,3,4\n").unwrap();
        truncate_log(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "iteration,loss,lr,train_acc\n1,2,3,4\n2,2,3,4\n");
    }

    #[test]
    fn train_writes_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let s = train(&c, dir.path(), false, 1, |_| {}).unwrap();
        assert_eq!(s.iterations, 6);
        for f in [RESOLVED_NAME, CHECKPOINT, LOSS_LOG, METRICS, "metrics.txt"] {
            assert!(dir.path().join(f).exists(), "{}", f);
        }
        let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 7);
        assert_eq!(s.metrics.iter().map(|m| m.label.as_str()).collect::<Vec<_>>(), ["R", "FS", "FS-pair"]);
        assert_eq!(read_resolved(dir.path()).unwrap(), c);
    }
}
