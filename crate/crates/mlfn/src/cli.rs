//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use mlfn_core::eval::FeatureKind;
use mlfn_core::model::Mode;

use crate::config::{parse_list, RunConfig, RESOLVED_NAME};
use crate::error::{CliError, Result};
use crate::report::{fmt, Table};
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "mlfn", version, about = "Multi-level factorisation networks for person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// INI configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data, initialisation and batching.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Architecture variant.
    #[arg(long, value_name = "mlfn|nofusion|resnext|resnet")]
    pub mode: Option<Mode>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset as PPM files plus manifest.csv.
    GenData(#[command(flatten)] Common),
    /// Train a network; writes checkpoints, a loss log and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Override the iteration budget.
        #[arg(long, value_name = "N")]
        iterations: Option<u64>,
    },
    /// Cross-view matching metrics of a trained run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory holding the checkpoint (default: --out).
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        /// Comma-separated feature kinds: R, FS, YN.
        #[arg(long, value_name = "R|FS|YN")]
        features: Option<String>,
        /// Comma-separated CMC ranks.
        #[arg(long, value_name = "LIST")]
        ranks: Option<String>,
    },
    /// Finite-difference verification of every kernel and network gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Check this many coordinates per parameter tensor instead of all.
        #[arg(long, value_name = "N")]
        sample: Option<usize>,
    },
    /// Top and bottom activating images and attribute correlations per unit.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
    },
    /// Linear attribute probes on a feature kind.
    ProbeAttrs {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[arg(long, value_name = "R|FS|YN")]
        features: Option<String>,
    },
    /// Compare all four architecture variants, optionally sweeping d.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; medians are reported.
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// Comma-separated fusion widths for the full model.
        #[arg(long, value_name = "LIST")]
        fusion_dims: Option<String>,
    },
}

fn parse_kinds(s: &str) -> Result<Vec<FeatureKind>> {
    s.split(',').map(|k| k.trim().parse::<FeatureKind>().map_err(|e| CliError::Usage(e.to_string()))).collect()
}

/// Load `--config`, else the run directory's resolved config, else the
/// defaults; then apply `--seed` and `--mode`.
fn resolve(common: &Common, run_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, run_dir.map(|d| d.join(RESOLVED_NAME))) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = common.mode {
        cfg.model.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, sub: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| run::default_out(sub))
}

pub fn execute(cli: Cli) -> Result<()> {
    let threads = run::threads_from_env()?;
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None)?;
            let out = out_dir(&common, "data");
            let n = run::gen_data(&cfg, &out)?;
            println!("wrote {} images to {}", n, out.display());
        }
        Command::Train { common, resume, iterations } => {
            let out = out_dir(&common, "train");
            let mut cfg = resolve(&common, None)?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let s = run::train(&cfg, &out, resume, threads, |r| {
                if r.iteration % 100 == 0 {
                    eprintln!("iteration {:>6}  loss {:.4}  lr {:.2e}  batch acc {:.3}", r.iteration, r.loss, r.lr, r.train_acc);
                }
            })?;
            if let Some(from) = s.resumed_from {
                eprintln!("resumed from iteration {}", from);
            }
            println!("trained {} iterations; train accuracy {}", s.iterations, s.train_acc.map_or_else(|| "n/a".into(), fmt));
            print!("{}", Table::metrics("features", &s.metrics).to_text());
        }
        Command::Eval { common, run, features, ranks } => {
            let out = out_dir(&common, "train");
            let run_dir = run.unwrap_or_else(|| out.clone());
            let mut cfg = resolve(&common, Some(&run_dir))?;
            if let Some(r) = ranks {
                cfg.eval.ranks = parse_list(&r)?;
            }
            let kinds = match features {
                Some(f) => parse_kinds(&f)?,
                None => vec![cfg.eval.features],
            };
            let rows = run::eval(&cfg, &run_dir, &out, &kinds, threads)?;
            print!("{}", Table::metrics("features", &rows).to_text());
        }
        Command::GradCheck { common, sample } => {
            let cfg = resolve(&common, None)?;
            let lines = run::grad_check(&cfg, sample, |l| {
                println!("{:<32} max rel err {:.3e} (bound {:.0e}, {} coords)  {}", l.name, l.max_rel_err, l.tolerance, l.coords, if l.passed() { "ok" } else { "FAIL" });
            })?;
            let failed: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Verification(failed.join(", ")));
            }
        }
        Command::Inspect { common, run } => {
            let out = out_dir(&common, "train");
            let run_dir = run.unwrap_or_else(|| out.clone());
            let cfg = resolve(&common, Some(&run_dir))?;
            let cor = run::inspect(&cfg, &run_dir, &out, threads)?;
            for (a, name) in cor.attributes.iter().enumerate() {
                let u = cor.best_unit(a);
                println!("{:<8} best unit {}_{} (association {:.3})", name, cor.units[u].0, cor.units[u].1, cor.values[u][a]);
            }
            println!("wrote {}", out.join("inspect").display());
        }
        Command::ProbeAttrs { common, run, features } => {
            let out = out_dir(&common, "train");
            let run_dir = run.unwrap_or_else(|| out.clone());
            let cfg = resolve(&common, Some(&run_dir))?;
            let kind = match features {
                Some(f) => f.parse().map_err(|e: mlfn_core::Error| CliError::Usage(e.to_string()))?,
                None => FeatureKind::Fs,
            };
            let r = run::probe_attrs(&cfg, &run_dir, &out, kind, threads)?;
            print!("{}", std::fs::read_to_string(out.join("probe.txt")).map_err(CliError::io(out.join("probe.txt")))?);
            for s in &r.skipped {
                println!("skipped constant attribute {}", s);
            }
        }
        Command::Ablate { common, seeds, fusion_dims } => {
            let out = out_dir(&common, "ablate");
            let cfg = resolve(&common, None)?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s.split(',').map(|v| v.trim().parse().map_err(|_| CliError::Usage(format!("bad seed `{}`", v)))).collect::<Result<_>>()?,
                None => vec![cfg.seed],
            };
            let dims = fusion_dims.map(|d| parse_list(&d)).transpose()?.unwrap_or_default();
            let (modes, sweep) = run::ablate(&cfg, &out, &seeds, &dims, threads, |label, seed, r| {
                eprintln!("{:<10} seed {:<4} R1 {:.4}  mAP {:.4}", label, seed, r.cmc[0], r.map);
            })?;
            for (name, rows) in [("ablation", &modes), ("fusion_sweep", &sweep)] {
                if !rows.is_empty() {
                    print!("{}", std::fs::read_to_string(out.join(format!("{}.txt", name))).map_err(CliError::io(&out))?);
                }
            }
        }
    }
    Ok(())
}

/// Parse, run and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { CliError::USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
