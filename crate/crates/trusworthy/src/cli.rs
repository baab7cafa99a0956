//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 training,
//! 6 filesystem. `TRUSWORTHY_DEVICE` selects the compute device.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{exit, Result};
use crate::pipeline::Run;

pub const DEVICE_ENV: &str = "TRUSWORTHY_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "trusworthy", version, about = "Uncertainty-aware prostate cancer detection from micro-ultrasound")]
pub struct Cli {
    /// TOML config layered over the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set mil.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set outdir=DIR`.
    #[arg(long, global = true)]
    pub outdir: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set preset=NAME` (`desk` or `paper`).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory; defaults to `<outdir>/generate/dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fold plan; defaults to `<outdir>/split/splits.json`.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Restrict to one fold; all folds by default.
    #[arg(long)]
    pub fold: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a phantom dataset.
    Generate {
        #[arg(long)]
        n_patients: Option<usize>,
        #[arg(long)]
        cores_per_patient: Option<usize>,
        #[arg(long)]
        prevalence: Option<f64>,
        /// Class separation of the texture statistics; 0 removes all signal.
        #[arg(long)]
        separability: Option<f64>,
        /// Number of synthetic acquisition centres.
        #[arg(long)]
        centers: Option<usize>,
        /// Per-centre texture offset.
        #[arg(long)]
        center_shift: Option<f64>,
    },
    /// Select bag ROI positions for every core.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the resampled patches.
        #[arg(long)]
        materialize: bool,
    },
    /// Patient-level train/val/test folds.
    Split {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Self-supervised encoder pretraining.
    Pretrain(FoldArgs),
    /// Supervised ROI classifier finetuning.
    FinetuneRoi(FoldArgs),
    /// Single bag-classifier baseline.
    TrainMil(FoldArgs),
    /// Undersampled deep ensemble.
    TrainEnsemble(FoldArgs),
    /// Out-of-fold metrics, rejection curves and plots.
    Evaluate(FoldArgs),
    /// Uncertainty-gated sliding-window heatmaps.
    Heatmap {
        #[command(flatten)]
        fold: FoldArgs,
        /// Core to render; repeatable. Defaults to the first test core.
        #[arg(long = "core")]
        cores: Vec<String>,
    },
    /// Every stage end to end on the phantom.
    ReproduceDesk,
    /// Print the resolved configuration.
    ShowConfig,
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(device) = std::env::var(DEVICE_ENV) {
        out.push(format!("device={device}"));
    }
    if let Some(p) = &cli.preset {
        out.push(format!("preset={p}"));
    }
    if let Some(d) = &cli.outdir {
        out.push(format!("outdir=\"{}\"", d.display().to_string().replace('\\', "\\\\").replace('"', "\\\"")));
    }
    if let Some(s) = cli.seed {
        out.push(format!("seed={s}"));
    }
    if let Command::Generate {
        n_patients,
        cores_per_patient,
        prevalence,
        separability,
        centers,
        center_shift,
    } = &cli.command
    {
        let fields = [
            ("n_patients", n_patients.map(|v| v.to_string())),
            ("cores_per_patient", cores_per_patient.map(|v| v.to_string())),
            ("cancer_prevalence", prevalence.map(|v| format!("{v:?}"))),
            ("separability", separability.map(|v| format!("{v:?}"))),
            ("n_centers", centers.map(|v| v.to_string())),
            ("center_shift", center_shift.map(|v| format!("{v:?}"))),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                out.push(format!("phantom.{k}={v}"));
            }
        }
    }
    out.extend(cli.overrides.iter().cloned());
    out
}

fn bind(run: Run, data: &DataArgs) -> Run {
    match &data.data {
        Some(d) => run.with_data_dir(d),
        None => run,
    }
}

fn bind_fold(run: Run, args: &FoldArgs) -> Run {
    let run = bind(run, &args.data);
    match &args.split_file {
        Some(p) => run.with_split_file(p),
        None => run,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli))?;
    let run = Run::new(cfg)?;
    match &cli.command {
        Command::Generate { .. } => {
            let s = run.generate()?;
            println!(
                "generated {} cores ({} cancer) from {} patients into {}",
                s.n_cores,
                s.n_cancer,
                s.n_patients,
                run.data_dir().display()
            );
        }
        Command::Preprocess { data, materialize } => {
            let n = bind(run, data).preprocess(*materialize)?;
            println!("bag positions written for {n} cores");
        }
        Command::Split { data } => {
            let plan = bind(run, data).split()?;
            println!("{} folds ({}), no patient leakage", plan.folds.len(), plan.scheme);
        }
        Command::Pretrain(f) => bind_fold(run, f).pretrain(f.fold.as_deref())?,
        Command::FinetuneRoi(f) => bind_fold(run, f).finetune_roi(f.fold.as_deref())?,
        Command::TrainMil(f) => bind_fold(run, f).train_mil(f.fold.as_deref())?,
        Command::TrainEnsemble(f) => bind_fold(run, f).train_ensemble(f.fold.as_deref())?,
        Command::Evaluate(f) => {
            let rep = bind_fold(run, f).evaluate(f.fold.as_deref())?;
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.3}", x));
            println!(
                "ensemble AUROC {} ECE {:.4} | single AUROC {} ECE {:.4}",
                fmt(rep.ensemble.pooled.auroc),
                rep.ensemble.pooled.ece,
                fmt(rep.single.pooled.auroc),
                rep.single.pooled.ece
            );
        }
        Command::Heatmap { fold, cores } => {
            for p in bind_fold(run, fold).heatmap(fold.fold.as_deref(), cores)? {
                println!("{}", p.display());
            }
        }
        Command::ReproduceDesk => {
            let s = run.reproduce()?;
            let c = &s.check;
            println!(
                "AUROC {:?} ({}), rejection monotone ({}), ECE ensemble {:.4} <= single {:.4} ({})",
                c.auroc,
                pass(c.auroc_pass),
                pass(c.monotone_pass),
                c.ece_ensemble,
                c.ece_single,
                pass(c.ece_pass)
            );
        }
        Command::ShowConfig => print!("{}", run.config_toml),
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
