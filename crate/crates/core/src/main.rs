use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use patchgd::commands::{
    cmd_eval, cmd_generate, cmd_memreport, cmd_sweep, cmd_train, Overrides, RunConfig, RunManifest, SweepAxis,
    TrainOptions, MEMREPORT_FILE, SWEEP_FILE,
};
use patchgd::memcost::{human_bytes, write_csv, ReportTable};
use patchgd::trainer::Mode;

#[derive(Parser)]
#[command(name = "patchgd", version, about = "Patch gradient descent on large images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML file with [data], [model], [train] and [memreport] tables.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Modeled memory budget. `train` refuses to start above it; `memreport`
    /// lists the largest batch per mode that fits.
    #[arg(long, value_name = "BYTES")]
    enforce_budget: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            epochs: None,
        }
    }

    fn config(&self) -> anyhow::Result<RunConfig> {
        Ok(RunConfig::load_or_default(self.config.as_deref())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic digit-sum dataset (`--seed` sets the data seed).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write the manifest, run log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Replay a run from its manifest instead of a config.
        #[arg(long, value_name = "PATH", conflicts_with_all = ["config", "seed", "mode", "epochs"])]
        manifest: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint of the run in `--out` and append to its run log.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to best.ckpt in the run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the run's validation data.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// One training run per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// sampling, max_sampled, epsilon or patch_size
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Modeled memory of GD, GD-extended and PatchGD side by side.
    Memreport {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let mut cfg = common.config()?;
            common.overrides().apply_data(&mut cfg);
            let out = common.out.clone().unwrap_or_else(|| cfg.data.root.clone());
            let s = cmd_generate(&cfg, &out)?;
            println!("wrote {} train and {} val samples to {}", s.train, s.val, out.display());
            println!("label counts: {:?}", s.label_counts);
        }
        Command::Train {
            common,
            manifest,
            resume,
            epochs,
        } => {
            let manifest = match manifest {
                Some(path) => {
                    let mut m = RunManifest::load(&path)?;
                    if let Some(out) = common.out.clone() {
                        m.out_dir = out;
                    }
                    m
                }
                None => {
                    let mut cfg = common.config()?;
                    Overrides {
                        epochs,
                        ..common.overrides()
                    }
                    .apply_train(&mut cfg);
                    RunManifest::new(cfg, common.out.clone())?
                }
            };
            let s = cmd_train(
                &manifest,
                &TrainOptions {
                    resume,
                    enforce_budget: common.enforce_budget,
                },
            )
            .with_context(|| format!("run {}", manifest.run_id))?;
            println!("run {} -> {}", s.run_id, s.out_dir.display());
            println!("epochs {}  modeled peak {}", s.epochs, human_bytes(s.peak_bytes));
            if let Some(r) = &s.last_train {
                println!(
                    "train  loss {:.4}  accuracy {:.4}  qwk {:.4}",
                    r.loss, r.accuracy, r.qwk
                );
            }
            if let Some(r) = &s.last_val {
                println!(
                    "val    loss {:.4}  accuracy {:.4}  qwk {:.4}",
                    r.loss, r.accuracy, r.qwk
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let dir = common.out.clone().context("eval needs the run directory via --out")?;
            let r = cmd_eval(&dir, checkpoint.as_deref(), data.as_deref())?;
            println!(
                "{} epoch {}: loss {:.4}  accuracy {:.4}  qwk {:.4}",
                r.split, r.epoch, r.loss, r.accuracy, r.qwk
            );
        }
        Command::Sweep { common, axis, values } => {
            let mut cfg = common.config()?;
            common.overrides().apply_train(&mut cfg);
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("sweeps").join(axis.name()));
            let rows = cmd_sweep(&cfg, axis, &values, &out)?;
            println!(
                "{:<10} {:>9} {:>12} {:>8} {:>10} {:>9} {:>8}  status",
                axis.name(),
                "sampling",
                "max_sampled",
                "epsilon",
                "patch_size",
                "accuracy",
                "qwk"
            );
            for r in &rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<10} {:>9} {:>12} {:>8} {:>10} {:>9} {:>8}  {}",
                    r.value,
                    r.sampling,
                    r.max_sampled,
                    r.epsilon,
                    r.patch_size,
                    f(r.accuracy),
                    f(r.qwk),
                    r.status
                );
            }
            println!("wrote {}", out.join(SWEEP_FILE).display());
        }
        Command::Memreport { common } => {
            let mut cfg = common.config()?;
            common.overrides().apply_train(&mut cfg);
            let r = cmd_memreport(&cfg, common.enforce_budget)?;
            for chunk in r.reports.chunks(3) {
                println!("{}", ReportTable(chunk));
            }
            for f in &r.feasible {
                println!("max feasible batch  {:<12} {}x{}: {}", f.mode, f.size, f.size, f.batch);
            }
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                let path = out.join(MEMREPORT_FILE);
                write_csv(&r.reports, std::fs::File::create(&path)?)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
