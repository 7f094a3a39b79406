use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eproto::data::{import_pgm_tree, write_synthetic, SyntheticTaskSpec};
use eproto::experiment::{
    parse_grid, run_eval, run_sweep, run_train, ExperimentConfig, StageSelection, SweepParam,
};
use eproto::Result;

/// Few-shot classification with prototypes, relative features and learned
/// class variances.
#[derive(Parser)]
#[command(name = "eproto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a tree of PGM images (<src>/<split>/<class>/*.pgm) into a dataset.
    ImportPgm {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "images")]
        name: String,
        /// Add 90/180/270 degree rotations of every class as new classes.
        #[arg(long)]
        rotate4: bool,
    },
    /// Train one or both stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1, 2 or both
        #[arg(long, default_value = "both")]
        stage: String,
        /// Continue from the last checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many episodes, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a trained model on the novel classes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda_rho, lambda_r, t_h, train_way or n_query
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        grid: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { spec, out } => {
            let spec = SyntheticTaskSpec::read(&spec)?;
            let manifest = write_synthetic(&spec, &out)?;
            println!(
                "wrote {} base, {} validation, {} novel classes to {}",
                manifest.splits.base.len(),
                manifest.splits.validation.len(),
                manifest.splits.novel.len(),
                out.display()
            );
        }
        Command::ImportPgm {
            src,
            out,
            name,
            rotate4,
        } => {
            let manifest = import_pgm_tree(&src, &out, &name, rotate4)?;
            println!(
                "imported {}x{} images: {} base, {} validation, {} novel classes",
                manifest.height,
                manifest.width,
                manifest.splits.base.len(),
                manifest.splits.validation.len(),
                manifest.splits.novel.len()
            );
        }
        Command::Train {
            config,
            stage,
            resume,
            stop_after,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let stages: StageSelection = stage.parse()?;
            let outcome = run_train(&cfg, stages, resume, stop_after)?;
            for (name, report) in [("stage 1", &outcome.stage1), ("stage 2", &outcome.stage2)] {
                if let Some(r) = report {
                    let last = r.trace.last();
                    println!(
                        "{name}: {} episodes run, last loss {:.4}, best validation {}",
                        r.episodes_run,
                        last.map_or(f64::NAN, |t| t.loss),
                        r.best_validation
                            .map_or("n/a".to_string(), |b| format!("{b:.4}"))
                    );
                }
            }
            if outcome.completed {
                println!(
                    "model written to {}",
                    cfg.output_dir.join("model.ckpt").display()
                );
            } else {
                println!("stopped early; continue with --resume");
            }
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_eval(&cfg, checkpoint.as_deref(), episodes, seed)?;
            println!(
                "{}-way {}-shot: {:.2}% +- {:.2}% over {} episodes",
                report.n_way,
                report.k_shot,
                100.0 * report.mean_acc,
                100.0 * report.ci95,
                report.n_episodes
            );
        }
        Command::Sweep {
            config,
            param,
            grid,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let param: SweepParam = param.parse()?;
            let grid = parse_grid(&grid)?;
            let rows = run_sweep(&cfg, param, &grid)?;
            println!("{},mean_acc,ci95", param.name());
            for r in rows {
                println!("{},{:.4},{:.4}", r.value, r.mean_acc, r.ci95);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
