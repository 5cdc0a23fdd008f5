//! Command-line driver: data generation, training, evaluation, ablation and
//! gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mmfuse::data::{load_manifest, manifest_path, puzzle_split, synth_puzzles, write_dataset, PuzzleInstance, Split};
use mmfuse::harness::{
    ablate, evaluate, load_model, model_gradchecks, op_gradchecks, save_model, train_with, GridConfig, RunConfig,
};

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Two-tower cross-attention puzzle classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic counting-puzzle dataset (manifest.tsv + images/).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        roots: u32,
        #[arg(long)]
        per_root: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save its best-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every model of a grid; write a CSV report.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check the composed tiny model in every configuration.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_data(path: &std::path::Path) -> anyhow::Result<Vec<PuzzleInstance>> {
    let data = load_manifest(&manifest_path(path))?;
    if data.is_empty() {
        bail!("{} contains no puzzles", path.display());
    }
    Ok(data)
}

fn read(path: &std::path::Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            roots,
            per_root,
            out,
        } => {
            let data = synth_puzzles(seed, roots, per_root)?;
            let path = write_dataset(&out, &data)?;
            println!("wrote {} puzzles to {}", data.len(), path.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::from_toml(&read(&config)?)?;
            let data = load_data(&data)?;
            let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
            let split = puzzle_split(&roots, cfg.split_seed)?;
            let (tr, va, te) = split.counts();
            println!("roots: {tr} train / {va} val / {te} test");
            let outcome = train_with(&cfg.model, &cfg.train, &data, &split, |m| {
                println!(
                    "epoch {:>3}  train_loss {:.4}  val_acc {:.4}",
                    m.epoch, m.train_loss, m.val_accuracy
                )
            })?;
            if let Some(last) = outcome.pretrain_metrics.last() {
                println!(
                    "vision warm-start: {} matching epochs, final val_acc {:.4}",
                    outcome.pretrain_metrics.len(),
                    last.val_accuracy
                );
            }
            save_model(&outcome.model, cfg.split_seed, &out)?;
            println!(
                "best val_acc {:.4} at epoch {}; saved {}",
                outcome.best_val_accuracy(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Eval { ckpt, data, split } => {
            let which: Split = split.parse()?;
            let (model, split_seed) = load_model(&ckpt)?;
            let data = load_data(&data)?;
            let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
            let spec = puzzle_split(&roots, split_seed)?;
            let subset = spec.select(&data, which);
            let acc = evaluate(&model, subset.iter().copied())?;
            println!("{split} accuracy {acc:.4} over {} puzzles", subset.len());
        }
        Command::Ablate { grid, data, report } => {
            let grid = GridConfig::from_toml(&read(&grid)?)?;
            let data = load_data(&data)?;
            let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
            let split = puzzle_split(&roots, grid.split_seed)?;
            let result = ablate(&grid.model, &grid.train, &data, &split, |row| {
                eprintln!("done: {} {} {} {}", row.vision, row.text, row.align, row.pool)
            })?;
            std::fs::write(&report, result.to_csv()).with_context(|| format!("writing {}", report.display()))?;
            print!("{}", result.to_table());
        }
        Command::Gradcheck { full, seed } => {
            let mut worst: f64 = 0.0;
            for (name, err) in op_gradchecks(seed)? {
                println!("{name:<16} {err:.3e}");
                worst = worst.max(err);
            }
            if full {
                for (name, err) in model_gradchecks(seed)? {
                    println!("{name:<32} {err:.3e}");
                    worst = worst.max(err);
                }
            }
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                bail!("gradient check failed: {worst:.3e} >= 1e-4");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
