use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mammil::checkpoint::{load_checkpoint, save_checkpoint};
use mammil::data::{Manifest, Split};
use mammil::diagnostics::{bench_scan, gradient_suite, Scope};
use mammil::model::build_model;
use mammil::ssm::ScanDims;
use mammil::synth::{synth_generate, SynthConfig, SynthTask};
use mammil::train::{evaluate, prepare, train_with, RunConfig};
use mammil::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mammil",
    version,
    about = "Topology-aware state-space multiple instance learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (bag files plus manifest.json).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 350)]
        n_bags: usize,
        #[arg(long, default_value = "classification")]
        task: SynthTask,
        #[arg(long, default_value_t = 3.0)]
        witness_shift: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, early-stopping on val; writes model.ckpt and history.json.
    Train {
        /// JSON run config with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split and print the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "primitives")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the selective scan at several sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "16384,32768")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        #[arg(long, default_value_t = 32)]
        state_dim: usize,
    },
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            seed,
            n_bags,
            task,
            witness_shift,
            out,
        } => {
            let cfg = SynthConfig {
                seed,
                n_bags,
                task,
                witness_shift,
                ..Default::default()
            };
            let manifest = synth_generate(&cfg, &out)?;
            println!("wrote {} bags to {}", manifest.bags.len(), out.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            quiet,
        } => {
            let cfg = read_config(config.as_deref())?;
            let manifest = Manifest::load(&manifest)?;
            if manifest.dim != cfg.model.input_dim {
                return Err(Error::Config(format!(
                    "model input_dim {} but the manifest declares {}",
                    cfg.model.input_dim, manifest.dim
                )));
            }
            let mut model = build_model(&cfg.model)?;
            eprintln!("parameters: {}", model.num_parameters());
            let train_set = prepare(manifest.load_split(Split::Train)?, &model)?;
            let val_set = prepare(manifest.load_split(Split::Val)?, &model)?;
            let history = train_with(&mut model, &train_set, &val_set, &cfg.train, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3} train_loss={:.6} val_loss={:.6}{}",
                        r.epoch,
                        r.train_loss,
                        r.val_loss.unwrap_or(f64::NAN),
                        if r.improved { " *" } else { "" }
                    );
                }
            })?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            save_checkpoint(&out.join("model.ckpt"), &model)?;
            write(
                &out.join("history.json"),
                serde_json::to_string_pretty(&history).expect("history serialises") + "\n",
            )?;
            println!("best_epoch={} epochs_run={}", history.best_epoch, history.epochs.len());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            report,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let manifest = Manifest::load(&manifest)?;
            let text = evaluate(&model, manifest.load_split(split)?)?.report.to_text();
            print!("{text}");
            if let Some(path) = report {
                write(&path, &text)?;
            }
        }
        Command::Gradcheck { scope, seed } => {
            let entries = gradient_suite(scope, seed)?;
            for e in &entries {
                println!(
                    "{:<32} max_rel_error={:.3e} tolerance={:.0e} {}",
                    e.name,
                    e.max_rel_error,
                    e.tolerance,
                    if e.passed() { "PASS" } else { "FAIL" }
                );
            }
            return Ok(entries.iter().all(|e| e.passed()));
        }
        Command::BenchScan {
            lengths,
            reps,
            heads,
            head_dim,
            state_dim,
        } => {
            let dims = ScanDims {
                heads,
                head_dim,
                state_dim,
            };
            let timings = bench_scan(&lengths, dims, reps.max(1), 0)?;
            for (i, t) in timings.iter().enumerate() {
                let ratio = if i > 0 {
                    t.median() / timings[i - 1].median()
                } else {
                    1.0
                };
                println!(
                    "length={} median_seconds={:.6} ratio_to_previous={:.3}",
                    t.length,
                    t.median(),
                    ratio
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // a failed gradient check is a numeric failure
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
