//! `sremtl` command line: pretrain, finetune, evaluate, synth-data.
//!
//! Exit codes: 0 success, 1 validation error (config, parameters, formats),
//! 2 I/O error, 3 runtime numeric failure (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sremtl_core::checkpoint;
use sremtl_core::config::{load_config, seed_override_from_env, RunConfig};
use sremtl_core::data::{synth_dataset, write_dataset, TaskId};
use sremtl_core::error::Error;
use sremtl_core::pipeline::{
    evaluate_run, restore_for_eval, run_finetune, run_pretrain, FinetuneRun, SreInit,
};
use sremtl_core::trainer::write_metrics;

#[derive(Parser)]
#[command(
    name = "sremtl",
    about = "Self-supervised speech representations with multi-task keyword-spotting and speaker-verification heads",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the representation extractor on unlabeled audio and write an
    /// SRE checkpoint.
    Pretrain {
        #[arg(short, long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(short, long)]
        out: PathBuf,
        /// Metrics log path (defaults to <out>.metrics.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune the configured task heads (round-robin when multiple tasks
    /// are declared) and write a combined checkpoint.
    Finetune {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Pretrained SRE checkpoint to start from.
        #[arg(long, conflicts_with = "random_init")]
        sre_checkpoint: Option<PathBuf>,
        /// Start from a randomly initialized SRE instead of a checkpoint.
        #[arg(long, conflicts_with = "freeze_sre")]
        random_init: bool,
        /// Keep the SRE frozen for the entire run.
        #[arg(long)]
        freeze_sre: bool,
        /// Restrict training to one task ("kws" or "sv").
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: Top-1 accuracy (kws) or trial-pair EER (sv).
    Evaluate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Results file of metric=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-trial score dump ("score label" per line, sv only).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Materialize the configured synthetic dataset as WAV trees plus a
    /// trial list.
    SynthData {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_task(name: &str) -> Result<TaskId, Error> {
    match name {
        "kws" => Ok(TaskId::Kws),
        "sv" => Ok(TaskId::Sv),
        other => Err(Error::config(format!(
            "task must be 'kws' or 'sv', got '{other}'"
        ))),
    }
}

fn effective_seed(cfg: &RunConfig) -> Result<u64, Error> {
    Ok(seed_override_from_env()?.unwrap_or(cfg.seed))
}

fn metrics_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".metrics.csv");
        out.with_file_name(name)
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Pretrain {
            config,
            out,
            metrics,
        } => {
            let (cfg, hash) = load_config(&config)?;
            let seed = effective_seed(&cfg)?;
            let run = run_pretrain(&cfg, hash, seed)?;
            checkpoint::save(&out, &run.checkpoint)?;
            write_metrics(&metrics_path(&out, metrics), &run.outcome.records, hash)?;
            let last = run.outcome.records.last().expect("at least one step");
            println!(
                "pretrain: {} steps, final loss {:.6}, checkpoint {}",
                run.outcome.records.len(),
                last.loss,
                out.display()
            );
            Ok(())
        }
        Cmd::Finetune {
            config,
            out,
            sre_checkpoint,
            random_init,
            freeze_sre,
            task,
            metrics,
        } => {
            let (mut cfg, hash) = load_config(&config)?;
            let seed = effective_seed(&cfg)?;
            if random_init {
                cfg.train.ablation = "random_sre".into();
            } else if freeze_sre {
                cfg.train.ablation = "frozen_sre".into();
            }
            let task_filter = task.as_deref().map(parse_task).transpose()?;
            let loaded;
            let init = if random_init {
                SreInit::Random
            } else {
                let path = sre_checkpoint.ok_or_else(|| {
                    Error::config("finetune needs --sre-checkpoint or --random-init")
                })?;
                loaded = checkpoint::load(&path)?;
                SreInit::Checkpoint(&loaded)
            };
            let run: FinetuneRun = run_finetune(&cfg, hash, seed, init, task_filter)?;
            checkpoint::save(&out, &run.checkpoint)?;
            write_metrics(&metrics_path(&out, metrics), &run.outcome.records, hash)?;
            println!(
                "finetune: {} updates over {} tasks, checkpoint {}",
                run.outcome.update_log.len(),
                run.bindings.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Evaluate {
            config,
            checkpoint: ckpt_path,
            task,
            out,
            scores,
        } => {
            let (cfg, _) = load_config(&config)?;
            let seed = effective_seed(&cfg)?;
            let task = parse_task(&task)?;
            let data = checkpoint::load(&ckpt_path)?;
            let (model, bindings, bundle) = restore_for_eval(&cfg, seed, &data, task)?;
            let mut run = FinetuneRun {
                outcome: Default::default(),
                model,
                bindings,
                checkpoint: data,
            };
            let (metric, value, trials) = evaluate_run(&mut run, &bundle, task)?;
            println!("{metric}={value:.6}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{metric}={value:.6}\n"))?;
            }
            if let Some(path) = scores {
                let mut dump = String::new();
                for t in &trials {
                    dump.push_str(&format!(
                        "{:.9} {}\n",
                        t.score,
                        if t.same_speaker { 1 } else { 0 }
                    ));
                }
                std::fs::write(&path, dump)?;
            }
            Ok(())
        }
        Cmd::SynthData { config, out_dir } => {
            let (cfg, _) = load_config(&config)?;
            let seed = effective_seed(&cfg)?;
            let spec = cfg.data.synthetic_spec().ok_or_else(|| {
                Error::config("synth-data requires a synthetic data section in the config")
            })?;
            let data = synth_dataset(&spec, seed)?;
            write_dataset(&out_dir, &data)?;
            println!(
                "synth-data: {} kws train / {} kws test / {} sv train clips, {} trial pairs -> {}",
                data.kws_train.len(),
                data.kws_test.len(),
                data.sv_train.len(),
                data.trial_pairs.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    sremtl_core::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
