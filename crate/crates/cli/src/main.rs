//! `slu-lab`: config-driven experiment runner for the few-shot SLU lab.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slu_core::checkpoint::load_checkpoint;
use slu_core::config::{load_config, Condition, ExperimentConfig};
use slu_core::error::SluError;
use slu_core::perturb::PerturbMode;
use slu_core::runner::{
    load_experiment, render_report, run_evaluation, run_pretrain, run_sweep, run_wer,
    validate_experiment, write_evaluation, write_sweep,
};

#[derive(Parser)]
#[command(name = "slu-lab", version, about = "Few-shot SLU robustness experiments")]
struct Cli {
    /// Worker threads for episode evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check data files, split coverage, and per-intent counts.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretrain the configured learner; one checkpoint per seed.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run seeds (repeatable); defaults to the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from this checkpoint (single seed only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a condition, paired against clean.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// clean, remove, replace, or asr.
        #[arg(long, default_value = "clean")]
        condition: String,
        /// Perturbation count for remove/replace.
        #[arg(long)]
        c: Option<usize>,
        /// Override the config's evaluation seeds (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Paired evaluation across a range of c values for one mode.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// remove or replace.
        #[arg(long)]
        mode: String,
        /// c values (repeatable); default 1..=5.
        #[arg(long)]
        c: Vec<usize>,
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render markdown tables from summary files in an output directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Hypothesis coverage and token-level WER against the reference text.
    Wer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic corpus (data, embeddings, split manifest).
    Synth {
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
        /// Intent count; split into three even groups for pretrain,
        /// validation, and test (so it should be at least 9).
        #[arg(long, default_value_t = 9)]
        intents: usize,
        #[arg(long, default_value_t = 200)]
        utterances_per_intent: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_workers(workers: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

fn override_seeds(cfg: &mut ExperimentConfig, seeds: &[u64]) {
    if !seeds.is_empty() {
        cfg.episodes.seeds = seeds.to_vec();
    }
}

/// Exit 1: validation failure. Exit 2: runtime error.
fn run(cli: Cli) -> Result<u8, SluError> {
    init_workers(cli.workers);
    match cli.cmd {
        Cmd::Validate { config } => {
            let cfg = load_config(&config)?;
            let report = validate_experiment(&cfg)?;
            for line in &report.summary {
                println!("{line}");
            }
            if report.ok() {
                println!("ok");
                Ok(0)
            } else {
                for problem in &report.problems {
                    eprintln!("problem: {problem}");
                }
                Ok(1)
            }
        }
        Cmd::Pretrain {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let cfg = load_config(&config)?;
            let seeds = if seed.is_empty() {
                cfg.episodes.seeds.clone()
            } else {
                seed
            };
            if checkpoint.is_some() && seeds.len() != 1 {
                return Err(SluError::Config(
                    "--checkpoint resume needs exactly one --seed".into(),
                ));
            }
            let data = load_experiment(&cfg)?;
            for s in seeds {
                let path = run_pretrain(&cfg, &data, s, &out, checkpoint.as_deref())?;
                println!("seed {s}: wrote {}", path.display());
            }
            Ok(0)
        }
        Cmd::Evaluate {
            config,
            checkpoint,
            condition,
            c,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            override_seeds(&mut cfg, &seed);
            let condition = Condition::parse(&condition, c)?;
            let data = load_experiment(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let eval = run_evaluation(&cfg, &data, &ckpt, condition)?;
            let (csv, json) = write_evaluation(&out, &eval)?;
            println!("wrote {}", csv.display());
            println!("wrote {}", json.display());
            let s = &eval.summary;
            println!(
                "{} {}: ic {:.4}±{:.4}",
                s.learner, s.condition, s.clean.ic.mean, s.clean.ic.std
            );
            if let Some(diff) = &s.diff {
                println!("paired |diff| ic {:.4}±{:.4}", diff.ic.mean, diff.ic.std);
            }
            Ok(0)
        }
        Cmd::Sweep {
            config,
            checkpoint,
            mode,
            c,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            override_seeds(&mut cfg, &seed);
            let mode = match mode.as_str() {
                "remove" => PerturbMode::Remove,
                "replace" => PerturbMode::Replace,
                other => {
                    return Err(SluError::Config(format!(
                        "unknown mode {other:?} (expected remove or replace)"
                    )))
                }
            };
            let c_values = if c.is_empty() { vec![1, 2, 3, 4, 5] } else { c };
            let data = load_experiment(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let report = run_sweep(&cfg, &data, &ckpt, mode, &c_values)?;
            let path = write_sweep(&out, &report)?;
            println!("wrote {}", path.display());
            for row in &report.rows {
                println!(
                    "c={}: |diff ic| {:.4}±{:.4}, drop ic {:+.4}",
                    row.c, row.mean_abs_diff_ic, row.std_ic, row.mean_drop_ic
                );
            }
            println!("monotone (ic): {}", report.monotone_ic);
            Ok(0)
        }
        Cmd::Report { out } => {
            let md = render_report(&out)?;
            let path = out.join("report.md");
            std::fs::write(&path, &md).map_err(|e| SluError::io(&path, e))?;
            print!("{md}");
            println!("wrote {}", path.display());
            Ok(0)
        }
        Cmd::Synth {
            out,
            intents,
            utterances_per_intent,
            seed,
        } => {
            let cfg = slu_core::synth::SynthConfig {
                n_intents: intents,
                utterances_per_intent,
                seed,
                ..Default::default()
            };
            slu_core::synth::write_to_dir(&cfg, &out)?;
            // Contiguous thirds; trailing intents go to the test split.
            let third = intents / 3;
            let group = |range: std::ops::Range<usize>| {
                range
                    .map(|i| format!("\"intent{i}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let manifest = format!(
                "{{\"pretrain\": [{}],\n \"validation\": [{}],\n \"test\": [{}]}}\n",
                group(0..third),
                group(third..2 * third),
                group(2 * third..intents)
            );
            let path = out.join("splits.json");
            std::fs::write(&path, manifest).map_err(|e| SluError::io(&path, e))?;
            println!("wrote {}", out.join("data.jsonl").display());
            println!("wrote {}", out.join("embeddings.txt").display());
            println!("wrote {}", path.display());
            Ok(0)
        }
        Cmd::Wer { config } => {
            let cfg = load_config(&config)?;
            let report = run_wer(&cfg)?;
            println!(
                "covered {} utterances; {} edits over {} reference tokens; WER {:.2}%",
                report.covered,
                report.edits,
                report.ref_tokens,
                100.0 * report.wer()
            );
            if report.missing_ids.is_empty() {
                Ok(0)
            } else {
                eprintln!(
                    "missing hypotheses for {} ids: {}",
                    report.missing_ids.len(),
                    report.missing_ids.join(", ")
                );
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
