//! Experiment runner: data loading, config validation, resumable
//! pretraining, paired clean/perturbed evaluation, perturbation sweeps,
//! and report rendering. Evaluation over episodes is data-parallel when the
//! `parallel` feature is on; outputs are identical either way.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Condition, ExperimentConfig};
use crate::corpus::{build_splits, load_dataset, Dataset, SplitManifest};
use crate::encoder::{init_params, load_embeddings, EmbeddingProvider};
use crate::episode::{sample_episode, EpisodeSeed, Phase};
use crate::error::SluError;
use crate::learners::{adapt_and_evaluate, pretrain, LearnerKind, TrainState};
use crate::metrics::{
    aggregate, aggregate_optional, paired_diff, paired_drop, Aggregate, EpisodeMetrics,
    ScoredEpisode,
};
use crate::perturb::{
    apply_modality_mismatch, dataset_wer, remove_examples, replace_examples, HypothesisMap,
    PerturbMode, WerReport,
};

/// Run `f` over `0..n`, in parallel when the feature is enabled. Results are
/// collected in index order, so output is independent of worker count.
pub fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>, SluError>
where
    T: Send,
    F: Fn(usize) -> Result<T, SluError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Everything a run needs loaded into memory.
pub struct ExperimentData {
    pub pretrain: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub dropped: usize,
    pub bio_repairs: usize,
    pub provider: EmbeddingProvider,
    pub hypotheses: Option<HypothesisMap>,
}

pub fn load_experiment(cfg: &ExperimentConfig) -> Result<ExperimentData, SluError> {
    let mut datasets = Vec::new();
    let mut bio_repairs = 0;
    for path in &cfg.data.datasets {
        let (data, report) = load_dataset(path)?;
        bio_repairs += report.bio_repairs;
        datasets.push(data);
    }
    let manifest = SplitManifest::load(&cfg.data.manifest)?;
    let splits = build_splits(&datasets, &manifest)?;
    let (provider, _) = load_embeddings(&cfg.data.embeddings, cfg.encoder.oov)?;
    if provider.dim() != cfg.encoder.dim_in {
        return Err(SluError::ShapeMismatch(format!(
            "embedding dim {} but config dim_in {}",
            provider.dim(),
            cfg.encoder.dim_in
        )));
    }
    let hypotheses = match &cfg.data.hypotheses {
        Some(path) => Some(HypothesisMap::load(path)?),
        None => None,
    };
    Ok(ExperimentData {
        pretrain: splits.pretrain,
        validation: splits.validation,
        test: splits.test,
        dropped: splits.dropped,
        bio_repairs,
        provider,
        hypotheses,
    })
}

/// Outcome of `validate`: human-readable summary lines plus every problem
/// found (the command exits nonzero when any problem exists).
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub summary: Vec<String>,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

pub fn validate_experiment(cfg: &ExperimentConfig) -> Result<ValidationReport, SluError> {
    let mut report = ValidationReport::default();
    let data = load_experiment(cfg)?;
    let needed = cfg.episodes.k_support + cfg.episodes.k_query;
    for (name, split) in [
        ("pretrain", &data.pretrain),
        ("validation", &data.validation),
        ("test", &data.test),
    ] {
        let intents = split.intents();
        report.summary.push(format!(
            "{name}: {} intents, {} utterances",
            intents.len(),
            split.len()
        ));
        if intents.len() < 3 {
            report
                .problems
                .push(format!("{name} split has {} intents; need at least 3", intents.len()));
        }
        for intent in intents {
            let count = split.intent_count(intent);
            report
                .summary
                .push(format!("  {intent}: {count} utterances"));
            // The test split additionally needs replacement-pool head-room
            // for the largest sweep c (k_s − 1 in the worst case).
            let required = if name == "test" { needed + cfg.max_c() } else { needed };
            if count < required {
                report.problems.push(format!(
                    "{name} intent {intent}: {count} utterances, need {required} \
                     (k_s + k_q{})",
                    if name == "test" { " + max c" } else { "" }
                ));
            }
        }
    }
    if data.dropped > 0 {
        report
            .summary
            .push(format!("dropped (intent in no split): {}", data.dropped));
    }
    if data.bio_repairs > 0 {
        report
            .summary
            .push(format!("BIO repairs applied at load: {}", data.bio_repairs));
    }
    if let Some(hyps) = &data.hypotheses {
        let missing: Vec<String> = data
            .test
            .utterances()
            .iter()
            .filter(|u| hyps.get(&u.id).is_none())
            .map(|u| u.id.clone())
            .collect();
        report.summary.push(format!(
            "hypotheses: {} entries, {} of {} test utterances covered",
            hyps.len(),
            data.test.len() - missing.len(),
            data.test.len()
        ));
        if !missing.is_empty() {
            report.problems.push(format!(
                "hypothesis file missing {} test ids: {}",
                missing.len(),
                missing.join(", ")
            ));
        }
    }
    Ok(report)
}

fn checkpoint_path(out_dir: &Path, learner: LearnerKind, run_seed: u64) -> PathBuf {
    out_dir.join(format!("{learner}_seed{run_seed}.ckpt"))
}

/// Pretrain (or resume) one run seed; writes the checkpoint and appends the
/// training log. Returns the checkpoint path.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    run_seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf, SluError> {
    let train_cfg = cfg.train.resolve();
    let frozen_before = data.provider.checksum();
    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.learner != train_cfg.learner {
                return Err(SluError::Config(format!(
                    "checkpoint learner {} does not match config learner {}",
                    ckpt.learner, train_cfg.learner
                )));
            }
            if ckpt.run_seed != run_seed {
                return Err(SluError::Config(format!(
                    "checkpoint run seed {} does not match requested seed {run_seed}",
                    ckpt.run_seed
                )));
            }
            ckpt.state
        }
        None => TrainState::new(init_params(run_seed, cfg.encoder.encoder_config())?),
    };
    let log = pretrain(
        &mut state,
        &data.pretrain,
        Some(&data.validation),
        &data.provider,
        &train_cfg,
        cfg.episodes.k_support,
        cfg.episodes.k_query,
        run_seed,
    )?;
    if data.provider.checksum() != frozen_before {
        return Err(SluError::Other("embedding table mutated during training".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SluError::io(out_dir, e))?;
    let log_path = out_dir.join(format!("train_log_{}_seed{run_seed}.csv", train_cfg.learner));
    let fresh = !log_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| SluError::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "epoch,loss,val_ic_acc,val_sl_f1").map_err(|e| SluError::io(&log_path, e))?;
    }
    for row in &log {
        writeln!(
            w,
            "{},{},{},{}",
            row.epoch,
            row.mean_loss,
            row.val_ic_acc.map(|v| v.to_string()).unwrap_or_default(),
            row.val_sl_f1.map(|v| v.to_string()).unwrap_or_default()
        )
        .map_err(|e| SluError::io(&log_path, e))?;
    }
    w.flush().map_err(|e| SluError::io(&log_path, e))?;
    let ckpt_path = checkpoint_path(out_dir, train_cfg.learner, run_seed);
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            learner: train_cfg.learner,
            run_seed,
            state,
        },
    )?;
    Ok(ckpt_path)
}

/// One per-episode output row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub run_seed: u64,
    pub episode_index: u64,
    pub condition: String,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl From<Aggregate> for Stat {
    fn from(a: Aggregate) -> Self {
        Stat {
            mean: a.mean,
            std: a.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ic: Stat,
    /// Absent when every episode's F1 was undefined.
    pub sl_f1: Option<Stat>,
    /// Episodes excluded from the F1 mean because F1 was undefined.
    pub sl_skipped: usize,
}

/// Table-2-shaped cell data: clean value ± std, and for perturbed conditions
/// the paired absolute difference ± std in parentheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub learner: String,
    pub condition: String,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub clean: MetricSummary,
    pub perturbed: Option<MetricSummary>,
    /// Per-episode |clean − perturbed| summary.
    pub diff: Option<MetricSummary>,
    /// Signed per-episode clean − perturbed summary: positive means the
    /// perturbation lowered the metric on average.
    pub degradation: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn summarize_metrics(per_seed: &[Vec<EpisodeMetrics>]) -> Result<MetricSummary, SluError> {
    let ic: Vec<Vec<f64>> = per_seed
        .iter()
        .map(|v| v.iter().map(|m| m.ic_accuracy).collect())
        .collect();
    let f1: Vec<Vec<Option<f64>>> = per_seed
        .iter()
        .map(|v| v.iter().map(|m| m.sl_f1).collect())
        .collect();
    let skipped = f1
        .iter()
        .flatten()
        .filter(|v| v.is_none())
        .count();
    let sl_f1 = if f1.iter().flatten().all(|v| v.is_none()) {
        None
    } else {
        Some(aggregate_optional(&f1)?.into())
    };
    Ok(MetricSummary {
        ic: aggregate(&ic)?.into(),
        sl_f1,
        sl_skipped: skipped,
    })
}

fn summarize_paired(
    clean: &[Vec<ScoredEpisode>],
    perturbed: &[Vec<ScoredEpisode>],
    pair: impl Fn(&ScoredEpisode, &ScoredEpisode) -> Result<(f64, Option<f64>), SluError>,
) -> Result<MetricSummary, SluError> {
    let mut ic = Vec::new();
    let mut f1 = Vec::new();
    for (cs, ps) in clean.iter().zip(perturbed) {
        let mut ic_row = Vec::new();
        let mut f1_row = Vec::new();
        for (c, p) in cs.iter().zip(ps) {
            let (di, df) = pair(c, p)?;
            ic_row.push(di);
            f1_row.push(df);
        }
        ic.push(ic_row);
        f1.push(f1_row);
    }
    let skipped = f1.iter().flatten().filter(|v| v.is_none()).count();
    let sl_f1 = if f1.iter().flatten().all(|v| v.is_none()) {
        None
    } else {
        Some(aggregate_optional(&f1)?.into())
    };
    Ok(MetricSummary {
        ic: aggregate(&ic)?.into(),
        sl_f1,
        sl_skipped: skipped,
    })
}

/// Evaluate one condition over all configured seeds and episodes. Perturbed
/// conditions score clean and perturbed on identical episodes (paired).
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    ckpt: &Checkpoint,
    condition: Condition,
) -> Result<Evaluation, SluError> {
    let train_cfg = cfg.train.resolve();
    if ckpt.learner != train_cfg.learner {
        return Err(SluError::Config(format!(
            "checkpoint learner {} does not match config learner {}",
            ckpt.learner, train_cfg.learner
        )));
    }
    if condition == Condition::Asr && data.hypotheses.is_none() {
        return Err(SluError::Config(
            "condition asr requires a hypothesis file in [data]".into(),
        ));
    }
    if let Some((_, c)) = condition.mode() {
        if c >= cfg.episodes.k_support {
            return Err(SluError::RemoveTooLarge {
                c,
                k_s: cfg.episodes.k_support,
            });
        }
    }
    let adapt = train_cfg.adapt_config();
    let params = &ckpt.state.params;

    let mut records = Vec::new();
    let mut clean_per_seed = Vec::new();
    let mut pert_per_seed = Vec::new();
    for &run_seed in &cfg.episodes.seeds {
        let pairs = map_indexed(cfg.episodes.count, |i| {
            let seed = EpisodeSeed::new(run_seed, i as u64);
            let episode = sample_episode(
                seed,
                &data.test,
                Phase::Test,
                cfg.episodes.k_support,
                cfg.episodes.k_query,
            )?;
            let clean = adapt_and_evaluate(params, &data.provider, &episode, ckpt.learner, adapt)?;
            let perturbed = match condition {
                Condition::Clean => None,
                Condition::Remove(c) => Some(remove_examples(&episode, c, seed)?),
                Condition::Replace(c) => Some(replace_examples(&episode, c, seed, &data.test)?),
                Condition::Asr => Some(apply_modality_mismatch(
                    &episode,
                    data.hypotheses.as_ref().unwrap(),
                )?),
            }
            .map(|ep| {
                debug_assert_eq!(ep.seed, episode.seed);
                adapt_and_evaluate(params, &data.provider, &ep, ckpt.learner, adapt)
            })
            .transpose()?;
            Ok((clean, perturbed))
        })?;
        let mut clean_scored = Vec::new();
        let mut pert_scored = Vec::new();
        for (i, (clean, perturbed)) in pairs.into_iter().enumerate() {
            let seed = EpisodeSeed::new(run_seed, i as u64);
            records.push(EvalRecord {
                run_seed,
                episode_index: i as u64,
                condition: "clean".to_string(),
                metrics: clean,
            });
            clean_scored.push(ScoredEpisode {
                seed,
                metrics: clean,
            });
            if let Some(p) = perturbed {
                records.push(EvalRecord {
                    run_seed,
                    episode_index: i as u64,
                    condition: condition.to_string(),
                    metrics: p,
                });
                pert_scored.push(ScoredEpisode { seed, metrics: p });
            }
        }
        clean_per_seed.push(clean_scored);
        pert_per_seed.push(pert_scored);
    }

    let clean_metrics: Vec<Vec<EpisodeMetrics>> = clean_per_seed
        .iter()
        .map(|v| v.iter().map(|s| s.metrics).collect())
        .collect();
    let (perturbed, diff, degradation) = if condition == Condition::Clean {
        (None, None, None)
    } else {
        let pert_metrics: Vec<Vec<EpisodeMetrics>> = pert_per_seed
            .iter()
            .map(|v| v.iter().map(|s| s.metrics).collect())
            .collect();
        (
            Some(summarize_metrics(&pert_metrics)?),
            Some(summarize_paired(&clean_per_seed, &pert_per_seed, paired_diff)?),
            Some(summarize_paired(&clean_per_seed, &pert_per_seed, paired_drop)?),
        )
    };
    Ok(Evaluation {
        records,
        summary: EvalSummary {
            learner: ckpt.learner.to_string(),
            condition: condition.to_string(),
            seeds: cfg.episodes.seeds.clone(),
            episodes_per_seed: cfg.episodes.count,
            clean: summarize_metrics(&clean_metrics)?,
            perturbed,
            diff,
            degradation,
        },
    })
}

/// Render the per-episode CSV (deterministic bytes for fixed inputs).
pub fn episodes_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("run_seed,episode_index,condition,ic_acc,sl_f1,tp,fp,fn\n");
    for r in records {
        let f1 = r.metrics.sl_f1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run_seed,
            r.episode_index,
            r.condition,
            r.metrics.ic_accuracy,
            f1,
            r.metrics.tp,
            r.metrics.fp,
            r.metrics.fn_
        );
    }
    out
}

/// Write the CSV and summary JSON for one evaluation; returns both paths.
pub fn write_evaluation(
    out_dir: &Path,
    eval: &Evaluation,
) -> Result<(PathBuf, PathBuf), SluError> {
    std::fs::create_dir_all(out_dir).map_err(|e| SluError::io(out_dir, e))?;
    let stem = format!("{}_{}", eval.summary.learner, eval.summary.condition);
    let csv_path = out_dir.join(format!("episodes_{stem}.csv"));
    std::fs::write(&csv_path, episodes_csv(&eval.records))
        .map_err(|e| SluError::io(&csv_path, e))?;
    let json_path = out_dir.join(format!("summary_{stem}.json"));
    let json = serde_json::to_string_pretty(&eval.summary)
        .map_err(|e| SluError::Other(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| SluError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: usize,
    pub mean_abs_diff_ic: f64,
    pub std_ic: f64,
    /// Mean signed IC degradation (clean − perturbed).
    pub mean_drop_ic: f64,
    pub mean_abs_diff_f1: Option<f64>,
    pub std_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub learner: String,
    pub mode: String,
    pub rows: Vec<SweepRow>,
    /// Whether the mean IC diff is non-decreasing in c.
    pub monotone_ic: bool,
}

/// Paired evaluation at each c in `c_values` for one perturbation mode.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    ckpt: &Checkpoint,
    mode: PerturbMode,
    c_values: &[usize],
) -> Result<SweepReport, SluError> {
    if c_values.is_empty() {
        return Err(SluError::EmptyInput("sweep c values".into()));
    }
    let mut rows = Vec::new();
    for &c in c_values {
        if c == 0 {
            rows.push(SweepRow {
                c: 0,
                mean_abs_diff_ic: 0.0,
                std_ic: 0.0,
                mean_drop_ic: 0.0,
                mean_abs_diff_f1: Some(0.0),
                std_f1: Some(0.0),
            });
            continue;
        }
        let condition = match mode {
            PerturbMode::Remove => Condition::Remove(c),
            PerturbMode::Replace => Condition::Replace(c),
        };
        let eval = run_evaluation(cfg, data, ckpt, condition)?;
        let diff = eval.summary.diff.expect("perturbed condition has diffs");
        let drop = eval
            .summary
            .degradation
            .expect("perturbed condition has degradation");
        rows.push(SweepRow {
            c,
            mean_abs_diff_ic: diff.ic.mean,
            std_ic: diff.ic.std,
            mean_drop_ic: drop.ic.mean,
            mean_abs_diff_f1: diff.sl_f1.map(|s| s.mean),
            std_f1: diff.sl_f1.map(|s| s.std),
        });
    }
    let monotone_ic = rows
        .windows(2)
        .all(|w| w[1].mean_abs_diff_ic >= w[0].mean_abs_diff_ic - 1e-12);
    Ok(SweepReport {
        learner: ckpt.learner.to_string(),
        mode: mode.to_string(),
        rows,
        monotone_ic,
    })
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("c,mean_abs_diff_ic,std_ic,mean_drop_ic,mean_abs_diff_f1,std_f1\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.c,
            r.mean_abs_diff_ic,
            r.std_ic,
            r.mean_drop_ic,
            r.mean_abs_diff_f1.map(|v| v.to_string()).unwrap_or_default(),
            r.std_f1.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    out
}

pub fn write_sweep(out_dir: &Path, report: &SweepReport) -> Result<PathBuf, SluError> {
    std::fs::create_dir_all(out_dir).map_err(|e| SluError::io(out_dir, e))?;
    let path = out_dir.join(format!("sweep_{}_{}.csv", report.learner, report.mode));
    std::fs::write(&path, sweep_csv(report)).map_err(|e| SluError::io(&path, e))?;
    let json_path = out_dir.join(format!("sweep_{}_{}.json", report.learner, report.mode));
    let json =
        serde_json::to_string_pretty(report).map_err(|e| SluError::Other(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| SluError::io(&json_path, e))?;
    Ok(path)
}

fn format_cell(summary: &EvalSummary) -> (String, String) {
    let fmt = |s: &Stat| format!("{:.3}±{:.3}", s.mean, s.std);
    let fmt_opt = |s: &Option<Stat>| {
        s.as_ref()
            .map(|s| fmt(s))
            .unwrap_or_else(|| "n/a".to_string())
    };
    let ic = match &summary.diff {
        Some(d) => format!("{} ({})", fmt(&summary.clean.ic), fmt(&d.ic)),
        None => fmt(&summary.clean.ic),
    };
    let f1 = match &summary.diff {
        Some(d) => format!(
            "{} ({})",
            fmt_opt(&summary.clean.sl_f1),
            fmt_opt(&d.sl_f1)
        ),
        None => fmt_opt(&summary.clean.sl_f1),
    };
    (ic, f1)
}

/// Render Table-2-shaped markdown from every summary JSON in `out_dir`.
/// Rows: learner. Columns: condition. Cell: "clean±std (diff±std)".
pub fn render_report(out_dir: &Path) -> Result<String, SluError> {
    let mut summaries: Vec<EvalSummary> = Vec::new();
    let entries = std::fs::read_dir(out_dir).map_err(|e| SluError::io(out_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("summary_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| SluError::io(path, e))?;
        let summary: EvalSummary = serde_json::from_str(&text)
            .map_err(|e| SluError::Other(format!("{}: {e}", path.display())))?;
        summaries.push(summary);
    }
    if summaries.is_empty() {
        return Err(SluError::EmptyInput(format!(
            "no summary_*.json files in {}",
            out_dir.display()
        )));
    }
    let mut learners: Vec<String> = summaries.iter().map(|s| s.learner.clone()).collect();
    learners.sort();
    learners.dedup();
    let mut conditions: Vec<String> = summaries.iter().map(|s| s.condition.clone()).collect();
    conditions.sort_by_key(|c| (c != "clean", c.clone()));
    conditions.dedup();

    let mut out = String::new();
    for (title, pick) in [
        ("IC accuracy", 0usize),
        ("SL F1 (excluding Other)", 1usize),
    ] {
        let _ = writeln!(out, "## {title}\n");
        let _ = writeln!(out, "| learner | {} |", conditions.join(" | "));
        let _ = writeln!(out, "|---|{}|", vec!["---"; conditions.len()].join("|"));
        for learner in &learners {
            let mut row = format!("| {learner} |");
            for cond in &conditions {
                let cell = summaries
                    .iter()
                    .find(|s| &s.learner == learner && &s.condition == cond)
                    .map(|s| {
                        let (ic, f1) = format_cell(s);
                        if pick == 0 {
                            ic
                        } else {
                            f1
                        }
                    })
                    .unwrap_or_else(|| "—".to_string());
                let _ = write!(row, " {cell} |");
            }
            let _ = writeln!(out, "{row}");
        }
        let _ = writeln!(out);
    }
    Ok(out)
}

/// WER of a hypothesis set against every listed dataset (no split applied).
pub fn run_wer(cfg: &ExperimentConfig) -> Result<WerReport, SluError> {
    let hyp_path = cfg.data.hypotheses.as_ref().ok_or_else(|| {
        SluError::Config("wer requires a hypothesis file in [data]".into())
    })?;
    let hyps = HypothesisMap::load(hyp_path)?;
    let mut combined = WerReport::default();
    for path in &cfg.data.datasets {
        let (data, _) = load_dataset(path)?;
        let r = dataset_wer(&data, &hyps)?;
        combined.edits += r.edits;
        combined.ref_tokens += r.ref_tokens;
        combined.covered += r.covered;
        combined.missing_ids.extend(r.missing_ids);
    }
    Ok(combined)
}

/// Write an episode cache for one seed (the sampled test episodes, useful
/// for inspecting pairing).
pub fn write_episode_cache_for_seed(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    run_seed: u64,
    path: &Path,
) -> Result<(), SluError> {
    let episodes = map_indexed(cfg.episodes.count, |i| {
        sample_episode(
            EpisodeSeed::new(run_seed, i as u64),
            &data.test,
            Phase::Test,
            cfg.episodes.k_support,
            cfg.episodes.k_query,
        )
    })?;
    let f = File::create(path).map_err(|e| SluError::io(path, e))?;
    crate::episode::write_episode_cache(&episodes, BufWriter::new(f))
        .map_err(|e| SluError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::TrainConfig;
    use crate::synth::SynthConfig;
    use std::path::Path;

    /// Materialize a small synthetic experiment on disk and return its
    /// config (all intents in the test split; a copy of the dataset serves
    /// as pretrain via a second file with remapped intents).
    fn small_experiment(dir: &Path) -> ExperimentConfig {
        let synth = SynthConfig {
            n_intents: 9,
            utterances_per_intent: 30,
            ..SynthConfig::default()
        };
        crate::synth::write_to_dir(&synth, dir).unwrap();
        std::fs::write(
            dir.join("splits.json"),
            r#"{"pretrain": ["intent0", "intent1", "intent2"],
                "validation": ["intent3", "intent4", "intent5"],
                "test": ["intent6", "intent7", "intent8"]}"#,
        )
        .unwrap();
        let cfg: ExperimentConfig = toml::from_str(&format!(
            r#"
[data]
datasets = ["{d}/data.jsonl"]
manifest = "{d}/splits.json"
embeddings = "{d}/embeddings.txt"

[encoder]
dim_in = 16
dim_out = 16

[episodes]
k_support = 4
k_query = 4
count = 3
seeds = [0, 1]

[train]
learner = "proto"
epochs = 1
episodes_per_epoch = 3
"#,
            d = dir.display()
        ))
        .unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn quick_checkpoint(cfg: &ExperimentConfig, _data: &ExperimentData) -> Checkpoint {
        let params = init_params(0, cfg.encoder.encoder_config()).unwrap();
        Checkpoint {
            learner: LearnerKind::Proto,
            run_seed: 0,
            state: TrainState::new(params),
        }
    }

    #[test]
    fn validate_reports_shortfall() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_experiment(dir.path());
        cfg.episodes.k_support = 20;
        cfg.episodes.k_query = 20;
        let report = validate_experiment(&cfg).unwrap();
        assert!(!report.ok());
        assert!(report.problems.iter().any(|p| p.contains("intent3")));
    }

    #[test]
    fn validate_passes_on_adequate_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let report = validate_experiment(&cfg).unwrap();
        assert!(report.ok(), "problems: {:?}", report.problems);
    }

    #[test]
    fn clean_evaluation_shape_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        let a = run_evaluation(&cfg, &data, &ckpt, Condition::Clean).unwrap();
        let b = run_evaluation(&cfg, &data, &ckpt, Condition::Clean).unwrap();
        assert_eq!(a, b);
        // 2 seeds × 3 episodes, clean rows only.
        assert_eq!(a.records.len(), 6);
        assert!(a.summary.perturbed.is_none());
        assert!(a.summary.diff.is_none());
        assert_eq!(episodes_csv(&a.records), episodes_csv(&b.records));
    }

    #[test]
    fn perturbed_evaluation_is_paired() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        let eval = run_evaluation(&cfg, &data, &ckpt, Condition::Remove(1)).unwrap();
        // clean + perturbed row per episode.
        assert_eq!(eval.records.len(), 12);
        assert!(eval.summary.diff.is_some());
        let clean = run_evaluation(&cfg, &data, &ckpt, Condition::Clean).unwrap();
        // Clean rows are identical to the clean condition's rows.
        let clean_rows: Vec<_> = eval
            .records
            .iter()
            .filter(|r| r.condition == "clean")
            .collect();
        for (a, b) in clean_rows.iter().zip(&clean.records) {
            assert_eq!(**a, *b);
        }
    }

    #[test]
    fn identity_hypotheses_zero_diffs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_experiment(dir.path());
        // Identity hypotheses: every utterance's own tokens.
        let (data0, _) = load_dataset(&cfg.data.datasets[0]).unwrap();
        let mut lines = String::new();
        for u in data0.utterances() {
            lines.push_str(&serde_json::to_string(&serde_json::json!({
                "id": u.id, "hyp_tokens": u.tokens
            })).unwrap());
            lines.push('\n');
        }
        let hyp_path = dir.path().join("hyps.jsonl");
        std::fs::write(&hyp_path, lines).unwrap();
        cfg.data.hypotheses = Some(hyp_path);
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        let eval = run_evaluation(&cfg, &data, &ckpt, Condition::Asr).unwrap();
        let diff = eval.summary.diff.unwrap();
        assert_eq!(diff.ic.mean, 0.0);
        assert_eq!(diff.ic.std, 0.0);
        if let Some(f1) = diff.sl_f1 {
            assert_eq!(f1.mean, 0.0);
        }
    }

    #[test]
    fn sweep_c_zero_row_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        let report = run_sweep(&cfg, &data, &ckpt, PerturbMode::Remove, &[0, 1]).unwrap();
        assert_eq!(report.rows[0].mean_abs_diff_ic, 0.0);
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn pretrain_writes_log_and_checkpoint_resumably() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let out = dir.path().join("out");

        // Uninterrupted 2-epoch run.
        let mut cfg2 = cfg.clone();
        cfg2.train.epochs = Some(2);
        let full = run_pretrain(&cfg2, &data, 5, &out, None).unwrap();
        let full_bytes = std::fs::read(&full).unwrap();

        // Interrupted: 1 epoch, then resume to 2.
        let out_b = dir.path().join("out_b");
        let mut cfg1 = cfg.clone();
        cfg1.train.epochs = Some(1);
        let part = run_pretrain(&cfg1, &data, 5, &out_b, None).unwrap();
        let resumed = run_pretrain(&cfg2, &data, 5, &out_b, Some(&part)).unwrap();
        assert_eq!(std::fs::read(&resumed).unwrap(), full_bytes);

        let log = std::fs::read_to_string(
            out_b.join("train_log_proto_seed5.csv"),
        )
        .unwrap();
        assert_eq!(log.lines().count(), 3, "header + 2 epoch rows:\n{log}");
        assert!(log.starts_with("epoch,loss,val_ic_acc,val_sl_f1\n"));
    }

    #[test]
    fn write_and_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        let out = dir.path().join("out");
        let clean = run_evaluation(&cfg, &data, &ckpt, Condition::Clean).unwrap();
        write_evaluation(&out, &clean).unwrap();
        let pert = run_evaluation(&cfg, &data, &ckpt, Condition::Remove(1)).unwrap();
        write_evaluation(&out, &pert).unwrap();
        let md = render_report(&out).unwrap();
        assert!(md.contains("| proto |"));
        assert!(md.contains("clean"));
        assert!(md.contains("remove1"));
        assert!(md.contains('('), "perturbed cell carries parenthesized diff");
    }

    #[test]
    fn learner_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let mut ckpt = quick_checkpoint(&cfg, &data);
        ckpt.learner = LearnerKind::Finetune;
        assert!(run_evaluation(&cfg, &data, &ckpt, Condition::Clean).is_err());
    }

    #[test]
    fn asr_without_hypotheses_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_experiment(dir.path());
        let data = load_experiment(&cfg).unwrap();
        let ckpt = quick_checkpoint(&cfg, &data);
        assert!(run_evaluation(&cfg, &data, &ckpt, Condition::Asr).is_err());
    }

    #[test]
    fn train_config_defaults_are_protocol_values() {
        let cfg = TrainConfig::defaults(LearnerKind::Fomaml);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.inner_steps, 8);
        assert_eq!(cfg.adapt_steps, 10);
        assert_eq!(cfg.lr_pretrain, 0.003);
        assert_eq!(cfg.lr_adapt, 0.01);
    }
}
