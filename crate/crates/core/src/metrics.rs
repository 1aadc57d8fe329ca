//! IC accuracy, chunk-based SL F1 excluding Other, episode-paired robustness
//! differences, and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::corpus::SlotTag;
use crate::episode::EpisodeSeed;
use crate::error::SluError;

/// Scores for one episode's query set. `sl_f1` is `None` (undefined) when
/// gold and predicted chunk sets are both empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ic_accuracy: f64,
    pub sl_f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_query: usize,
}

/// Episode metrics together with the episode identity they were computed on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEpisode {
    pub seed: EpisodeSeed,
    pub metrics: EpisodeMetrics,
}

/// Fraction of matching intent predictions.
pub fn ic_accuracy(preds: &[String], golds: &[String]) -> Result<f64, SluError> {
    if preds.len() != golds.len() {
        return Err(SluError::ShapeMismatch(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(SluError::EmptyInput("intent predictions".into()));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Typed chunk: (start, end-exclusive, type), extracted from BIO tags.
pub fn chunks(tags: &[SlotTag]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            SlotTag::Other => {
                if let Some((start, ty)) = open.take() {
                    out.push((start, i, ty));
                }
            }
            SlotTag::Begin(ty) => {
                if let Some((start, open_ty)) = open.take() {
                    out.push((start, i, open_ty));
                }
                open = Some((i, ty.clone()));
            }
            SlotTag::Inside(ty) => match &open {
                Some((_, open_ty)) if open_ty == ty => {}
                // Inside not continuing a chunk of the same type starts one;
                // upstream BIO repair should make this unreachable.
                _ => {
                    if let Some((start, open_ty)) = open.take() {
                        out.push((start, i, open_ty));
                    }
                    open = Some((i, ty.clone()));
                }
            },
        }
    }
    if let Some((start, ty)) = open {
        out.push((start, tags.len(), ty));
    }
    out
}

/// Micro-averaged chunk precision/recall counts plus F1 over a set of tag
/// sequences. Exact match requires identical span and type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SlCounts {
    /// F1 = 2PR/(P+R); `None` when there are no gold and no predicted chunks.
    pub fn f1(&self) -> Option<f64> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let denom = 2 * self.tp + self.fp + self.fn_;
        Some(2.0 * self.tp as f64 / denom as f64)
    }
}

pub fn sl_counts(
    pred_tags: &[Vec<SlotTag>],
    gold_tags: &[Vec<SlotTag>],
) -> Result<SlCounts, SluError> {
    if pred_tags.len() != gold_tags.len() {
        return Err(SluError::ShapeMismatch(format!(
            "{} predicted sequences vs {} gold",
            pred_tags.len(),
            gold_tags.len()
        )));
    }
    let mut counts = SlCounts { tp: 0, fp: 0, fn_: 0 };
    for (pred, gold) in pred_tags.iter().zip(gold_tags) {
        if pred.len() != gold.len() {
            return Err(SluError::ShapeMismatch(format!(
                "tag sequence lengths differ: {} vs {}",
                pred.len(),
                gold.len()
            )));
        }
        let p = chunks(pred);
        let g = chunks(gold);
        let matched = p.iter().filter(|c| g.contains(c)).count();
        counts.tp += matched;
        counts.fp += p.len() - matched;
        counts.fn_ += g.len() - matched;
    }
    Ok(counts)
}

/// Chunk-based SL F1 over the query; `None` when undefined.
pub fn sl_f1(
    pred_tags: &[Vec<SlotTag>],
    gold_tags: &[Vec<SlotTag>],
) -> Result<Option<f64>, SluError> {
    Ok(sl_counts(pred_tags, gold_tags)?.f1())
}

/// Score one episode's query predictions.
pub fn score_episode(
    pred_intents: &[String],
    gold_intents: &[String],
    pred_tags: &[Vec<SlotTag>],
    gold_tags: &[Vec<SlotTag>],
) -> Result<EpisodeMetrics, SluError> {
    let ic = ic_accuracy(pred_intents, gold_intents)?;
    let counts = sl_counts(pred_tags, gold_tags)?;
    Ok(EpisodeMetrics {
        ic_accuracy: ic,
        sl_f1: counts.f1(),
        tp: counts.tp,
        fp: counts.fp,
        fn_: counts.fn_,
        n_query: pred_intents.len(),
    })
}

/// Absolute per-episode clean/perturbed differences. The F1 diff is `None`
/// when either side is undefined.
pub fn paired_diff(
    clean: &ScoredEpisode,
    perturbed: &ScoredEpisode,
) -> Result<(f64, Option<f64>), SluError> {
    if clean.seed != perturbed.seed {
        return Err(SluError::EpisodeIdentityMismatch {
            a: clean.seed.as_tuple(),
            b: perturbed.seed.as_tuple(),
        });
    }
    let ic = (clean.metrics.ic_accuracy - perturbed.metrics.ic_accuracy).abs();
    let f1 = match (clean.metrics.sl_f1, perturbed.metrics.sl_f1) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    Ok((ic, f1))
}

/// Signed per-episode degradation (clean minus perturbed): positive when the
/// perturbation lowered the metric. The F1 drop is `None` when either side
/// is undefined.
pub fn paired_drop(
    clean: &ScoredEpisode,
    perturbed: &ScoredEpisode,
) -> Result<(f64, Option<f64>), SluError> {
    if clean.seed != perturbed.seed {
        return Err(SluError::EpisodeIdentityMismatch {
            a: clean.seed.as_tuple(),
            b: perturbed.seed.as_tuple(),
        });
    }
    let ic = clean.metrics.ic_accuracy - perturbed.metrics.ic_accuracy;
    let f1 = match (clean.metrics.sl_f1, perturbed.metrics.sl_f1) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok((ic, f1))
}

/// Mean ± standard deviation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// Episodes excluded (undefined F1) across all seeds.
    pub skipped: usize,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn pop_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Within-seed mean over episodes, then mean ± population std across seeds.
pub fn aggregate(per_seed: &[Vec<f64>]) -> Result<Aggregate, SluError> {
    if per_seed.is_empty() || per_seed.iter().any(Vec::is_empty) {
        return Err(SluError::EmptyInput("aggregate input".into()));
    }
    let seed_means: Vec<f64> = per_seed.iter().map(|v| mean(v)).collect();
    Ok(Aggregate {
        mean: mean(&seed_means),
        std: pop_std(&seed_means),
        skipped: 0,
    })
}

/// Like `aggregate`, excluding undefined entries and counting them. A seed
/// whose episodes are all undefined is an error.
pub fn aggregate_optional(per_seed: &[Vec<Option<f64>>]) -> Result<Aggregate, SluError> {
    if per_seed.is_empty() {
        return Err(SluError::EmptyInput("aggregate input".into()));
    }
    let mut skipped = 0;
    let mut defined: Vec<Vec<f64>> = Vec::with_capacity(per_seed.len());
    for seed_values in per_seed {
        let values: Vec<f64> = seed_values.iter().filter_map(|v| *v).collect();
        skipped += seed_values.len() - values.len();
        if values.is_empty() {
            return Err(SluError::EmptyInput(
                "all episodes undefined for a seed".into(),
            ));
        }
        defined.push(values);
    }
    let mut agg = aggregate(&defined)?;
    agg.skipped = skipped;
    Ok(agg)
}
