//! Noise injectors: support-set remove/replace and modality mismatch via
//! token alignment plus slot-label projection onto hypothesis text.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{repair_bio, Dataset, SlotTag, Utterance};
use crate::episode::{map_query_only_slots, Episode, EpisodeSeed};
use crate::error::SluError;
use crate::rng::{derive_rng, salt};

/// Which support-set perturbation to apply and how many examples per intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub mode: PerturbMode,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Remove,
    Replace,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbMode::Remove => write!(f, "remove"),
            PerturbMode::Replace => write!(f, "replace"),
        }
    }
}

/// Remove `c` uniformly chosen support utterances per intent. The query set is
/// untouched; the slot inventory is recomputed and the Other-mapping reapplied.
pub fn remove_examples(
    episode: &Episode,
    c: usize,
    seed: EpisodeSeed,
) -> Result<Episode, SluError> {
    if c >= episode.k_s {
        return Err(SluError::RemoveTooLarge { c, k_s: episode.k_s });
    }
    let mut out = episode.clone();
    if c == 0 {
        return Ok(out);
    }
    let mut rng = derive_rng(&[seed.run_seed, seed.episode_index, salt::REMOVE]);
    for support in &mut out.support {
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.shuffle(&mut rng);
        let mut drop = order[..c].to_vec();
        drop.sort_unstable();
        for &i in drop.iter().rev() {
            support.remove(i);
        }
    }
    map_query_only_slots(&mut out);
    Ok(out)
}

/// Replace `c` uniformly chosen support utterances per intent with distinct
/// same-intent pool utterances outside the episode's S ∪ Q.
pub fn replace_examples(
    episode: &Episode,
    c: usize,
    seed: EpisodeSeed,
    pool: &Dataset,
) -> Result<Episode, SluError> {
    let mut out = episode.clone();
    if c == 0 {
        return Ok(out);
    }
    let member_ids: Vec<String> = episode.member_ids().iter().map(|s| s.to_string()).collect();
    let mut rng = derive_rng(&[seed.run_seed, seed.episode_index, salt::REPLACE]);
    for (intent, support) in out.intents.iter().zip(&mut out.support) {
        let candidates: Vec<&Utterance> = pool
            .intent_utterances(intent)
            .into_iter()
            .filter(|u| !member_ids.contains(&u.id))
            .collect();
        if candidates.len() < c {
            return Err(SluError::ReplacePoolTooSmall {
                intent: intent.clone(),
                available: candidates.len(),
                required: c,
            });
        }
        let mut victim_order: Vec<usize> = (0..support.len()).collect();
        victim_order.shuffle(&mut rng);
        let mut cand_order: Vec<usize> = (0..candidates.len()).collect();
        cand_order.shuffle(&mut rng);
        for (slot, &cand) in victim_order[..c].iter().zip(&cand_order[..c]) {
            support[*slot] = candidates[cand].clone();
        }
    }
    map_query_only_slots(&mut out);
    Ok(out)
}

/// One step of a token-level alignment. `ref_i`/`hyp_j` index the reference
/// and hypothesis sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOp {
    Match { ref_i: usize, hyp_j: usize },
    Substitute { ref_i: usize, hyp_j: usize },
    Delete { ref_i: usize },
    Insert { hyp_j: usize },
}

/// Edit cost of an op sequence (#Substitute + #Delete + #Insert).
pub fn alignment_cost(ops: &[AlignOp]) -> usize {
    ops.iter()
        .filter(|op| !matches!(op, AlignOp::Match { .. }))
        .count()
}

/// Minimal-cost token alignment with unit costs and exact, case-sensitive
/// token comparison. Ties resolve left-to-right preferring
/// Match > Substitute > Delete > Insert.
pub fn align_tokens(reference: &[String], hypothesis: &[String]) -> Result<Vec<AlignOp>, SluError> {
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(SluError::EmptyAlignmentInput);
    }
    let n = reference.len();
    let m = hypothesis.len();
    // dp[i][j] = edit distance between reference[i..] and hypothesis[j..].
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            dp[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let sub = dp[i + 1][j + 1] + usize::from(reference[i] != hypothesis[j]);
                sub.min(dp[i + 1][j] + 1).min(dp[i][j + 1] + 1)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = dp[i][j];
        if i < n && j < m && reference[i] == hypothesis[j] && dp[i + 1][j + 1] == here {
            ops.push(AlignOp::Match { ref_i: i, hyp_j: j });
            i += 1;
            j += 1;
        } else if i < n && j < m && dp[i + 1][j + 1] + 1 == here {
            ops.push(AlignOp::Substitute { ref_i: i, hyp_j: j });
            i += 1;
            j += 1;
        } else if i < n && dp[i + 1][j] + 1 == here {
            ops.push(AlignOp::Delete { ref_i: i });
            i += 1;
        } else {
            ops.push(AlignOp::Insert { hyp_j: j });
            j += 1;
        }
    }
    Ok(ops)
}

/// Project reference slot tags onto the hypothesis through an alignment.
///
/// Match/Substitute positions copy the reference tag; Delete positions drop
/// theirs. An inserted token becomes Inside of a chunk only when both
/// hypothesis neighbors carry the same (non-Other) type; otherwise Other.
/// A final BIO repair pass turns orphan Inside tags into Begin.
pub fn project_slots(ref_slots: &[SlotTag], ops: &[AlignOp]) -> Result<Vec<SlotTag>, SluError> {
    let ref_positions = ops
        .iter()
        .filter(|op| !matches!(op, AlignOp::Insert { .. }))
        .count();
    if ref_positions != ref_slots.len() {
        return Err(SluError::AlignmentLengthMismatch {
            ops: ref_positions,
            tags: ref_slots.len(),
        });
    }
    let hyp_len = ops
        .iter()
        .filter(|op| !matches!(op, AlignOp::Delete { .. }))
        .count();
    let mut out: Vec<Option<SlotTag>> = vec![None; hyp_len];
    let mut inserts = Vec::new();
    for op in ops {
        match *op {
            AlignOp::Match { ref_i, hyp_j } | AlignOp::Substitute { ref_i, hyp_j } => {
                out[hyp_j] = Some(ref_slots[ref_i].clone());
            }
            AlignOp::Insert { hyp_j } => inserts.push(hyp_j),
            AlignOp::Delete { .. } => {}
        }
    }
    for j in inserts {
        let left = j
            .checked_sub(1)
            .and_then(|p| out[p].as_ref())
            .and_then(SlotTag::slot_type);
        let right = out
            .get(j + 1)
            .and_then(Option::as_ref)
            .and_then(SlotTag::slot_type);
        out[j] = Some(match (left, right) {
            (Some(a), Some(b)) if a == b => SlotTag::Inside(a.to_string()),
            _ => SlotTag::Other,
        });
    }
    let mut tags: Vec<SlotTag> = out.into_iter().map(Option::unwrap).collect();
    repair_bio(&mut tags);
    Ok(tags)
}

/// ASR hypothesis tokens keyed by utterance id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HypothesisMap {
    entries: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct HypothesisLine {
    id: String,
    hyp_tokens: Vec<String>,
}

impl HypothesisMap {
    pub fn insert(&mut self, id: String, tokens: Vec<String>) -> Result<(), SluError> {
        if tokens.is_empty() {
            return Err(SluError::EmptyInput(format!("hypothesis for id {id}")));
        }
        self.entries.insert(id, tokens);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[String]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SluError> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| SluError::io(path.display().to_string(), e))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, SluError> {
        let mut map = HypothesisMap::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| SluError::io(format!("line {}", idx + 1), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: HypothesisLine =
                serde_json::from_str(&line).map_err(|e| SluError::MalformedLine {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            map.insert(parsed.id, parsed.hyp_tokens)?;
        }
        Ok(map)
    }
}

/// Replace every query utterance's tokens with its hypothesis and project the
/// slot tags across the alignment. Support and intent labels are untouched.
pub fn apply_modality_mismatch(
    episode: &Episode,
    hyps: &HypothesisMap,
) -> Result<Episode, SluError> {
    let mut out = episode.clone();
    for utts in &mut out.query {
        for u in utts {
            let hyp = hyps
                .get(&u.id)
                .ok_or_else(|| SluError::MissingHypothesis { id: u.id.clone() })?;
            let ops = align_tokens(&u.tokens, hyp)?;
            u.slots = project_slots(&u.slots, &ops)?;
            u.tokens = hyp.to_vec();
        }
    }
    Ok(out)
}

/// Token-level word error rate statistics for a hypothesis set against a
/// dataset's reference tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WerReport {
    pub edits: usize,
    pub ref_tokens: usize,
    pub covered: usize,
    pub missing_ids: Vec<String>,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        if self.ref_tokens == 0 {
            0.0
        } else {
            self.edits as f64 / self.ref_tokens as f64
        }
    }
}

/// WER of hypotheses against every dataset utterance they cover; missing ids
/// are listed rather than treated as errors.
pub fn dataset_wer(data: &Dataset, hyps: &HypothesisMap) -> Result<WerReport, SluError> {
    let mut report = WerReport::default();
    for u in data.utterances() {
        match hyps.get(&u.id) {
            Some(hyp) => {
                let ops = align_tokens(&u.tokens, hyp)?;
                report.edits += alignment_cost(&ops);
                report.ref_tokens += u.tokens.len();
                report.covered += 1;
            }
            None => report.missing_ids.push(u.id.clone()),
        }
    }
    Ok(report)
}
