//! Seeded N-way K-shot episode construction with the query-only slot mapping.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{slot_inventory, Dataset, SlotTag, Utterance};
use crate::error::SluError;
use crate::rng::{derive_rng, salt};

/// Identity of one episode's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeSeed {
    pub run_seed: u64,
    pub episode_index: u64,
}

impl EpisodeSeed {
    pub fn new(run_seed: u64, episode_index: u64) -> Self {
        EpisodeSeed {
            run_seed,
            episode_index,
        }
    }

    pub fn as_tuple(&self) -> (u64, u64) {
        (self.run_seed, self.episode_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Validation,
    Test,
}

/// One support/query adaptation task.
///
/// Support and query sets are parallel to `intents`; the slot inventory is
/// always the one computed from the current support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: EpisodeSeed,
    pub intents: Vec<String>,
    pub support: Vec<Vec<Utterance>>,
    pub query: Vec<Vec<Utterance>>,
    pub support_slot_inventory: BTreeSet<String>,
    pub k_s: usize,
    pub k_q: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.intents.len()
    }

    pub fn support_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.support.iter().flatten()
    }

    pub fn query_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.query.iter().flatten()
    }

    /// All utterance ids in support ∪ query.
    pub fn member_ids(&self) -> BTreeSet<&str> {
        self.support_utterances()
            .chain(self.query_utterances())
            .map(|u| u.id.as_str())
            .collect()
    }
}

/// Draw the episode's n-way: uniform on `[3, |labels|]` at pretrain, exactly
/// `|labels|` at validation/test.
pub fn sample_n_way<R: Rng>(
    rng: &mut R,
    phase: Phase,
    label_count: usize,
) -> Result<usize, SluError> {
    match phase {
        Phase::Pretrain => {
            if label_count < 3 {
                return Err(SluError::TooFewIntents { got: label_count });
            }
            Ok(rng.gen_range(3..=label_count))
        }
        Phase::Validation | Phase::Test => Ok(label_count),
    }
}

/// Sample one episode: n intents without replacement, then `k_s + k_q`
/// distinct utterances per intent (first `k_s` to support), then the
/// query-only slot mapping.
pub fn sample_episode(
    seed: EpisodeSeed,
    data: &Dataset,
    phase: Phase,
    k_s: usize,
    k_q: usize,
) -> Result<Episode, SluError> {
    let mut rng = derive_rng(&[seed.run_seed, seed.episode_index, salt::EPISODE]);
    let labels = data.intents();
    let n = sample_n_way(&mut rng, phase, labels.len())?;

    let mut chosen: Vec<&str> = labels.clone();
    chosen.shuffle(&mut rng);
    chosen.truncate(n);

    let per_intent = k_s + k_q;
    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for intent in &chosen {
        let pool = data.intent_utterances(intent);
        if pool.len() < per_intent {
            return Err(SluError::IntentPoolTooSmall {
                intent: intent.to_string(),
                available: pool.len(),
                required: per_intent,
            });
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let picked: Vec<Utterance> = order[..per_intent]
            .iter()
            .map(|&i| pool[i].clone())
            .collect();
        support.push(picked[..k_s].to_vec());
        query.push(picked[k_s..].to_vec());
    }

    let mut episode = Episode {
        seed,
        intents: chosen.iter().map(|s| s.to_string()).collect(),
        support,
        query,
        support_slot_inventory: BTreeSet::new(),
        k_s,
        k_q,
    };
    map_query_only_slots(&mut episode);
    Ok(episode)
}

/// Recompute the support slot inventory and map every query tag whose type is
/// outside it to Other. Idempotent; support tags are never touched.
pub fn map_query_only_slots(episode: &mut Episode) {
    let inventory = slot_inventory(episode.support.iter().flatten());
    for utts in &mut episode.query {
        for u in utts {
            for tag in &mut u.slots {
                let outside = tag
                    .slot_type()
                    .map(|ty| !inventory.contains(ty))
                    .unwrap_or(false);
                if outside {
                    *tag = SlotTag::Other;
                }
            }
        }
    }
    episode.support_slot_inventory = inventory;
}

/// Append episodes to a JSON Lines cache.
pub fn write_episode_cache<W: Write>(episodes: &[Episode], mut w: W) -> std::io::Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Read an episode cache written by `write_episode_cache`.
pub fn read_episode_cache<R: BufRead>(reader: R) -> Result<Vec<Episode>, SluError> {
    let mut episodes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SluError::io(format!("episode cache line {}", idx + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep = serde_json::from_str(&line).map_err(|e| SluError::MalformedLine {
            line: idx + 1,
            message: e.to_string(),
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}
