//! Synthetic benchmark generator: intent-specific vocabularies with small
//! slot-token inventories and Zipf-weighted carrier tokens, plus matching
//! random embeddings. Used by the smoke benchmark and the test suite.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;

use crate::corpus::{Dataset, SlotTag, Utterance};
use crate::encoder::{EmbeddingProvider, OovPolicy};
use crate::error::SluError;
use crate::rng::{derive_rng, salt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_intents: usize,
    /// Per-intent token budget; the private carrier count is this minus the
    /// slot-token inventory (slot_types_per_intent * slot_vocab_per_type).
    pub vocab_per_intent: usize,
    pub slot_types_per_intent: usize,
    /// Tokens available to each slot type. Small inventories make the query's
    /// slot tokens recur in the support set.
    pub slot_vocab_per_type: usize,
    pub utterances_per_intent: usize,
    /// Intent-agnostic carrier tokens shared by every intent.
    pub shared_vocab: usize,
    /// Probability that a carrier position draws from the shared vocabulary
    /// instead of the intent's own. Higher values make intents harder to
    /// separate and make prototype quality depend on support-set size.
    pub shared_prob: f64,
    /// Carrier tokens per utterance before slot chunks are appended.
    pub min_carriers: usize,
    pub max_carriers: usize,
    /// Slot chunks per utterance.
    pub min_chunks: usize,
    pub max_chunks: usize,
    pub max_chunk_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_intents: 5,
            vocab_per_intent: 30,
            slot_types_per_intent: 2,
            slot_vocab_per_type: 3,
            utterances_per_intent: 200,
            shared_vocab: 30,
            shared_prob: 0.08,
            min_carriers: 5,
            max_carriers: 8,
            min_chunks: 1,
            max_chunks: 2,
            max_chunk_len: 2,
            dim: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SluError> {
        if self.n_intents < 3 {
            return Err(SluError::Config("need at least 3 intents".into()));
        }
        let slot_tokens = self.slot_types_per_intent * self.slot_vocab_per_type;
        if slot_tokens >= self.vocab_per_intent {
            return Err(SluError::Config(
                "slot tokens must leave room for carrier tokens".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_prob) {
            return Err(SluError::Config("shared_prob must be in [0, 1]".into()));
        }
        if self.shared_prob > 0.0 && self.shared_vocab == 0 {
            return Err(SluError::Config(
                "shared_prob > 0 requires a non-empty shared vocabulary".into(),
            ));
        }
        if self.min_carriers == 0 || self.max_carriers < self.min_carriers {
            return Err(SluError::Config("bad carrier length range".into()));
        }
        if self.max_chunks < self.min_chunks || self.max_chunk_len == 0 {
            return Err(SluError::Config("bad chunk range".into()));
        }
        if self.dim == 0 || self.utterances_per_intent == 0 {
            return Err(SluError::Config("dim and utterance count must be positive".into()));
        }
        Ok(())
    }
}

fn carrier_token(intent: usize, j: usize) -> String {
    format!("i{intent}_c{j}")
}

fn shared_token(j: usize) -> String {
    format!("g{j}")
}

fn slot_token(intent: usize, ty: usize, j: usize) -> String {
    format!("i{intent}_s{ty}_{j}")
}

fn slot_type(intent: usize, ty: usize) -> String {
    format!("slot{intent}_{ty}")
}

/// Generate the dataset and an embedding table covering its vocabulary
/// (uniform in [-1, 1) per component). Deterministic in the config seed.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, EmbeddingProvider), SluError> {
    cfg.validate()?;
    let n_carriers =
        cfg.vocab_per_intent - cfg.slot_types_per_intent * cfg.slot_vocab_per_type;

    // Embeddings: one vector per vocabulary token, in sorted construction
    // order so the table is independent of sampling below.
    let mut vocab: Vec<String> = Vec::new();
    for intent in 0..cfg.n_intents {
        for j in 0..n_carriers {
            vocab.push(carrier_token(intent, j));
        }
        for ty in 0..cfg.slot_types_per_intent {
            for j in 0..cfg.slot_vocab_per_type {
                vocab.push(slot_token(intent, ty, j));
            }
        }
    }
    for j in 0..cfg.shared_vocab {
        vocab.push(shared_token(j));
    }
    let mut emb_rng = derive_rng(&[cfg.seed, salt::SYNTH, 0]);
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for token in &vocab {
        let v: Vec<f64> = (0..cfg.dim).map(|_| emb_rng.gen_range(-1.0..1.0)).collect();
        table.insert(token.clone(), v);
    }
    let provider = EmbeddingProvider::from_table(cfg.dim, table, OovPolicy::HashedRandomFixed)?;

    // Utterances: Zipf-weighted carriers concentrate probability mass on a
    // few tokens per intent, which tightens utterance means around the
    // intent centroid.
    let zipf = WeightedIndex::new((0..n_carriers).map(|r| 1.0 / (r + 1) as f64))
        .map_err(|e| SluError::Config(format!("zipf weights: {e}")))?;
    let shared_zipf = if cfg.shared_vocab > 0 {
        Some(
            WeightedIndex::new((0..cfg.shared_vocab).map(|r| 1.0 / (r + 1) as f64))
                .map_err(|e| SluError::Config(format!("zipf weights: {e}")))?,
        )
    } else {
        None
    };
    let mut data_rng = derive_rng(&[cfg.seed, salt::SYNTH, 1]);
    let mut utts = Vec::new();
    for intent in 0..cfg.n_intents {
        for u in 0..cfg.utterances_per_intent {
            let n_car = data_rng.gen_range(cfg.min_carriers..=cfg.max_carriers);
            let mut tokens: Vec<String> = (0..n_car)
                .map(|_| match &shared_zipf {
                    Some(sz) if data_rng.gen_bool(cfg.shared_prob) => {
                        shared_token(sz.sample(&mut data_rng))
                    }
                    _ => carrier_token(intent, zipf.sample(&mut data_rng)),
                })
                .collect();
            let mut slots = vec![SlotTag::Other; n_car];
            // Distinct chunk types per utterance: adjacent same-type chunks
            // would merge under BIO re-expansion of class runs.
            let n_chunks = data_rng
                .gen_range(cfg.min_chunks..=cfg.max_chunks)
                .min(cfg.slot_types_per_intent);
            let mut type_order: Vec<usize> = (0..cfg.slot_types_per_intent).collect();
            type_order.shuffle(&mut data_rng);
            for &ty in &type_order[..n_chunks] {
                let len = data_rng.gen_range(1..=cfg.max_chunk_len);
                // Insert only at positions that do not split an existing
                // chunk (never directly before an Inside tag).
                let positions: Vec<usize> = (0..=tokens.len())
                    .filter(|&p| {
                        p == tokens.len() || !matches!(slots[p], SlotTag::Inside(_))
                    })
                    .collect();
                let pos = positions[data_rng.gen_range(0..positions.len())];
                for k in 0..len {
                    let tok = slot_token(intent, ty, data_rng.gen_range(0..cfg.slot_vocab_per_type));
                    tokens.insert(pos + k, tok);
                    slots.insert(
                        pos + k,
                        if k == 0 {
                            SlotTag::Begin(slot_type(intent, ty))
                        } else {
                            SlotTag::Inside(slot_type(intent, ty))
                        },
                    );
                }
            }
            utts.push(Utterance {
                id: format!("synth-i{intent}-u{u}"),
                tokens,
                intent: format!("intent{intent}"),
                slots,
            });
        }
    }
    let data = Dataset::from_utterances(utts)?;
    Ok((data, provider))
}

/// Write the generated corpus and embeddings to disk in the standard formats.
pub fn write_to_dir(cfg: &SynthConfig, dir: &std::path::Path) -> Result<(), SluError> {
    use std::io::Write;
    let (data, provider) = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| SluError::io(dir, e))?;
    let data_path = dir.join("data.jsonl");
    let f = std::fs::File::create(&data_path).map_err(|e| SluError::io(&data_path, e))?;
    data.write_jsonl(std::io::BufWriter::new(f))
        .map_err(|e| SluError::io(&data_path, e))?;
    let emb_path = dir.join("embeddings.txt");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&emb_path).map_err(|e| SluError::io(&emb_path, e))?,
    );
    for (token, vec) in provider.table() {
        write!(f, "{token}").map_err(|e| SluError::io(&emb_path, e))?;
        for v in vec {
            write!(f, " {v}").map_err(|e| SluError::io(&emb_path, e))?;
        }
        writeln!(f).map_err(|e| SluError::io(&emb_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::is_bio_valid;

    #[test]
    fn default_shape() {
        let cfg = SynthConfig::default();
        let (data, provider) = generate(&cfg).unwrap();
        assert_eq!(data.intents().len(), 5);
        assert_eq!(data.len(), 1000);
        assert_eq!(provider.dim(), 16);
        // 24 carriers + 6 slot tokens per intent, plus 30 shared carriers.
        assert_eq!(provider.vocab_len(), 5 * 30 + 30);
        for u in data.utterances() {
            assert!(is_bio_valid(&u.slots));
            assert_eq!(u.tokens.len(), u.slots.len());
            for t in &u.tokens {
                assert!(provider.contains(t), "token {t} missing embedding");
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let (a, pa) = generate(&cfg).unwrap();
        let (b, pb) = generate(&cfg).unwrap();
        assert_eq!(a.utterances(), b.utterances());
        assert_eq!(pa.checksum(), pb.checksum());
    }

    #[test]
    fn seed_changes_data() {
        let (a, _) = generate(&SynthConfig::default()).unwrap();
        let (b, _) = generate(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.utterances(), b.utterances());
    }

    #[test]
    fn private_carriers_stay_within_their_intent() {
        let (data, _) = generate(&SynthConfig::default()).unwrap();
        let mut saw_shared = false;
        for u in data.utterances() {
            let prefix = format!("i{}_", u.intent.strip_prefix("intent").unwrap());
            for t in &u.tokens {
                if t.starts_with('i') {
                    assert!(t.starts_with(&prefix), "foreign carrier {t} in {}", u.id);
                } else {
                    assert!(t.starts_with('g') || t.starts_with('s'));
                    saw_shared |= t.starts_with('g');
                }
            }
        }
        assert!(saw_shared);
    }

    #[test]
    fn shared_prob_zero_uses_only_private_carriers() {
        let (data, _) = generate(&SynthConfig {
            shared_prob: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(data
            .utterances()
            .iter()
            .all(|u| u.tokens.iter().all(|t| !t.starts_with('g'))));
    }
}
