//! Shared helpers for the integration suites: independent oracles and a
//! central finite-difference checker.

// Each integration test binary compiles this module separately and uses a
// different subset of the helpers.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::prelude::*;

use slu_core::corpus::SlotTag;
use slu_core::encoder::{EmbeddingProvider, OovPolicy, ParamSet};
use slu_core::episode::{map_query_only_slots, Episode, EpisodeSeed};
use slu_core::corpus::Utterance;
use slu_core::tensor::Gradient;

/// Central finite differences over every element of the named tensors.
/// Returns the maximum relative error against the analytic gradient.
pub fn fd_max_rel_err<F>(
    params: &ParamSet,
    grad: &Gradient,
    names: &[&str],
    loss: F,
    h: f64,
) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let mut max_err: f64 = 0.0;
    for name in names {
        let analytic = grad
            .get(name)
            .unwrap_or_else(|| panic!("gradient missing tensor {name}"));
        let n = params.tensors[*name].data.len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.tensors.get_mut(*name).unwrap().data[i] += h;
            let mut minus = params.clone();
            minus.tensors.get_mut(*name).unwrap().data[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic.data[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            max_err = max_err.max((fd - an).abs() / denom);
        }
    }
    max_err
}

/// Memoized recursive Levenshtein distance, independent of the DP in the
/// library (different traversal, no operation reconstruction).
pub fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Independent SL F1 oracle: direct left-to-right span scan per sequence,
/// then set intersection over (sequence, start, end, type) tuples.
pub fn oracle_sl_f1(preds: &[Vec<SlotTag>], golds: &[Vec<SlotTag>]) -> Option<f64> {
    fn spans(seqs: &[Vec<SlotTag>]) -> Vec<(usize, usize, usize, String)> {
        let mut out = Vec::new();
        for (s, tags) in seqs.iter().enumerate() {
            let mut i = 0;
            while i < tags.len() {
                if let SlotTag::Begin(ty) = &tags[i] {
                    let start = i;
                    i += 1;
                    while i < tags.len() {
                        match &tags[i] {
                            SlotTag::Inside(t2) if t2 == ty => i += 1,
                            _ => break,
                        }
                    }
                    out.push((s, start, i, ty.clone()));
                } else {
                    i += 1;
                }
            }
        }
        out
    }
    let gold = spans(golds);
    let pred = spans(preds);
    let tp = pred.iter().filter(|p| gold.contains(p)).count();
    let fp = pred.len() - tp;
    let fn_ = gold.len() - tp;
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// A random small episode over a shared vocabulary, with a matching provider.
pub fn random_episode<R: Rng>(
    rng: &mut R,
    n_intents: usize,
    k_s: usize,
    k_q: usize,
    dim: usize,
) -> (Episode, EmbeddingProvider) {
    let vocab: Vec<String> = (0..12).map(|i| format!("tok{i}")).collect();
    let types = ["x", "y"];
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &vocab {
        table.insert(t.clone(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let provider = EmbeddingProvider::from_table(dim, table, OovPolicy::Zero).unwrap();
    let mut id = 0;
    let mut make = |intent: usize, rng: &mut R| {
        let len = rng.gen_range(2..=5);
        let tokens: Vec<String> = (0..len)
            .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
            .collect();
        let mut slots = vec![SlotTag::Other; len];
        if rng.gen_bool(0.8) {
            let ty = types[rng.gen_range(0..types.len())];
            let start = rng.gen_range(0..len);
            slots[start] = SlotTag::Begin(ty.to_string());
            if start + 1 < len && rng.gen_bool(0.5) {
                slots[start + 1] = SlotTag::Inside(ty.to_string());
            }
        }
        id += 1;
        Utterance {
            id: format!("u{id}"),
            tokens,
            intent: format!("intent{intent}"),
            slots,
        }
    };
    let mut episode = Episode {
        seed: EpisodeSeed::new(0, 0),
        intents: (0..n_intents).map(|i| format!("intent{i}")).collect(),
        support: (0..n_intents)
            .map(|i| (0..k_s).map(|_| make(i, rng)).collect())
            .collect(),
        query: (0..n_intents)
            .map(|i| (0..k_q).map(|_| make(i, rng)).collect())
            .collect(),
        support_slot_inventory: Default::default(),
        k_s,
        k_q,
    };
    map_query_only_slots(&mut episode);
    (episode, provider)
}
