//! The three learning frameworks — Proto (prototype softmax-distance),
//! foMAML (first-order inner/outer loop), and Finetune — sharing the encoder
//! and a joint IC+SL negative log-likelihood.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, SlotTag, Utterance};
use crate::encoder::{
    adam_step, backprop, encode, sgd_step, AdamState, EmbeddingProvider, EncoderOutput, HeadDims,
    OutputAdjoints, ParamSet, Tape, IC_B, IC_W, SL_B, SL_W,
};
use crate::episode::{sample_episode, Episode, EpisodeSeed, Phase};
use crate::error::SluError;
use crate::metrics::{score_episode, EpisodeMetrics};
use crate::tensor::{axpy, squared_distance, Gradient};

/// Classification target for one token: Other or a BIO-stripped slot type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotClass {
    Other,
    Typed(String),
}

impl SlotClass {
    pub fn of_tag(tag: &SlotTag) -> SlotClass {
        match tag.slot_type() {
            None => SlotClass::Other,
            Some(ty) => SlotClass::Typed(ty.to_string()),
        }
    }
}

impl fmt::Display for SlotClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotClass::Other => write!(f, "O"),
            SlotClass::Typed(ty) => write!(f, "{ty}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Proto,
    Fomaml,
    Finetune,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerKind::Proto => write!(f, "proto"),
            LearnerKind::Fomaml => write!(f, "fomaml"),
            LearnerKind::Finetune => write!(f, "finetune"),
        }
    }
}

/// Intent and slot-class orderings the parametric heads predict over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub intents: Vec<String>,
    pub slot_classes: Vec<SlotClass>,
}

impl LabelSpace {
    /// Episode label space: the episode's intents in sampled order, plus
    /// Other and the support slot inventory.
    pub fn from_episode(episode: &Episode) -> Self {
        let mut slot_classes = vec![SlotClass::Other];
        slot_classes.extend(
            episode
                .support_slot_inventory
                .iter()
                .map(|ty| SlotClass::Typed(ty.clone())),
        );
        LabelSpace {
            intents: episode.intents.clone(),
            slot_classes,
        }
    }

    /// Global label space over a whole dataset (sorted intents).
    pub fn from_dataset(data: &Dataset) -> Self {
        let mut slot_classes = vec![SlotClass::Other];
        slot_classes.extend(
            crate::corpus::slot_inventory(data.utterances())
                .into_iter()
                .map(SlotClass::Typed),
        );
        LabelSpace {
            intents: data.intents().iter().map(|s| s.to_string()).collect(),
            slot_classes,
        }
    }

    pub fn head_dims(&self) -> HeadDims {
        HeadDims {
            n_intents: self.intents.len(),
            n_slot_classes: self.slot_classes.len(),
        }
    }

    pub fn intent_index(&self, intent: &str) -> Result<usize, SluError> {
        self.intents
            .iter()
            .position(|l| l == intent)
            .ok_or_else(|| SluError::Other(format!("intent {intent} not in label space")))
    }

    pub fn slot_index(&self, tag: &SlotTag) -> Result<usize, SluError> {
        let class = SlotClass::of_tag(tag);
        self.slot_classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| SluError::Other(format!("slot class {class} not in label space")))
    }
}

/// Class centroids computed from a support set. `slot_members` remembers which
/// (utterance, token) positions feed each slot prototype so gradients can be
/// routed back.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub intents: Vec<String>,
    pub intent_protos: Vec<Vec<f64>>,
    pub intent_counts: Vec<usize>,
    pub slot_classes: Vec<SlotClass>,
    pub slot_protos: Vec<Vec<f64>>,
    pub slot_members: Vec<Vec<(usize, usize)>>,
}

/// Compute intent and slot-class centroids. `support` is flattened:
/// (intent index, encoder output, slot tags) per support utterance. The slot
/// class set is exactly the classes present in support tokens.
pub fn compute_prototypes(
    intents: &[String],
    support: &[(usize, EncoderOutput, Vec<SlotTag>)],
) -> Result<Prototypes, SluError> {
    if support.is_empty() {
        return Err(SluError::EmptyInput("support set".into()));
    }
    let dim = support[0].1.utterance_vec.len();
    let mut intent_protos = vec![vec![0.0; dim]; intents.len()];
    let mut intent_counts = vec![0usize; intents.len()];
    let mut classes: BTreeSet<SlotClass> = BTreeSet::new();
    for (intent_idx, out, tags) in support {
        if *intent_idx >= intents.len() {
            return Err(SluError::Other("support intent index out of range".into()));
        }
        axpy(&mut intent_protos[*intent_idx], 1.0, &out.utterance_vec);
        intent_counts[*intent_idx] += 1;
        for tag in tags {
            classes.insert(SlotClass::of_tag(tag));
        }
    }
    for (idx, count) in intent_counts.iter().enumerate() {
        if *count == 0 {
            return Err(SluError::EmptyInput(format!(
                "support for intent {}",
                intents[idx]
            )));
        }
        for v in &mut intent_protos[idx] {
            *v /= *count as f64;
        }
    }
    let slot_classes: Vec<SlotClass> = classes.into_iter().collect();
    let mut slot_protos = vec![vec![0.0; dim]; slot_classes.len()];
    let mut slot_members = vec![Vec::new(); slot_classes.len()];
    for (utt_idx, (_, out, tags)) in support.iter().enumerate() {
        for (tok_idx, tag) in tags.iter().enumerate() {
            let class = SlotClass::of_tag(tag);
            let class_idx = slot_classes.iter().position(|c| *c == class).unwrap();
            axpy(&mut slot_protos[class_idx], 1.0, &out.token_vecs[tok_idx]);
            slot_members[class_idx].push((utt_idx, tok_idx));
        }
    }
    for (proto, members) in slot_protos.iter_mut().zip(&slot_members) {
        for v in proto.iter_mut() {
            *v /= members.len() as f64;
        }
    }
    Ok(Prototypes {
        intents: intents.to_vec(),
        intent_protos,
        intent_counts,
        slot_classes,
        slot_protos,
        slot_members,
    })
}

/// Softmax over negative squared Euclidean distances to class vectors.
pub fn softmax_neg_sq_dist(x: &[f64], class_vecs: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = class_vecs
        .iter()
        .map(|c| -squared_distance(x, c))
        .collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Intent and per-token slot distributions for one query utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDist {
    pub intent_probs: Vec<f64>,
    pub slot_probs: Vec<Vec<f64>>,
}

/// Distance-softmax prediction against prototypes.
pub fn proto_predict(
    encoded_query: &EncoderOutput,
    protos: &Prototypes,
) -> Result<PredictionDist, SluError> {
    if protos.intent_protos.is_empty() {
        return Err(SluError::EmptyInput("prototypes".into()));
    }
    let dim = encoded_query.utterance_vec.len();
    if protos.intent_protos[0].len() != dim {
        return Err(SluError::ShapeMismatch(format!(
            "query dim {dim} vs prototype dim {}",
            protos.intent_protos[0].len()
        )));
    }
    Ok(PredictionDist {
        intent_probs: softmax_neg_sq_dist(&encoded_query.utterance_vec, &protos.intent_protos),
        slot_probs: encoded_query
            .token_vecs
            .iter()
            .map(|t| softmax_neg_sq_dist(t, &protos.slot_protos))
            .collect(),
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Re-expand per-token class predictions to BIO: the first token of each
/// maximal same-type run becomes Begin, the rest Inside.
pub fn classes_to_bio(classes: &[&SlotClass]) -> Vec<SlotTag> {
    let mut out = Vec::with_capacity(classes.len());
    for (i, class) in classes.iter().enumerate() {
        match class {
            SlotClass::Other => out.push(SlotTag::Other),
            SlotClass::Typed(ty) => {
                let continues = i > 0 && *classes[i - 1] == **class;
                out.push(if continues {
                    SlotTag::Inside(ty.clone())
                } else {
                    SlotTag::Begin(ty.clone())
                });
            }
        }
    }
    out
}

struct EncodedSupport {
    /// (intent index, output, tags) per support utterance, flattened.
    entries: Vec<(usize, EncoderOutput, Vec<SlotTag>)>,
    tapes: Vec<Tape>,
}

fn encode_support(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    episode: &Episode,
) -> Result<EncodedSupport, SluError> {
    let mut entries = Vec::new();
    let mut tapes = Vec::new();
    for (intent_idx, utts) in episode.support.iter().enumerate() {
        for u in utts {
            let (out, tape) = encode(params, provider, &u.tokens)?;
            entries.push((intent_idx, out, u.slots.clone()));
            tapes.push(tape);
        }
    }
    Ok(EncodedSupport { entries, tapes })
}

/// Joint IC+SL negative log-likelihood for the Proto learner, with the exact
/// gradient through both query encodings and the support-side prototypes.
///
/// loss = mean over query utterances of
///   [ -log p(gold intent) + (1/T) Σ_w -log p(gold slot class at w) ]
pub fn proto_joint_loss(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    episode: &Episode,
) -> Result<(f64, Gradient), SluError> {
    let support = encode_support(params, provider, episode)?;
    let protos = compute_prototypes(&episode.intents, &support.entries)?;
    let dim = params.encoder.dim_out;

    let n_query: usize = episode.query.iter().map(Vec::len).sum();
    if n_query == 0 {
        return Err(SluError::EmptyInput("query set".into()));
    }
    let weight = 1.0 / n_query as f64;

    let mut loss = 0.0;
    let mut grad = Gradient::zeros_for(&params.tensors);
    let mut intent_proto_adj = vec![vec![0.0; dim]; protos.intent_protos.len()];
    let mut slot_proto_adj = vec![vec![0.0; dim]; protos.slot_protos.len()];

    for (intent_idx, utts) in episode.query.iter().enumerate() {
        for u in utts {
            let (out, tape) = encode(params, provider, &u.tokens)?;
            let mut adj = OutputAdjoints::zeros(out.token_vecs.len(), dim);

            // Intent term.
            let probs = softmax_neg_sq_dist(&out.utterance_vec, &protos.intent_protos);
            let p_gold = probs[intent_idx];
            loss += weight * -p_gold.max(f64::MIN_POSITIVE).ln();
            for (l, &p) in probs.iter().enumerate() {
                let dlogit = weight * (p - f64::from(u8::from(l == intent_idx)));
                // logit_l = -|u - c_l|^2.
                for d in 0..dim {
                    let diff = out.utterance_vec[d] - protos.intent_protos[l][d];
                    adj.utterance[d] += dlogit * -2.0 * diff;
                    intent_proto_adj[l][d] += dlogit * 2.0 * diff;
                }
            }

            // Slot term, averaged over tokens.
            let t_count = u.tokens.len() as f64;
            for (w, tag) in u.slots.iter().enumerate() {
                let gold_class = SlotClass::of_tag(tag);
                let Some(gold_idx) = protos.slot_classes.iter().position(|c| *c == gold_class)
                else {
                    // Gold class absent from support tokens: no prototype to
                    // score against, token contributes nothing.
                    continue;
                };
                let tok_probs = softmax_neg_sq_dist(&out.token_vecs[w], &protos.slot_protos);
                loss += weight / t_count * -tok_probs[gold_idx].max(f64::MIN_POSITIVE).ln();
                for (a, &p) in tok_probs.iter().enumerate() {
                    let dlogit = weight / t_count * (p - f64::from(u8::from(a == gold_idx)));
                    for d in 0..dim {
                        let diff = out.token_vecs[w][d] - protos.slot_protos[a][d];
                        adj.tokens[w][d] += dlogit * -2.0 * diff;
                        slot_proto_adj[a][d] += dlogit * 2.0 * diff;
                    }
                }
            }

            let g = backprop(params, &tape, &adj)?;
            grad.add_assign(&g, 1.0);
        }
    }

    // Route prototype adjoints back to support encodings.
    let mut support_adjs: Vec<OutputAdjoints> = support
        .entries
        .iter()
        .map(|(_, out, _)| OutputAdjoints::zeros(out.token_vecs.len(), dim))
        .collect();
    for (utt_idx, (intent_idx, _, _)) in support.entries.iter().enumerate() {
        let scale = 1.0 / protos.intent_counts[*intent_idx] as f64;
        axpy(
            &mut support_adjs[utt_idx].utterance,
            scale,
            &intent_proto_adj[*intent_idx],
        );
    }
    for (class_idx, members) in protos.slot_members.iter().enumerate() {
        let scale = 1.0 / members.len() as f64;
        for &(utt_idx, tok_idx) in members {
            axpy(
                &mut support_adjs[utt_idx].tokens[tok_idx],
                scale,
                &slot_proto_adj[class_idx],
            );
        }
    }
    for (adj, tape) in support_adjs.iter().zip(&support.tapes) {
        let g = backprop(params, tape, adj)?;
        grad.add_assign(&g, 1.0);
    }

    if !loss.is_finite() {
        return Err(SluError::NonFinite("proto joint loss".into()));
    }
    grad.ensure_finite()?;
    Ok((loss, grad))
}

/// Joint IC+SL loss for the parametric heads (foMAML and Finetune): logits
/// from linear IC/SL layers over encoder outputs. Returns the gradient with
/// respect to heads and context tensors; callers narrow the scope.
pub fn head_joint_loss(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    space: &LabelSpace,
    batch: &[&Utterance],
) -> Result<(f64, Gradient), SluError> {
    if batch.is_empty() {
        return Err(SluError::EmptyInput("loss batch".into()));
    }
    let dims = params
        .head_dims
        .ok_or_else(|| SluError::Config("head loss requires heads".into()))?;
    if dims != space.head_dims() {
        return Err(SluError::ShapeMismatch(
            "head dims do not match label space".into(),
        ));
    }
    let ic_w = params.get(IC_W).unwrap();
    let ic_b = params.get(IC_B).unwrap();
    let sl_w = params.get(SL_W).unwrap();
    let sl_b = params.get(SL_B).unwrap();
    let dim = params.encoder.dim_out;
    let weight = 1.0 / batch.len() as f64;

    let mut loss = 0.0;
    let mut grad = Gradient::zeros_for(&params.tensors);
    for u in batch {
        let gold_intent = space.intent_index(&u.intent)?;
        let (out, tape) = encode(params, provider, &u.tokens)?;
        let mut adj = OutputAdjoints::zeros(out.token_vecs.len(), dim);

        let mut logits = ic_w.matvec(&out.utterance_vec);
        axpy(&mut logits, 1.0, &ic_b.data);
        let probs = softmax(&logits);
        loss += weight * -probs[gold_intent].max(f64::MIN_POSITIVE).ln();
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(l, &p)| weight * (p - f64::from(u8::from(l == gold_intent))))
            .collect();
        grad.get_mut(IC_W).add_outer(1.0, &dlogits, &out.utterance_vec);
        axpy(&mut grad.get_mut(IC_B).data, 1.0, &dlogits);
        axpy(&mut adj.utterance, 1.0, &ic_w.matvec_t(&dlogits));

        let t_count = u.tokens.len() as f64;
        for (w, tag) in u.slots.iter().enumerate() {
            let gold_slot = space.slot_index(tag)?;
            let mut logits = sl_w.matvec(&out.token_vecs[w]);
            axpy(&mut logits, 1.0, &sl_b.data);
            let probs = softmax(&logits);
            loss += weight / t_count * -probs[gold_slot].max(f64::MIN_POSITIVE).ln();
            let dlogits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(a, &p)| weight / t_count * (p - f64::from(u8::from(a == gold_slot))))
                .collect();
            grad.get_mut(SL_W).add_outer(1.0, &dlogits, &out.token_vecs[w]);
            axpy(&mut grad.get_mut(SL_B).data, 1.0, &dlogits);
            axpy(&mut adj.tokens[w], 1.0, &sl_w.matvec_t(&dlogits));
        }

        let enc_grad = backprop(params, &tape, &adj)?;
        grad.add_assign(&enc_grad, 1.0);
    }
    if !loss.is_finite() {
        return Err(SluError::NonFinite("head joint loss".into()));
    }
    grad.ensure_finite()?;
    Ok((loss, grad))
}

/// Tensor-name scopes adapted at test time per learner.
pub const SCOPE_HEADS: &[&str] = &["ic", "sl"];
pub const SCOPE_HEADS_AND_CONTEXT: &[&str] = &["ic", "sl", "ctx"];

/// `steps` full-batch gradient steps (plain SGD) on the support-set joint
/// cross-entropy, restricted to the scoped tensors. Embeddings stay frozen.
pub fn inner_adapt(
    mut params: ParamSet,
    provider: &EmbeddingProvider,
    space: &LabelSpace,
    support: &[&Utterance],
    steps: usize,
    lr: f64,
    scope: &[&str],
) -> Result<ParamSet, SluError> {
    for _ in 0..steps {
        let (_, mut grad) = head_joint_loss(&params, provider, space, support)?;
        grad.retain_prefixes(scope);
        sgd_step(&mut params, &grad, lr)?;
    }
    Ok(params)
}

/// Proto evaluation: prototypes from support, argmax scoring on the query.
/// No gradient steps.
pub fn proto_evaluate(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    episode: &Episode,
) -> Result<EpisodeMetrics, SluError> {
    let support = encode_support(params, provider, episode)?;
    let protos = compute_prototypes(&episode.intents, &support.entries)?;
    let mut pred_intents = Vec::new();
    let mut gold_intents = Vec::new();
    let mut pred_tags = Vec::new();
    let mut gold_tags = Vec::new();
    for (intent_idx, utts) in episode.query.iter().enumerate() {
        for u in utts {
            let (out, _) = encode(params, provider, &u.tokens)?;
            let dist = proto_predict(&out, &protos)?;
            pred_intents.push(protos.intents[argmax(&dist.intent_probs)].clone());
            gold_intents.push(episode.intents[intent_idx].clone());
            let classes: Vec<&SlotClass> = dist
                .slot_probs
                .iter()
                .map(|p| &protos.slot_classes[argmax(p)])
                .collect();
            pred_tags.push(classes_to_bio(&classes));
            gold_tags.push(u.slots.clone());
        }
    }
    score_episode(&pred_intents, &gold_intents, &pred_tags, &gold_tags)
}

/// Head-based evaluation: argmax of the IC/SL logits on the query.
pub fn head_evaluate(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    space: &LabelSpace,
    episode: &Episode,
) -> Result<EpisodeMetrics, SluError> {
    let ic_w = params.get(IC_W).unwrap();
    let ic_b = params.get(IC_B).unwrap();
    let sl_w = params.get(SL_W).unwrap();
    let sl_b = params.get(SL_B).unwrap();
    let mut pred_intents = Vec::new();
    let mut gold_intents = Vec::new();
    let mut pred_tags = Vec::new();
    let mut gold_tags = Vec::new();
    for (intent_idx, utts) in episode.query.iter().enumerate() {
        for u in utts {
            let (out, _) = encode(params, provider, &u.tokens)?;
            let mut logits = ic_w.matvec(&out.utterance_vec);
            axpy(&mut logits, 1.0, &ic_b.data);
            pred_intents.push(space.intents[argmax(&logits)].clone());
            gold_intents.push(episode.intents[intent_idx].clone());
            let classes: Vec<&SlotClass> = out
                .token_vecs
                .iter()
                .map(|t| {
                    let mut logits = sl_w.matvec(t);
                    axpy(&mut logits, 1.0, &sl_b.data);
                    &space.slot_classes[argmax(&logits)]
                })
                .collect();
            pred_tags.push(classes_to_bio(&classes));
            gold_tags.push(u.slots.clone());
        }
    }
    score_episode(&pred_intents, &gold_intents, &pred_tags, &gold_tags)
}

/// Per-learner test-time adaptation settings.
#[derive(Debug, Clone, Copy)]
pub struct AdaptConfig {
    pub adapt_steps: usize,
    pub lr_adapt: f64,
}

/// Adapt to an episode's support set and score the query.
///
/// Proto computes prototypes and ignores `adapt_steps`. Finetune adapts fresh
/// episode heads only; foMAML adapts fresh heads plus the context layer.
pub fn adapt_and_evaluate(
    pretrained: &ParamSet,
    provider: &EmbeddingProvider,
    episode: &Episode,
    learner: LearnerKind,
    cfg: AdaptConfig,
) -> Result<EpisodeMetrics, SluError> {
    match learner {
        LearnerKind::Proto => proto_evaluate(pretrained, provider, episode),
        LearnerKind::Fomaml | LearnerKind::Finetune => {
            let space = LabelSpace::from_episode(episode);
            let params = pretrained.without_heads().with_fresh_heads(
                space.head_dims(),
                &[episode.seed.run_seed, episode.seed.episode_index],
            );
            let scope = match learner {
                LearnerKind::Fomaml => SCOPE_HEADS_AND_CONTEXT,
                _ => SCOPE_HEADS,
            };
            let support: Vec<&Utterance> = episode.support_utterances().collect();
            let adapted = inner_adapt(
                params,
                provider,
                &space,
                &support,
                cfg.adapt_steps,
                cfg.lr_adapt,
                scope,
            )?;
            head_evaluate(&adapted, provider, &space, episode)
        }
    }
}

/// Pretraining hyperparameters. Defaults mirror the experiment protocol:
/// Adam, lr 0.001 (Proto/Finetune) or 0.003 outer / 0.01 inner with d=8
/// (foMAML), 30 epochs, batch 512, 10 adaptation steps at test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learner: LearnerKind,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_adapt: f64,
    pub inner_steps: usize,
    pub adapt_steps: usize,
}

impl TrainConfig {
    pub fn defaults(learner: LearnerKind) -> Self {
        TrainConfig {
            learner,
            epochs: 30,
            episodes_per_epoch: 100,
            batch_size: 512,
            lr_pretrain: match learner {
                LearnerKind::Fomaml => 0.003,
                _ => 0.001,
            },
            lr_adapt: match learner {
                LearnerKind::Fomaml => 0.01,
                _ => 0.001,
            },
            inner_steps: 8,
            adapt_steps: 10,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            adapt_steps: self.adapt_steps,
            lr_adapt: self.lr_adapt,
        }
    }

    pub fn validate(&self) -> Result<(), SluError> {
        if self.episodes_per_epoch == 0 || self.batch_size == 0 {
            return Err(SluError::Config(
                "episodes_per_epoch and batch_size must be positive".into(),
            ));
        }
        if self.lr_pretrain <= 0.0 || self.lr_adapt <= 0.0 {
            return Err(SluError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Mutable training state; checkpointable for resumable pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        TrainState {
            params,
            adam: AdamState::default(),
            epochs_done: 0,
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ic_acc: Option<f64>,
    pub val_sl_f1: Option<f64>,
}

const VAL_SEED_XOR: u64 = 0x76_61_6c_69_64;
const VAL_EPISODES: usize = 10;

fn validation_row(
    state: &TrainState,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    val: Option<&Dataset>,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
    epoch: usize,
    mean_loss: f64,
) -> Result<EpochRow, SluError> {
    let Some(val) = val else {
        return Ok(EpochRow {
            epoch,
            mean_loss,
            val_ic_acc: None,
            val_sl_f1: None,
        });
    };
    let mut ic = Vec::new();
    let mut f1 = Vec::new();
    for i in 0..VAL_EPISODES {
        let seed = EpisodeSeed::new(run_seed ^ VAL_SEED_XOR, i as u64);
        let episode = sample_episode(seed, val, Phase::Validation, k_s, k_q)?;
        let m = adapt_and_evaluate(&state.params, provider, &episode, cfg.learner, cfg.adapt_config())?;
        ic.push(m.ic_accuracy);
        if let Some(v) = m.sl_f1 {
            f1.push(v);
        }
    }
    Ok(EpochRow {
        epoch,
        mean_loss,
        val_ic_acc: Some(crate::metrics::mean(&ic)),
        val_sl_f1: if f1.is_empty() {
            None
        } else {
            Some(crate::metrics::mean(&f1))
        },
    })
}

/// Episodic Adam pretraining on the Proto joint loss.
#[allow(clippy::too_many_arguments)]
pub fn proto_pretrain(
    state: &mut TrainState,
    data: &Dataset,
    val: Option<&Dataset>,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
) -> Result<Vec<EpochRow>, SluError> {
    cfg.validate()?;
    let mut log = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_per_epoch);
        for i in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + i) as u64;
            let episode = sample_episode(
                EpisodeSeed::new(run_seed, index),
                data,
                Phase::Pretrain,
                k_s,
                k_q,
            )?;
            let (loss, grad) = proto_joint_loss(&state.params, provider, &episode)?;
            adam_step(&mut state.adam, &mut state.params, &grad, cfg.lr_pretrain)?;
            losses.push(loss);
        }
        state.epochs_done = epoch + 1;
        log.push(validation_row(
            state,
            provider,
            cfg,
            val,
            k_s,
            k_q,
            run_seed,
            epoch + 1,
            crate::metrics::mean(&losses),
        )?);
    }
    Ok(log)
}

fn episodic_head_step(
    state: &mut TrainState,
    data: &Dataset,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
    index: u64,
    inner_steps: usize,
) -> Result<f64, SluError> {
    let episode = sample_episode(
        EpisodeSeed::new(run_seed, index),
        data,
        Phase::Pretrain,
        k_s,
        k_q,
    )?;
    let space = LabelSpace::from_episode(&episode);
    let with_heads = state
        .params
        .with_fresh_heads(space.head_dims(), &[run_seed, index]);
    let support: Vec<&Utterance> = episode.support_utterances().collect();
    let adapted = inner_adapt(
        with_heads,
        provider,
        &space,
        &support,
        inner_steps,
        cfg.lr_adapt,
        SCOPE_HEADS_AND_CONTEXT,
    )?;
    let query: Vec<&Utterance> = episode.query_utterances().collect();
    let (loss, mut grad) = head_joint_loss(&adapted, provider, &space, &query)?;
    // First-order outer update: the query gradient at the adapted parameters
    // applies directly to the meta-parameters (context layer only; the
    // episode heads are discarded).
    grad.retain_prefixes(&["ctx"]);
    sgd_step(&mut state.params, &grad, cfg.lr_pretrain)?;
    Ok(loss)
}

/// foMAML pretraining: inner SGD adaptation on support, first-order outer
/// step from the query loss at the adapted parameters.
#[allow(clippy::too_many_arguments)]
pub fn fomaml_pretrain(
    state: &mut TrainState,
    data: &Dataset,
    val: Option<&Dataset>,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
) -> Result<Vec<EpochRow>, SluError> {
    cfg.validate()?;
    let mut log = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_per_epoch);
        for i in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + i) as u64;
            losses.push(episodic_head_step(
                state,
                data,
                provider,
                cfg,
                k_s,
                k_q,
                run_seed,
                index,
                cfg.inner_steps,
            )?);
        }
        state.epochs_done = epoch + 1;
        log.push(validation_row(
            state,
            provider,
            cfg,
            val,
            k_s,
            k_q,
            run_seed,
            epoch + 1,
            crate::metrics::mean(&losses),
        )?);
    }
    Ok(log)
}

/// Plain episodic gradient training on the query loss (no inner adaptation).
/// foMAML with d = 0 must follow this trajectory bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn plain_episodic_pretrain(
    state: &mut TrainState,
    data: &Dataset,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
) -> Result<Vec<f64>, SluError> {
    cfg.validate()?;
    let mut losses = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        for i in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + i) as u64;
            losses.push(episodic_head_step(
                state, data, provider, cfg, k_s, k_q, run_seed, index, 0,
            )?);
        }
        state.epochs_done = epoch + 1;
    }
    Ok(losses)
}

/// Supervised batch pretraining over the pooled pretrain utterances with a
/// global label space (Finetune).
#[allow(clippy::too_many_arguments)]
pub fn finetune_pretrain(
    state: &mut TrainState,
    data: &Dataset,
    val: Option<&Dataset>,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
) -> Result<Vec<EpochRow>, SluError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SluError::EmptyInput("pretrain dataset".into()));
    }
    let space = LabelSpace::from_dataset(data);
    if !state.params.has_heads() {
        state.params = state
            .params
            .with_fresh_heads(space.head_dims(), &[run_seed]);
    }
    let mut log = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng =
                crate::rng::derive_rng(&[run_seed, epoch as u64, crate::rng::salt::BATCH]);
            order.shuffle(&mut rng);
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &data.utterances()[i]).collect();
            let (loss, grad) = head_joint_loss(&state.params, provider, &space, &batch)?;
            adam_step(&mut state.adam, &mut state.params, &grad, cfg.lr_pretrain)?;
            losses.push(loss);
        }
        state.epochs_done = epoch + 1;
        log.push(validation_row(
            state,
            provider,
            cfg,
            val,
            k_s,
            k_q,
            run_seed,
            epoch + 1,
            crate::metrics::mean(&losses),
        )?);
    }
    Ok(log)
}

/// Dispatch pretraining by learner kind.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    state: &mut TrainState,
    data: &Dataset,
    val: Option<&Dataset>,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    k_s: usize,
    k_q: usize,
    run_seed: u64,
) -> Result<Vec<EpochRow>, SluError> {
    match cfg.learner {
        LearnerKind::Proto => proto_pretrain(state, data, val, provider, cfg, k_s, k_q, run_seed),
        LearnerKind::Fomaml => fomaml_pretrain(state, data, val, provider, cfg, k_s, k_q, run_seed),
        LearnerKind::Finetune => {
            finetune_pretrain(state, data, val, provider, cfg, k_s, k_q, run_seed)
        }
    }
}
