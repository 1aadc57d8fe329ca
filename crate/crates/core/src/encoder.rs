//! Trainable utterance/token encoder: file-loaded static embeddings plus an
//! optional windowed-affine context layer, with exact reverse-mode gradients.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SluError;
use crate::rng::{derive_rng, fnv1a, salt};
use crate::tensor::{axpy, Gradient, Tensor, TensorMap};

/// What to return for tokens absent from the embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OovPolicy {
    Zero,
    /// Fixed pseudo-random vector derived from the token text and a salt;
    /// distinct OOV tokens stay distinct.
    HashedRandomFixed,
}

/// Frozen token embedding table. Lookup is a pure function of the token text.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
    oov_policy: OovPolicy,
    oov_salt: u64,
}

/// Outcome counters from `load_embeddings`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmbeddingLoadReport {
    pub tokens: usize,
    pub duplicates_ignored: usize,
}

impl EmbeddingProvider {
    pub fn from_table(
        dim: usize,
        table: BTreeMap<String, Vec<f64>>,
        oov_policy: OovPolicy,
    ) -> Result<Self, SluError> {
        for (token, v) in &table {
            if v.len() != dim {
                return Err(SluError::ShapeMismatch(format!(
                    "embedding for {token:?} has dim {}, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(EmbeddingProvider {
            dim,
            table,
            oov_policy,
            oov_salt: 0x0ba5_e0f5_a175_ee0d,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_len(&self) -> usize {
        self.table.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.table.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.table.get(token) {
            return v.clone();
        }
        match self.oov_policy {
            OovPolicy::Zero => vec![0.0; self.dim],
            OovPolicy::HashedRandomFixed => {
                let h = fnv1a(token.as_bytes());
                let mut rng = derive_rng(&[self.oov_salt, h, salt::OOV]);
                (0..self.dim).map(|_| rng.gen_range(-0.5..0.5)).collect()
            }
        }
    }

    pub fn table(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.table
    }

    /// Content checksum over the whole table; used to assert embeddings stay
    /// frozen across training.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (token, v) in &self.table {
            bytes.extend_from_slice(token.as_bytes());
            bytes.push(0);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

/// Load a whitespace-separated text embedding file: token then D floats per
/// line. Duplicate tokens resolve first-wins.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    oov_policy: OovPolicy,
) -> Result<(EmbeddingProvider, EmbeddingLoadReport), SluError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SluError::io(path.display().to_string(), e))?;
    load_embeddings_reader(std::io::BufReader::new(file), &path.display().to_string(), oov_policy)
}

pub fn load_embeddings_reader<R: BufRead>(
    reader: R,
    path: &str,
    oov_policy: OovPolicy,
) -> Result<(EmbeddingProvider, EmbeddingLoadReport), SluError> {
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut dim = None;
    let mut report = EmbeddingLoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| SluError::io(format!("{path} line {line_no}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap().to_string();
        let values: Result<Vec<f64>, _> = fields.map(str::parse).collect();
        let values = values.map_err(|e| SluError::EmbeddingParse {
            path: path.to_string(),
            line: line_no,
            message: format!("unparsable float: {e}"),
        })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(SluError::EmbeddingParse {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("dimension {} differs from {d}", values.len()),
                })
            }
            _ => {}
        }
        if table.contains_key(&token) {
            report.duplicates_ignored += 1;
        } else {
            table.insert(token, values);
        }
    }
    let dim = dim.ok_or_else(|| SluError::EmptyInput(format!("embedding file {path}")))?;
    report.tokens = table.len();
    Ok((EmbeddingProvider::from_table(dim, table, oov_policy)?, report))
}

/// Context layer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ContextKind {
    /// Token vectors are the raw embeddings; no trainable tensors.
    MeanPool,
    /// token_vec[w] = tanh(W^T concat(window around w) + b).
    WindowedAffine { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding dimension D.
    pub dim_in: usize,
    /// Context-layer output width D'.
    pub dim_out: usize,
    pub context: ContextKind,
}

impl EncoderConfig {
    pub fn mean_pool(dim: usize) -> Self {
        EncoderConfig {
            dim_in: dim,
            dim_out: dim,
            context: ContextKind::MeanPool,
        }
    }

    pub fn windowed(dim_in: usize, dim_out: usize, window: usize) -> Self {
        EncoderConfig {
            dim_in,
            dim_out,
            context: ContextKind::WindowedAffine { window },
        }
    }

    pub fn validate(&self) -> Result<(), SluError> {
        if self.dim_in == 0 || self.dim_out == 0 {
            return Err(SluError::Config("encoder dims must be >= 1".into()));
        }
        match self.context {
            ContextKind::MeanPool => {
                if self.dim_in != self.dim_out {
                    return Err(SluError::Config(
                        "mean-pool context requires dim_out == dim_in".into(),
                    ));
                }
            }
            ContextKind::WindowedAffine { window } => {
                if window % 2 == 0 || window == 0 {
                    return Err(SluError::Config("context window must be odd".into()));
                }
            }
        }
        Ok(())
    }
}

/// Sizes of the parametric IC/SL prediction heads, when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub n_intents: usize,
    pub n_slot_classes: usize,
}

pub const CTX_W: &str = "ctx.w";
pub const CTX_B: &str = "ctx.b";
pub const IC_W: &str = "ic.w";
pub const IC_B: &str = "ic.b";
pub const SL_W: &str = "sl.w";
pub const SL_B: &str = "sl.b";

/// All trainable tensors plus the encoder configuration. The embedding
/// provider stays outside and is never mutated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub encoder: EncoderConfig,
    pub head_dims: Option<HeadDims>,
    pub tensors: TensorMap,
}

fn xavier_fill<R: Rng>(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut R) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in &mut t.data {
        *v = rng.gen_range(-s..s);
    }
}

/// Initialize encoder parameters: weights uniform in [-s, s] with
/// s = sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic given seed.
pub fn init_params(seed: u64, config: EncoderConfig) -> Result<ParamSet, SluError> {
    config.validate()?;
    let mut rng = derive_rng(&[seed, salt::INIT]);
    let mut tensors = TensorMap::new();
    if let ContextKind::WindowedAffine { window } = config.context {
        let fan_in = window * config.dim_in;
        let mut w = Tensor::zeros(&[fan_in, config.dim_out]);
        xavier_fill(&mut w, fan_in, config.dim_out, &mut rng);
        tensors.insert(CTX_W.into(), w);
        tensors.insert(CTX_B.into(), Tensor::zeros(&[config.dim_out]));
    }
    Ok(ParamSet {
        encoder: config,
        head_dims: None,
        tensors,
    })
}

impl ParamSet {
    /// Names of all trainable tensors (deterministic order).
    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn has_context(&self) -> bool {
        self.tensors.contains_key(CTX_W)
    }

    pub fn has_heads(&self) -> bool {
        self.head_dims.is_some()
    }

    /// Return a copy with freshly initialized IC/SL heads of the given sizes.
    /// `stream` identifies the init stream (e.g. run seed + episode index).
    pub fn with_fresh_heads(&self, dims: HeadDims, stream: &[u64]) -> ParamSet {
        let mut out = self.clone();
        let mut parts = stream.to_vec();
        parts.push(salt::HEADS);
        let mut rng = derive_rng(&parts);
        let d = self.encoder.dim_out;
        let mut ic_w = Tensor::zeros(&[dims.n_intents, d]);
        xavier_fill(&mut ic_w, d, dims.n_intents, &mut rng);
        let mut sl_w = Tensor::zeros(&[dims.n_slot_classes, d]);
        xavier_fill(&mut sl_w, d, dims.n_slot_classes, &mut rng);
        out.tensors.insert(IC_W.into(), ic_w);
        out.tensors.insert(IC_B.into(), Tensor::zeros(&[dims.n_intents]));
        out.tensors.insert(SL_W.into(), sl_w);
        out.tensors.insert(SL_B.into(), Tensor::zeros(&[dims.n_slot_classes]));
        out.head_dims = Some(dims);
        out
    }

    /// Drop head tensors, keeping the encoder.
    pub fn without_heads(&self) -> ParamSet {
        let mut out = self.clone();
        out.tensors.retain(|k, _| k.starts_with("ctx"));
        out.head_dims = None;
        out
    }
}

/// One utterance vector plus one vector per token, both in R^{D'}.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub utterance_vec: Vec<f64>,
    pub token_vecs: Vec<Vec<f64>>,
}

/// Forward records needed to compute exact parameter gradients.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Per token: concatenated window of input embeddings (windowed-affine only).
    window_inputs: Vec<Vec<f64>>,
    /// Per token: post-activation outputs (for the tanh derivative).
    outputs: Vec<Vec<f64>>,
    n_tokens: usize,
    dim_out: usize,
}

/// Adjoints of an `EncoderOutput`, shape-congruent to it.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputAdjoints {
    pub utterance: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
}

impl OutputAdjoints {
    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        OutputAdjoints {
            utterance: vec![0.0; dim],
            tokens: vec![vec![0.0; dim]; n_tokens],
        }
    }
}

/// Encode one token sequence. Pure in (params, tokens).
pub fn encode(
    params: &ParamSet,
    provider: &EmbeddingProvider,
    tokens: &[String],
) -> Result<(EncoderOutput, Tape), SluError> {
    if tokens.is_empty() {
        return Err(SluError::EmptyInput("token sequence".into()));
    }
    if provider.dim() != params.encoder.dim_in {
        return Err(SluError::ShapeMismatch(format!(
            "provider dim {} vs encoder dim_in {}",
            provider.dim(),
            params.encoder.dim_in
        )));
    }
    let embeddings: Vec<Vec<f64>> = tokens.iter().map(|t| provider.lookup(t)).collect();
    let t_count = tokens.len();
    let d_out = params.encoder.dim_out;
    let (token_vecs, tape) = match params.encoder.context {
        ContextKind::MeanPool => (
            embeddings,
            Tape {
                window_inputs: Vec::new(),
                outputs: Vec::new(),
                n_tokens: t_count,
                dim_out: d_out,
            },
        ),
        ContextKind::WindowedAffine { window } => {
            let half = window / 2;
            let d_in = params.encoder.dim_in;
            let w = params.get(CTX_W).expect("ctx.w present for windowed-affine");
            let b = params.get(CTX_B).expect("ctx.b present for windowed-affine");
            let mut vecs = Vec::with_capacity(t_count);
            let mut inputs = Vec::with_capacity(t_count);
            for center in 0..t_count {
                let mut x = Vec::with_capacity(window * d_in);
                for offset in 0..window {
                    let pos = center as isize + offset as isize - half as isize;
                    if pos < 0 || pos >= t_count as isize {
                        x.extend(std::iter::repeat(0.0).take(d_in));
                    } else {
                        x.extend_from_slice(&embeddings[pos as usize]);
                    }
                }
                let mut z = w.matvec_t(&x);
                for (zv, &bv) in z.iter_mut().zip(&b.data) {
                    *zv = (*zv + bv).tanh();
                }
                inputs.push(x);
                vecs.push(z);
            }
            (
                vecs,
                Tape {
                    window_inputs: inputs,
                    outputs: Vec::new(),
                    n_tokens: t_count,
                    dim_out: d_out,
                },
            )
        }
    };
    let mut utterance = vec![0.0; d_out];
    for v in &token_vecs {
        axpy(&mut utterance, 1.0 / t_count as f64, v);
    }
    let output = EncoderOutput {
        utterance_vec: utterance,
        token_vecs,
    };
    let tape = Tape {
        outputs: output.token_vecs.clone(),
        ..tape
    };
    Ok((output, tape))
}

/// Exact reverse-mode gradient of ⟨adjoints, output⟩ with respect to the
/// trainable context tensors. The utterance adjoint folds into every token
/// adjoint through the mean pooling.
pub fn backprop(
    params: &ParamSet,
    tape: &Tape,
    adjoints: &OutputAdjoints,
) -> Result<Gradient, SluError> {
    if adjoints.tokens.len() != tape.n_tokens
        || adjoints.utterance.len() != tape.dim_out
        || adjoints.tokens.iter().any(|a| a.len() != tape.dim_out)
    {
        return Err(SluError::ShapeMismatch(
            "adjoints not congruent to encoder output".into(),
        ));
    }
    let mut grad = Gradient::default();
    match params.encoder.context {
        ContextKind::MeanPool => Ok(grad),
        ContextKind::WindowedAffine { .. } => {
            let w = params.get(CTX_W).unwrap();
            grad.tensors.insert(CTX_W.into(), Tensor::zeros_like(w));
            grad.tensors
                .insert(CTX_B.into(), Tensor::zeros_like(params.get(CTX_B).unwrap()));
            let t_count = tape.n_tokens as f64;
            for (idx, token_adj) in adjoints.tokens.iter().enumerate() {
                let y = &tape.outputs[idx];
                // g_z = (token_adj + utt_adj/T) * (1 - y^2)
                let gz: Vec<f64> = token_adj
                    .iter()
                    .zip(&adjoints.utterance)
                    .zip(y)
                    .map(|((a, u), yv)| (a + u / t_count) * (1.0 - yv * yv))
                    .collect();
                grad.get_mut(CTX_W)
                    .add_outer(1.0, &tape.window_inputs[idx], &gz);
                axpy(&mut grad.get_mut(CTX_B).data, 1.0, &gz);
            }
            Ok(grad)
        }
    }
}

/// θ ← θ − lr · g on every tensor present in the gradient.
pub fn sgd_step(params: &mut ParamSet, grad: &Gradient, lr: f64) -> Result<(), SluError> {
    grad.ensure_finite()?;
    for (name, g) in &grad.tensors {
        let t = params
            .tensors
            .get_mut(name)
            .ok_or_else(|| SluError::ShapeMismatch(format!("unknown parameter tensor {name}")))?;
        if t.shape != g.shape {
            return Err(SluError::ShapeMismatch(format!("tensor {name} shape mismatch")));
        }
        axpy(&mut t.data, -lr, &g.data);
    }
    Ok(())
}

/// Adam moment estimates, keyed like the parameters they track.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction over the tensors in the gradient.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamSet,
    grad: &Gradient,
    lr: f64,
) -> Result<(), SluError> {
    grad.ensure_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in &grad.tensors {
        let p = params
            .tensors
            .get_mut(name)
            .ok_or_else(|| SluError::ShapeMismatch(format!("unknown parameter tensor {name}")))?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        for i in 0..g.data.len() {
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g.data[i];
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g.data[i] * g.data[i];
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
