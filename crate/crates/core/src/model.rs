//! Toy explainer `p(m | x)` and masked-input predictor `q(y | m ⊙ x)`.
//!
//! Both halves own separate embeddings and unit encoders. A unit (sentence or
//! token) is encoded from the mean, first and last token embeddings through a
//! two-layer tanh MLP. The explainer scores each unit from its own encoding,
//! the document mean encoding and the query encoding. The predictor only ever
//! sees `Σ_j m_j h_j / n` plus the query, so units with `m_j = 0` cannot
//! influence its output.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Granularity, LabelSpace, UnitTokens, Vocab};
use crate::distributions::{
    concrete_var, hard_concrete_var, hard_kuma_var, kuma_var, ConcreteNoise, StretchParams,
    LOGIT_CLAMP,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Classes(usize),
    Regression,
}

impl OutputKind {
    pub fn width(self) -> usize {
        match self {
            OutputKind::Classes(c) => c,
            OutputKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub granularity: Granularity,
    pub output: OutputKind,
    pub has_query: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (vocab {}, embed {}, hidden {})",
                self.vocab_size, self.embed_dim, self.hidden_dim
            )));
        }
        if let OutputKind::Classes(c) = self.output {
            if c < 2 {
                return Err(Error::Config("need at least two classes".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    #[default]
    Concrete,
    HardConcrete,
    Kuma,
    HardKuma,
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concrete" => Ok(Self::Concrete),
            "hard_concrete" => Ok(Self::HardConcrete),
            "kuma" => Ok(Self::Kuma),
            "hard_kuma" => Ok(Self::HardKuma),
            other => Err(Error::Config(format!("unknown distribution kind {other:?}"))),
        }
    }
}

/// Sampler settings shared by training and sparsity statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: DistributionKind,
    pub tau: f64,
    pub noise: ConcreteNoise,
    pub stretch: StretchParams,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: DistributionKind::Concrete,
            tau: crate::distributions::DEFAULT_TAU,
            noise: ConcreteNoise::Logistic,
            stretch: StretchParams::default(),
        }
    }
}

impl SamplerConfig {
    /// Scalar version of the training-time sampler for one unit.
    pub fn sample_scalar(&self, logit: f64, u: f64) -> Result<f64> {
        use crate::distributions as d;
        let logit = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        match self.kind {
            DistributionKind::Concrete => {
                d::sample_concrete(logit, self.tau, d::NoiseSample::from_uniform(u)?, self.noise)
            }
            DistributionKind::HardConcrete => d::sample_hard_concrete(
                logit,
                self.tau,
                d::NoiseSample::from_uniform(u)?,
                self.stretch,
                self.noise,
            ),
            DistributionKind::Kuma => d::sample_kuma(d::kuma_from_logit(logit), u),
            DistributionKind::HardKuma => {
                d::sample_hard_kuma(d::kuma_from_logit(logit), u, self.stretch)
            }
        }
    }
}

const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: Option<LabelSpace>,
    #[serde(with = "param_map")]
    pub params: BTreeMap<String, Tensor>,
}

mod param_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        shape: Vec<usize>,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, Tensor>, s: S) -> Result<S::Ok, S::Error> {
        let flat: BTreeMap<&str, Entry> = m
            .iter()
            .map(|(k, t)| {
                (
                    k.as_str(),
                    Entry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Tensor>, D::Error> {
        let flat = BTreeMap::<String, Entry>::deserialize(d)?;
        flat.into_iter()
            .map(|(k, e)| {
                Tensor::new(e.shape, e.data)
                    .map(|t| (k, t))
                    .map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

fn uniform_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-INIT_SCALE, INIT_SCALE)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Handles to every parameter recorded on a tape for one step.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-unit encodings of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, U, H]`
    pub units: Var,
    /// `[B, H]`, present when the batch carries queries.
    pub query: Option<Var>,
}

pub const EXPLAINER: &str = "explainer";
pub const PREDICTOR: &str = "predictor";

impl Model {
    /// Fresh parameters: embeddings and weights uniform in ±0.1, biases zero,
    /// explainer head zero so every initial logit is 0.
    pub fn new(config: ModelConfig, vocab: Vocab, labels: Option<LabelSpace>, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = Rng::new(seed, "init");
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let mut params = BTreeMap::new();
        for part in [EXPLAINER, PREDICTOR] {
            params.insert(format!("{part}.embed"), uniform_tensor(vec![v, d], &mut rng));
            params.insert(format!("{part}.mlp1.w"), uniform_tensor(vec![3 * d, h], &mut rng));
            params.insert(format!("{part}.mlp1.b"), Tensor::zeros(vec![h]));
            params.insert(format!("{part}.mlp2.w"), uniform_tensor(vec![h, h], &mut rng));
            params.insert(format!("{part}.mlp2.b"), Tensor::zeros(vec![h]));
        }
        params.insert("explainer.head.unit".into(), Tensor::zeros(vec![h, 1]));
        params.insert("explainer.head.doc".into(), Tensor::zeros(vec![h, 1]));
        if config.has_query {
            params.insert("explainer.head.query".into(), Tensor::zeros(vec![h, 1]));
        }
        params.insert("explainer.head.bias".into(), Tensor::zeros(vec![1]));
        let agg = if config.has_query { 2 * h } else { h };
        params.insert("predictor.out1.w".into(), uniform_tensor(vec![agg, h], &mut rng));
        params.insert("predictor.out1.b".into(), Tensor::zeros(vec![h]));
        let w = config.output.width();
        params.insert("predictor.out2.w".into(), uniform_tensor(vec![h, w], &mut rng));
        params.insert("predictor.out2.b".into(), Tensor::zeros(vec![w]));
        for t in params.values_mut() {
            t.set_requires_grad(true);
        }
        Ok(Self {
            config,
            vocab,
            labels,
            params,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Records every parameter on `tape`; those for which `trainable` returns
    /// false enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    tape.leaf(t)
                } else {
                    let mut c = t.clone();
                    c.set_requires_grad(false);
                    tape.leaf(&c)
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Every parameter as a constant except `name`, which is bound to `var`.
    pub fn bind_override(&self, tape: &mut Tape, name: &str, var: Var) -> Result<Bound> {
        if !self.params.contains_key(name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
        let mut bound = self.bind(tape, |_| false);
        bound.vars.insert(name.to_owned(), var);
        Ok(bound)
    }

    fn encode_tokens(&self, tape: &mut Tape, p: &Bound, part: &str, toks: &UnitTokens) -> Result<Var> {
        let table = p.get(&format!("{part}.embed"))?;
        let emb = tape.embedding(table, &toks.ids, &[toks.rows, toks.len])?;
        let pool = tape.constant(vec![toks.rows, toks.len, 1], toks.pool.clone())?;
        let weighted = tape.mul(emb, pool)?;
        let mean = tape.sum_axis(weighted, 1)?;
        let first = tape.embedding(table, &toks.first, &[toks.rows])?;
        let last = tape.embedding(table, &toks.last, &[toks.rows])?;
        let x = tape.concat(&[mean, first, last])?;
        let h = self.dense(tape, p, &format!("{part}.mlp1"), x)?;
        let h = tape.tanh(h)?;
        let h = self.dense(tape, p, &format!("{part}.mlp2"), h)?;
        tape.tanh(h)
    }

    fn dense(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Encodes every unit (and the query) of `batch` with one half's encoder.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, part: &str, batch: &Batch) -> Result<Encoded> {
        let h = self.config.hidden_dim;
        let flat = self.encode_tokens(tape, p, part, &batch.tokens)?;
        let units = tape.reshape(flat, vec![batch.size, batch.units, h])?;
        let query = match (&batch.query, self.config.has_query) {
            (Some(q), true) => Some(self.encode_tokens(tape, p, part, q)?),
            (Some(_), false) => {
                return Err(Error::Config("batch has queries but the model was built without".into()))
            }
            (None, _) => None,
        };
        Ok(Encoded { units, query })
    }

    /// `[B, 1]` constant with `1 / n_b`.
    fn inv_counts(tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let inv = batch.counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
        tape.constant(vec![batch.size, 1], inv)
    }

    /// Logits `[B, U]` of the per-unit Bernoulli posteriors, clamped to ±15.
    pub fn explain(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, batch: &Batch) -> Result<Var> {
        let (b, u) = (batch.size, batch.units);
        let valid = tape.constant(vec![b, u, 1], batch.valid.clone())?;
        let masked = tape.mul(enc.units, valid)?;
        let total = tape.sum_axis(masked, 1)?;
        let inv = Self::inv_counts(tape, batch)?;
        let doc = tape.mul(total, inv)?;

        let unit_score = tape.matmul(enc.units, p.get("explainer.head.unit")?)?;
        let unit_score = tape.reshape(unit_score, vec![b, u])?;
        let doc_score = tape.matmul(doc, p.get("explainer.head.doc")?)?;
        let mut logits = tape.add(unit_score, doc_score)?;
        if let Some(q) = enc.query {
            let q_score = tape.matmul(q, p.get("explainer.head.query")?)?;
            logits = tape.add(logits, q_score)?;
        }
        let logits = tape.add(logits, p.get("explainer.head.bias")?)?;
        tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Task output from the masked aggregate: class log-probabilities `[B, C]`
    /// or regression values `[B, 1]`. `mask` is `[B, U]`; padding units must
    /// already be zero.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, mask: Var, batch: &Batch) -> Result<Var> {
        let (b, u) = (batch.size, batch.units);
        if tape.shape(mask) != [b, u] {
            return Err(Error::shape(
                "predict",
                format!("mask shape {:?} for {b} x {u} units", tape.shape(mask)),
            ));
        }
        let m = tape.reshape(mask, vec![b, u, 1])?;
        let gated = tape.mul(enc.units, m)?;
        let total = tape.sum_axis(gated, 1)?;
        let inv = Self::inv_counts(tape, batch)?;
        let mut agg = tape.mul(total, inv)?;
        if let Some(q) = enc.query {
            agg = tape.concat(&[agg, q])?;
        }
        let h = self.dense(tape, p, "predictor.out1", agg)?;
        let h = tape.tanh(h)?;
        let out = self.dense(tape, p, "predictor.out2", h)?;
        match self.config.output {
            OutputKind::Classes(_) => tape.log_softmax(out),
            OutputKind::Regression => Ok(out),
        }
    }
}

/// Draws a relaxed mask `[B, U]` for `logits`; padding units are zeroed.
pub fn sample_mask(
    tape: &mut Tape,
    logits: Var,
    sampler: &SamplerConfig,
    rng: &mut Rng,
    valid: &[f64],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if valid.len() != tape.value(logits).len() {
        return Err(Error::shape("sample_mask", format!("{} validity flags for {shape:?}", valid.len())));
    }
    let uniforms: Vec<f64> = (0..valid.len()).map(|_| rng.uniform()).collect();
    sample_mask_with(tape, logits, sampler, &uniforms, valid)
}

/// [`sample_mask`] with the noise supplied explicitly.
pub fn sample_mask_with(
    tape: &mut Tape,
    logits: Var,
    sampler: &SamplerConfig,
    uniforms: &[f64],
    valid: &[f64],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let m = match sampler.kind {
        DistributionKind::Concrete => concrete_var(tape, logits, sampler.tau, uniforms, sampler.noise)?,
        DistributionKind::HardConcrete => {
            hard_concrete_var(tape, logits, sampler.tau, uniforms, sampler.stretch, sampler.noise)?
        }
        DistributionKind::Kuma => kuma_var(tape, logits, uniforms)?,
        DistributionKind::HardKuma => hard_kuma_var(tape, logits, uniforms, sampler.stretch)?,
    };
    let valid = tape.constant(shape, valid.to_vec())?;
    tape.mul(m, valid)
}

/// Number of units selected at inference: `clamp(⌈π·n⌉, 1, n)`.
pub fn budget(pi: f64, n: usize) -> usize {
    crate::data::ceil_count(pi, n).clamp(1, n.max(1)).min(n)
}

/// Deterministic top-k mask over `n` units by descending probability; ties go
/// to the lower index.
pub fn infer_mask(probs: &[f64], pi: f64) -> Vec<u8> {
    let n = probs.len();
    if n == 0 {
        return Vec::new();
    }
    let k = budget(pi, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mask = vec![0u8; n];
    for &j in &order[..k] {
        mask[j] = 1;
    }
    mask
}
