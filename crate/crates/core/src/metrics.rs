//! Task and rationale-agreement metrics, sparsity statistics and the exact
//! information-bottleneck bound verifier on discrete toy joints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{expand_sentence_mask, make_batch, Batch, Document, Granularity, Targets};
use crate::distributions::kl_bernoulli;
use crate::error::{Error, Result};
use crate::model::{infer_mask, Model, SamplerConfig, EXPLAINER, PREDICTOR};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tape};

pub const IOU_THRESHOLD: f64 = 0.1;

/// Maximal runs of ones as half-open ranges.
pub fn spans(mask: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in mask.iter().enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

fn span_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Span match counts, summed over documents for a micro-averaged score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub matched_pred: usize,
    pub total_pred: usize,
    pub matched_gold: usize,
    pub total_gold: usize,
}

impl SpanCounts {
    pub fn of(pred: &[u8], gold: &[u8], threshold: f64) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::Data(format!(
                "mask lengths differ: {} vs {}",
                pred.len(),
                gold.len()
            )));
        }
        let (ps, gs) = (spans(pred), spans(gold));
        let hit = |s: &(usize, usize), others: &[(usize, usize)]| {
            others.iter().any(|o| span_iou(*s, *o) >= threshold)
        };
        Ok(Self {
            matched_pred: ps.iter().filter(|s| hit(s, &gs)).count(),
            total_pred: ps.len(),
            matched_gold: gs.iter().filter(|s| hit(s, &ps)).count(),
            total_gold: gs.len(),
        })
    }

    pub fn add(&mut self, o: Self) {
        self.matched_pred += o.matched_pred;
        self.total_pred += o.total_pred;
        self.matched_gold += o.matched_gold;
        self.total_gold += o.total_gold;
    }

    pub fn f1(&self) -> f64 {
        match (self.total_pred, self.total_gold) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (p, g) => f1(
                self.matched_pred as f64 / p as f64,
                self.matched_gold as f64 / g as f64,
            ),
        }
    }
}

pub fn iou_f1(pred: &[u8], gold: &[u8], threshold: f64) -> Result<f64> {
    SpanCounts::of(pred, gold, threshold).map(|c| c.f1())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TokenCounts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TokenCounts {
    pub fn of(pred: &[u8], gold: &[u8]) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::Data(format!(
                "mask lengths differ: {} vs {}",
                pred.len(),
                gold.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            c.tp += usize::from(p != 0 && g != 0);
            c.pred += usize::from(p != 0);
            c.gold += usize::from(g != 0);
        }
        Ok(c)
    }

    pub fn add(&mut self, o: Self) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }

    /// Empty-vs-empty scores 1; an empty side against a non-empty one scores 0.
    pub fn prf(&self) -> Prf {
        if self.pred == 0 && self.gold == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let (p, r) = (ratio(self.tp, self.pred), ratio(self.tp, self.gold));
        Prf {
            precision: p,
            recall: r,
            f1: f1(p, r),
        }
    }
}

pub fn token_f1(pred: &[u8], gold: &[u8]) -> Result<Prf> {
    TokenCounts::of(pred, gold).map(|c| c.prf())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Support-weighted F1 over the classes present in `labels`.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data("weighted F1 needs equal, non-empty inputs".into()));
    }
    let mut tp = BTreeMap::<usize, usize>::new();
    let mut fp = BTreeMap::<usize, usize>::new();
    let mut support = BTreeMap::<usize, usize>::new();
    for (&p, &y) in preds.iter().zip(labels) {
        *support.entry(y).or_default() += 1;
        if p == y {
            *tp.entry(y).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(support
        .iter()
        .map(|(c, &s)| {
            let t = tp.get(c).copied().unwrap_or(0) as f64;
            let f = fp.get(c).copied().unwrap_or(0) as f64;
            let prec = if t + f == 0.0 { 0.0 } else { t / (t + f) };
            s as f64 / n * f1(prec, t / s as f64)
        })
        .sum())
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data("MSE needs equal, non-empty inputs".into()));
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / labels.len() as f64)
}

/// Weighted F1 for classes, MSE for regression.
pub fn task_metric(preds: &Predictions, targets: &Targets) -> Result<f64> {
    match (preds, targets) {
        (Predictions::Classes(p), Targets::Classes(y)) => weighted_f1(p, y),
        (Predictions::Values(p), Targets::Values(y)) => mse(p, y),
        _ => Err(Error::Data("prediction and label kinds differ".into())),
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Mean over documents and runs of the fraction of units with `m* > 0.5`.
    pub mean: f64,
    /// Across-run variance of the open-unit count, averaged over documents.
    pub var: f64,
}

/// Monte Carlo sparsity of training-mode masks drawn from fixed per-unit
/// logits. `logits[d]` holds the valid units of document `d`.
pub fn sparsity_stats(logits: &[Vec<f64>], sampler: &SamplerConfig, runs: usize, rng: &mut Rng) -> Result<SparsityStats> {
    if runs == 0 || logits.is_empty() {
        return Err(Error::Config("sparsity needs at least one run and one document".into()));
    }
    let (mut mean, mut var) = (0.0, 0.0);
    for doc in logits {
        let n = doc.len().max(1) as f64;
        let counts = (0..runs)
            .map(|_| {
                doc.iter().try_fold(0.0, |acc, &l| {
                    sampler.sample_scalar(l, rng.uniform()).map(|m| acc + f64::from(u8::from(m > 0.5)))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let mu = counts.iter().sum::<f64>() / runs as f64;
        mean += mu / n;
        var += counts.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / runs as f64;
    }
    let d = logits.len() as f64;
    Ok(SparsityStats {
        mean: mean / d,
        var: var / d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_metric: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub iou_f1: f64,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    pub sparsity_mean: f64,
    pub sparsity_var: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub pi: f64,
    /// Predict from every unit and report the all-ones mask.
    pub full_context: bool,
    pub sampler: SamplerConfig,
    /// Monte Carlo runs for sparsity; 0 skips them and reports the mean
    /// inclusion probability with zero variance.
    pub sparsity_runs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

/// Per-document outputs of a frozen model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Predictions,
    /// Unit-level inference masks.
    pub masks: Vec<Vec<u8>>,
    /// Unit-level explainer logits.
    pub logits: Vec<Vec<f64>>,
}

fn unit_slice(batch: &Batch, values: &[f64], b: usize) -> Vec<f64> {
    let start = b * batch.units;
    values[start..start + batch.counts[b]].to_vec()
}

fn token_mask(doc: &Document, unit_mask: &[u8], granularity: Granularity) -> Vec<u8> {
    match granularity {
        Granularity::Sentence => expand_sentence_mask(&doc.sentences, unit_mask),
        Granularity::Token => unit_mask.to_vec(),
    }
}

/// Runs top-π inference over `docs` and scores the result.
pub fn evaluate(model: &Model, docs: &[Document], opts: &EvalOptions) -> Result<Evaluation> {
    if docs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let gran = model.config.granularity;
    let mut masks = Vec::with_capacity(docs.len());
    let mut logits = Vec::with_capacity(docs.len());
    let mut class_preds = Vec::new();
    let mut value_preds = Vec::new();
    let mut tape = Tape::new();
    let order: Vec<usize> = (0..docs.len()).collect();
    for chunk in order.chunks(opts.batch_size.max(1)) {
        let batch = make_batch(docs, chunk, &model.vocab, model.labels.as_ref(), gran)?;
        tape.reset();
        let p = model.bind(&mut tape, |_| false);
        let enc = model.encode(&mut tape, &p, EXPLAINER, &batch)?;
        let lv = model.explain(&mut tape, &p, &enc, &batch)?;
        let all_logits = tape.value(lv).to_vec();
        let mut hard = vec![0.0; batch.size * batch.units];
        for b in 0..batch.size {
            let l = unit_slice(&batch, &all_logits, b);
            let m = if opts.full_context {
                vec![1; l.len()]
            } else {
                let theta: Vec<f64> = l.iter().map(|&x| sigmoid(x)).collect();
                infer_mask(&theta, opts.pi)
            };
            for (j, &v) in m.iter().enumerate() {
                hard[b * batch.units + j] = f64::from(v);
            }
            masks.push(m);
            logits.push(l);
        }
        let enc = model.encode(&mut tape, &p, PREDICTOR, &batch)?;
        let mask = tape.constant(vec![batch.size, batch.units], hard)?;
        let out = model.predict(&mut tape, &p, &enc, mask, &batch)?;
        let out = tape.value(out);
        match &batch.targets {
            Targets::Classes(_) => {
                let c = model.config.output.width();
                for row in out.chunks(c) {
                    let best = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                    class_preds.push(best);
                }
            }
            Targets::Values(_) => value_preds.extend_from_slice(out),
        }
    }

    let all: Vec<usize> = (0..docs.len()).collect();
    let targets = make_batch(docs, &all, &model.vocab, model.labels.as_ref(), gran)?.targets;
    let predictions = match targets {
        Targets::Classes(_) => Predictions::Classes(class_preds),
        Targets::Values(_) => Predictions::Values(value_preds),
    };
    let task = task_metric(&predictions, &targets)?;
    let acc = match (&predictions, &targets) {
        (Predictions::Classes(p), Targets::Classes(y)) => Some(accuracy(p, y)),
        _ => None,
    };

    let mut spans = SpanCounts::default();
    let mut toks = TokenCounts::default();
    for (doc, m) in docs.iter().zip(&masks) {
        if let Some(gold) = doc.gold_tokens() {
            let pred = token_mask(doc, m, gran);
            spans.add(SpanCounts::of(&pred, &gold, IOU_THRESHOLD)?);
            toks.add(TokenCounts::of(&pred, &gold)?);
        }
    }
    let prf = toks.prf();

    let sparsity = if opts.full_context {
        SparsityStats { mean: 1.0, var: 0.0 }
    } else if opts.sparsity_runs == 0 {
        let mean = logits
            .iter()
            .map(|l| l.iter().map(|&x| sigmoid(x)).sum::<f64>() / l.len().max(1) as f64)
            .sum::<f64>()
            / logits.len() as f64;
        SparsityStats { mean, var: 0.0 }
    } else {
        let mut rng = Rng::new(opts.seed, "sparsity");
        sparsity_stats(&logits, &opts.sampler, opts.sparsity_runs, &mut rng)?
    };

    Ok(Evaluation {
        report: MetricsReport {
            task_metric: task,
            accuracy: acc,
            iou_f1: spans.f1(),
            token_precision: prf.precision,
            token_recall: prf.recall,
            token_f1: prf.f1,
            sparsity_mean: sparsity.mean,
            sparsity_var: sparsity.var,
        },
        predictions,
        masks,
        logits,
    })
}

// ---------------------------------------------------------------------------
// Toy IB verification
// ---------------------------------------------------------------------------

/// Finite input distribution with per-symbol inclusion probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyJoint {
    /// Nonzero, distinct codes; `z = 0` stands for the closed mask.
    pub symbols: Vec<u64>,
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    pub prior: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbReport {
    pub mi: f64,
    pub bound: f64,
    pub decomposition_residual: f64,
}

pub const MAX_TOY_SYMBOLS: usize = 16;

impl ToyJoint {
    pub fn validate(&self) -> Result<()> {
        let n = self.symbols.len();
        if n == 0 || n > MAX_TOY_SYMBOLS || self.p.len() != n || self.theta.len() != n {
            return Err(Error::Domain(format!(
                "toy joint needs 1..={MAX_TOY_SYMBOLS} symbols with matching p and theta"
            )));
        }
        let mut seen = self.symbols.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n || seen[0] == 0 {
            return Err(Error::Domain("symbols must be distinct and nonzero".into()));
        }
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.p.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Domain(format!("p must be positive and sum to 1 (sum {total})")));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !self.theta.iter().all(|&t| open(t)) || !open(self.prior) {
            return Err(Error::Domain("theta and prior must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Random joint over `n` symbols.
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let w: Vec<f64> = (0..n).map(|_| rng.range(0.05, 1.0)).collect();
        let s: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let rest: f64 = p[1..].iter().sum();
        p[0] = 1.0 - rest;
        Self {
            symbols: (1..=n as u64).collect(),
            p,
            theta: (0..n).map(|_| rng.range(0.02, 0.98)).collect(),
            prior: rng.range(0.02, 0.98),
        }
    }
}

fn kl_discrete(q: &[f64], r: &[f64]) -> f64 {
    q.iter()
        .zip(r)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, ri)| qi * (qi / ri).ln())
        .sum()
}

/// Exact `I(Z;X)`, the bound `E_x KL(p(z|x) ‖ r(z))` and the worst residual
/// of the per-symbol decomposition, all by enumerating the z-space
/// `{0} ∪ symbols` with prior `r(0) = 1 − π`, `r(x) = π p(x)`.
pub fn ib_verify(joint: &ToyJoint) -> Result<IbReport> {
    joint.validate()?;
    let n = joint.symbols.len();
    let mut z_index = BTreeMap::new();
    z_index.insert(0u64, 0usize);
    for &s in &joint.symbols {
        let k = z_index.len();
        z_index.insert(s, k);
    }
    let nz = z_index.len();

    let mut cond = vec![vec![0.0; nz]; n];
    for (i, &s) in joint.symbols.iter().enumerate() {
        cond[i][0] = 1.0 - joint.theta[i];
        cond[i][z_index[&s]] = joint.theta[i];
    }
    let mut r = vec![0.0; nz];
    r[0] = 1.0 - joint.prior;
    for (i, &s) in joint.symbols.iter().enumerate() {
        r[z_index[&s]] = joint.prior * joint.p[i];
    }
    let mut marginal = vec![0.0; nz];
    for i in 0..n {
        for z in 0..nz {
            marginal[z] += joint.p[i] * cond[i][z];
        }
    }

    let (mut mi, mut bound, mut residual) = (0.0, 0.0, 0.0f64);
    for i in 0..n {
        let kl_r = kl_discrete(&cond[i], &r);
        mi += joint.p[i] * kl_discrete(&cond[i], &marginal);
        bound += joint.p[i] * kl_r;
        let closed = kl_bernoulli(joint.theta[i], joint.prior)? - joint.theta[i] * joint.p[i].ln();
        residual = residual.max((kl_r - closed).abs());
    }
    Ok(IbReport {
        mi,
        bound,
        decomposition_residual: residual,
    })
}
