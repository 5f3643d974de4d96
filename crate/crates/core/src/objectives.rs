//! Training objectives, the optimizer and the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, make_batch, supervised_ids, Batch, Document, Targets};
use crate::distributions::{expected_l0_var, fixed_prior_logs, kl_bernoulli_var, kl_kuma_var};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::model::{infer_mask, sample_mask_with, DistributionKind, Model, SamplerConfig, EXPLAINER, PREDICTOR};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Sib,
    Sl0,
    Sl0c,
    Semi,
    None,
    Pipeline,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sib" => Ok(Self::Sib),
            "sl0" => Ok(Self::Sl0),
            "sl0c" => Ok(Self::Sl0c),
            "semi" => Ok(Self::Semi),
            "none" => Ok(Self::None),
            "pipeline" => Ok(Self::Pipeline),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Sib => "sib",
            Self::Sl0 => "sl0",
            Self::Sl0c => "sl0c",
            Self::Semi => "semi",
            Self::None => "none",
            Self::Pipeline => "pipeline",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiLoss {
    #[default]
    FullBce,
    PaperPositiveOnly,
}

impl FromStr for SemiLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_bce" => Ok(Self::FullBce),
            "paper_positive_only" => Ok(Self::PaperPositiveOnly),
            other => Err(Error::Config(format!("unknown semi_loss {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub pi: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub entropy_lambda: f64,
    pub learnable_pi: bool,
    pub semi_loss: SemiLoss,
    pub supervision_fraction: f64,
    pub sampler: SamplerConfig,
    /// Feed every unit to the predictor; only valid with `kind = none`.
    pub full_context: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Sib,
            pi: 0.2,
            beta: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            entropy_lambda: 0.0,
            learnable_pi: false,
            semi_loss: SemiLoss::FullBce,
            supervision_fraction: 1.0,
            sampler: SamplerConfig::default(),
            full_context: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config(format!("pi must lie in (0, 1), got {}", self.pi)));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("entropy_lambda", self.entropy_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.sampler.tau > 0.0 && self.sampler.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.sampler.tau)));
        }
        if !(0.0..=1.0).contains(&self.supervision_fraction) {
            return Err(Error::Config(format!(
                "supervision_fraction must lie in [0, 1], got {}",
                self.supervision_fraction
            )));
        }
        if self.learnable_pi {
            if self.kind != ObjectiveKind::Sib {
                return Err(Error::Config("learnable_pi requires objective sib".into()));
            }
            if matches!(self.sampler.kind, DistributionKind::Kuma | DistributionKind::HardKuma) {
                return Err(Error::Config("learnable_pi requires a concrete distribution".into()));
            }
        }
        if self.full_context && self.kind != ObjectiveKind::None {
            return Err(Error::Config("full_context requires objective none".into()));
        }
        Ok(())
    }

    fn needs_gold(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Semi | ObjectiveKind::Pipeline)
    }
}

pub const PRIOR_PARAM: &str = "prior.logit";

/// Adds the free prior parameter `ρ` with `σ(ρ) = pi` when π is learnable.
pub fn init_prior(model: &mut Model, obj: &ObjectiveConfig) {
    if obj.learnable_pi && model.param(PRIOR_PARAM).is_none() {
        let rho = (obj.pi / (1.0 - obj.pi)).ln();
        let t = Tensor::new(vec![1], vec![rho]).expect("scalar shape").with_grad();
        model.params.insert(PRIOR_PARAM.into(), t);
    }
}

/// π used for the prior and the inference budget.
pub fn effective_pi(model: &Model, obj: &ObjectiveConfig) -> f64 {
    match model.param(PRIOR_PARAM) {
        Some(t) if obj.learnable_pi => sigmoid(t.data()[0]),
        _ => obj.pi,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task_term: f64,
    /// Already multiplied by its weight (β, λ or γ).
    pub info_term: f64,
    pub per_example: Vec<f64>,
}

/// Which part of the model a step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Joint,
    /// Pipeline phase one: explainer fit to gold masks.
    Explainer,
    /// Pipeline phase two: predictor on the frozen explainer's top-π masks.
    Predictor,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Explainer => "explainer",
            Stage::Predictor => "predictor",
        }
    }

    fn trains(self, param: &str) -> bool {
        match self {
            Stage::Joint => true,
            Stage::Explainer => param.starts_with(EXPLAINER),
            Stage::Predictor => param.starts_with(PREDICTOR),
        }
    }
}

/// Per-example negative log-likelihood (classes) or squared error, `[B]`.
pub fn task_loss(tape: &mut Tape, output: Var, targets: &Targets) -> Result<Var> {
    let b = targets.len();
    match targets {
        Targets::Classes(y) => {
            let c = tape.shape(output)[1];
            let mut onehot = vec![0.0; b * c];
            for (i, &k) in y.iter().enumerate() {
                onehot[i * c + k] = 1.0;
            }
            let onehot = tape.constant(vec![b, c], onehot)?;
            let picked = tape.mul(output, onehot)?;
            let ll = tape.sum_axis(picked, 1)?;
            tape.neg(ll)
        }
        Targets::Values(y) => {
            let pred = tape.reshape(output, vec![b])?;
            let y = tape.constant(vec![b], y.clone())?;
            let d = tape.sub(pred, y)?;
            tape.mul(d, d)
        }
    }
}

/// Sum over valid units of `x` `[B, U]`, giving `[B]`.
fn unit_sum(tape: &mut Tape, x: Var, batch: &Batch) -> Result<Var> {
    let valid = tape.constant(vec![batch.size, batch.units], batch.valid.clone())?;
    let masked = tape.mul(x, valid)?;
    tape.sum_axis(masked, 1)
}

fn per_doc(tape: &mut Tape, values: Vec<f64>) -> Result<Var> {
    let n = values.len();
    tape.constant(vec![n], values)
}

/// `Σ_j m_j / n` per document.
fn normalized_norm(tape: &mut Tape, gates: Var, batch: &Batch) -> Result<Var> {
    let total = unit_sum(tape, gates, batch)?;
    let inv = per_doc(tape, batch.counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect())?;
    tape.mul(total, inv)
}

fn prior_logs(tape: &mut Tape, prior: Option<Var>, pi: f64) -> Result<(Var, Var)> {
    match prior {
        Some(rho) => {
            let p = tape.sigmoid(rho)?;
            let neg = tape.neg(rho)?;
            let q = tape.sigmoid(neg)?;
            Ok((tape.log(p)?, tape.log(q)?))
        }
        None => fixed_prior_logs(tape, pi),
    }
}

/// `β Σ_j KL(p(m_j|x) ‖ r(m_j))` per document, plus `entropy_lambda · π` when
/// the prior is learnable.
pub fn sib_term(tape: &mut Tape, logits: Var, batch: &Batch, cfg: &ObjectiveConfig, prior: Option<Var>) -> Result<Var> {
    let kl = match cfg.sampler.kind {
        DistributionKind::Kuma | DistributionKind::HardKuma => {
            if prior.is_some() {
                return Err(Error::Config("learnable_pi requires a concrete distribution".into()));
            }
            kl_kuma_var(tape, logits, cfg.pi)?
        }
        _ => {
            let (lp, lq) = prior_logs(tape, prior, cfg.pi)?;
            kl_bernoulli_var(tape, logits, lp, lq)?
        }
    };
    let kl = unit_sum(tape, kl, batch)?;
    let kl = tape.scalar_mul(kl, cfg.beta)?;
    match prior {
        Some(rho) => {
            let pi = tape.sigmoid(rho)?;
            let pen = tape.scalar_mul(pi, cfg.entropy_lambda)?;
            tape.add(kl, pen)
        }
        None => Ok(kl),
    }
}

/// `λ ‖m‖ / n`, using the expected L0 norm for hard-concrete gates.
pub fn sl0_term(tape: &mut Tape, logits: Var, mask: Var, batch: &Batch, cfg: &ObjectiveConfig) -> Result<Var> {
    let gates = match cfg.sampler.kind {
        DistributionKind::HardConcrete => expected_l0_var(tape, logits, cfg.sampler.tau, cfg.sampler.stretch)?,
        _ => mask,
    };
    let norm = normalized_norm(tape, gates, batch)?;
    tape.scalar_mul(norm, cfg.lambda)
}

/// `λ max(0, ‖m‖/n − π)`.
pub fn sl0c_term(tape: &mut Tape, mask: Var, batch: &Batch, cfg: &ObjectiveConfig) -> Result<Var> {
    let norm = normalized_norm(tape, mask, batch)?;
    let excess = tape.add_scalar(norm, -cfg.pi)?;
    let hinge = tape.clamp(excess, 0.0, 1.0)?;
    tape.scalar_mul(hinge, cfg.lambda)
}

/// Rationale cross-entropy against gold masks for documents flagged in
/// `supervised`, zero elsewhere.
pub fn semi_term(tape: &mut Tape, logits: Var, batch: &Batch, supervised: &[bool], loss: SemiLoss, gamma: f64) -> Result<Var> {
    let shape = vec![batch.size, batch.units];
    let gold = tape.constant(shape.clone(), batch.gold.clone())?;
    let p = tape.sigmoid(logits)?;
    let log_p = tape.log(p)?;
    let pos = tape.mul(gold, log_p)?;
    let ll = match loss {
        SemiLoss::PaperPositiveOnly => pos,
        SemiLoss::FullBce => {
            let neg_l = tape.neg(logits)?;
            let q = tape.sigmoid(neg_l)?;
            let log_q = tape.log(q)?;
            let off = tape.constant(shape, batch.gold.iter().map(|g| 1.0 - g).collect())?;
            let neg = tape.mul(off, log_q)?;
            tape.add(pos, neg)?
        }
    };
    let ll = unit_sum(tape, ll, batch)?;
    let flags = per_doc(
        tape,
        supervised
            .iter()
            .zip(&batch.has_gold)
            .map(|(&s, &g)| if s && g { -gamma } else { 0.0 })
            .collect(),
    )?;
    tape.mul(ll, flags)
}

/// Mean loss over the batch with its breakdown.
fn combine(tape: &mut Tape, task: Option<Var>, info: Option<Var>, b: usize) -> Result<(Var, LossBreakdown)> {
    let zeros = vec![0.0; b];
    let tv = task.map_or(zeros.clone(), |v| tape.value(v).to_vec());
    let iv = info.map_or(zeros, |v| tape.value(v).to_vec());
    let per = match (task, info) {
        (Some(t), Some(i)) => tape.add(t, i)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => {
            return Err(Error::Config("step has no loss terms".into()));
        }
    };
    let total = tape.mean(per)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / b as f64;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        task_term: mean(&tv),
        info_term: mean(&iv),
        per_example: tape.value(per).to_vec(),
    };
    Ok((total, breakdown))
}

/// Top-π hard masks `[B, U]` from the explainer's logits.
fn hard_masks(tape: &Tape, logits: Var, batch: &Batch, pi: f64) -> Vec<f64> {
    let l = tape.value(logits);
    let mut out = vec![0.0; batch.size * batch.units];
    for b in 0..batch.size {
        let start = b * batch.units;
        let theta: Vec<f64> = l[start..start + batch.counts[b]].iter().map(|&x| sigmoid(x)).collect();
        for (j, m) in infer_mask(&theta, pi).into_iter().enumerate() {
            out[start + j] = f64::from(m);
        }
    }
    out
}

/// Records one step's forward pass and loss. `uniforms` holds one noise draw
/// per unit slot of the batch.
pub fn forward_loss(
    tape: &mut Tape,
    model: &Model,
    p: &crate::model::Bound,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    stage: Stage,
    uniforms: &[f64],
    supervised: &[bool],
) -> Result<(Var, LossBreakdown)> {
    let enc = model.encode(tape, p, EXPLAINER, batch)?;
    let logits = model.explain(tape, p, &enc, batch)?;
    if stage == Stage::Explainer {
        let all = vec![true; batch.size];
        let bce = semi_term(tape, logits, batch, &all, SemiLoss::FullBce, 1.0)?;
        return combine(tape, None, Some(bce), batch.size);
    }
    let mask = if cfg.full_context {
        tape.constant(vec![batch.size, batch.units], batch.valid.clone())?
    } else if stage == Stage::Predictor {
        let hard = hard_masks(tape, logits, batch, cfg.pi);
        tape.constant(vec![batch.size, batch.units], hard)?
    } else {
        sample_mask_with(tape, logits, &cfg.sampler, uniforms, &batch.valid)?
    };
    let penc = model.encode(tape, p, PREDICTOR, batch)?;
    let out = model.predict(tape, p, &penc, mask, batch)?;
    let task = task_loss(tape, out, &batch.targets)?;
    let info = match (stage, cfg.kind) {
        (Stage::Predictor, _) | (_, ObjectiveKind::None) => None,
        (_, ObjectiveKind::Sib) => {
            let prior = if cfg.learnable_pi { Some(p.get(PRIOR_PARAM)?) } else { None };
            Some(sib_term(tape, logits, batch, cfg, prior)?)
        }
        (_, ObjectiveKind::Sl0) => Some(sl0_term(tape, logits, mask, batch, cfg)?),
        (_, ObjectiveKind::Sl0c) => Some(sl0c_term(tape, mask, batch, cfg)?),
        (_, ObjectiveKind::Semi) => Some(semi_term(tape, logits, batch, supervised, cfg.semi_loss, cfg.gamma)?),
        (_, ObjectiveKind::Pipeline) => {
            return Err(Error::Config("pipeline runs in explainer and predictor stages".into()))
        }
    };
    combine(tape, Some(task), info, batch.size)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub total: f64,
    pub task: f64,
    pub info: f64,
    pub val_task_metric: f64,
    pub val_iou_f1: f64,
    /// Mean inclusion probability on the validation set.
    pub sparsity: f64,
    pub pi: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "stage={} epoch={} total={:.6} task={:.6} info={:.6} val_task_metric={:.6} val_iou_f1={:.6} sparsity={:.6} pi={:.6}",
            self.stage,
            self.epoch,
            self.total,
            self.task,
            self.info,
            self.val_task_metric,
            self.val_iou_f1,
            self.sparsity,
            self.pi
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

fn eval_options(model: &Model, obj: &ObjectiveConfig, seed: u64) -> EvalOptions {
    EvalOptions {
        pi: effective_pi(model, obj),
        full_context: obj.full_context,
        sampler: obj.sampler,
        sparsity_runs: 0,
        seed,
        batch_size: 256,
    }
}

/// Higher is better. Full-context masks are constant, so their IOU carries
/// no signal and selection falls back to the task metric.
fn selection_score(report: &MetricsReport, stage: Stage, rationale_score: bool, classification: bool) -> f64 {
    let task = if classification { report.task_metric } else { -report.task_metric };
    match stage {
        Stage::Predictor => task,
        _ if rationale_score => report.iou_f1,
        _ => task,
    }
}

fn run_stage(
    model: &mut Model,
    train_docs: &[Document],
    val_docs: &[Document],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
    stage: Stage,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let rng = Rng::new(cfg.seed, "train").split(stage.name());
    let mut shuffle = rng.split("shuffle");
    let sup_ids: BTreeSet<String> = if obj.kind == ObjectiveKind::Semi {
        supervised_ids(train_docs, obj.supervision_fraction)
    } else {
        BTreeSet::new()
    };
    let val_has_gold = val_docs.iter().any(Document::has_gold);
    let classification = model.labels.is_some();
    let mut adam = Adam::new(cfg.lr);
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    let mut stale = 0;
    let mut tape = Tape::new();

    for epoch in 1..=cfg.epochs {
        let mut noise = rng.split(&format!("noise/{epoch}"));
        let (mut total, mut task, mut info, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in epoch_batches(train_docs.len(), cfg.batch_size, Some(&mut shuffle)) {
            let batch = make_batch(train_docs, &chunk, &model.vocab, model.labels.as_ref(), model.config.granularity)?;
            let supervised: Vec<bool> = chunk.iter().map(|&i| sup_ids.contains(&train_docs[i].id)).collect();
            let uniforms: Vec<f64> = (0..batch.size * batch.units).map(|_| noise.uniform()).collect();
            tape.reset();
            let p = model.bind(&mut tape, |name| stage.trains(name));
            let (loss, br) = forward_loss(&mut tape, model, &p, &batch, obj, stage, &uniforms, &supervised)?;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Vec<f64>> = p
                .iter()
                .filter(|(name, _)| stage.trains(name))
                .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_owned(), g.to_vec())))
                .collect();
            adam.step(&mut model.params, &grads);
            let w = batch.size as f64;
            total += br.total * w;
            task += br.task_term * w;
            info += br.info_term * w;
            seen += batch.size;
        }
        let n = seen.max(1) as f64;
        let eval = evaluate(model, val_docs, &eval_options(model, obj, cfg.seed))?;
        let r = &eval.report;
        log.push(EpochLog {
            stage: stage.name().into(),
            epoch,
            total: total / n,
            task: task / n,
            info: info / n,
            val_task_metric: r.task_metric,
            val_iou_f1: r.iou_f1,
            sparsity: r.sparsity_mean,
            pi: effective_pi(model, obj),
        });
        let score = selection_score(r, stage, val_has_gold && !obj.full_context, classification);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(())
}

/// Trains `model` in place under `obj`, keeping the parameters of the best
/// validation epoch.
pub fn train(
    mut model: Model,
    train_docs: &[Document],
    val_docs: &[Document],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    obj.validate()?;
    cfg.validate()?;
    if train_docs.is_empty() || val_docs.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation sets".into()));
    }
    if obj.needs_gold() && !train_docs.iter().any(Document::has_gold) {
        return Err(Error::Data(format!("objective {} needs gold rationales in the training set", obj.kind)));
    }
    init_prior(&mut model, obj);
    let mut log = Vec::new();
    if obj.kind == ObjectiveKind::Pipeline {
        let gold: Vec<Document> = train_docs.iter().filter(|d| d.has_gold()).cloned().collect();
        run_stage(&mut model, &gold, val_docs, obj, cfg, Stage::Explainer, &mut log)?;
        run_stage(&mut model, train_docs, val_docs, obj, cfg, Stage::Predictor, &mut log)?;
    } else {
        run_stage(&mut model, train_docs, val_docs, obj, cfg, Stage::Joint, &mut log)?;
    }
    Ok(TrainOutcome { model, log })
}

pub const CHECKPOINT_FORMAT: &str = "sparse-rationale-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus the objective it was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub objective: ObjectiveConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, objective: ObjectiveConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            objective,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.model.config.validate()?;
        Ok(ck)
    }

    pub fn eval_options(&self, sparsity_runs: usize, seed: u64) -> EvalOptions {
        EvalOptions {
            sparsity_runs,
            ..eval_options(&self.model, &self.objective, seed)
        }
    }
}

/// Relative gradient errors of each full training loss, with frozen noise,
/// against selected parameters of a small randomly initialized model.
pub fn loss_grad_checks(seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    use crate::data::{generate, Granularity, LabelSpace, SynthSpec, Vocab};
    use crate::model::{ModelConfig, OutputKind};
    use crate::tensor::grad_check;

    let spec = SynthSpec {
        n_sentences: 5,
        sentence_len: 4,
        vocab_size: 30,
        num_train: 4,
        num_val: 1,
        num_test: 1,
        seed,
        ..SynthSpec::default()
    };
    let docs = generate(&spec)?.train;
    let vocab = Vocab::build(&docs);
    let labels = LabelSpace {
        classes: (0..spec.num_classes).map(SynthSpec::class_name).collect(),
    };
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 3,
        hidden_dim: 4,
        granularity: Granularity::Sentence,
        output: OutputKind::Classes(labels.len()),
        has_query: false,
    };
    let mut model = Model::new(cfg, vocab, Some(labels), seed)?;
    let mut rng = Rng::new(seed, "gradcheck");
    for name in ["explainer.head.unit", "explainer.head.doc", "explainer.head.bias"] {
        for w in model.param_mut(name).expect("head parameter").data_mut() {
            *w = rng.range(-1.0, 1.0);
        }
    }
    let idx: Vec<usize> = (0..docs.len()).collect();
    let batch = make_batch(&docs, &idx, &model.vocab, model.labels.as_ref(), model.config.granularity)?;
    let uniforms: Vec<f64> = (0..batch.size * batch.units).map(|_| rng.uniform()).collect();
    let supervised = vec![true; batch.size];

    let base = ObjectiveConfig::default();
    let hard = SamplerConfig { kind: DistributionKind::HardConcrete, ..SamplerConfig::default() };
    let kuma = SamplerConfig { kind: DistributionKind::Kuma, ..SamplerConfig::default() };
    let variants = [
        ("sib", ObjectiveConfig { beta: 0.5, ..base }),
        ("sib_kuma", ObjectiveConfig { sampler: kuma, ..base }),
        ("sl0", ObjectiveConfig { kind: ObjectiveKind::Sl0, ..base }),
        ("sl0_hard_concrete", ObjectiveConfig { kind: ObjectiveKind::Sl0, sampler: hard, ..base }),
        ("sl0c", ObjectiveConfig { kind: ObjectiveKind::Sl0c, pi: 0.1, ..base }),
        ("semi", ObjectiveConfig { kind: ObjectiveKind::Semi, ..base }),
        ("learnable_pi", ObjectiveConfig { learnable_pi: true, entropy_lambda: 0.5, pi: 0.3, ..base }),
    ];
    let mut out = Vec::new();
    for (label, obj) in variants {
        let mut m = model.clone();
        init_prior(&mut m, &obj);
        let mut names = vec!["explainer.mlp1.w", "explainer.head.unit", "predictor.mlp2.w", "predictor.out2.w"];
        if obj.learnable_pi {
            names.push(PRIOR_PARAM);
        }
        for name in names {
            let x = m.param(name).expect("parameter").clone();
            let err = grad_check(
                |tape, xv| {
                    let p = m.bind_override(tape, name, xv)?;
                    forward_loss(tape, &m, &p, &batch, &obj, Stage::Joint, &uniforms, &supervised).map(|r| r.0)
                },
                &x,
                h,
            )?;
            out.push((format!("{label}/{name}"), err));
        }
    }
    Ok(out)
}
