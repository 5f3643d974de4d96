//! Command-line front end: flat `key = value` run configs and the
//! generate / train / eval / sweep / verify-ib / grad-check commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::data::{
    crop_to_span, generate, load_jsonl, save_jsonl, tfidf_span_select, Document, Granularity, LabelSpace,
    SynthSpec, SynthSplits, Vocab,
};
use crate::distributions::StretchParams;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ib_verify, MetricsReport, ToyJoint};
use crate::model::{Model, ModelConfig, OutputKind};
use crate::objectives::{effective_pi, loss_grad_checks, train, Checkpoint, ObjectiveConfig, TrainConfig};
use crate::rng::Rng;
use crate::tensor::primitive_grad_checks;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const IB_TOL: f64 = 1e-12;
const GRAD_STEP: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "sparse-rationale", about = "Sparse-prior information bottleneck rationale extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single run seed (replaces `seeds`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pi: Option<f64>,
    #[arg(long, global = true)]
    pub objective: Option<String>,
    /// Dataset directory with train/val/test.jsonl, or a single JSONL file to evaluate.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test splits.
    Generate,
    /// Train one model per seed.
    Train,
    /// Evaluate checkpoints on the test split.
    Eval,
    /// Train and evaluate every (pi, seed) pair.
    Sweep,
    /// Check the information-bottleneck bound on toy joints.
    VerifyIb,
    /// Finite-difference gradient checks of every op and loss.
    GradCheck,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub granularity: Granularity,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pi_list: Vec<f64>,
    pub sparsity_runs: usize,
    /// TF-IDF span preselection window in sentences; 0 disables it.
    pub span_window: usize,
    pub ib_joints: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            embed_dim: 64,
            hidden_dim: 64,
            granularity: Granularity::Sentence,
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            data: None,
            checkpoint: None,
            pi_list: (1..=10).map(|i| f64::from(i) * 0.05).collect(),
            sparsity_runs: 100,
            span_window: 0,
            ib_joints: 1000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn noise_name(n: crate::distributions::ConcreteNoise) -> &'static str {
    match n {
        crate::distributions::ConcreteNoise::Logistic => "logistic",
        crate::distributions::ConcreteNoise::PaperGumbel => "paper_gumbel",
    }
}

fn to_key<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.objective;
        let s = &mut self.synth;
        match key {
            "task" => s.task = value.parse()?,
            "n_sentences" => s.n_sentences = parse(key, value)?,
            "sentence_len" => s.sentence_len = parse(key, value)?,
            "signal_fraction" => s.signal_fraction = parse(key, value)?,
            "vocab_size" => s.vocab_size = parse(key, value)?,
            "distractor_rate" => s.distractor_rate = parse(key, value)?,
            "num_classes" => s.num_classes = parse(key, value)?,
            "num_train" => s.num_train = parse(key, value)?,
            "num_val" => s.num_val = parse(key, value)?,
            "num_test" => s.num_test = parse(key, value)?,
            "data_seed" => s.seed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "granularity" => self.granularity = value.parse()?,
            "objective" => o.kind = value.parse()?,
            "pi" => o.pi = parse(key, value)?,
            "beta" => o.beta = parse(key, value)?,
            "lambda" => o.lambda = parse(key, value)?,
            "gamma" => o.gamma = parse(key, value)?,
            "tau" => o.sampler.tau = parse(key, value)?,
            "entropy_lambda" => o.entropy_lambda = parse(key, value)?,
            "learnable_pi" => o.learnable_pi = parse_bool(key, value)?,
            "semi_loss" => o.semi_loss = value.parse()?,
            "supervision_fraction" => o.supervision_fraction = parse(key, value)?,
            "distribution" => o.sampler.kind = value.parse()?,
            "noise" => o.sampler.noise = value.parse()?,
            "stretch_l0" => o.sampler.stretch = StretchParams::new(parse(key, value)?, o.sampler.stretch.l1())?,
            "stretch_l1" => o.sampler.stretch = StretchParams::new(o.sampler.stretch.l0(), parse(key, value)?)?,
            "full_context" => o.full_context = parse_bool(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "pi_list" => self.pi_list = parse_list(key, value)?,
            "sparsity_runs" => self.sparsity_runs = parse(key, value)?,
            "span_window" => self.span_window = parse(key, value)?,
            "ib_joints" => self.ib_joints = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body; `#` starts a comment.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let o = &self.objective;
        let s = &self.synth;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut rows: Vec<(&str, String)> = vec![
            ("task", to_key(&s.task)),
            ("n_sentences", s.n_sentences.to_string()),
            ("sentence_len", s.sentence_len.to_string()),
            ("signal_fraction", s.signal_fraction.to_string()),
            ("vocab_size", s.vocab_size.to_string()),
            ("distractor_rate", s.distractor_rate.to_string()),
            ("num_classes", s.num_classes.to_string()),
            ("num_train", s.num_train.to_string()),
            ("num_val", s.num_val.to_string()),
            ("num_test", s.num_test.to_string()),
            ("data_seed", s.seed.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("granularity", to_key(&self.granularity)),
            ("objective", o.kind.to_string()),
            ("pi", o.pi.to_string()),
            ("beta", o.beta.to_string()),
            ("lambda", o.lambda.to_string()),
            ("gamma", o.gamma.to_string()),
            ("tau", o.sampler.tau.to_string()),
            ("entropy_lambda", o.entropy_lambda.to_string()),
            ("learnable_pi", o.learnable_pi.to_string()),
            ("semi_loss", to_key(&o.semi_loss)),
            ("supervision_fraction", o.supervision_fraction.to_string()),
            ("distribution", to_key(&o.sampler.kind)),
            ("noise", noise_name(o.sampler.noise).into()),
            ("stretch_l0", o.sampler.stretch.l0().to_string()),
            ("stretch_l1", o.sampler.stretch.l1().to_string()),
            ("full_context", o.full_context.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("lr", self.train.lr.to_string()),
            ("patience", self.train.patience.to_string()),
            ("seeds", join(&self.seeds)),
            ("out_dir", self.out_dir.display().to_string()),
            ("pi_list", join(&self.pi_list)),
            ("sparsity_runs", self.sparsity_runs.to_string()),
            ("span_window", self.span_window.to_string()),
            ("ib_joints", self.ib_joints.to_string()),
        ];
        if let Some(d) = opt(&self.data) {
            rows.push(("data", d));
        }
        if let Some(c) = opt(&self.checkpoint) {
            rows.push(("checkpoint", c));
        }
        rows.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            self.synth.validate()?;
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        self.objective.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.pi_list.is_empty() || self.pi_list.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config("pi_list values must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train }
    }
}

/// Builds the effective config: file first, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = cli.pi {
        cfg.objective.pi = p;
    }
    if let Some(k) = &cli.objective {
        cfg.objective.kind = k.parse()?;
    }
    if let Some(d) = &cli.data {
        cfg.data = Some(d.clone());
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preselect(docs: Vec<Document>, window: usize) -> Result<Vec<Document>> {
    if window == 0 {
        return Ok(docs);
    }
    docs.into_iter()
        .map(|d| match d.query.clone() {
            Some(q) => tfidf_span_select(&d, &q, window).map(|span| crop_to_span(&d, span)),
            None => Ok(d),
        })
        .collect()
}

/// Loads the dataset directory or synthesizes one from the spec.
pub fn load_splits(cfg: &RunConfig) -> Result<SynthSplits> {
    let splits = match &cfg.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "{}: expected a directory with train.jsonl, val.jsonl and test.jsonl",
                    dir.display()
                )));
            }
            SynthSplits {
                train: load_jsonl(dir.join("train.jsonl"))?,
                val: load_jsonl(dir.join("val.jsonl"))?,
                test: load_jsonl(dir.join("test.jsonl"))?,
            }
        }
        None => generate(&cfg.synth)?,
    };
    Ok(SynthSplits {
        train: preselect(splits.train, cfg.span_window)?,
        val: preselect(splits.val, cfg.span_window)?,
        test: preselect(splits.test, cfg.span_window)?,
    })
}

fn test_docs(cfg: &RunConfig) -> Result<Vec<Document>> {
    match &cfg.data {
        Some(p) if p.is_file() => preselect(load_jsonl(p)?, cfg.span_window),
        _ => Ok(load_splits(cfg)?.test),
    }
}

/// Fresh model sized for `train_docs`.
pub fn build_model(cfg: &RunConfig, train_docs: &[Document], seed: u64) -> Result<Model> {
    let vocab = Vocab::build(train_docs);
    let labels = LabelSpace::from_docs(train_docs)?;
    let output = labels.as_ref().map_or(OutputKind::Regression, |l| OutputKind::Classes(l.len()));
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        granularity: cfg.granularity,
        output,
        has_query: train_docs.iter().any(|d| d.query.is_some()),
    };
    Model::new(mc, vocab, labels, seed)
}

/// Trains under `cfg` for one seed and returns the checkpoint and epoch log.
pub fn train_one(cfg: &RunConfig, splits: &SynthSplits, seed: u64) -> Result<(Checkpoint, Vec<String>)> {
    let model = build_model(cfg, &splits.train, seed)?;
    let out = train(model, &splits.train, &splits.val, &cfg.objective, &cfg.train_config(seed))?;
    let lines = out.log.iter().map(|l| l.line()).collect();
    Ok((Checkpoint::new(out.model, cfg.objective), lines))
}

pub fn eval_checkpoint(ck: &Checkpoint, docs: &[Document], runs: usize, seed: u64) -> Result<MetricsReport> {
    evaluate(&ck.model, docs, &ck.eval_options(runs, seed)).map(|e| e.report)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

/// Mean and sample standard deviation of every numeric field.
pub fn summarize(reports: &[MetricsReport]) -> (Map<String, Value>, Map<String, Value>) {
    let rows: Vec<Map<String, Value>> = reports
        .iter()
        .filter_map(|r| match serde_json::to_value(r) {
            Ok(Value::Object(m)) => Some(m),
            _ => None,
        })
        .collect();
    let (mut mean, mut std) = (Map::new(), Map::new());
    let Some(first) = rows.first() else {
        return (mean, std);
    };
    for key in first.keys() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(key).and_then(Value::as_f64)).collect();
        if vals.len() != rows.len() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        mean.insert(key.clone(), json!(mu));
        std.insert(key.clone(), json!(sd));
    }
    (mean, std)
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let splits = generate(&cfg.synth)?;
    for (name, docs) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = cfg.out_dir.join(format!("{name}.jsonl"));
        save_jsonl(&path, docs)?;
        println!("wrote {} ({} documents)", path.display(), docs.len());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        ensure_dir(&dir)?;
        let (ck, lines) = train_one(cfg, &splits, seed)?;
        write(&dir.join("train.log"), &(lines.join("\n") + "\n"))?;
        ck.model.vocab.save(dir.join("vocab.txt"))?;
        let path = dir.join("checkpoint.json");
        ck.save(&path)?;
        println!(
            "seed={seed} epochs={} pi={} checkpoint={}",
            lines.len(),
            effective_pi(&ck.model, &ck.objective),
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let paths: Vec<(Option<u64>, PathBuf)> = match &cfg.checkpoint {
        Some(p) => vec![(None, p.clone())],
        None => cfg
            .seeds
            .iter()
            .map(|&s| (Some(s), seed_dir(cfg, s).join("checkpoint.json")))
            .collect(),
    };
    let docs = test_docs(cfg)?;
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for (seed, path) in paths {
        let ck = Checkpoint::load(&path)?;
        let report = eval_checkpoint(&ck, &docs, cfg.sparsity_runs, seed.unwrap_or(cfg.seeds[0]))?;
        runs.push(json!({
            "seed": seed,
            "checkpoint": path.display().to_string(),
            "metrics": report,
        }));
        reports.push(report);
    }
    let (mean, std) = summarize(&reports);
    let doc = json!({ "runs": runs, "mean": mean, "std": std });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))? + "\n";
    let path = cfg.out_dir.join("metrics.json");
    write(&path, &text)?;
    print!("{text}");
    Ok(())
}

pub const SWEEP_HEADER: &str = "pi,seed,task_metric,iou_f1,token_f1,sparsity_mean,sparsity_var";

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &pi in &cfg.pi_list {
        let mut cell = cfg.clone();
        cell.objective.pi = pi;
        cell.objective.validate()?;
        for &seed in &cfg.seeds {
            let (ck, _) = train_one(&cell, &splits, seed)?;
            let r = eval_checkpoint(&ck, &splits.test, cfg.sparsity_runs, seed)?;
            let row = format!(
                "{pi},{seed},{},{},{},{},{}",
                r.task_metric, r.iou_f1, r.token_f1, r.sparsity_mean, r.sparsity_var
            );
            println!("{row}");
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write(&cfg.out_dir.join("sweep.csv"), &csv)
}

fn cmd_verify_ib(cfg: &RunConfig) -> Result<()> {
    let toy = ToyJoint {
        symbols: vec![1, 2],
        p: vec![0.5, 0.5],
        theta: vec![0.3, 0.3],
        prior: 0.3,
    };
    let r = ib_verify(&toy)?;
    println!(
        "default toy: mi={} bound={} residual={}",
        r.mi, r.bound, r.decomposition_residual
    );
    let mut rng = Rng::new(cfg.seeds[0], "verify-ib");
    let (mut min_gap, mut max_residual) = (r.bound - r.mi, r.decomposition_residual);
    for _ in 0..cfg.ib_joints {
        let n = 1 + rng.below(crate::metrics::MAX_TOY_SYMBOLS);
        let j = ToyJoint::random(n, &mut rng);
        let rr = ib_verify(&j)?;
        min_gap = min_gap.min(rr.bound - rr.mi);
        max_residual = max_residual.max(rr.decomposition_residual);
    }
    println!(
        "random joints={} min(bound - mi)={min_gap} max residual={max_residual}",
        cfg.ib_joints
    );
    let doc = json!({
        "default": { "mi": r.mi, "bound": r.bound, "decomposition_residual": r.decomposition_residual },
        "random_joints": cfg.ib_joints,
        "min_gap": min_gap,
        "max_residual": max_residual,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))? + "\n";
    write(&cfg.out_dir.join("ib.json"), &text)?;
    if min_gap < -IB_TOL || max_residual > IB_TOL {
        return Err(Error::Domain(format!(
            "bound check failed: min gap {min_gap}, max residual {max_residual}"
        )));
    }
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<()> {
    let mut table = String::new();
    let mut failed = 0;
    let mut row = |name: &str, err: f64, tol: f64| {
        let ok = err < tol;
        failed += usize::from(!ok);
        let _ = writeln!(table, "{name:<40} {err:>12.3e} {}", if ok { "PASS" } else { "FAIL" });
    };
    for (name, err) in primitive_grad_checks(GRAD_STEP)? {
        row(name, err, PRIMITIVE_TOL);
    }
    for (name, err) in loss_grad_checks(cfg.seeds[0], GRAD_STEP)? {
        row(&name, err, LOSS_TOL);
    }
    print!("{table}");
    write(&cfg.out_dir.join("gradcheck.txt"), &table)?;
    if failed > 0 {
        return Err(Error::GradCheck(format!("{failed} checks exceeded tolerance")));
    }
    Ok(())
}

/// Runs `command` under `cfg`, writing outputs and the config snapshot to
/// `out_dir`.
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    match command {
        Command::Generate => cmd_generate(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::VerifyIb => cmd_verify_ib(cfg),
        Command::GradCheck => cmd_grad_check(cfg),
    }
}

/// Single-line error report: `error[CODE]: message`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", e.code())
}
