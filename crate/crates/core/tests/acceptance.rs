//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line to stderr and then asserts.

use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sparse_rationale::cli::{eval_checkpoint, load_splits, run, train_one, Command, RunConfig};
use sparse_rationale::data::{generate, make_batch, Document, SynthSpec, SynthTask};
use sparse_rationale::distributions::{
    expected_l0_hard_concrete, gumbel, kl_bernoulli, kl_kuma_beta, sample_concrete,
    sample_hard_concrete, sample_kuma, BetaParams, ConcreteNoise, KumaParams, NoiseSample, StretchParams,
    DEFAULT_SERIES_TERMS, EULER_GAMMA,
};
use sparse_rationale::metrics::{ib_verify, MetricsReport, ToyJoint};
use sparse_rationale::model::{infer_mask, Model, EXPLAINER, PREDICTOR};
use sparse_rationale::objectives::{effective_pi, loss_grad_checks, Checkpoint};
use sparse_rationale::rng::Rng;
use sparse_rationale::tensor::{primitive_grad_checks, Tape, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

static SERIAL: Mutex<()> = Mutex::new(());
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str, start: Instant, limit: Duration) -> bool {
    let elapsed = start.elapsed();
    let ok = pass && elapsed < limit;
    let line = format!(
        "criterion {n}: {} {detail} runtime={:.1}s limit={}s",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    ok
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(","))
}

fn base(objective: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("objective", objective),
        ("embed_dim", "16"),
        ("hidden_dim", "16"),
        ("lr", "0.001"),
        ("epochs", "50"),
        ("patience", "10"),
        ("sparsity_runs", "100"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// Trains and evaluates on the test split once per seed.
fn runs(cfg: &RunConfig) -> Vec<(MetricsReport, Checkpoint)> {
    cfg.validate().unwrap();
    let splits = load_splits(cfg).unwrap();
    SEEDS
        .iter()
        .map(|&s| {
            let (ck, _) = train_one(cfg, &splits, s).unwrap();
            let r = eval_checkpoint(&ck, &splits.test, cfg.sparsity_runs, s).unwrap();
            (r, ck)
        })
        .collect()
}

fn field(rs: &[(MetricsReport, Checkpoint)], f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
    rs.iter().map(|(r, _)| f(r)).collect()
}

fn accuracy(r: &MetricsReport) -> f64 {
    r.accuracy.unwrap_or(r.task_metric)
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let prims = primitive_grad_checks(1e-6).unwrap();
    let losses = loss_grad_checks(7, 1e-6).unwrap();
    let worst_prim = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    let worst_loss = losses.iter().map(|p| p.1).fold(0.0, f64::max);
    let names: Vec<&str> = losses.iter().map(|(n, _)| n.as_str()).collect();
    let covered = ["sib", "sl0", "sl0c", "semi", "learnable_pi"]
        .iter()
        .all(|k| names.iter().any(|n| n.starts_with(k)));
    let pass = prims.len() >= 22 && worst_prim < 1e-4 && worst_loss < 1e-3 && covered;
    let detail = format!(
        "primitives={} worst={worst_prim:.2e} losses={:?} worst={worst_loss:.2e}",
        prims.len(),
        names
    );
    assert!(report(1, pass, &detail, start, Duration::from_secs(60)));
}

/// Double-exponential quadrature of `f(u, 1 − u)` over (0, 1).
fn tanh_sinh(f: impl Fn(f64, f64) -> f64) -> f64 {
    let h = 1.0 / 64.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut total = 0.0;
    for k in -256..=256 {
        let t = f64::from(k) * h;
        let s = 2.0 * half_pi * t.sinh();
        let u = 1.0 / (1.0 + (-s).exp());
        let v = 1.0 / (1.0 + s.exp());
        if u <= 0.0 || v <= 0.0 {
            continue;
        }
        let w = h * 2.0 * half_pi * t.cosh() * u * v;
        let fx = f(u, v);
        if fx.is_finite() {
            total += w * fx;
        }
    }
    total
}

/// `E_q[ln q − ln p]` computed in inverse-CDF coordinates.
fn kl_quadrature(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
    let ln_b = statrs::function::beta::ln_beta(alpha, beta);
    tanh_sinh(|_u, v| {
        let ln_v = v.ln();
        let ln_one_minus_xa = ln_v / b;
        let ln_xa = (-ln_one_minus_xa.exp_m1()).ln();
        let ln_x = ln_xa / a;
        let ln_one_minus_x = (-(ln_x.exp_m1())).ln();
        let ln_q = a.ln() + b.ln() + (a - 1.0) * ln_x + (b - 1.0) * ln_one_minus_xa;
        let ln_p = (alpha - 1.0) * ln_x + (beta - 1.0) * ln_one_minus_x - ln_b;
        ln_q - ln_p
    })
}

#[test]
fn criterion_02_kl_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut worst_bern = 0.0f64;
    for i in 1..=99 {
        for j in 1..=99 {
            let (t, p) = (f64::from(i) / 100.0, f64::from(j) / 100.0);
            let oracle = t * t.ln() + (1.0 - t) * (1.0 - t).ln() - t * p.ln() - (1.0 - t) * (1.0 - p).ln();
            worst_bern = worst_bern.max((kl_bernoulli(t, p).unwrap() - oracle).abs());
        }
    }
    let grid = [0.5, 1.2, 2.1, 3.0];
    let mut worst_kuma = 0.0f64;
    let mut worst_series = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            for &alpha in &grid {
                for &beta in &grid {
                    let q = KumaParams::new(a, b).unwrap();
                    let p = BetaParams::new(alpha, beta).unwrap();
                    let kl = kl_kuma_beta(q, p, DEFAULT_SERIES_TERMS).unwrap();
                    worst_kuma = worst_kuma.max((kl - kl_quadrature(a, b, alpha, beta)).abs());
                    let kl50 = kl_kuma_beta(q, p, 50).unwrap();
                    worst_series = worst_series.max((kl - kl50).abs());
                }
            }
        }
    }
    let pass = worst_bern < 1e-12 && worst_kuma < 1e-3 && worst_series < 1e-3;
    let detail = format!(
        "bernoulli_max_err={worst_bern:.2e} kuma_beta_max_err={worst_kuma:.2e} series_10_vs_50={worst_series:.2e}"
    );
    assert!(report(2, pass, &detail, start, Duration::from_secs(60)));
}

#[test]
fn criterion_03_distribution_statistics() {
    let _g = serial();
    let start = Instant::now();
    let n = 100_000;
    let mut rng = Rng::new(3, "criterion-3");
    let stretch = StretchParams::default();
    let tau = 2.0 / 3.0;

    let mut worst_zero = 0.0f64;
    for logit in [-2.0, -0.5, 0.0, 1.0, 2.5] {
        let zeros = (0..n)
            .filter(|_| {
                let noise = NoiseSample::from_uniform(rng.uniform()).unwrap();
                sample_hard_concrete(logit, tau, noise, stretch, ConcreteNoise::Logistic).unwrap() == 0.0
            })
            .count();
        let expected = 1.0 - expected_l0_hard_concrete(logit, tau, stretch).unwrap();
        worst_zero = worst_zero.max((zeros as f64 / n as f64 - expected).abs());
    }

    let bins = 20;
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
    let mut worst_chi = 0.0f64;
    for (a, b) in [(0.5, 0.5), (1.0, 1.0), (2.0, 3.0), (5.0, 1.0), (0.7, 2.5)] {
        let q = KumaParams::new(a, b).unwrap();
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let x = sample_kuma(q, rng.uniform()).unwrap();
            let bin = ((q.cdf(x) * bins as f64) as usize).min(bins - 1);
            counts[bin] += 1;
        }
        let e = n as f64 / bins as f64;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        worst_chi = worst_chi.max(chi);
    }

    let mut worst_hard = 0.0f64;
    for logit in [-1.5, -0.5, 0.0, 1.0, 2.0] {
        let on = (0..n)
            .filter(|_| {
                let noise = NoiseSample::from_uniform(rng.uniform()).unwrap();
                sample_concrete(logit, 0.05, noise, ConcreteNoise::Logistic).unwrap() > 0.5
            })
            .count();
        let sigma = 1.0 / (1.0 + (-logit).exp());
        worst_hard = worst_hard.max((on as f64 / n as f64 - sigma).abs() / sigma);
    }

    let gumbel_mean = (0..n).map(|_| gumbel(rng.uniform()).unwrap()).sum::<f64>() / n as f64;
    let gumbel_err = (gumbel_mean - EULER_GAMMA).abs();

    let pass = worst_zero < 0.01 && worst_chi < critical && worst_hard < 0.02 && gumbel_err < 0.02;
    let detail = format!(
        "zero_rate_err={worst_zero:.4} kuma_chi2_max={worst_chi:.2} (crit {critical:.2}) \
         concrete_tau0.05_rel_err={worst_hard:.4} gumbel_mean_err={gumbel_err:.4}"
    );
    assert!(report(3, pass, &detail, start, Duration::from_secs(60)));
}

#[test]
fn criterion_04_ib_bound() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = Rng::new(4, "criterion-4");
    let (mut min_gap, mut max_residual, mut max_tight) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 1 + rng.below(8);
        let joint = ToyJoint::random(n, &mut rng);
        let r = ib_verify(&joint).unwrap();
        min_gap = min_gap.min(r.bound - r.mi);
        max_residual = max_residual.max(r.decomposition_residual);

        let t = joint.theta[0];
        let flat = ToyJoint {
            theta: vec![t; n],
            prior: t,
            ..joint
        };
        let r = ib_verify(&flat).unwrap();
        max_tight = max_tight.max((r.bound - r.mi).abs());
        max_residual = max_residual.max(r.decomposition_residual);
    }
    let pass = min_gap >= -1e-12 && max_tight < 1e-9 && max_residual < 1e-12;
    let detail = format!("min(bound-mi)={min_gap:.3e} tight_gap={max_tight:.3e} residual={max_residual:.3e}");
    assert!(report(4, pass, &detail, start, Duration::from_secs(30)));
}

#[test]
fn criterion_05_sparsity_control() {
    let _g = serial();
    let start = Instant::now();
    let sib = runs(&base("sib"));
    let sl0c = runs(&base("sl0c"));
    let s_sib = field(&sib, |r| r.sparsity_mean);
    let s_sl0c = field(&sl0c, |r| r.sparsity_mean);
    let (m_sib, m_sl0c) = (mean(&s_sib), mean(&s_sl0c));
    let pass = (0.15..=0.25).contains(&m_sib) && m_sl0c <= m_sib + 0.02;
    let detail = format!(
        "sib_mean={m_sib:.4} seeds={} sl0c_mean={m_sl0c:.4} seeds={}",
        fmt(&s_sib),
        fmt(&s_sl0c)
    );
    assert!(report(5, pass, &detail, start, Duration::from_secs(600)));
}

fn perturbed_model(seed: u64) -> Model {
    let spec = SynthSpec {
        num_train: 50,
        num_val: 5,
        num_test: 5,
        ..SynthSpec::default()
    };
    let splits = generate(&spec).unwrap();
    let mut cfg = base("sib");
    cfg.set("embed_dim", "8").unwrap();
    cfg.set("hidden_dim", "8").unwrap();
    let mut model = sparse_rationale::cli::build_model(&cfg, &splits.train, seed).unwrap();
    let mut rng = Rng::new(seed, "perturb");
    for t in model.params.values_mut() {
        let data = t.data().iter().map(|_| rng.range(-1.0, 1.0)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    model
}

/// Predictor output for `doc` under a fixed unit mask.
fn predict_with_mask(model: &Model, doc: &Document, mask: &[u8]) -> Vec<f64> {
    let batch = make_batch(
        std::slice::from_ref(doc),
        &[0],
        &model.vocab,
        model.labels.as_ref(),
        model.config.granularity,
    )
    .unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let enc = model.encode(&mut tape, &p, PREDICTOR, &batch).unwrap();
    let m = tape
        .constant(vec![1, batch.units], mask.iter().map(|&x| f64::from(x)).collect())
        .unwrap();
    let out = model.predict(&mut tape, &p, &enc, m, &batch).unwrap();
    tape.value(out).to_vec()
}

fn explain_mask(model: &Model, doc: &Document, pi: f64) -> Vec<u8> {
    let batch = make_batch(
        std::slice::from_ref(doc),
        &[0],
        &model.vocab,
        model.labels.as_ref(),
        model.config.granularity,
    )
    .unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let enc = model.encode(&mut tape, &p, EXPLAINER, &batch).unwrap();
    let logits = model.explain(&mut tape, &p, &enc, &batch).unwrap();
    let probs: Vec<f64> = tape.value(logits).iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
    infer_mask(&probs, pi)
}

#[test]
fn criterion_06_faithfulness() {
    let _g = serial();
    let start = Instant::now();
    let model = perturbed_model(6);
    let vocab: Vec<String> = model.vocab.tokens().to_vec();
    let mut rng = Rng::new(6, "criterion-6");
    let (mut checked, mut mutated, mut failures) = (0usize, 0usize, 0usize);
    while checked < 1000 {
        let spec = SynthSpec {
            n_sentences: 3 + rng.below(10),
            sentence_len: 2 + rng.below(8),
            num_train: 1,
            num_val: 0,
            num_test: 0,
            seed: rng.next_u64(),
            ..SynthSpec::default()
        };
        let Ok(splits) = generate(&spec) else { continue };
        let doc = splits.train[0].clone();
        let pi = rng.range(0.05, 0.6);
        let mask = explain_mask(&model, &doc, pi);
        let before = predict_with_mask(&model, &doc, &mask);
        let mut other = doc.clone();
        for (s, &m) in other.sentences.iter_mut().zip(&mask) {
            if m == 0 {
                let len = 1 + rng.below(12);
                *s = (0..len).map(|_| vocab[rng.below(vocab.len())].clone()).collect();
                mutated += 1;
            }
        }
        let after = predict_with_mask(&model, &other, &mask);
        let same = before.len() == after.len() && before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
        failures += usize::from(!same);
        checked += 1;
    }
    let pass = failures == 0 && mutated > 0;
    let detail = format!("documents={checked} mutated_sentences={mutated} changed_predictions={failures}");
    assert!(report(6, pass, &detail, start, Duration::from_secs(60)));
}

/// Strict adjacent inversions against the wanted direction.
fn inversions(v: &[f64], increasing: bool) -> usize {
    v.windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

#[test]
fn criterion_07_tradeoff_curve() {
    let _g = serial();
    let start = Instant::now();
    let (mut acc, mut iou) = (Vec::new(), Vec::new());
    let mut seeds = String::new();
    for pi in ["0.1", "0.2", "0.4"] {
        let mut cfg = base("sib");
        cfg.set("pi", pi).unwrap();
        let rs = runs(&cfg);
        let a = field(&rs, accuracy);
        let i = field(&rs, |r| r.iou_f1);
        seeds.push_str(&format!(" pi={pi}:acc={},iou={}", fmt(&a), fmt(&i)));
        acc.push(mean(&a));
        iou.push(mean(&i));
    }
    let inv = inversions(&acc, true) + inversions(&iou, false);
    let pass = inv <= 1;
    let detail = format!("acc_means={} iou_means={} inversions={inv}{seeds}", fmt(&acc), fmt(&iou));
    assert!(report(7, pass, &detail, start, Duration::from_secs(1200)));
}

#[test]
fn criterion_08_method_ordering() {
    let _g = serial();
    let start = Instant::now();
    let mut means = Vec::new();
    let mut seeds = String::new();
    for objective in ["sib", "sl0", "sl0c", "none"] {
        let mut cfg = base(objective);
        cfg.synth.task = SynthTask::Distractor;
        cfg.synth.distractor_rate = 0.3;
        let i = field(&runs(&cfg), |r| r.iou_f1);
        seeds.push_str(&format!(" {objective}={}", fmt(&i)));
        means.push(mean(&i));
    }
    let (sib, sl0, sl0c, none) = (means[0], means[1], means[2], means[3]);
    let pass = sib >= sl0c && sib >= none && sl0 >= none && sl0c >= none;
    let detail = format!("iou_means sib={sib:.4} sl0={sl0:.4} sl0c={sl0c:.4} none={none:.4};{seeds}");
    assert!(report(8, pass, &detail, start, Duration::from_secs(1200)));
}

#[test]
fn criterion_09_semi_supervision() {
    let _g = serial();
    let start = Instant::now();
    let mut iou = Vec::new();
    let mut acc_quarter = 0.0;
    let mut seeds = String::new();
    for fraction in ["0", "0.25", "1"] {
        let mut cfg = base("semi");
        cfg.set("supervision_fraction", fraction).unwrap();
        let rs = runs(&cfg);
        let i = field(&rs, |r| r.iou_f1);
        let a = field(&rs, accuracy);
        if fraction == "0.25" {
            acc_quarter = mean(&a);
        }
        seeds.push_str(&format!(" f={fraction}:iou={},acc={}", fmt(&i), fmt(&a)));
        iou.push(mean(&i));
    }
    let mut full = base("none");
    full.set("full_context", "true").unwrap();
    let acc_full = mean(&field(&runs(&full), accuracy));
    let pass = inversions(&iou, true) == 0 && (acc_quarter - acc_full).abs() <= 0.02;
    let detail = format!(
        "iou_means={} acc_0.25={acc_quarter:.4} acc_full_context={acc_full:.4};{seeds}",
        fmt(&iou)
    );
    assert!(report(9, pass, &detail, start, Duration::from_secs(1200)));
}

fn learned_pi(entropy_lambda: &str) -> Vec<f64> {
    let mut cfg = base("sib");
    for (k, v) in [
        ("learnable_pi", "true"),
        ("pi", "0.5"),
        ("lr", "0.01"),
        ("entropy_lambda", entropy_lambda),
        ("sparsity_runs", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    runs(&cfg)
        .iter()
        .map(|(_, ck)| effective_pi(&ck.model, &ck.objective))
        .collect()
}

#[test]
fn criterion_10_learnable_pi() {
    let _g = serial();
    let start = Instant::now();
    let free = learned_pi("0");
    let tuned = learned_pi("0.5");
    let signal = SynthSpec::default().signal_fraction;
    let pass = mean(&free) > 0.9 && (mean(&tuned) - signal).abs() < 0.1;
    let detail = format!(
        "entropy_lambda=0 pi_mean={:.4} seeds={} entropy_lambda=0.5 pi_mean={:.4} seeds={}",
        mean(&free),
        fmt(&free),
        mean(&tuned),
        fmt(&tuned)
    );
    assert!(report(10, pass, &detail, start, Duration::from_secs(600)));
}

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for dir in &dirs {
        let mut cfg = base("sib");
        for (k, v) in [("num_train", "400"), ("epochs", "5"), ("seeds", "11")] {
            cfg.set(k, v).unwrap();
        }
        cfg.out_dir = dir.path().to_path_buf();
        run(Command::Train, &cfg).unwrap();
        checkpoints.push(std::fs::read(dir.path().join("seed-11/checkpoint.json")).unwrap());
        for _ in 0..2 {
            run(Command::Eval, &cfg).unwrap();
            let text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
            metrics.push(text.replace(&dir.path().display().to_string(), "OUT"));
        }
    }
    let same_ck = checkpoints[0] == checkpoints[1];
    let same_metrics = metrics.iter().all(|m| m.as_bytes() == metrics[0].as_bytes());
    let pass = same_ck && same_metrics;
    let detail = format!("checkpoints_identical={same_ck} metrics_json_identical={same_metrics} runs=4");
    assert!(report(11, pass, &detail, start, Duration::from_secs(600)));
}
