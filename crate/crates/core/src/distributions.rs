//! Reparameterizable mask distributions and their divergences to fixed priors.
//!
//! Every sampler takes its noise explicitly so the same call is reproducible
//! and can be differentiated with the noise frozen. Scalar versions are used
//! by statistics and tests; the `*_var` functions record the same maps on a
//! [`Tape`].

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Var};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Logits are kept inside this range wherever a Bernoulli parameter must stay
/// strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 15.0;

pub const DEFAULT_TAU: f64 = 0.7;

pub const DEFAULT_SERIES_TERMS: usize = 10;

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Bernoulli parameter carried as a logit `log(θ / (1 − θ))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliLogit(pub f64);

impl BernoulliLogit {
    pub fn from_prob(theta: f64) -> Result<Self> {
        open_unit("theta", theta)?;
        Ok(Self((theta / (1.0 - theta)).ln()))
    }

    pub fn prob(self) -> f64 {
        sigmoid(self.0)
    }

    pub fn clamped(self) -> Self {
        Self(self.0.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }
}

/// Prior inclusion probability of `r(m_j) = Bernoulli(π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pi: f64,
}

impl PriorConfig {
    pub fn new(pi: f64) -> Result<Self> {
        open_unit("pi", pi)?;
        Ok(Self { pi })
    }

    pub fn pi(self) -> f64 {
        self.pi
    }
}

/// How the binary Concrete relaxation injects noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcreteNoise {
    /// `σ((ℓ + log u − log(1 − u)) / τ)`: logistic noise on the logit.
    #[default]
    Logistic,
    /// `σ((log σ(ℓ) + g) / τ)` with a single Gumbel draw `g`.
    PaperGumbel,
}

impl std::str::FromStr for ConcreteNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "paper_gumbel" => Ok(Self::PaperGumbel),
            other => Err(Error::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

/// One uniform draw together with its Gumbel transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSample {
    pub u: f64,
    pub g: f64,
}

impl NoiseSample {
    pub fn from_uniform(u: f64) -> Result<Self> {
        Ok(Self { u, g: gumbel(u)? })
    }

    /// `log u − log(1 − u)`, the difference of two independent Gumbels in law.
    pub fn logistic(self) -> f64 {
        self.u.ln() - (-self.u).ln_1p()
    }

    fn offset(self, logit: f64, mode: ConcreteNoise) -> f64 {
        match mode {
            ConcreteNoise::Logistic => logit + self.logistic(),
            ConcreteNoise::PaperGumbel => log_sigmoid(logit) + self.g,
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Gumbel(0, 1) draw `−log(−log u)`.
pub fn gumbel(u: f64) -> Result<f64> {
    open_unit("u", u)?;
    Ok(-(-u.ln()).ln())
}

/// Stretch interval `(l0, l1)` used to rectify relaxed samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StretchParams {
    l0: f64,
    l1: f64,
}

impl Default for StretchParams {
    fn default() -> Self {
        Self { l0: -0.1, l1: 1.1 }
    }
}

impl StretchParams {
    pub fn new(l0: f64, l1: f64) -> Result<Self> {
        if !(l0 < 0.0 && l1 > 1.0 && l0.is_finite() && l1.is_finite()) {
            return Err(Error::Domain(format!(
                "stretch needs l0 < 0 < 1 < l1, got ({l0}, {l1})"
            )));
        }
        Ok(Self { l0, l1 })
    }

    pub fn l0(self) -> f64 {
        self.l0
    }

    pub fn l1(self) -> f64 {
        self.l1
    }

    pub fn apply(self, h: f64) -> f64 {
        (h * (self.l1 - self.l0) + self.l0).clamp(0.0, 1.0)
    }

    /// Position in the unstretched (0, 1) variable that maps to 0.
    pub fn zero_point(self) -> f64 {
        -self.l0 / (self.l1 - self.l0)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    positive("tau", tau)
}

pub fn kl_bernoulli(theta: f64, pi: f64) -> Result<f64> {
    open_unit("theta", theta)?;
    open_unit("pi", pi)?;
    Ok(theta * (theta / pi).ln() + (1.0 - theta) * ((1.0 - theta) / (1.0 - pi)).ln())
}

/// Binary Concrete (relaxed Bernoulli) sample in (0, 1).
pub fn sample_concrete(logit: f64, tau: f64, noise: NoiseSample, mode: ConcreteNoise) -> Result<f64> {
    check_tau(tau)?;
    Ok(sigmoid(noise.offset(logit, mode) / tau))
}

/// Concrete sample stretched to `(l0, l1)` and clamped to `[0, 1]`.
pub fn sample_hard_concrete(
    logit: f64,
    tau: f64,
    noise: NoiseSample,
    stretch: StretchParams,
    mode: ConcreteNoise,
) -> Result<f64> {
    Ok(stretch.apply(sample_concrete(logit, tau, noise, mode)?))
}

/// Probability that a hard-concrete gate is non-zero (logistic noise).
pub fn expected_l0_hard_concrete(logit: f64, tau: f64, stretch: StretchParams) -> Result<f64> {
    check_tau(tau)?;
    Ok(sigmoid(logit - tau * (-stretch.l0 / stretch.l1).ln()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KumaParams {
    pub a: f64,
    pub b: f64,
}

impl KumaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        positive("kumaraswamy a", a)?;
        positive("kumaraswamy b", b)?;
        Ok(Self { a, b })
    }

    pub fn cdf(self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        // 1 − (1 − x^a)^b
        let xa = (self.a * x.ln()).exp();
        -(self.b * (-xa).ln_1p()).exp_m1()
    }

    pub fn pdf(self, x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        let xa = x.powf(self.a);
        self.a * self.b * x.powf(self.a - 1.0) * (1.0 - xa).powf(self.b - 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub alpha_b: f64,
    pub beta_b: f64,
}

impl BetaParams {
    pub fn new(alpha_b: f64, beta_b: f64) -> Result<Self> {
        positive("beta alpha", alpha_b)?;
        positive("beta beta", beta_b)?;
        Ok(Self { alpha_b, beta_b })
    }

    pub fn ln_pdf(self, x: f64) -> f64 {
        (self.alpha_b - 1.0) * x.ln() + (self.beta_b - 1.0) * (-x).ln_1p()
            - ln_beta(self.alpha_b, self.beta_b)
    }
}

/// Inverse-CDF Kumaraswamy sample `(1 − (1 − u)^{1/b})^{1/a}`.
pub fn sample_kuma(params: KumaParams, u: f64) -> Result<f64> {
    open_unit("u", u)?;
    let inner = -((-u).ln_1p() / params.b).exp_m1();
    Ok((inner.ln() / params.a).exp())
}

pub fn sample_hard_kuma(params: KumaParams, u: f64, stretch: StretchParams) -> Result<f64> {
    Ok(stretch.apply(sample_kuma(params, u)?))
}

/// Kumaraswamy–Beta divergence from the closed form with its infinite series.
///
/// The first `series_terms` terms of `Σ_m B(m/a, b) / (m + ab)` are summed
/// exactly; the remainder is estimated by the Euler–Maclaurin midpoint rule
/// (tail integral by Gauss–Legendre plus the first derivative correction).
/// Without the remainder the series converges like `m^{-1-b}`, which for
/// `b < 1` leaves errors far above 1e-3 after any practical number of terms.
pub fn kl_kuma_beta(q: KumaParams, p: BetaParams, series_terms: usize) -> Result<f64> {
    let q = KumaParams::new(q.a, q.b)?;
    let p = BetaParams::new(p.alpha_b, p.beta_b)?;
    if series_terms == 0 {
        return Err(Error::Domain("series_terms must be at least 1".into()));
    }
    let (a, b) = (q.a, q.b);
    let (alpha, beta) = (p.alpha_b, p.beta_b);
    let mut kl = (a - alpha) / a * (-EULER_GAMMA - digamma(b) - 1.0 / b) + (a * b).ln()
        + ln_beta(alpha, beta)
        - (b - 1.0) / b;
    if beta != 1.0 {
        let term = |s: f64| b * (ln_beta(s / a, b)).exp() / (s + a * b);
        let head: f64 = (1..=series_terms).map(|m| term(m as f64)).sum();
        let tail = series_tail(a, b, series_terms as f64 + 0.5);
        kl += (beta - 1.0) * (head + tail);
    }
    Ok(kl)
}

/// `Σ_{m > s0 − ½} f(m)` for `f(s) = b·B(s/a, b)/(s + ab)`.
fn series_tail(a: f64, b: f64, s0: f64) -> f64 {
    let ln_f = |s: f64| b.ln() + ln_beta(s / a, b) - (s + a * b).ln();
    // s = s0·w^{-1/b} flattens the s^{-1-b} decay into a near-constant integrand.
    let integral: f64 = gauss_legendre()
        .iter()
        .map(|&(x, w)| {
            let s = s0 * x.powf(-1.0 / b);
            let jac = s0 / b * x.powf(-1.0 / b - 1.0);
            w * ln_f(s).exp() * jac
        })
        .sum();
    let dlog = (digamma(s0 / a) - digamma(s0 / a + b)) / a - 1.0 / (s0 + a * b);
    let deriv = ln_f(s0).exp() * dlog;
    integral + deriv / 24.0
}

/// 48-point Gauss–Legendre rule mapped to (0, 1).
fn gauss_legendre() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        const N: usize = 48;
        let mut out = Vec::with_capacity(N);
        for i in 1..=N {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (N as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=N {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = N as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push(((x + 1.0) / 2.0, w / 2.0));
        }
        out
    })
}

/// Kumaraswamy parameters used for a mask unit with logit `ℓ`: `(e^ℓ, 1)`,
/// whose mean is `σ(ℓ)`.
pub fn kuma_from_logit(logit: f64) -> KumaParams {
    KumaParams {
        a: logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp(),
        b: 1.0,
    }
}

/// Beta prior matched to [`kuma_from_logit`]: `Beta(π/(1−π), 1)` has mean π.
pub fn beta_prior_for(pi: f64) -> Result<BetaParams> {
    open_unit("pi", pi)?;
    BetaParams::new(pi / (1.0 - pi), 1.0)
}

// ---------------------------------------------------------------------------
// Tape versions
// ---------------------------------------------------------------------------

pub fn clamp_logits(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Elementwise `KL(Bernoulli(σ(ℓ)) ‖ Bernoulli(π))` with `log π` and
/// `log(1 − π)` supplied as scalar nodes so π itself may be trainable.
pub fn kl_bernoulli_var(tape: &mut Tape, logits: Var, log_pi: Var, log_one_minus_pi: Var) -> Result<Var> {
    let l = clamp_logits(tape, logits)?;
    let p = tape.sigmoid(l)?;
    let neg = tape.neg(l)?;
    let q = tape.sigmoid(neg)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let dp = tape.sub(log_p, log_pi)?;
    let dq = tape.sub(log_q, log_one_minus_pi)?;
    let a = tape.mul(p, dp)?;
    let b = tape.mul(q, dq)?;
    tape.add(a, b)
}

/// Constant `log π`, `log(1 − π)` nodes for a fixed prior.
pub fn fixed_prior_logs(tape: &mut Tape, pi: f64) -> Result<(Var, Var)> {
    open_unit("pi", pi)?;
    Ok((tape.scalar(pi.ln())?, tape.scalar((-pi).ln_1p())?))
}

fn noise_offsets(tape: &mut Tape, logits: Var, uniforms: &[f64], mode: ConcreteNoise) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if uniforms.len() != tape.value(logits).len() {
        return Err(Error::shape(
            "concrete noise",
            format!("{} draws for shape {shape:?}", uniforms.len()),
        ));
    }
    let noise = uniforms
        .iter()
        .map(|&u| NoiseSample::from_uniform(u).map(|n| match mode {
            ConcreteNoise::Logistic => n.logistic(),
            ConcreteNoise::PaperGumbel => n.g,
        }))
        .collect::<Result<Vec<_>>>()?;
    let noise = tape.constant(shape, noise)?;
    let base = match mode {
        ConcreteNoise::Logistic => logits,
        ConcreteNoise::PaperGumbel => {
            let s = tape.sigmoid(logits)?;
            tape.log(s)?
        }
    };
    tape.add(base, noise)
}

pub fn concrete_var(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    uniforms: &[f64],
    mode: ConcreteNoise,
) -> Result<Var> {
    check_tau(tau)?;
    let z = noise_offsets(tape, logits, uniforms, mode)?;
    let z = tape.scalar_mul(z, 1.0 / tau)?;
    tape.sigmoid(z)
}

fn stretch_var(tape: &mut Tape, h: Var, stretch: StretchParams) -> Result<Var> {
    let s = tape.scalar_mul(h, stretch.l1 - stretch.l0)?;
    let s = tape.add_scalar(s, stretch.l0)?;
    tape.clamp(s, 0.0, 1.0)
}

pub fn hard_concrete_var(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    uniforms: &[f64],
    stretch: StretchParams,
    mode: ConcreteNoise,
) -> Result<Var> {
    let h = concrete_var(tape, logits, tau, uniforms, mode)?;
    stretch_var(tape, h, stretch)
}

pub fn expected_l0_var(tape: &mut Tape, logits: Var, tau: f64, stretch: StretchParams) -> Result<Var> {
    check_tau(tau)?;
    let shifted = tape.add_scalar(logits, -tau * (-stretch.l0 / stretch.l1).ln())?;
    tape.sigmoid(shifted)
}

/// Kumaraswamy(e^ℓ, 1) sample `u^{e^{-ℓ}}`.
pub fn kuma_var(tape: &mut Tape, logits: Var, uniforms: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if uniforms.len() != tape.value(logits).len() {
        return Err(Error::shape(
            "kuma noise",
            format!("{} draws for shape {shape:?}", uniforms.len()),
        ));
    }
    for &u in uniforms {
        open_unit("u", u)?;
    }
    let log_u = tape.constant(shape, uniforms.iter().map(|u| u.ln()).collect())?;
    let l = clamp_logits(tape, logits)?;
    let neg = tape.neg(l)?;
    let inv_a = tape.exp(neg)?;
    let e = tape.mul(log_u, inv_a)?;
    tape.exp(e)
}

pub fn hard_kuma_var(tape: &mut Tape, logits: Var, uniforms: &[f64], stretch: StretchParams) -> Result<Var> {
    let x = kuma_var(tape, logits, uniforms)?;
    stretch_var(tape, x, stretch)
}

/// Elementwise `KL(Kuma(e^ℓ, 1) ‖ Beta(π/(1−π), 1)) = r − 1 − log r` with
/// `r = α e^{-ℓ}`.
pub fn kl_kuma_var(tape: &mut Tape, logits: Var, pi: f64) -> Result<Var> {
    let alpha = beta_prior_for(pi)?.alpha_b;
    let l = clamp_logits(tape, logits)?;
    let neg = tape.neg(l)?;
    let e = tape.exp(neg)?;
    let r = tape.scalar_mul(e, alpha)?;
    let log_r = tape.log(r)?;
    let d = tape.sub(r, log_r)?;
    tape.add_scalar(d, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn kl_bernoulli_examples() {
        assert_eq!(kl_bernoulli(0.5, 0.5).unwrap(), 0.0);
        // 0.9 ln 4.5 + 0.1 ln 0.125
        close(kl_bernoulli(0.9, 0.2).unwrap(), 1.145_725_503, 1e-8);
        assert!((kl_bernoulli(0.2, 0.9).unwrap() - kl_bernoulli(0.9, 0.2).unwrap()).abs() > 0.1);
        assert!(kl_bernoulli(0.0, 0.5).is_err());
        assert!(kl_bernoulli(0.5, 1.0).is_err());
    }

    #[test]
    fn concrete_examples() {
        let half = NoiseSample::from_uniform(0.5).unwrap();
        assert_eq!(half.logistic(), 0.0);
        for tau in [0.1, 0.7, 3.0] {
            let v = sample_concrete(0.0, tau, half, ConcreteNoise::Logistic).unwrap();
            assert!((v - 0.5).abs() < 1e-15);
        }
        let v = sample_concrete(9f64.ln(), 0.7, half, ConcreteNoise::Logistic).unwrap();
        close(v, sigmoid(9f64.ln() / 0.7), 1e-15);
        close(v, 0.9585, 1e-4);
        let n = NoiseSample::from_uniform(0.8).unwrap();
        let cold = sample_concrete(0.3, 1e-4, n, ConcreteNoise::Logistic).unwrap();
        assert!(cold > 1.0 - 1e-12);
        assert!(sample_concrete(0.0, 0.0, half, ConcreteNoise::Logistic).is_err());
    }

    #[test]
    fn paper_gumbel_mode_uses_log_probability() {
        let n = NoiseSample::from_uniform(0.3).unwrap();
        let v = sample_concrete(1.0, 0.7, n, ConcreteNoise::PaperGumbel).unwrap();
        let expected = sigmoid((sigmoid(1.0).ln() + gumbel(0.3).unwrap()) / 0.7);
        close(v, expected, 1e-14);
    }

    #[test]
    fn hard_concrete_rectifies() {
        let s = StretchParams::default();
        assert_eq!(s.apply((-0.05 - s.l0()) / (s.l1() - s.l0())), 0.0);
        assert_eq!(s.apply((1.05 - s.l0()) / (s.l1() - s.l0())), 1.0);
        assert!(StretchParams::new(0.1, 1.1).is_err());
        assert!(StretchParams::new(-0.1, 0.9).is_err());
    }

    #[test]
    fn expected_l0_examples() {
        let s = StretchParams::default();
        let p = expected_l0_hard_concrete(0.0, 0.7, s).unwrap();
        close(p, sigmoid(0.7 * 11f64.ln()), 1e-15);
        close(p, 0.8427, 1e-4);
        // Without stretch every concrete sample is strictly positive, so the
        // gate is open with probability tending to 1.
        let tight = StretchParams::new(-1e-12, 1.0 + 1e-12).unwrap();
        assert!(expected_l0_hard_concrete(0.4, 0.7, tight).unwrap() > 1.0 - 1e-7);
        assert!(expected_l0_hard_concrete(-800.0, 0.7, s).unwrap() < 1e-300);
    }

    #[test]
    fn kuma_examples() {
        let one = KumaParams::new(1.0, 1.0).unwrap();
        close(sample_kuma(one, 0.5).unwrap(), 0.5, 1e-15);
        let two = KumaParams::new(2.0, 2.0).unwrap();
        close(sample_kuma(two, 0.5).unwrap(), (1.0 - 0.5f64.sqrt()).sqrt(), 1e-15);
        close(sample_kuma(two, 0.5).unwrap(), 0.54120, 1e-5);
        for &u in &[1e-9, 0.01, 0.3, 0.77, 0.999999] {
            for p in [one, two, KumaParams::new(0.5, 3.0).unwrap()] {
                let x = sample_kuma(p, u).unwrap();
                close(p.cdf(x), u, 1e-12);
            }
        }
        assert!(sample_kuma(one, 0.0).is_err());
        assert!(sample_kuma(one, 1.0).is_err());
        assert!(KumaParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn hard_kuma_examples() {
        let s = StretchParams::default();
        let one = KumaParams::new(1.0, 1.0).unwrap();
        assert_eq!(sample_hard_kuma(one, 0.05, s).unwrap(), 0.0);
        close(one.cdf(s.zero_point()), 0.1 / 1.2, 1e-15);
        let tight = StretchParams::new(-1e-12, 1.0 + 1e-12).unwrap();
        close(
            sample_hard_kuma(one, 0.4, tight).unwrap(),
            sample_kuma(one, 0.4).unwrap(),
            1e-11,
        );
    }

    #[test]
    fn gumbel_examples() {
        close(gumbel((-1f64).exp()).unwrap(), 0.0, 1e-15);
        close(gumbel(0.5).unwrap(), 0.366_512_920_6, 1e-9);
        assert!(gumbel(0.0).is_err());
        assert!(gumbel(1.0).is_err());
    }

    #[test]
    fn kl_kuma_beta_uniform_is_zero() {
        let q = KumaParams::new(1.0, 1.0).unwrap();
        let p = BetaParams::new(1.0, 1.0).unwrap();
        close(kl_kuma_beta(q, p, 10).unwrap(), 0.0, 1e-14);
        assert!(kl_kuma_beta(q, p, 0).is_err());
        assert!(kl_kuma_beta(KumaParams { a: -1.0, b: 1.0 }, p, 10).is_err());
    }

    #[test]
    fn kl_kuma_matched_prior_has_closed_form() {
        for &(l, pi) in &[(0.3, 0.2), (-1.0, 0.4), (2.0, 0.1)] {
            let q = kuma_from_logit(l);
            let p = beta_prior_for(pi).unwrap();
            let r = p.alpha_b / q.a;
            close(kl_kuma_beta(q, p, 10).unwrap(), r - 1.0 - r.ln(), 1e-12);
            let mut tape = Tape::new();
            let lv = tape.scalar(l).unwrap();
            let kl = kl_kuma_var(&mut tape, lv, pi).unwrap();
            close(tape.scalar_value(kl), r - 1.0 - r.ln(), 1e-12);
        }
    }

    #[test]
    fn kl_bernoulli_var_matches_scalar() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2], vec![9f64.ln(), 0.25f64.ln()]).unwrap();
        let (lp, lq) = fixed_prior_logs(&mut tape, 0.2).unwrap();
        let kl = kl_bernoulli_var(&mut tape, logits, lp, lq).unwrap();
        let v = tape.value(kl);
        close(v[0], kl_bernoulli(0.9, 0.2).unwrap(), 1e-12);
        close(v[1], 0.0, 1e-12);
    }

    #[test]
    fn samplers_are_differentiable_with_frozen_noise() {
        let x = Tensor::new(vec![4], vec![-1.3, 0.2, 0.9, 2.1]).unwrap();
        let us = [0.13, 0.52, 0.71, 0.94];
        let s = StretchParams::default();
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("concrete", Box::new(move |t: &mut Tape, l| {
                let m = concrete_var(t, l, 0.7, &us, ConcreteNoise::Logistic)?;
                t.sum(m)
            })),
            ("paper_gumbel", Box::new(move |t: &mut Tape, l| {
                let m = concrete_var(t, l, 0.7, &us, ConcreteNoise::PaperGumbel)?;
                t.sum(m)
            })),
            ("hard_concrete", Box::new(move |t: &mut Tape, l| {
                let m = hard_concrete_var(t, l, 0.7, &us, s, ConcreteNoise::Logistic)?;
                let sq = t.mul(m, m)?;
                t.sum(sq)
            })),
            ("kuma", Box::new(move |t: &mut Tape, l| {
                let m = kuma_var(t, l, &us)?;
                t.sum(m)
            })),
            ("expected_l0", Box::new(move |t: &mut Tape, l| {
                let m = expected_l0_var(t, l, 0.7, s)?;
                t.sum(m)
            })),
            ("kl_kuma", Box::new(move |t: &mut Tape, l| {
                let m = kl_kuma_var(t, l, 0.3)?;
                t.sum(m)
            })),
        ];
        for (name, f) in checks {
            let err = grad_check(f, &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn kl_bernoulli_gradient() {
        let x = Tensor::new(vec![3], vec![-0.7, 0.1, 1.9]).unwrap();
        let err = grad_check(
            |t, l| {
                let (a, b) = fixed_prior_logs(t, 0.3)?;
                let kl = kl_bernoulli_var(t, l, a, b)?;
                t.sum(kl)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
