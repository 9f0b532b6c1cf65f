//! Training objectives: cross-entropy, the temperature-scaled distillation
//! KL term, and the KD / linear-region combinations built from them.
//!
//! All batch reductions are arithmetic means. Teacher outputs always enter
//! as plain tensors, so they never own a tape node and never receive a
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{check_tau, log_softmax_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Kd,
    L2rkd,
    Noisekd,
}

impl Method {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::Vanilla)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Kd => "kd",
            Method::L2rkd => "l2rkd",
            Method::Noisekd => "noisekd",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "kd" => Ok(Method::Kd),
            "l2rkd" => Ok(Method::L2rkd),
            "noisekd" => Ok(Method::Noisekd),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// How `noise_sigma` is read when drawing Gaussian perturbations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    #[default]
    StdDev,
    Variance,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_eta() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    4.0
}
fn default_r() -> f64 {
    1.0
}

/// Loss weights and sampling switches for one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the cross-entropy term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the linear-region distillation term.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Training samples per linear-region sample.
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "Method::default_method")]
    pub method: Method,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_scale: NoiseScale,
    /// Draw one interpolation coefficient per sample instead of per batch.
    #[serde(default)]
    pub per_sample_lambda: bool,
    /// Draw both region endpoints independently of the cross-entropy batch.
    #[serde(default)]
    pub independent_region_endpoints: bool,
}

impl Method {
    fn default_method() -> Method {
        Method::Kd
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            eta: default_eta(),
            tau: default_tau(),
            r: default_r(),
            method: Method::Kd,
            noise_sigma: 0.0,
            noise_scale: NoiseScale::StdDev,
            per_sample_lambda: false,
            independent_region_endpoints: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("r must be positive, got {}", self.r)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Standard deviation of the NoiseKD perturbation.
    pub fn noise_std(&self) -> f64 {
        match self.noise_scale {
            NoiseScale::StdDev => self.noise_sigma,
            NoiseScale::Variance => self.noise_sigma.sqrt(),
        }
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", &[b, k], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    let ls = tape.log_softmax_t(logits, 1.0)?;
    let picked = tape.pick(ls, labels)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// `τ² · KL(σ(t/τ) ‖ σ(s/τ))`, averaged over rows.
///
/// Computed as `Σ p_T (log p_T − log p_S)` with both log-probabilities from a
/// max-shifted log-softmax, so near-uniform rows at large τ do not cancel.
pub fn kl_distill(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let s_shape = tape.value(student).shape().to_vec();
    if s_shape != teacher.shape() {
        return Err(Error::shape("kl_distill", &s_shape, teacher.shape()));
    }
    let (b, _) = teacher.dims2()?;
    let log_pt = teacher.log_softmax_t(tau)?;
    let pt = log_pt.map(f64::exp);
    let log_ps = tape.log_softmax_t(student, tau)?;
    let log_pt = tape.constant(log_pt);
    let pt = tape.constant(pt);
    let diff = tape.sub(log_pt, log_ps)?;
    let weighted = tape.mul(pt, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, tau * tau / b as f64))
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = tape.scale(v, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("empty loss".into()))
}

/// Loss value plus its components, all as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// `None` when no distillation term was evaluated.
    pub distill: Option<Var>,
}

/// `α·CE + (1 − α)·KL` on one batch.
pub fn kd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossParts> {
    kd_loss_split(tape, student, labels, student, teacher, cfg)
}

/// KD weighting with the KL term evaluated on a different batch than the
/// cross-entropy term (NoiseKD distills on perturbed inputs).
pub fn kd_loss_split(
    tape: &mut Tape,
    student_ce: Var,
    labels: &[usize],
    student_distill: Var,
    teacher_distill: &Tensor,
    cfg: &DistillConfig,
) -> Result<LossParts> {
    let ce = cross_entropy(tape, student_ce, labels)?;
    let kl = kl_distill(tape, student_distill, teacher_distill, cfg.tau)?;
    let total = weighted_sum(tape, &[(cfg.alpha, ce), (1.0 - cfg.alpha, kl)])?;
    Ok(LossParts {
        total,
        ce,
        distill: Some(kl),
    })
}

/// `α·CE(aug) + η·mean_k KL(region_k)`.
///
/// Each region batch contributes one Monte-Carlo estimate of the expected
/// KL over the linear regions; the estimates are averaged. With no region
/// batches the loss is `α·CE`.
pub fn l2rkd_loss(
    tape: &mut Tape,
    student_aug: Var,
    labels: &[usize],
    student_region: &[Var],
    teacher_region: &[Tensor],
    cfg: &DistillConfig,
) -> Result<LossParts> {
    if student_region.len() != teacher_region.len() {
        return Err(Error::Contract(format!(
            "{} student region batches but {} teacher batches",
            student_region.len(),
            teacher_region.len()
        )));
    }
    let ce = cross_entropy(tape, student_aug, labels)?;
    if student_region.is_empty() {
        let total = tape.scale(ce, cfg.alpha);
        return Ok(LossParts {
            total,
            ce,
            distill: None,
        });
    }
    let mut kls = Vec::with_capacity(student_region.len());
    for (&s, t) in student_region.iter().zip(teacher_region) {
        kls.push(kl_distill(tape, s, t, cfg.tau)?);
    }
    let w = 1.0 / kls.len() as f64;
    let kl_terms: Vec<(f64, Var)> = kls.iter().map(|&v| (w, v)).collect();
    let kl = if kls.len() == 1 { kls[0] } else { weighted_sum(tape, &kl_terms)? };
    let total = weighted_sum(tape, &[(cfg.alpha, ce), (cfg.eta, kl)])?;
    Ok(LossParts {
        total,
        ce,
        distill: Some(kl),
    })
}

/// Evaluates a loss built on a fresh tape from constant logits.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = cross_entropy(&mut tape, l, labels)?;
    Ok(tape.value(v).item())
}

pub fn kl_distill_value(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let v = kl_distill(&mut tape, s, teacher, tau)?;
    Ok(tape.value(v).item())
}

/// Exact gradient of the τ²-weighted KL term with respect to one row of
/// student logits: `τ·(σ(s/τ) − σ(t/τ))`.
///
/// When the two softened distributions are close the difference is formed
/// through `expm1` of the logit gap, which keeps full relative precision
/// even when τ is many orders of magnitude larger than the logits.
pub fn kd_grad_closed_form(student: &[f64], teacher: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if student.len() != teacher.len() {
        return Err(Error::shape("kd_grad_closed_form", &[student.len()], &[teacher.len()]));
    }
    let k = student.len();
    let mut log_pt = vec![0.0; k];
    log_softmax_row(teacher, tau, &mut log_pt);
    let pt: Vec<f64> = log_pt.iter().map(|v| v.exp()).collect();

    // gap d = (s - t) / τ, recentred on its p_T-weighted mean
    let gap: Vec<f64> = student.iter().zip(teacher).map(|(s, t)| (s - t) / tau).collect();
    let centre: f64 = gap.iter().zip(&pt).map(|(d, p)| d * p).sum();
    let gap: Vec<f64> = gap.iter().map(|d| d - centre).collect();
    let spread = gap.iter().fold(0.0f64, |m, d| m.max(d.abs()));

    if spread > 1.0 {
        let mut log_ps = vec![0.0; k];
        log_softmax_row(student, tau, &mut log_ps);
        return Ok(log_ps
            .iter()
            .zip(&pt)
            .map(|(lps, p)| tau * (lps.exp() - p))
            .collect());
    }

    // σ_S,i = p_T,i e^{d_i} / S with S = Σ p_T,j e^{d_j} = 1 + m
    let em1: Vec<f64> = gap.iter().map(|d| d.exp_m1()).collect();
    let m: f64 = em1.iter().zip(&pt).map(|(e, p)| e * p).sum();
    Ok(em1
        .iter()
        .zip(&pt)
        .map(|(e, p)| tau * p * (e - m) / (1.0 + m))
        .collect())
}

/// First-order Taylor form of [`kd_grad_closed_form`]: expands `exp` to
/// `1 + x` in numerator and denominator. Does not assume zero-mean logits.
pub fn kd_grad_taylor(student: &[f64], teacher: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if student.len() != teacher.len() {
        return Err(Error::shape("kd_grad_taylor", &[student.len()], &[teacher.len()]));
    }
    let k = student.len() as f64;
    let a: Vec<f64> = student.iter().map(|v| v / tau).collect();
    let b: Vec<f64> = teacher.iter().map(|v| v / tau).collect();
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    // (1+a_i)/(K+A) − (1+b_i)/(K+B) over a common denominator
    let denom = (k + sa) * (k + sb);
    Ok(a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| tau * (k * (ai - bi) + (sb - sa) + ai * sb - bi * sa) / denom)
        .collect())
}

/// Mean-squared-error form of the gradient: `(f_S − f_T) / K`.
pub fn kd_grad_approx(student: &[f64], teacher: &[f64], classes: usize) -> Result<Vec<f64>> {
    if student.len() != teacher.len() {
        return Err(Error::shape("kd_grad_approx", &[student.len()], &[teacher.len()]));
    }
    if classes == 0 {
        return Err(Error::Domain("class count must be positive".into()));
    }
    let k = classes as f64;
    Ok(student.iter().zip(teacher).map(|(s, t)| (s - t) / k).collect())
}
