//! Batch-size rules, the learning-rate coupling at the batch-size cap, step
//! decay rules and the step sizes prescribed by the convergence theorems.
//!
//! All functions here are pure. The engine decides when to call them.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Upper bound returned by the adaptive rules when the requested batch would
/// be unbounded. Large enough that `cap_and_decay` still scales the step.
pub const MAX_BATCH: u64 = 1 << 40;

/// Relative tolerance for `loss >= F*` in the loss-adaptive rule.
const OPTIMUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `B_k = ⌈c / (F(w_k) − F*)⌉`, re-evaluated every `d_relax` updates.
    AdaLoss,
    /// `B_k = ⌈c / ‖∇F(w_k)‖²⌉`, re-evaluated every `d_relax` updates.
    AdaGradNorm,
    /// `B_k = B₀ + ⌈m k⌉`.
    PadaLinear,
    /// `max{⌈B₀/4⌉, ⌈(1 − e^{−kτ})(B₀ + ⌈m k⌉)⌉}`.
    PadaWarmup,
    /// `B_k = B₀ + ⌈m k²⌉`.
    HsgdQuadratic,
    /// `B₀ · factor^⌊epoch / delay⌋`.
    Geometric,
    Constant,
    /// Replays `sequence`, repeating its last entry.
    Sequence,
}

/// How an HSGD schedule decays the step once the cap is reached.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostCapDecay {
    /// Keep growing the virtual batch as `m k²`; the step shrinks like `1/k²`.
    #[default]
    Quadratic,
    /// Step `γ k_max / (k_max + m (k − k_max))`, shrinking like `1/k`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePolicy {
    pub kind: ScheduleKind,
    /// Adaptive constant. When absent the engine sets `c = B₀ (F(w₀) − F*)`
    /// (or `B₀ ‖∇F(w₀)‖²` for the gradient-norm rule).
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "one")]
    pub b0: u64,
    /// Growth rate of the passive rules.
    #[serde(default)]
    pub m: f64,
    /// Warmup decay constant.
    #[serde(default = "one_f")]
    pub tau: f64,
    /// Geometric growth factor.
    #[serde(default = "two_f")]
    pub factor: f64,
    #[serde(default = "one_f")]
    pub delay_epochs: f64,
    #[serde(default)]
    pub b_max: Option<u64>,
    /// Relaxation time: the adaptive rules re-evaluate every `d_relax` updates.
    #[serde(default = "one")]
    pub d_relax: u64,
    #[serde(default)]
    pub f_star: f64,
    /// Passive rules re-evaluate their formula every `dwell` updates.
    #[serde(default = "one")]
    pub dwell: u64,
    #[serde(default)]
    pub post_cap: PostCapDecay,
    #[serde(default)]
    pub sequence: Vec<u64>,
}

fn one() -> u64 {
    1
}
fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}

impl SchedulePolicy {
    pub fn new(kind: ScheduleKind, b0: u64) -> Self {
        Self {
            kind,
            c: None,
            b0,
            m: 0.0,
            tau: 1.0,
            factor: 2.0,
            delay_epochs: 1.0,
            b_max: None,
            d_relax: 1,
            f_star: 0.0,
            dwell: 1,
            post_cap: PostCapDecay::Quadratic,
            sequence: Vec::new(),
        }
    }

    pub fn constant(b: u64) -> Self {
        Self::new(ScheduleKind::Constant, b)
    }

    pub fn ada_loss(b0: u64, f_star: f64) -> Self {
        Self {
            f_star,
            ..Self::new(ScheduleKind::AdaLoss, b0)
        }
    }

    pub fn pada_linear(b0: u64, m: f64) -> Self {
        Self {
            m,
            ..Self::new(ScheduleKind::PadaLinear, b0)
        }
    }

    pub fn hsgd(b0: u64, m: f64) -> Self {
        Self {
            m,
            ..Self::new(ScheduleKind::HsgdQuadratic, b0)
        }
    }

    pub fn geometric(b0: u64, factor: f64, delay_epochs: f64) -> Self {
        Self {
            factor,
            delay_epochs,
            ..Self::new(ScheduleKind::Geometric, b0)
        }
    }

    pub fn sequence(seq: Vec<u64>) -> Self {
        Self {
            sequence: seq,
            ..Self::new(ScheduleKind::Sequence, 1)
        }
    }

    pub fn with_cap(mut self, b_max: u64) -> Self {
        self.b_max = Some(b_max);
        self
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.kind, ScheduleKind::AdaLoss | ScheduleKind::AdaGradNorm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b0 < 1 {
            return config_err("b0 must be at least 1");
        }
        if let Some(b_max) = self.b_max {
            if b_max < self.b0 {
                return config_err(format!("b0 ({}) exceeds b_max ({b_max})", self.b0));
            }
        }
        if let Some(c) = self.c {
            if !(c > 0.0 && c.is_finite()) {
                return config_err(format!("c must be positive, got {c}"));
            }
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            return config_err(format!("m must be finite and >= 0, got {}", self.m));
        }
        if self.d_relax < 1 || self.dwell < 1 {
            return config_err("d_relax and dwell must be at least 1");
        }
        if !self.f_star.is_finite() {
            return config_err("f_star must be finite");
        }
        match self.kind {
            ScheduleKind::PadaWarmup if !(self.tau > 0.0) => {
                config_err(format!("tau must be positive, got {}", self.tau))
            }
            ScheduleKind::Geometric if !(self.factor > 1.0) => {
                config_err(format!("factor must exceed 1, got {}", self.factor))
            }
            ScheduleKind::Geometric if !(self.delay_epochs > 0.0) => {
                config_err(format!("delay_epochs must be positive, got {}", self.delay_epochs))
            }
            ScheduleKind::Sequence if self.sequence.is_empty() || self.sequence.contains(&0) => {
                config_err("sequence must be nonempty with positive entries")
            }
            _ => Ok(()),
        }
    }

    /// Batch size of a passive rule at update `k` and (real-valued) epoch.
    /// Returns `None` for the adaptive rules, which need loss evaluations.
    pub fn passive_batch(&self, k: u64, epoch: f64) -> Option<u64> {
        let b = match self.kind {
            ScheduleKind::AdaLoss | ScheduleKind::AdaGradNorm => return None,
            ScheduleKind::PadaLinear => padadamp_batch(self.b0, self.m, k),
            ScheduleKind::PadaWarmup => padadamp_warmup_batch(self.b0, self.m, k, self.tau),
            ScheduleKind::HsgdQuadratic => hsgd_batch(self.b0, self.m, k),
            ScheduleKind::Geometric => {
                geodamp_batch(self.b0, self.factor, self.delay_epochs, epoch)
            }
            ScheduleKind::Constant => self.b0,
            ScheduleKind::Sequence => {
                let i = (k as usize).min(self.sequence.len() - 1);
                self.sequence[i]
            }
        };
        Some(b)
    }
}

/// Loss-adaptive batch size `⌈c / (loss − F*)⌉`, saturating at `cap`.
///
/// A gap at or below `c / cap` (including a zero gap) returns `cap`.
pub fn adadamp_batch(loss: f64, f_star: f64, c: f64, cap: u64) -> Result<u64> {
    let gap = loss - f_star;
    if gap < -OPTIMUM_TOL * (1.0 + f_star.abs()) {
        return Err(Error::BetterThanOptimum { loss, f_star });
    }
    let cap = cap.max(1);
    if gap <= c / cap as f64 {
        return Ok(cap);
    }
    Ok(ceil_count(c / gap).clamp(1, cap))
}

/// Gradient-norm adaptive batch size `⌈c / ‖∇F‖²⌉`.
pub fn gradnorm_batch(grad_norm_sq: f64, c: f64) -> Result<u64> {
    if grad_norm_sq <= 0.0 {
        return Err(Error::Stationary);
    }
    Ok(ceil_count(c / grad_norm_sq).max(1))
}

pub fn padadamp_batch(b0: u64, m: f64, k: u64) -> u64 {
    b0 + ceil_count(m * k as f64)
}

pub fn padadamp_warmup_batch(b0: u64, m: f64, k: u64, tau: f64) -> u64 {
    let target = padadamp_batch(b0, m, k);
    let warm = -(-(k as f64) * tau).exp_m1() * target as f64;
    ceil_count(b0 as f64 / 4.0).max(ceil_count(warm).min(target))
}

pub fn hsgd_batch(b0: u64, m: f64, k: u64) -> u64 {
    let k = k as f64;
    b0 + ceil_count(m * k * k)
}

pub fn geodamp_batch(b0: u64, factor: f64, delay_epochs: f64, epoch: f64) -> u64 {
    let steps = (epoch / delay_epochs).floor().max(0.0);
    let b = (b0 as f64 * factor.powf(steps)).round();
    if b >= MAX_BATCH as f64 {
        MAX_BATCH
    } else {
        b as u64
    }
}

/// Applies the batch-size cap. A batch at or above `b_max` is replaced by
/// `b_max` and the step shrinks by `b_max / b_k`, so `γ/B` is unchanged.
pub fn cap_and_decay(gamma: f64, b_k: u64, b_max: u64) -> (f64, u64) {
    if b_k >= b_max {
        (gamma * b_max as f64 / b_k as f64, b_max)
    } else {
        (gamma, b_k)
    }
}

fn ceil_count(x: f64) -> u64 {
    if x.is_nan() || x <= 0.0 {
        0
    } else if x >= MAX_BATCH as f64 {
        MAX_BATCH
    } else {
        x.ceil() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    /// `min(γ₀, a γ₀ / k)` with `a = inverse_k_factor` (10 by default).
    InverseK,
    /// `γ₀ · decay_factor^−⌊epoch / delay_epochs⌋`.
    GeometricDecay,
    /// A constant step computed from problem constants.
    TheoremPrescribed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRule {
    pub kind: LrKind,
    pub gamma0: f64,
    #[serde(default = "ten")]
    pub inverse_k_factor: f64,
    #[serde(default = "two_f")]
    pub decay_factor: f64,
    #[serde(default = "one_f")]
    pub delay_epochs: f64,
}

fn ten() -> f64 {
    10.0
}

impl LrRule {
    pub fn constant(gamma0: f64) -> Self {
        Self {
            kind: LrKind::Constant,
            gamma0,
            inverse_k_factor: 10.0,
            decay_factor: 2.0,
            delay_epochs: 1.0,
        }
    }

    pub fn inverse_k(gamma0: f64, factor: f64) -> Self {
        Self {
            kind: LrKind::InverseK,
            inverse_k_factor: factor,
            ..Self::constant(gamma0)
        }
    }

    pub fn geometric(gamma0: f64, decay_factor: f64, delay_epochs: f64) -> Self {
        Self {
            kind: LrKind::GeometricDecay,
            decay_factor,
            delay_epochs,
            ..Self::constant(gamma0)
        }
    }

    pub fn prescribed(gamma: f64) -> Self {
        Self {
            kind: LrKind::TheoremPrescribed,
            ..Self::constant(gamma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return config_err(format!("gamma0 must be positive, got {}", self.gamma0));
        }
        match self.kind {
            LrKind::InverseK if !(self.inverse_k_factor > 0.0) => {
                config_err("inverse_k_factor must be positive")
            }
            LrKind::GeometricDecay if !(self.decay_factor >= 1.0 && self.delay_epochs > 0.0) => {
                config_err("decay_factor must be >= 1 and delay_epochs positive")
            }
            _ => Ok(()),
        }
    }
}

/// Step size at update `k` (0-based) and real-valued `epoch`.
pub fn lr_at(rule: &LrRule, k: u64, epoch: f64) -> f64 {
    match rule.kind {
        LrKind::Constant | LrKind::TheoremPrescribed => rule.gamma0,
        LrKind::InverseK => {
            if k == 0 {
                rule.gamma0
            } else {
                rule.gamma0.min(rule.inverse_k_factor * rule.gamma0 / k as f64)
            }
        }
        LrKind::GeometricDecay => {
            let steps = (epoch / rule.delay_epochs).floor().max(0.0);
            rule.gamma0 * rule.decay_factor.powf(-steps)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    /// β-smooth and α-PL.
    Pl,
    /// β-smooth and convex.
    Convex,
    /// β-smooth, possibly non-convex.
    Smooth,
}

/// Constants feeding [`theorem_step_size`]. `c` is always the raw batch
/// constant of the adaptive rule.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepConstants {
    pub alpha: Option<f64>,
    pub beta: f64,
    pub c: f64,
    pub m_upper_sq: Option<f64>,
    pub m_lower_sq: Option<f64>,
}

/// Step size prescribed for each function class:
///
/// * PL: `α / [β (α + M_U² / 2c)]`
/// * convex: `(β + M_U² / c)⁻¹`, i.e. `(β + 1/c′)⁻¹` with `c′ = c / M_U²`
/// * smooth: `c / [β (c + M_L²)]`
pub fn theorem_step_size(class: FunctionClass, k: StepConstants) -> Result<f64> {
    if !(k.beta > 0.0) || !(k.c > 0.0) {
        return config_err("theorem step size needs beta > 0 and c > 0");
    }
    let need = |v: Option<f64>, name: &str| {
        v.filter(|x| *x >= 0.0 && x.is_finite())
            .ok_or_else(|| Error::Config(format!("{class:?} step size needs {name}")))
    };
    let gamma = match class {
        FunctionClass::Pl => {
            let alpha = need(k.alpha, "alpha")?;
            if alpha <= 0.0 {
                return config_err("PL step size needs alpha > 0");
            }
            let mu = need(k.m_upper_sq, "M_U^2")?;
            alpha / (k.beta * (alpha + mu / (2.0 * k.c)))
        }
        FunctionClass::Convex => {
            let mu = need(k.m_upper_sq, "M_U^2")?;
            1.0 / (k.beta + mu / k.c)
        }
        FunctionClass::Smooth => {
            let ml = need(k.m_lower_sq, "M_L^2")?;
            k.c / (k.beta * (k.c + ml))
        }
    };
    Ok(gamma)
}

/// Contraction rate `r = α² / [β (α + M_U² / 2c)]` of the PL guarantee
/// `E[F(w_T)] − F* ≤ (1 − r)^T (F(w₀) − F*)`.
pub fn pl_rate(alpha: f64, beta: f64, c: f64, m_upper_sq: f64) -> f64 {
    alpha * alpha / (beta * (alpha + m_upper_sq / (2.0 * c)))
}
