//! Closed forms on the scale grid: extinction probability, the limit of
//! `E[X_m]`, per-step Green values and the local-time expansion of `E[X_m]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{classify_t_limit, sum_t, LimitKind, LimitPolicy, LimitVerdict};
use crate::chain_model::{ChainError, ScaleEmbedding};
use crate::oracle::LocalTimeProfile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("start state must be at least 1")]
    StartState,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("cannot certify the extinction series: tail sum {tail}; full sum {full}")]
    CannotCertify {
        tail: Box<LimitVerdict>,
        full: Box<LimitVerdict>,
    },
    #[error("chain survives with probability {survival:.6e}; the local-time limit needs certain extinction")]
    TransientChain { survival: f64 },
    #[error("profile was computed for {profile}, arguments describe {given}")]
    ProfileMismatch { profile: String, given: String },
}

/// The two series behind an extinction probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionCertificates {
    /// `sum_{j >= k} t_j`
    pub tail: LimitVerdict,
    /// `sum_{j >= 0} t_j`
    pub full: LimitVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionResult {
    pub value: f64,
    pub error_bound: f64,
    /// Set when divergence of the scale series forces the value 1.
    pub exact_one: bool,
    /// `None` only for the trivial start state 0.
    pub certificates: Option<ExtinctionCertificates>,
}

/// Probability that the chain started at `k` is ever absorbed at 0:
/// `(x_inf - x_k) / x_inf`, read as 1 when `x_inf` is infinite.
pub fn extinction_probability(
    emb: &ScaleEmbedding,
    k: usize,
    policy: &LimitPolicy,
) -> Result<ExtinctionResult, AnalysisError> {
    if k == 0 {
        return Ok(ExtinctionResult {
            value: 1.0,
            error_bound: 0.0,
            exact_one: true,
            certificates: None,
        });
    }
    let full = sum_t(emb, policy);
    let x_k = emb.x_value(k);
    let tail = LimitVerdict {
        kind: match &full.kind {
            LimitKind::ConvergesTo { value, error_bound } => LimitKind::ConvergesTo {
                value: (value - x_k).max(0.0),
                error_bound: *error_bound,
            },
            other => other.clone(),
        },
        terms_examined: full.terms_examined.saturating_sub(k),
    };
    match full.kind {
        LimitKind::DivergesToInfinity => Ok(ExtinctionResult {
            value: 1.0,
            error_bound: 0.0,
            exact_one: true,
            certificates: Some(ExtinctionCertificates { tail, full }),
        }),
        LimitKind::ConvergesTo { value, error_bound } => {
            let probability = ((value - x_k) / value).clamp(0.0, 1.0);
            // d/dS (1 - x_k / S) = x_k / S^2; the partial sum is a lower bound.
            let propagated = x_k / (value * value) * error_bound;
            let rounding = 4.0 * f64::EPSILON * probability.max(x_k / value);
            Ok(ExtinctionResult {
                value: probability,
                error_bound: propagated + rounding,
                exact_one: false,
                certificates: Some(ExtinctionCertificates { tail, full }),
            })
        }
        LimitKind::ConvergesToZero | LimitKind::Inconclusive { .. } => {
            Err(AnalysisError::CannotCertify {
                tail: Box::new(tail),
                full: Box::new(full),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitExpectation {
    Finite { value: f64, error_bound: f64 },
    Infinite,
    NoLimit { reason: String },
}

/// `lim_m E[X_m]` for a chain started at `k`, evaluated as `x_k * phi'_inf`
/// with `phi'_inf = 1 / t_inf`.
pub fn limit_expectation(
    emb: &ScaleEmbedding,
    k: usize,
    policy: &LimitPolicy,
) -> Result<LimitExpectation, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::StartState);
    }
    let verdict = classify_t_limit(emb, policy);
    Ok(match verdict.kind {
        LimitKind::ConvergesTo { value: t_inf, error_bound } => {
            let x_k = emb.x_value(k);
            let via_slope = x_k * (1.0 / t_inf);
            // Ratio form: (1 + l_1/r_1 + ... + prod_{i<k} l_i/r_i) / t_inf,
            // accumulated from the raw probabilities rather than the cache.
            let spec = emb.spec();
            let mut numerator = 0.0;
            let mut product = 1.0;
            for j in 0..k {
                if j > 0 {
                    let (l, r) = spec.rates(j);
                    product *= l / r;
                }
                numerator += product;
            }
            let via_ratio = numerator / t_inf;
            let disagreement = (via_slope - via_ratio).abs();
            debug_assert!(
                disagreement <= 1e-12 * via_slope.abs().max(1.0) * (k as f64).max(1.0),
                "x_k phi'_inf = {via_slope} but ratio form = {via_ratio}"
            );
            let propagated = x_k * error_bound / (t_inf * (t_inf - error_bound).max(f64::MIN_POSITIVE));
            LimitExpectation::Finite {
                value: via_slope,
                error_bound: propagated + disagreement,
            }
        }
        LimitKind::ConvergesToZero => LimitExpectation::Infinite,
        LimitKind::DivergesToInfinity => LimitExpectation::Finite {
            value: 0.0,
            error_bound: 0.0,
        },
        LimitKind::Inconclusive { reason } => LimitExpectation::NoLimit { reason },
    })
}

/// Expected Brownian local time at `x_n` accumulated while leaving
/// `(x_{n-1}, x_{n+1})` from `x_n`: `2 t_{n-1} t_n / (t_{n-1} + t_n)`.
///
/// Equal to `2 r_n t_n` and to `2 l_n t_{n-1}`.
pub fn green_value(emb: &ScaleEmbedding, n: usize) -> Result<f64, ChainError> {
    emb.spec().probabilities(n)?;
    let below = emb.t_value(n - 1);
    let here = emb.t_value(n);
    if below.is_normal() && here.is_normal() {
        let g = 2.0 * here / (1.0 + here / below);
        if g.is_normal() {
            return Ok(g);
        }
    }
    Ok(ln_green_value(emb, n)?.exp())
}

/// `ln` of [`green_value`], finite whenever the direct value saturates.
pub fn ln_green_value(emb: &ScaleEmbedding, n: usize) -> Result<f64, ChainError> {
    emb.spec().probabilities(n)?;
    // ln(2 t_n / (1 + t_n / t_{n-1})) with the ratio taken in log form.
    let d = emb.ln_t_step(n);
    let ln_one_plus = if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    };
    Ok(std::f64::consts::LN_2 + emb.ln_t_value(n) - ln_one_plus)
}

/// Total expected local time at `x_n` before absorption, `2 min(x_k, x_n)`,
/// for chains that go extinct almost surely.
pub fn expected_local_time_infinity(
    emb: &ScaleEmbedding,
    k: usize,
    n: usize,
    policy: &LimitPolicy,
) -> Result<f64, AnalysisError> {
    if k == 0 || n == 0 {
        return Err(AnalysisError::StartState);
    }
    let extinction = extinction_probability(emb, k, policy)?;
    if !extinction.exact_one {
        return Err(AnalysisError::TransientChain {
            survival: 1.0 - extinction.value,
        });
    }
    Ok(2.0 * emb.x_value(k).min(emb.x_value(n)))
}

/// `k + sum_{n >= 1} (phi'_{n+1} - phi'_n) / 2 * E[L^{x_n}_{T_m}]`, the
/// local-time expansion of `E[X_m]`. Terms with `n > k + m` vanish.
pub fn tanaka_expectation(
    emb: &ScaleEmbedding,
    k: usize,
    profile: &LocalTimeProfile,
) -> Result<f64, AnalysisError> {
    if profile.start != k || &profile.spec != emb.spec() {
        return Err(AnalysisError::ProfileMismatch {
            profile: format!("{} from k = {}", profile.spec, profile.start),
            given: format!("{} from k = {}", emb.spec(), k),
        });
    }
    let last = (k + profile.horizon).min(profile.values.len().saturating_sub(1));
    let mut total = k as f64;
    let mut lo = 0.0;
    for n in 1..=last {
        let term = tanaka_term(emb, n, profile.values[n], profile.ln_values[n])?;
        // Neumaier summation.
        let s = total + term;
        if total.abs() >= term.abs() {
            lo += (total - s) + term;
        } else {
            lo += (term - s) + total;
        }
        total = s;
    }
    Ok(total + lo)
}

// (phi'_{n+1} - phi'_n) / 2 * value, in log form when the direct product is unusable.
fn tanaka_term(
    emb: &ScaleEmbedding,
    n: usize,
    value: f64,
    ln_value: f64,
) -> Result<f64, ChainError> {
    if ln_value == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let upper = emb.phi_slope(n + 1)?;
    let lower = emb.phi_slope(n)?;
    let direct = (upper - lower) / 2.0 * value;
    if direct.is_finite() && upper.is_normal() && lower.is_normal() && value.is_normal() {
        return Ok(direct);
    }
    // phi'_{n+1} - phi'_n = (1 / t_n) (1 - t_n / t_{n-1})
    let d = emb.ln_t_step(n);
    let factor = -d.exp_m1();
    if factor == 0.0 {
        return Ok(0.0);
    }
    let ln_mag = emb.ln_phi_slope(n + 1)? + factor.abs().ln() - std::f64::consts::LN_2 + ln_value;
    Ok(factor.signum() * ln_mag.exp())
}
