//! Certified classification of `t_inf = lim t_n` and `x_inf = sum t_n`.
//!
//! Nothing here assumes a limit exists. Each verdict is backed by an explicit
//! finite-sample certificate (trailing-window stabilization, a geometric tail
//! bound, a divergence threshold) or by an analytic [`TailHint`] carried by the
//! chain family. When no certificate applies the verdict is `Inconclusive`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain_model::{CompensatedSum, ScaleEmbedding, TailHint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("need max_terms >= ratio_window >= 2 (got max_terms = {max_terms}, ratio_window = {ratio_window})")]
    Window {
        max_terms: usize,
        ratio_window: usize,
    },
    #[error("tolerances must be positive and finite (rel_tol = {rel_tol}, divergence_threshold = {divergence_threshold})")]
    Tolerance {
        rel_tol: f64,
        divergence_threshold: f64,
    },
}

/// Knobs for the numeric certificates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitPolicy {
    pub max_terms: usize,
    pub rel_tol: f64,
    pub ratio_window: usize,
    /// Partial sums above this are treated as divergent.
    pub divergence_threshold: f64,
}

impl Default for LimitPolicy {
    fn default() -> Self {
        Self {
            max_terms: 1_000_000,
            rel_tol: 1e-12,
            ratio_window: 64,
            divergence_threshold: 1e15,
        }
    }
}

impl LimitPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.ratio_window < 2 || self.max_terms < self.ratio_window {
            return Err(PolicyError::Window {
                max_terms: self.max_terms,
                ratio_window: self.ratio_window,
            });
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.rel_tol) || !positive(self.divergence_threshold) {
            return Err(PolicyError::Tolerance {
                rel_tol: self.rel_tol,
                divergence_threshold: self.divergence_threshold,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitKind {
    ConvergesTo { value: f64, error_bound: f64 },
    DivergesToInfinity,
    ConvergesToZero,
    Inconclusive { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitVerdict {
    pub kind: LimitKind,
    pub terms_examined: usize,
}

impl LimitVerdict {
    fn new(kind: LimitKind, terms_examined: usize) -> Self {
        Self {
            kind,
            terms_examined,
        }
    }

    pub fn is_inconclusive(&self) -> bool {
        matches!(self.kind, LimitKind::Inconclusive { .. })
    }
}

impl fmt::Display for LimitVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            LimitKind::ConvergesTo { value, error_bound } => {
                write!(f, "converges to {value} (+/- {error_bound:.3e})")?
            }
            LimitKind::DivergesToInfinity => write!(f, "diverges to infinity")?,
            LimitKind::ConvergesToZero => write!(f, "converges to zero")?,
            LimitKind::Inconclusive { reason } => write!(f, "inconclusive: {reason}")?,
        }
        write!(f, " [{} terms]", self.terms_examined)
    }
}

const LN_TINY: f64 = -690.775_527_898_213_7; // ln(1e-300)
const LN_HUGE: f64 = 690.775_527_898_213_7; // ln(1e300)

/// Classifies `lim t_n`.
///
/// `ConvergesTo` needs the trailing `ratio_window` values of `t_n` to agree to
/// `rel_tol`; `ConvergesToZero` / `DivergesToInfinity` need `ln t_n` past
/// `ln 1e-300` / `ln 1e300` with a full window of same-sign increments.
pub fn classify_t_limit(emb: &ScaleEmbedding, policy: &LimitPolicy) -> LimitVerdict {
    if let Some(TailHint::HarmonicScale) = emb.spec().tail_hint() {
        return LimitVerdict::new(LimitKind::ConvergesToZero, 0);
    }
    let window = policy.ratio_window;
    let start = emb.spec().prefix_len();
    let (mut falling, mut rising) = (0usize, 0usize);
    // Count of trailing increments with |d| < rel_tol.
    let mut flat = 0usize;
    for n in 1..=policy.max_terms {
        let d = emb.ln_t_step(n);
        falling = if d < 0.0 { falling + 1 } else { 0 };
        rising = if d > 0.0 { rising + 1 } else { 0 };
        if d.abs() < policy.rel_tol {
            flat += 1;
        } else {
            flat = 0;
        }
        if n <= start {
            continue;
        }
        let ln_t = emb.ln_t_value(n);
        if ln_t < LN_TINY && falling >= window {
            return LimitVerdict::new(LimitKind::ConvergesToZero, n);
        }
        if ln_t > LN_HUGE && rising >= window {
            return LimitVerdict::new(LimitKind::DivergesToInfinity, n);
        }
        if flat >= window && n >= start + window {
            // Largest |ln t_j - ln t_n| over the window.
            let mut spread = 0.0f64;
            for j in n - window..n {
                spread = spread.max((emb.ln_t_value(j) - ln_t).abs());
            }
            if spread.exp_m1() < policy.rel_tol {
                let value = emb.t_value(n);
                return LimitVerdict::new(
                    LimitKind::ConvergesTo {
                        value,
                        error_bound: value * spread.exp_m1(),
                    },
                    n,
                );
            }
        }
    }
    LimitVerdict::new(
        LimitKind::Inconclusive {
            reason: format!(
                "t_n neither stabilized to relative tolerance {} over a {}-term window \
                 nor left [1e-300, 1e300] monotonically within {} terms",
                policy.rel_tol, window, policy.max_terms
            ),
        },
        policy.max_terms,
    )
}

// Sliding-window maximum over the most recent `window` pushes.
struct WindowMax {
    window: usize,
    pushed: usize,
    queue: VecDeque<(usize, f64)>,
}

impl WindowMax {
    fn new(window: usize) -> Self {
        Self {
            window,
            pushed: 0,
            queue: VecDeque::with_capacity(window + 1),
        }
    }

    fn push(&mut self, v: f64) {
        let idx = self.pushed;
        self.pushed += 1;
        while self.queue.back().is_some_and(|&(_, b)| b <= v) {
            self.queue.pop_back();
        }
        self.queue.push_back((idx, v));
        while self.queue.front().is_some_and(|&(i, _)| i + self.window <= idx) {
            self.queue.pop_front();
        }
    }

    fn full(&self) -> bool {
        self.pushed >= self.window
    }

    fn max(&self) -> f64 {
        self.queue.front().map_or(f64::NAN, |&(_, v)| v)
    }
}

/// Classifies `x_inf = sum_{j >= 0} t_j`.
///
/// Convergence is certified by a geometric tail bound: when every ratio
/// `t_{j+1} / t_j` in the trailing window is at most `rho < 1`, the remainder
/// after `t_N` is at most `t_N * rho / (1 - rho)`. Divergence is certified by the
/// partial sum crossing `divergence_threshold`, by `t_n` staying bounded below
/// over the whole sweep, or by an analytic tail hint.
pub fn sum_t(emb: &ScaleEmbedding, policy: &LimitPolicy) -> LimitVerdict {
    if let Some(TailHint::HarmonicScale) = emb.spec().tail_hint() {
        return LimitVerdict::new(LimitKind::DivergesToInfinity, 0);
    }
    let spec = emb.spec();
    let start = spec.prefix_len();
    let half = policy.max_terms / 2;
    let mut partial = CompensatedSum::default();
    let mut ratios = WindowMax::new(policy.ratio_window);
    let (mut min_early, mut min_late) = (f64::INFINITY, f64::INFINITY);

    for n in 0..policy.max_terms {
        let t = emb.t_value(n);
        partial.add(t);
        let sum = partial.value();
        if sum > policy.divergence_threshold {
            return LimitVerdict::new(LimitKind::DivergesToInfinity, n + 1);
        }
        if n < half {
            min_early = min_early.min(t);
        } else {
            min_late = min_late.min(t);
        }
        if n == 0 {
            continue;
        }
        let (l, r) = spec.rates(n);
        ratios.push(l / r);
        if !ratios.full() || n < start + policy.ratio_window {
            continue;
        }
        let rho = ratios.max();
        if rho < 1.0 {
            let tail = t * rho / (1.0 - rho);
            // Each t_j carries at most ~j ulps of product rounding.
            let rounding = (n as f64 + 2.0) * f64::EPSILON * sum;
            let bound = tail + rounding;
            if bound <= policy.rel_tol * sum {
                return LimitVerdict::new(
                    LimitKind::ConvergesTo {
                        value: sum,
                        error_bound: bound,
                    },
                    n + 1,
                );
            }
        }
    }
    if min_early > 0.0 && min_late >= min_early {
        return LimitVerdict::new(LimitKind::DivergesToInfinity, policy.max_terms);
    }
    LimitVerdict::new(
        LimitKind::Inconclusive {
            reason: format!(
                "no geometric tail certificate (window {}, rel_tol {}), partial sum {} below \
                 divergence threshold {} and t_n not bounded below after {} terms",
                policy.ratio_window,
                policy.rel_tol,
                partial.value(),
                policy.divergence_threshold,
                policy.max_terms
            ),
        },
        policy.max_terms,
    )
}
