//! Birth-death chains studied through their Brownian scale embedding.
//!
//! A chain on `{0, 1, 2, ...}` that steps right from `n` with probability `r_n`
//! and left with probability `l_n` (state 0 absorbing) is placed on the real
//! line at the points `x_n = t_0 + ... + t_{n-1}`, `t_n = prod_{i<=n} l_i / r_i`.
//! Brownian motion watched at its successive hits of distinct grid points is
//! then a copy of the chain, and questions about the chain become questions
//! about exit probabilities and local times of Brownian motion.
//!
//! The crate provides:
//!
//! * [`chain_model`]: transition rules and the lazily cached grid.
//! * [`asymptotics`]: certified verdicts on `lim t_n` and `sum t_n`.
//! * [`analysis`]: extinction probability, `lim E[X_m]`, Green values, the
//!   local-time expansion of `E[X_m]`.
//! * [`oracle`]: exact dynamic programming over the law of `X_m`.
//! * [`montecarlo`]: seeded, worker-count independent simulation.
//! * [`cli`]: the `bdscale` command line.
//!
//! ```
//! use bdscale::{analysis, ChainSpec, LimitPolicy, ScaleEmbedding};
//!
//! let emb = ScaleEmbedding::new(ChainSpec::constant_bias(0.6).unwrap());
//! let p = analysis::extinction_probability(&emb, 2, &LimitPolicy::default()).unwrap();
//! assert!((p.value - 4.0 / 9.0).abs() <= p.error_bound);
//! ```

pub mod analysis;
pub mod asymptotics;
pub mod chain_model;
pub mod cli;
pub mod montecarlo;
pub mod oracle;

pub use asymptotics::{LimitKind, LimitPolicy, LimitVerdict};
pub use chain_model::{ChainError, ChainSpec, Family, ScaleEmbedding};
pub use oracle::{LocalTimeProfile, Oracle, StateDistribution};

/// Formats a real with 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}
