//! Exact finite-horizon dynamic programming over the law of `X_m`.
//!
//! Every closed form in [`crate::analysis`] is checked against these
//! distributions. Expected local times come from expected visit counts: a
//! skeleton step launched from `x_n` is the only place Brownian local time at
//! `x_n` accrues, and each such step contributes a mean of `G_n`
//! ([`crate::analysis::green_value`]).

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{green_value, ln_green_value};
use crate::chain_model::{ChainError, ChainSpec, ScaleEmbedding};
use crate::format_real;

pub const DEFAULT_STATE_CAP: usize = 1_000_000;

/// Slack allowed by [`check_monotonicity`].
pub const MONOTONICITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("start state must be at least 1")]
    StartState,
    #[error("horizon needs {needed} states but the state cap is {cap}")]
    StateCap { needed: usize, cap: usize },
    #[error("embedding is for {embedding}, oracle asked about {spec}")]
    EmbeddingMismatch { embedding: String, spec: String },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Law of `X_m` over states `0..=k+m`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    step: usize,
    mass: Vec<f64>,
}

impl StateDistribution {
    /// `X_0 = k` almost surely.
    pub fn point(k: usize) -> Self {
        let mut mass = vec![0.0; k + 1];
        mass[k] = 1.0;
        Self { step: 0, mass }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, state: usize) -> f64 {
        self.mass.get(state).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn expectation(&self) -> f64 {
        expectation_of(&self.mass)
    }
}

fn expectation_of(mass: &[f64]) -> f64 {
    mass.iter()
        .enumerate()
        .skip(1)
        .map(|(j, &p)| j as f64 * p)
        .sum()
}

/// One transition of the chain applied to a whole distribution.
pub fn step_distribution(spec: &ChainSpec, dist: &StateDistribution) -> StateDistribution {
    let len = dist.mass.len() + 1;
    let kernel = Kernel::new(spec, len);
    let mut next = vec![0.0; len];
    kernel.apply(&dist.mass, &mut next, dist.mass.len() - 1);
    StateDistribution {
        step: dist.step + 1,
        mass: next,
    }
}

// Per-state step probabilities; state 0 never moves.
struct Kernel {
    left: Vec<f64>,
    right: Vec<f64>,
}

impl Kernel {
    fn new(spec: &ChainSpec, states: usize) -> Self {
        let mut left = vec![0.0; states + 1];
        let mut right = vec![0.0; states + 1];
        for n in 1..=states {
            let (l, r) = spec.rates(n);
            left[n] = l;
            right[n] = r;
        }
        Self { left, right }
    }

    // Writes the successor of `cur` (nonzero only on 0..=hi) into `next` and
    // returns the new highest occupied state. Subnormal masses are flushed to 0.
    fn apply(&self, cur: &[f64], next: &mut [f64], hi: usize) -> usize {
        let top = (hi + 1).min(next.len() - 1);
        let at = |j: usize| cur.get(j).copied().unwrap_or(0.0);
        next[0] = cur[0] + self.left[1] * at(1);
        for j in 1..=top {
            let from_below = if j >= 2 { self.right[j - 1] * cur[j - 1] } else { 0.0 };
            let from_above = if j < hi { self.left[j + 1] * cur[j + 1] } else { 0.0 };
            let v = from_below + from_above;
            next[j] = if v < f64::MIN_POSITIVE { 0.0 } else { v };
        }
        let mut new_hi = top;
        while new_hi > 0 && next[new_hi] == 0.0 {
            new_hi -= 1;
        }
        new_hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub expectation: f64,
    pub extinct_mass: f64,
}

/// Mass bookkeeping over a DP run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassAudit {
    pub max_deviation: f64,
    pub absorbed_nondecreasing: bool,
    /// Whether any mass appeared above `k + i` at step `i`.
    pub support_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeProfile {
    pub spec: ChainSpec,
    pub start: usize,
    pub horizon: usize,
    /// `values[n] = E[L^{x_n}_{T_m}]` for `n = 0..=k+m+1`; index 0 is unused.
    pub values: Vec<f64>,
    /// `ln values[n]`, `-inf` where the state is never visited.
    pub ln_values: Vec<f64>,
    /// `x_n` for the same indices.
    pub grid: Vec<f64>,
}

impl LocalTimeProfile {
    pub fn value(&self, n: usize) -> f64 {
        self.values.get(n).copied().unwrap_or(0.0)
    }

    /// CSV with header `n,x_n,expected_local_time`, one row per `n = 1..=k+m`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "n,x_n,expected_local_time")?;
        for n in 1..=self.start + self.horizon {
            writeln!(
                out,
                "{},{},{}",
                n,
                format_real(self.grid[n]),
                format_real(self.values[n])
            )?;
        }
        Ok(())
    }
}

/// CSV with header `m,expectation,extinct_mass`.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut out: W) -> io::Result<()> {
    writeln!(out, "m,expectation,extinct_mass")?;
    for p in points {
        writeln!(
            out,
            "{},{},{}",
            p.step,
            format_real(p.expectation),
            format_real(p.extinct_mass)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityViolation {
    pub n: usize,
    pub value: f64,
    pub next: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityCheck {
    pub holds: bool,
    pub first_violation: Option<MonotonicityViolation>,
}

/// Checks `values[n] >= values[n+1]` for every `n >= k`, up to
/// [`MONOTONICITY_TOLERANCE`] scaled by the magnitude of `values[n]` when it exceeds 1.
pub fn check_monotonicity(profile: &LocalTimeProfile, k: usize) -> MonotonicityCheck {
    let start = k.max(1);
    for n in start..profile.values.len().saturating_sub(1) {
        let (value, next) = (profile.values[n], profile.values[n + 1]);
        if next - value > MONOTONICITY_TOLERANCE * value.abs().max(1.0) {
            return MonotonicityCheck {
                holds: false,
                first_violation: Some(MonotonicityViolation { n, value, next }),
            };
        }
    }
    MonotonicityCheck {
        holds: true,
        first_violation: None,
    }
}

/// Runs the DP with a bound on the number of tracked states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Oracle {
    pub state_cap: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

impl Oracle {
    pub fn with_state_cap(state_cap: usize) -> Self {
        Self { state_cap }
    }

    // Calls `visit(i, mass_i)` for i = 0..=m; `mass_i` covers the occupied states.
    fn run<F>(&self, spec: &ChainSpec, k: usize, m: usize, mut visit: F) -> Result<(), OracleError>
    where
        F: FnMut(usize, &[f64]),
    {
        if k == 0 {
            return Err(OracleError::StartState);
        }
        let needed = k + m + 1;
        if needed > self.state_cap {
            return Err(OracleError::StateCap {
                needed,
                cap: self.state_cap,
            });
        }
        let kernel = Kernel::new(spec, needed + 1);
        let mut cur = vec![0.0; needed + 1];
        let mut next = vec![0.0; needed + 1];
        cur[k] = 1.0;
        let mut hi = k;
        // Highest index that may hold stale data in `next`.
        let mut next_dirty = 0;
        visit(0, &cur[..=hi]);
        for i in 1..=m {
            let new_hi = kernel.apply(&cur, &mut next, hi);
            let dirty = next_dirty.max((hi + 1).min(needed));
            if dirty > new_hi {
                next[new_hi + 1..=dirty].fill(0.0);
            }
            next_dirty = hi;
            std::mem::swap(&mut cur, &mut next);
            hi = new_hi;
            visit(i, &cur[..=hi]);
        }
        Ok(())
    }

    /// Law of `X_m` started from `k`.
    pub fn distribution(&self, spec: &ChainSpec, k: usize, m: usize) -> Result<StateDistribution, OracleError> {
        let mut last = Vec::new();
        self.run(spec, k, m, |i, mass| {
            if i == m {
                last = mass.to_vec();
            }
        })?;
        last.resize(k + m + 1, 0.0);
        Ok(StateDistribution { step: m, mass: last })
    }

    /// `E[X_i]` for `i = 0..=m`.
    pub fn expectation_curve(&self, spec: &ChainSpec, k: usize, m: usize) -> Result<Vec<f64>, OracleError> {
        let mut out = Vec::with_capacity(m + 1);
        self.run(spec, k, m, |_, mass| out.push(expectation_of(mass)))?;
        Ok(out)
    }

    /// `(i, E[X_i], P(X_i = 0))` for `i = 0..=m`.
    pub fn curve(&self, spec: &ChainSpec, k: usize, m: usize) -> Result<Vec<CurvePoint>, OracleError> {
        let mut out = Vec::with_capacity(m + 1);
        self.run(spec, k, m, |step, mass| {
            out.push(CurvePoint {
                step,
                expectation: expectation_of(mass),
                extinct_mass: mass[0],
            })
        })?;
        Ok(out)
    }

    /// `P(X_m = 0)`, the probability of extinction by step `m`.
    pub fn extinction_by_horizon(&self, spec: &ChainSpec, k: usize, m: usize) -> Result<f64, OracleError> {
        let mut absorbed = 0.0;
        self.run(spec, k, m, |i, mass| {
            if i == m {
                absorbed = mass[0];
            }
        })?;
        Ok(absorbed)
    }

    pub fn audit_mass(&self, spec: &ChainSpec, k: usize, m: usize) -> Result<MassAudit, OracleError> {
        let mut audit = MassAudit {
            max_deviation: 0.0,
            absorbed_nondecreasing: true,
            support_violation: false,
        };
        let mut absorbed = 0.0;
        self.run(spec, k, m, |i, mass| {
            let total: f64 = mass.iter().sum();
            audit.max_deviation = audit.max_deviation.max((total - 1.0).abs());
            if mass[0] < absorbed {
                audit.absorbed_nondecreasing = false;
            }
            absorbed = mass[0];
            if mass.len() > k + i + 1 && mass[k + i + 1..].iter().any(|&p| p != 0.0) {
                audit.support_violation = true;
            }
        })?;
        Ok(audit)
    }

    /// `E[L^{x_n}_{T_m}] = G_n * E[#{i < m : X_i = n}]` for every `n`.
    pub fn local_time_profile(
        &self,
        spec: &ChainSpec,
        emb: &ScaleEmbedding,
        k: usize,
        m: usize,
    ) -> Result<LocalTimeProfile, OracleError> {
        if emb.spec() != spec {
            return Err(OracleError::EmbeddingMismatch {
                embedding: emb.spec().to_string(),
                spec: spec.to_string(),
            });
        }
        let len = k + m + 2;
        let mut visits = vec![0.0; len];
        self.run(spec, k, m, |i, mass| {
            if i < m {
                for (v, &p) in visits.iter_mut().zip(mass) {
                    *v += p;
                }
            }
        })?;
        let mut values = vec![0.0; len];
        let mut ln_values = vec![f64::NEG_INFINITY; len];
        let mut grid = vec![0.0; len];
        for n in 1..len {
            grid[n] = emb.x_value(n);
            if visits[n] > 0.0 {
                values[n] = green_value(emb, n)? * visits[n];
                ln_values[n] = ln_green_value(emb, n)? + visits[n].ln();
            }
        }
        Ok(LocalTimeProfile {
            spec: spec.clone(),
            start: k,
            horizon: m,
            values,
            ln_values,
            grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(p: f64) -> ChainSpec {
        ChainSpec::constant_bias(p).unwrap()
    }

    fn assert_mass(dist: &StateDistribution, expected: &[(usize, f64)]) {
        for (j, &p) in dist.mass().iter().enumerate() {
            let want = expected
                .iter()
                .find(|&&(s, _)| s == j)
                .map_or(0.0, |&(_, v)| v);
            assert!((p - want).abs() < 1e-15, "state {j}: {p} vs {want}");
        }
    }

    #[test]
    fn step_examples() {
        let spec = constant(0.6);
        let one = step_distribution(&spec, &StateDistribution::point(1));
        assert_eq!(one.step(), 1);
        assert_mass(&one, &[(0, 0.4), (2, 0.6)]);
        let two = step_distribution(&spec, &one);
        assert_mass(&two, &[(0, 0.4), (1, 0.24), (3, 0.36)]);

        let absorbed = StateDistribution {
            step: 0,
            mass: vec![1.0],
        };
        let after = step_distribution(&ChainSpec::harmonic(), &absorbed);
        assert_mass(&after, &[(0, 1.0)]);
    }

    #[test]
    fn step_matches_runner() {
        let spec = ChainSpec::harmonic();
        let mut dist = StateDistribution::point(3);
        for _ in 0..40 {
            dist = step_distribution(&spec, &dist);
        }
        let direct = Oracle::default().distribution(&spec, 3, 40).unwrap();
        for j in 0..=43 {
            assert!((dist.get(j) - direct.get(j)).abs() < 1e-15);
        }
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parity_and_support() {
        let dist = Oracle::default().distribution(&constant(0.6), 3, 25).unwrap();
        assert_eq!(dist.mass().len(), 29);
        for j in 1..=28 {
            if (j + 3 + 25) % 2 == 1 {
                assert_eq!(dist.get(j), 0.0, "state {j}");
            }
        }
    }

    #[test]
    fn curve_examples() {
        let oracle = Oracle::default();
        let curve = oracle.expectation_curve(&constant(0.5), 3, 100).unwrap();
        assert_eq!(curve.len(), 101);
        assert!(curve.iter().all(|&e| (e - 3.0).abs() < 1e-12));
        let curve = oracle.expectation_curve(&constant(0.6), 1, 1).unwrap();
        assert!((curve[1] - 1.2).abs() < 1e-15);
        let curve = oracle.expectation_curve(&ChainSpec::harmonic(), 1, 1).unwrap();
        assert!((curve[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extinction_examples() {
        let oracle = Oracle::default();
        assert!((oracle.extinction_by_horizon(&constant(0.6), 1, 1).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(oracle.extinction_by_horizon(&constant(0.6), 2, 1).unwrap(), 0.0);
        assert_eq!(oracle.extinction_by_horizon(&ChainSpec::harmonic(), 2, 1).unwrap(), 0.0);
        let p = oracle.extinction_by_horizon(&constant(0.6), 2, 5000).unwrap();
        assert!((p - 4.0 / 9.0).abs() < 1e-3);
    }

    #[test]
    fn guards() {
        let small = Oracle::with_state_cap(50);
        assert_eq!(
            small.expectation_curve(&constant(0.5), 10, 40),
            Err(OracleError::StateCap { needed: 51, cap: 50 })
        );
        assert!(small.expectation_curve(&constant(0.5), 10, 39).is_ok());
        assert_eq!(
            Oracle::default().extinction_by_horizon(&constant(0.5), 0, 3),
            Err(OracleError::StartState)
        );
        let emb = ScaleEmbedding::new(constant(0.6));
        assert!(matches!(
            Oracle::default().local_time_profile(&constant(0.5), &emb, 1, 3),
            Err(OracleError::EmbeddingMismatch { .. })
        ));
    }

    #[test]
    fn audit_is_clean() {
        for spec in [constant(0.4), constant(0.5), ChainSpec::harmonic()] {
            let audit = Oracle::default().audit_mass(&spec, 3, 300).unwrap();
            assert!(audit.max_deviation < 1e-12);
            assert!(audit.absorbed_nondecreasing && !audit.support_violation);
        }
    }

    #[test]
    fn profile_examples() {
        let spec = constant(0.5);
        let emb = ScaleEmbedding::new(spec.clone());
        let oracle = Oracle::default();
        let zero = oracle.local_time_profile(&spec, &emb, 3, 0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        assert!(check_monotonicity(&zero, 3).holds);

        let one = oracle.local_time_profile(&spec, &emb, 1, 1).unwrap();
        assert_eq!(one.values, vec![0.0, 1.0, 0.0, 0.0]);

        let profile = oracle.local_time_profile(&spec, &emb, 2, 200).unwrap();
        assert!(check_monotonicity(&profile, 2).holds);
        assert!(profile.values[203..].iter().all(|&v| v == 0.0));
        let biased = constant(0.6);
        let emb = ScaleEmbedding::new(biased.clone());
        let profile = oracle.local_time_profile(&biased, &emb, 1, 200).unwrap();
        assert!(check_monotonicity(&profile, 1).holds);
    }

    #[test]
    fn monotonicity_reports_first_violation() {
        let profile = LocalTimeProfile {
            spec: constant(0.5),
            start: 1,
            horizon: 3,
            values: vec![0.0, 3.0, 2.0, 2.5, 0.0, 0.0],
            ln_values: vec![f64::NEG_INFINITY; 6],
            grid: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let check = check_monotonicity(&profile, 1);
        assert!(!check.holds);
        assert_eq!(
            check.first_violation,
            Some(MonotonicityViolation {
                n: 2,
                value: 2.0,
                next: 2.5
            })
        );
        assert!(!check_monotonicity(&profile, 2).holds);
        assert!(check_monotonicity(&profile, 3).holds);
    }

    #[test]
    fn csv_layouts() {
        let spec = constant(0.5);
        let oracle = Oracle::default();
        let mut buf = Vec::new();
        write_curve_csv(&oracle.curve(&spec, 1, 1).unwrap(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "m,expectation,extinct_mass\n\
             0,1.0000000000000000e0,0.0000000000000000e0\n\
             1,1.0000000000000000e0,5.0000000000000000e-1\n"
        );
        let emb = ScaleEmbedding::new(spec.clone());
        let mut buf = Vec::new();
        oracle
            .local_time_profile(&spec, &emb, 1, 1)
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "n,x_n,expected_local_time\n\
             1,1.0000000000000000e0,1.0000000000000000e0\n\
             2,2.0000000000000000e0,0.0000000000000000e0\n"
        );
    }
}
