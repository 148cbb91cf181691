//! Seeded simulation of chain paths and of the Brownian motion behind them.
//!
//! Path `i` of a run with seed `s` always draws from ChaCha8 stream `i` of key
//! `s`, and per-path results are reduced in index order with a fixed pairwise
//! tree. Estimates are therefore bit-identical for any worker count.

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::green_value;
use crate::chain_model::{ChainError, ChainSpec, ScaleEmbedding};
use crate::format_real;

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    pub state_cap: usize,
    pub workers: usize,
}

impl SimConfig {
    pub fn new(seed: u64, paths: usize, horizon: usize) -> Self {
        Self {
            seed,
            paths,
            horizon,
            state_cap: usize::MAX,
            workers: 1,
        }
    }

    fn validate(&self, k: usize) -> Result<(), SimError> {
        if k == 0 {
            return Err(SimError::Config("start state must be at least 1".into()));
        }
        if self.paths == 0 {
            return Err(SimError::Config("need at least one path".into()));
        }
        if self.workers == 0 {
            return Err(SimError::Config("need at least one worker".into()));
        }
        if self.state_cap <= k {
            return Err(SimError::Config(format!(
                "state cap {} must exceed the start state {k}",
                self.state_cap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub paths_used: usize,
    /// Paths stopped by the horizon or the state cap while still alive.
    pub truncated_paths: usize,
}

impl SimEstimate {
    fn from_samples(samples: &[f64], truncated_paths: usize) -> Self {
        let n = samples.len() as f64;
        let mean = pairwise_sum(samples) / n;
        let squares: Vec<f64> = samples.iter().map(|&v| (v - mean) * (v - mean)).collect();
        let variance = if samples.len() > 1 {
            pairwise_sum(&squares) / (n - 1.0)
        } else {
            0.0
        };
        let std_error = (variance / n).sqrt();
        Self {
            mean,
            std_error,
            ci95: (mean - Z95 * std_error, mean + Z95 * std_error),
            paths_used: samples.len(),
            truncated_paths,
        }
    }

    fn proportion(hits: usize, total: usize, truncated_paths: usize) -> Self {
        let n = total as f64;
        let mean = hits as f64 / n;
        let std_error = (mean * (1.0 - mean) / n).sqrt();
        Self {
            mean,
            std_error,
            ci95: (
                (mean - Z95 * std_error).max(0.0),
                (mean + Z95 * std_error).min(1.0),
            ),
            paths_used: total,
            truncated_paths,
        }
    }

    /// `|mean - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.std_error == 0.0 {
            return if self.mean == target { 0.0 } else { f64::INFINITY };
        }
        (self.mean - target).abs() / self.std_error
    }
}

/// Sum in a fixed pairwise order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Random stream for path `index` of a run seeded with `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run_paths<T, F>(paths: usize, workers: usize, work: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    Ok(pool.install(|| (0..paths as u64).into_par_iter().map(&work).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathOutcome {
    Extinct { at_step: usize },
    Alive { state: usize },
    CapHit { state: usize, at_step: usize },
}

impl PathOutcome {
    /// State at the stopping time; 0 after extinction.
    pub fn state(&self) -> usize {
        match *self {
            PathOutcome::Extinct { .. } => 0,
            PathOutcome::Alive { state } | PathOutcome::CapHit { state, .. } => state,
        }
    }
}

/// Runs one chain path from `k`: left with probability `l_n` (uniform draw
/// below `l_n`), right otherwise, until state 0, the horizon or `state_cap`.
pub fn simulate_path<R: Rng + ?Sized>(
    spec: &ChainSpec,
    k: usize,
    rng: &mut R,
    horizon: usize,
    state_cap: usize,
) -> PathOutcome {
    walk(spec, k, rng, horizon, state_cap, |_, _| {})
}

fn walk<R, F>(
    spec: &ChainSpec,
    k: usize,
    rng: &mut R,
    horizon: usize,
    state_cap: usize,
    mut record: F,
) -> PathOutcome
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize),
{
    let mut state = k;
    record(0, state);
    for step in 1..=horizon {
        let (l, _) = spec.rates(state);
        let u: f64 = rng.random();
        state = if u < l { state - 1 } else { state + 1 };
        record(step, state);
        if state == 0 {
            return PathOutcome::Extinct { at_step: step };
        }
        if state >= state_cap {
            return PathOutcome::CapHit {
                state,
                at_step: step,
            };
        }
    }
    PathOutcome::Alive { state }
}

/// Fraction of paths absorbed at 0 within `config.horizon` steps.
pub fn estimate_extinction(
    spec: &ChainSpec,
    k: usize,
    config: &SimConfig,
) -> Result<SimEstimate, SimError> {
    config.validate(k)?;
    let outcomes = run_paths(config.paths, config.workers, |i| {
        let mut rng = path_rng(config.seed, i);
        simulate_path(spec, k, &mut rng, config.horizon, config.state_cap)
    })?;
    let extinct = outcomes
        .iter()
        .filter(|o| matches!(o, PathOutcome::Extinct { .. }))
        .count();
    Ok(SimEstimate::proportion(
        extinct,
        outcomes.len(),
        outcomes.len() - extinct,
    ))
}

/// Sample mean of `X_m`; absorbed paths contribute 0, surviving ones their state.
pub fn estimate_expectation(
    spec: &ChainSpec,
    k: usize,
    m: usize,
    config: &SimConfig,
) -> Result<SimEstimate, SimError> {
    config.validate(k)?;
    let outcomes = run_paths(config.paths, config.workers, |i| {
        let mut rng = path_rng(config.seed, i);
        simulate_path(spec, k, &mut rng, m, config.state_cap)
    })?;
    let capped = outcomes
        .iter()
        .filter(|o| matches!(o, PathOutcome::CapHit { .. }))
        .count();
    let samples: Vec<f64> = outcomes.iter().map(|o| o.state() as f64).collect();
    Ok(SimEstimate::from_samples(&samples, capped))
}

/// States visited by path `index`, starting with `k` at step 0.
pub fn record_path(
    spec: &ChainSpec,
    k: usize,
    seed: u64,
    index: u64,
    horizon: usize,
    state_cap: usize,
) -> Vec<usize> {
    let mut states = Vec::new();
    let mut rng = path_rng(seed, index);
    walk(spec, k, &mut rng, horizon, state_cap, |_, s| states.push(s));
    states
}

/// CSV with header `path,step,state`.
pub fn write_paths_csv<W: Write>(paths: &[Vec<usize>], mut out: W) -> io::Result<()> {
    writeln!(out, "path,step,state")?;
    for (p, states) in paths.iter().enumerate() {
        for (step, state) in states.iter().enumerate() {
            writeln!(out, "{p},{step},{state}")?;
        }
    }
    Ok(())
}

/// CSV with header `step,state,x`: a skeleton path in both chain and grid coordinates.
pub fn write_embedded_path_csv<W: Write>(
    emb: &ScaleEmbedding,
    states: &[usize],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "step,state,x")?;
    for (step, &state) in states.iter().enumerate() {
        writeln!(out, "{step},{state},{}", format_real(emb.x_value(state)))?;
    }
    Ok(())
}

/// Euler discretization of the Brownian excursion from `x_n` out of `(x_{n-1}, x_{n+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmConfig {
    pub dt: f64,
    /// Half-width of the occupation band around `x_n`.
    pub band: f64,
    pub paths: usize,
    pub seed: u64,
    pub workers: usize,
    /// Paths still inside after this many increments are dropped and counted.
    pub max_steps: usize,
}

impl BmConfig {
    /// `dt = 1e-5`, band `2 sqrt(dt)`.
    pub fn new(paths: usize, seed: u64) -> Self {
        let dt = 1e-5;
        Self {
            dt,
            band: 2.0 * dt.sqrt(),
            paths,
            seed,
            workers: 1,
            max_steps: 100_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmLocalTime {
    /// Band occupation time over `2 * band`, per excursion.
    pub local_time: SimEstimate,
    /// Fraction of excursions leaving through `x_{n+1}`.
    pub right_exit: SimEstimate,
    /// Closed-form Green value the local time should approach.
    pub green: f64,
}

/// Estimates the expected local time at `x_n` of one Brownian excursion from
/// `x_n` until it leaves `(x_{n-1}, x_{n+1})`.
pub fn estimate_local_time_bm(
    emb: &ScaleEmbedding,
    n: usize,
    config: &BmConfig,
) -> Result<BmLocalTime, SimError> {
    let green = green_value(emb, n)?;
    if !(config.dt > 0.0 && config.band > 0.0) || config.paths == 0 || config.workers == 0 {
        return Err(SimError::Config(
            "dt, band, paths and workers must be positive".into(),
        ));
    }
    let (lower, centre, upper) = (emb.x_value(n - 1), emb.x_value(n), emb.x_value(n + 1));
    let scale = config.dt.sqrt();
    // (occupation / 2 band, exited right), or None when cut off.
    let runs = run_paths(config.paths, config.workers, |i| {
        let mut rng = path_rng(config.seed, i);
        let mut x = centre;
        let mut occupation = 0.0;
        for _ in 0..config.max_steps {
            if (x - centre).abs() < config.band {
                occupation += config.dt;
            }
            let z: f64 = rng.sample(StandardNormal);
            x += scale * z;
            if x <= lower || x >= upper {
                return Some((occupation / (2.0 * config.band), x >= upper));
            }
        }
        None
    })?;
    let finished: Vec<(f64, bool)> = runs.iter().flatten().copied().collect();
    if finished.is_empty() {
        return Err(SimError::Config(format!(
            "no excursion left the interval within {} steps",
            config.max_steps
        )));
    }
    let cut = runs.len() - finished.len();
    let local: Vec<f64> = finished.iter().map(|&(l, _)| l).collect();
    let rights = finished.iter().filter(|&&(_, right)| right).count();
    Ok(BmLocalTime {
        local_time: SimEstimate::from_samples(&local, cut),
        right_exit: SimEstimate::proportion(rights, finished.len(), cut),
        green,
    })
}
