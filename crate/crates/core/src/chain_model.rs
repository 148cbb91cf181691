//! Birth-death transition rules and their embedding on the real line.
//!
//! A chain moves from state `n >= 1` to `n + 1` with probability `r_n` and to
//! `n - 1` with probability `l_n`; state 0 is absorbing. The scale sequence
//!
//! ```text
//! t_0 = 1,   t_n = t_{n-1} * l_n / r_n,   x_0 = 0,   x_{n+1} = x_n + t_n
//! ```
//!
//! places state `n` at the point `x_n`. A Brownian motion observed only at
//! successive hits of distinct grid points then moves between neighbours with
//! exactly the chain's law, which is what the rest of the crate builds on.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use serde::Deserialize;
use thiserror::Error;

/// Allowed deviation of `l_n + r_n` from 1 for tabulated rules.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// Agreement required between the grid-derived step law and the rule itself.
pub const SKELETON_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("state 0 is absorbing and has no free transition")]
    AbsorbingState,
    #[error("right-step probability p = {0} must lie strictly between 0 and 1")]
    InvalidBias(f64),
    #[error("table row n = {n}: (l, r) = ({l}, {r}) needs 0 < l, r < 1 and l + r = 1")]
    InvalidEntry { n: usize, l: f64, r: f64 },
    #[error("table rows must be numbered 1, 2, 3, ...; row {row} has n = {found}")]
    NonConsecutive { row: usize, found: usize },
    #[error("table has no rows")]
    EmptyTable,
    #[error("cannot parse chain `{text}`: {message}")]
    Parse { text: String, message: String },
    #[error("cannot read table {path}: {message}")]
    Table { path: PathBuf, message: String },
    #[error("grid step law at n = {n} gives r = {grid}, transition rule gives r = {rule}")]
    SkeletonMismatch { n: usize, grid: f64, rule: f64 },
}

/// The concrete rule behind a [`ChainSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `r_n = p`, `l_n = 1 - p` for every `n >= 1`.
    ConstantBias { p: f64 },
    /// `l_n = n / (2n + 1)`, `r_n = (n + 1) / (2n + 1)`, so that `t_n = 1 / (n + 1)`.
    Harmonic,
    /// Explicit `(l_n, r_n)` for `n = 1..=entries.len()`, then `tail` (indexed by the
    /// same global `n`) for every later state.
    Tabular {
        entries: Vec<(f64, f64)>,
        tail: Box<ChainSpec>,
        source: Option<PathBuf>,
    },
}

/// Analytic facts about the tail of `t_n` that finite sampling cannot certify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailHint {
    /// Eventually `t_n = c / (n + 1)` for some `c > 0`: `t_n -> 0` and `sum t_n` diverges.
    HarmonicScale,
}

/// A validated birth-death transition rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    family: Family,
}

impl ChainSpec {
    pub fn constant_bias(p: f64) -> Result<Self, ChainError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(ChainError::InvalidBias(p));
        }
        Ok(Self {
            family: Family::ConstantBias { p },
        })
    }

    pub fn harmonic() -> Self {
        Self {
            family: Family::Harmonic,
        }
    }

    pub fn tabular(entries: Vec<(f64, f64)>, tail: ChainSpec) -> Result<Self, ChainError> {
        Self::tabular_from(entries, tail, None)
    }

    fn tabular_from(
        entries: Vec<(f64, f64)>,
        tail: ChainSpec,
        source: Option<PathBuf>,
    ) -> Result<Self, ChainError> {
        if entries.is_empty() {
            return Err(ChainError::EmptyTable);
        }
        for (i, &(l, r)) in entries.iter().enumerate() {
            let in_range = l > 0.0 && l < 1.0 && r > 0.0 && r < 1.0;
            if !in_range || (l + r - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(ChainError::InvalidEntry { n: i + 1, l, r });
            }
        }
        Ok(Self {
            family: Family::Tabular {
                entries,
                tail: Box::new(tail),
                source,
            },
        })
    }

    /// Reads a `n,l,r` CSV table (1-based, consecutive `n`).
    pub fn from_table_file(path: &Path, tail: ChainSpec) -> Result<Self, ChainError> {
        #[derive(Deserialize)]
        struct Row {
            n: usize,
            l: f64,
            r: f64,
        }
        let table_err = |message: String| ChainError::Table {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| table_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| table_err(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["n", "l", "r"] {
            return Err(table_err(format!(
                "expected header `n,l,r`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (row, record) in reader.deserialize::<Row>().enumerate() {
            let record = record.map_err(|e| table_err(e.to_string()))?;
            if record.n != row + 1 {
                return Err(ChainError::NonConsecutive {
                    row: row + 1,
                    found: record.n,
                });
            }
            entries.push((record.l, record.r));
        }
        Self::tabular_from(entries, tail, Some(path.to_path_buf()))
    }

    /// Parses `constant:p=0.6`, `paper-harmonic` (alias `harmonic`) or
    /// `table:FILE,tail=SPEC`.
    pub fn parse(text: &str) -> Result<Self, ChainError> {
        let text = text.trim();
        let fail = |message: &str| ChainError::Parse {
            text: text.to_string(),
            message: message.to_string(),
        };
        if text == "paper-harmonic" || text == "harmonic" {
            return Ok(Self::harmonic());
        }
        if let Some(rest) = text.strip_prefix("constant:") {
            let value = rest
                .strip_prefix("p=")
                .ok_or_else(|| fail("expected `constant:p=<probability>`"))?;
            let p: f64 = value
                .parse()
                .map_err(|_| fail("right-step probability is not a number"))?;
            return Self::constant_bias(p);
        }
        if let Some(rest) = text.strip_prefix("table:") {
            let (file, tail) = rest
                .split_once(",tail=")
                .ok_or_else(|| fail("a table needs an explicit `,tail=<chain>` clause"))?;
            if file.is_empty() {
                return Err(fail("missing table file"));
            }
            let tail = Self::parse(tail)?;
            return Self::from_table_file(Path::new(file), tail);
        }
        Err(fail(
            "expected `constant:p=<p>`, `paper-harmonic` or `table:FILE,tail=<chain>`",
        ))
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Number of leading states whose rule is given explicitly by a table.
    pub fn prefix_len(&self) -> usize {
        match &self.family {
            Family::Tabular { entries, tail, .. } => entries.len().max(tail.prefix_len()),
            _ => 0,
        }
    }

    pub fn tail_hint(&self) -> Option<TailHint> {
        match &self.family {
            Family::ConstantBias { .. } => None,
            Family::Harmonic => Some(TailHint::HarmonicScale),
            // A finite prefix rescales the tail of t_n by a positive constant.
            Family::Tabular { tail, .. } => tail.tail_hint(),
        }
    }

    /// `(l_n, r_n)` for `n >= 1`.
    pub fn probabilities(&self, n: usize) -> Result<(f64, f64), ChainError> {
        if n == 0 {
            return Err(ChainError::AbsorbingState);
        }
        Ok(self.rates(n))
    }

    // Valid for n >= 1 on a validated spec.
    pub(crate) fn rates(&self, n: usize) -> (f64, f64) {
        debug_assert!(n >= 1);
        match &self.family {
            Family::ConstantBias { p } => (1.0 - p, *p),
            Family::Harmonic => {
                let n = n as f64;
                let d = 2.0 * n + 1.0;
                (n / d, (n + 1.0) / d)
            }
            Family::Tabular { entries, tail, .. } => match entries.get(n - 1) {
                Some(&pair) => pair,
                None => tail.rates(n),
            },
        }
    }
}

impl fmt::Display for ChainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::ConstantBias { p } => write!(f, "constant:p={p}"),
            Family::Harmonic => write!(f, "paper-harmonic"),
            Family::Tabular {
                entries,
                tail,
                source,
            } => match source {
                Some(path) => write!(f, "table:{},tail={tail}", path.display()),
                None => write!(f, "table:<{} rows>,tail={tail}", entries.len()),
            },
        }
    }
}

impl FromStr for ChainSpec {
    type Err = ChainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let s = self.hi + v;
        if !s.is_finite() {
            self.hi = s;
            self.lo = 0.0;
            return;
        }
        if self.hi.abs() >= v.abs() {
            self.lo += (self.hi - s) + v;
        } else {
            self.lo += (v - s) + self.hi;
        }
        self.hi = s;
    }

    pub(crate) fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// One cached grid point.
#[derive(Debug, Clone, Copy)]
pub struct ScaleEntry {
    /// `t_n`; may saturate to 0 or infinity, see `ln_t`.
    pub t: f64,
    /// `ln t_n`, always finite.
    pub ln_t: f64,
    /// `x_n = t_0 + ... + t_{n-1}`.
    pub x: f64,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    t: f64,
    ln_t: CompensatedSum,
    x: CompensatedSum,
}

impl Slot {
    fn entry(&self) -> ScaleEntry {
        ScaleEntry {
            t: self.t,
            ln_t: self.ln_t.value(),
            x: self.x.value(),
        }
    }
}

const FIRST_CHUNK: usize = 1024;
const MAX_CHUNKS: usize = 40;

// Chunk c holds indices [FIRST_CHUNK * (2^c - 1), FIRST_CHUNK * (2^(c+1) - 1)).
fn locate(n: usize) -> (usize, usize) {
    let j = n / FIRST_CHUNK + 1;
    let chunk = (usize::BITS - 1 - j.leading_zeros()) as usize;
    let start = FIRST_CHUNK * ((1usize << chunk) - 1);
    (chunk, n - start)
}

/// The grid `{x_n}` and scale sequence `{t_n}` of a chain, computed lazily.
///
/// Entries live in geometrically growing chunks that are published once and
/// never moved, so reading an already computed prefix takes no lock. Growth is
/// serialized by an internal mutex.
pub struct ScaleEmbedding {
    spec: ChainSpec,
    chunks: [OnceLock<Box<[Slot]>>; MAX_CHUNKS],
    grow: Mutex<()>,
}

impl fmt::Debug for ScaleEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScaleEmbedding")
            .field("spec", &self.spec)
            .field("cached", &self.cached_len())
            .finish()
    }
}

impl ScaleEmbedding {
    pub fn new(spec: ChainSpec) -> Self {
        Self {
            spec,
            chunks: std::array::from_fn(|_| OnceLock::new()),
            grow: Mutex::new(()),
        }
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    /// Number of leading entries already computed.
    pub fn cached_len(&self) -> usize {
        self.chunks
            .iter()
            .take_while(|c| c.get().is_some())
            .map(|c| c.get().map_or(0, |s| s.len()))
            .sum()
    }

    /// Computes every entry up to and including `n`.
    pub fn extend_to(&self, n: usize) {
        let (chunk, _) = locate(n);
        if self.chunks[chunk].get().is_some() {
            return;
        }
        let _guard = self.grow.lock().unwrap_or_else(|e| e.into_inner());
        let mut prev: Option<(usize, Slot)> = None;
        for c in 0..=chunk {
            let len = FIRST_CHUNK << c;
            let start = FIRST_CHUNK * ((1usize << c) - 1);
            if let Some(done) = self.chunks[c].get() {
                prev = Some((start + len - 1, done[len - 1]));
                continue;
            }
            let mut slots = Vec::with_capacity(len);
            let mut cur = match prev {
                Some((idx, slot)) => self.advance(idx, slot),
                None => Slot {
                    t: 1.0,
                    ln_t: CompensatedSum::default(),
                    x: CompensatedSum::default(),
                },
            };
            slots.push(cur);
            for i in 1..len {
                cur = self.advance(start + i - 1, cur);
                slots.push(cur);
            }
            prev = Some((start + len - 1, cur));
            // Only this thread initializes chunks while holding the lock.
            let _ = self.chunks[c].set(slots.into_boxed_slice());
        }
    }

    // Slot n + 1 from slot n.
    fn advance(&self, n: usize, slot: Slot) -> Slot {
        let (l, r) = self.spec.rates(n + 1);
        let mut ln_t = slot.ln_t;
        ln_t.add(l.ln() - r.ln());
        let mut x = slot.x;
        x.add(slot.t);
        Slot {
            t: slot.t * l / r,
            ln_t,
            x,
        }
    }

    fn slot(&self, n: usize) -> Slot {
        let (chunk, offset) = locate(n);
        if let Some(slots) = self.chunks[chunk].get() {
            return slots[offset];
        }
        self.extend_to(n);
        self.chunks[chunk].get().expect("chunk initialized")[offset]
    }

    pub fn entry(&self, n: usize) -> ScaleEntry {
        self.slot(n).entry()
    }

    /// `t_n`.
    pub fn t_value(&self, n: usize) -> f64 {
        self.slot(n).t
    }

    /// `ln t_n`.
    pub fn ln_t_value(&self, n: usize) -> f64 {
        self.slot(n).ln_t.value()
    }

    // ln t_n - ln t_{n-1}, keeping the low-order parts of both sums.
    pub(crate) fn ln_t_step(&self, n: usize) -> f64 {
        let a = self.slot(n - 1).ln_t;
        let b = self.slot(n).ln_t;
        (b.hi - a.hi) + (b.lo - a.lo)
    }

    /// `x_n`.
    pub fn x_value(&self, n: usize) -> f64 {
        self.slot(n).x.value()
    }

    /// Slope of the piecewise-linear inverse of the grid on `(x_{n-1}, x_n)`: `1 / t_{n-1}`.
    pub fn phi_slope(&self, n: usize) -> Result<f64, ChainError> {
        if n == 0 {
            return Err(ChainError::AbsorbingState);
        }
        Ok(1.0 / self.t_value(n - 1))
    }

    /// `ln` of [`Self::phi_slope`]; finite even when the slope itself is not.
    pub fn ln_phi_slope(&self, n: usize) -> Result<f64, ChainError> {
        if n == 0 {
            return Err(ChainError::AbsorbingState);
        }
        Ok(-self.ln_t_value(n - 1))
    }

    /// Law of the next grid point hit by a Brownian motion started at `x_n`,
    /// derived from the grid spacing and checked against the rule's `(l_n, r_n)`.
    pub fn skeleton_step_distribution(&self, n: usize) -> Result<SkeletonStep, ChainError> {
        let (l, r) = self.spec.probabilities(n)?;
        let below = self.entry(n - 1);
        let here = self.entry(n);
        let above = self.entry(n + 1);
        let ratio = here.t / below.t;
        let (up, down) = if below.t.is_normal() && here.t.is_normal() && ratio.is_normal() {
            // The sum t_{n-1} + t_n can overflow near the top of the range.
            (1.0 / (1.0 + ratio), ratio / (1.0 + ratio))
        } else {
            // Work with the spacing ratio t_n / t_{n-1} in log form.
            let d = self.ln_t_step(n);
            let up = 1.0 / (1.0 + d.exp());
            let down = 1.0 / (1.0 + (-d).exp());
            (up, down)
        };
        if (up - r).abs() > SKELETON_TOLERANCE || (down - l).abs() > SKELETON_TOLERANCE {
            return Err(ChainError::SkeletonMismatch {
                n,
                grid: up,
                rule: r,
            });
        }
        Ok(SkeletonStep {
            from: here.x,
            up_point: above.x,
            up,
            down_point: below.x,
            down,
        })
    }
}

/// Exit law of Brownian motion from `(x_{n-1}, x_{n+1})` started at `x_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkeletonStep {
    pub from: f64,
    pub up_point: f64,
    pub up: f64,
    pub down_point: f64,
    pub down: f64,
}
