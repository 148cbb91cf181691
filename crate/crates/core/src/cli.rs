//! The `bdscale` command line.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 a limit could not be
//! certified, 3 a verification check failed.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    extinction_probability, limit_expectation, tanaka_expectation, AnalysisError,
    ExtinctionResult, LimitExpectation,
};
use crate::asymptotics::{classify_t_limit, sum_t, LimitPolicy, LimitVerdict};
use crate::chain_model::{ChainSpec, ScaleEmbedding};
use crate::montecarlo::{
    estimate_expectation, estimate_extinction, record_path, write_embedded_path_csv,
    write_paths_csv, SimConfig, SimEstimate,
};
use crate::oracle::{check_monotonicity, write_curve_csv, Oracle, DEFAULT_STATE_CAP};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INCONCLUSIVE: u8 = 2;
pub const EXIT_VERIFY_FAILED: u8 = 3;

/// Absolute agreement demanded between the local-time expansion and the DP mean,
/// scaled up by `|E[X_m]|` when that exceeds 1.
pub const TANAKA_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(
    name = "bdscale",
    version,
    about = "Birth-death chains on the Brownian scale grid"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    /// `constant:p=<p>`, `paper-harmonic` or `table:FILE,tail=<chain>`
    #[arg(long)]
    pub chain: String,
    /// Start state
    #[arg(long)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, default_value_t = LimitPolicy::default().max_terms)]
    pub max_terms: usize,
    #[arg(long, default_value_t = LimitPolicy::default().rel_tol)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = LimitPolicy::default().ratio_window)]
    pub ratio_window: usize,
}

impl PolicyArgs {
    fn policy(&self) -> LimitPolicy {
        LimitPolicy {
            max_terms: self.max_terms,
            rel_tol: self.rel_tol,
            ratio_window: self.ratio_window,
            ..LimitPolicy::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the main output here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extinction probability and long-run mean from the scale series
    Analyze {
        #[command(flatten)]
        chain: ChainArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Exact E[X_i] and P(X_i = 0) for i = 0..=m as CSV
    Curve {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Exact expected local times E[L^{x_n}_{T_m}] as CSV
    Profile {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Monte Carlo estimates of extinction and of E[X_m]
    Simulate {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 10_000)]
        horizon: usize,
        /// Also estimate E[X_m]
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Write the first paths as `path,step,state` CSV
        #[arg(long)]
        dump_paths: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        dump_count: usize,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Cross-check closed forms against the exact DP
    Verify {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// One skeleton path with chain and grid coordinates as CSV
    Embed {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExtinctionOutcome {
    Certified(ExtinctionResult),
    Uncertified { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub chain: String,
    pub k: usize,
    pub policy: LimitPolicy,
    pub t_limit: LimitVerdict,
    pub x_sum: LimitVerdict,
    pub extinction: ExtinctionOutcome,
    pub limit_expectation: LimitExpectation,
    pub warnings: Vec<String>,
}

impl AnalyzeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationRecord {
    pub m: usize,
    pub estimate: SimEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub chain: String,
    pub k: usize,
    pub config: SimConfig,
    pub extinction: SimEstimate,
    pub expectation: Option<ExpectationRecord>,
}

/// Outcome of one `verify` check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

// Error that ends a command with a given exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::usage(format!("i/o error: {e}"))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(failure) => {
            let _ = writeln!(stderr, "error: {}", failure.message);
            failure.code
        }
    }
}

fn parse_chain(args: &ChainArgs) -> Result<ChainSpec, Failure> {
    if args.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    ChainSpec::parse(&args.chain).map_err(Failure::usage)
}

fn with_output<F>(output: &OutputArgs, stdout: &mut dyn Write, body: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match &output.out {
        Some(path) => {
            let file = File::create(path)
                .map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))?;
            let mut writer = BufWriter::new(file);
            body(&mut writer)?;
            writer.flush()?;
        }
        None => body(stdout)?,
    }
    Ok(())
}

fn execute(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<u8, Failure> {
    match command {
        Command::Analyze {
            chain,
            policy,
            json,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let policy = policy.policy();
            policy.validate().map_err(Failure::usage)?;
            let report = analyze(&spec, &chain.chain, chain.k, &policy);
            for w in &report.warnings {
                writeln!(stderr, "warning: {w}")?;
            }
            with_output(&output, stdout, |out| {
                if json {
                    writeln!(out, "{}", report.to_json())
                } else {
                    write_analyze_text(&report, out)
                }
            })?;
            Ok(if report.warnings.is_empty() {
                EXIT_OK
            } else {
                EXIT_INCONCLUSIVE
            })
        }
        Command::Curve {
            chain,
            m,
            state_cap,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let points = Oracle::with_state_cap(state_cap)
                .curve(&spec, chain.k, m)
                .map_err(Failure::usage)?;
            with_output(&output, stdout, |out| write_curve_csv(&points, out))?;
            Ok(EXIT_OK)
        }
        Command::Profile {
            chain,
            m,
            state_cap,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let emb = ScaleEmbedding::new(spec.clone());
            let profile = Oracle::with_state_cap(state_cap)
                .local_time_profile(&spec, &emb, chain.k, m)
                .map_err(Failure::usage)?;
            with_output(&output, stdout, |out| profile.write_csv(out))?;
            Ok(EXIT_OK)
        }
        Command::Simulate {
            chain,
            seed,
            paths,
            horizon,
            m,
            state_cap,
            workers,
            dump_paths,
            dump_count,
            json,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let config = SimConfig {
                seed,
                paths,
                horizon,
                state_cap,
                workers,
            };
            let extinction = estimate_extinction(&spec, chain.k, &config).map_err(Failure::usage)?;
            let expectation = match m {
                Some(m) => Some(ExpectationRecord {
                    m,
                    estimate: estimate_expectation(&spec, chain.k, m, &config)
                        .map_err(Failure::usage)?,
                }),
                None => None,
            };
            if let Some(path) = dump_paths {
                let recorded: Vec<Vec<usize>> = (0..dump_count.min(paths) as u64)
                    .map(|i| record_path(&spec, chain.k, seed, i, horizon, state_cap))
                    .collect();
                let file = File::create(&path)
                    .map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))?;
                let mut writer = BufWriter::new(file);
                write_paths_csv(&recorded, &mut writer)?;
                writer.flush()?;
            }
            let report = SimulateReport {
                chain: chain.chain.clone(),
                k: chain.k,
                config,
                extinction,
                expectation,
            };
            with_output(&output, stdout, |out| {
                if json {
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string_pretty(&report).expect("report serializes")
                    )
                } else {
                    write_simulate_text(&report, out)
                }
            })?;
            Ok(EXIT_OK)
        }
        Command::Verify {
            chain,
            m,
            state_cap,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let checks = verify(&spec, chain.k, m, &Oracle::with_state_cap(state_cap))
                .map_err(Failure::usage)?;
            let all_passed = checks.iter().all(|c| c.passed);
            with_output(&output, stdout, |out| {
                for c in &checks {
                    let tag = if c.passed { "PASS" } else { "FAIL" };
                    writeln!(out, "{tag} {}: {}", c.name, c.detail)?;
                }
                Ok(())
            })?;
            Ok(if all_passed {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            })
        }
        Command::Embed {
            chain,
            steps,
            seed,
            output,
        } => {
            let spec = parse_chain(&chain)?;
            let emb = ScaleEmbedding::new(spec.clone());
            let states = record_path(&spec, chain.k, seed, 0, steps, usize::MAX);
            with_output(&output, stdout, |out| {
                write_embedded_path_csv(&emb, &states, out)
            })?;
            Ok(EXIT_OK)
        }
    }
}

/// Builds the `analyze` report; warnings are non-empty iff something was uncertified.
pub fn analyze(spec: &ChainSpec, chain_text: &str, k: usize, policy: &LimitPolicy) -> AnalyzeReport {
    let emb = ScaleEmbedding::new(spec.clone());
    let t_limit = classify_t_limit(&emb, policy);
    let x_sum = sum_t(&emb, policy);
    let mut warnings = Vec::new();
    let extinction = match extinction_probability(&emb, k, policy) {
        Ok(res) => ExtinctionOutcome::Certified(res),
        Err(AnalysisError::CannotCertify { full, .. }) => {
            let reason = full.to_string();
            warnings.push(format!("extinction probability not certified: {reason}"));
            ExtinctionOutcome::Uncertified { reason }
        }
        Err(other) => {
            let reason = other.to_string();
            warnings.push(format!("extinction probability not certified: {reason}"));
            ExtinctionOutcome::Uncertified { reason }
        }
    };
    let limit = match limit_expectation(&emb, k, policy) {
        Ok(limit) => limit,
        Err(e) => LimitExpectation::NoLimit {
            reason: e.to_string(),
        },
    };
    if let LimitExpectation::NoLimit { reason } = &limit {
        warnings.push(format!("limit of E[X_m] not certified: {reason}"));
    }
    AnalyzeReport {
        chain: chain_text.to_string(),
        k,
        policy: *policy,
        t_limit,
        x_sum,
        extinction,
        limit_expectation: limit,
        warnings,
    }
}

fn write_analyze_text(report: &AnalyzeReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "chain: {} (start k = {})", report.chain, report.k)?;
    writeln!(out, "lim t_n: {}", report.t_limit)?;
    writeln!(out, "sum t_n: {}", report.x_sum)?;
    match &report.extinction {
        ExtinctionOutcome::Certified(res) if res.exact_one => {
            writeln!(out, "extinction probability: 1 (exact, scale series diverges)")?
        }
        ExtinctionOutcome::Certified(res) => writeln!(
            out,
            "extinction probability: {} (+/- {:.3e})",
            res.value, res.error_bound
        )?,
        ExtinctionOutcome::Uncertified { reason } => {
            writeln!(out, "extinction probability: not certified ({reason})")?
        }
    }
    match &report.limit_expectation {
        LimitExpectation::Finite { value, error_bound } => writeln!(
            out,
            "limit of E[X_m]: {value} (+/- {error_bound:.3e})"
        )?,
        LimitExpectation::Infinite => writeln!(out, "limit of E[X_m]: infinite")?,
        LimitExpectation::NoLimit { reason } => {
            writeln!(out, "limit of E[X_m]: no certified limit ({reason})")?
        }
    }
    Ok(())
}

fn write_estimate(out: &mut dyn Write, label: &str, est: &SimEstimate) -> io::Result<()> {
    writeln!(
        out,
        "{label}: {} (se {:.3e}, 95% CI [{}, {}], {} paths, {} truncated)",
        est.mean, est.std_error, est.ci95.0, est.ci95.1, est.paths_used, est.truncated_paths
    )
}

fn write_simulate_text(report: &SimulateReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(
        out,
        "chain: {} (start k = {}, seed {}, horizon {})",
        report.chain, report.k, report.config.seed, report.config.horizon
    )?;
    write_estimate(out, "extinct by horizon", &report.extinction)?;
    if let Some(rec) = &report.expectation {
        write_estimate(out, &format!("E[X_{}]", rec.m), &rec.estimate)?;
    }
    Ok(())
}

/// Runs the identity suite for one chain, start and horizon.
pub fn verify(
    spec: &ChainSpec,
    k: usize,
    m: usize,
    oracle: &Oracle,
) -> Result<Vec<CheckResult>, Box<dyn std::error::Error>> {
    let emb = ScaleEmbedding::new(spec.clone());
    let mut checks = Vec::new();

    let last = k + m;
    let skeleton_failure = (1..=last).find_map(|n| emb.skeleton_step_distribution(n).err());
    checks.push(CheckResult {
        name: "skeleton identity",
        passed: skeleton_failure.is_none(),
        detail: match skeleton_failure {
            None => format!("grid exit law equals (l_n, r_n) for n = 1..={last}"),
            Some(e) => e.to_string(),
        },
    });

    let audit = oracle.audit_mass(spec, k, m)?;
    let mass_ok =
        audit.max_deviation <= 1e-12 && audit.absorbed_nondecreasing && !audit.support_violation;
    checks.push(CheckResult {
        name: "mass conservation",
        passed: mass_ok,
        detail: format!(
            "max |total - 1| = {:.3e}, absorbed mass nondecreasing = {}, support within k + i = {}",
            audit.max_deviation, audit.absorbed_nondecreasing, !audit.support_violation
        ),
    });

    let curve = oracle.expectation_curve(spec, k, m)?;
    let profile = oracle.local_time_profile(spec, &emb, k, m)?;
    let via_local_time = tanaka_expectation(&emb, k, &profile)?;
    let dp = curve[m];
    let gap = (via_local_time - dp).abs();
    checks.push(CheckResult {
        name: "local-time expansion",
        passed: gap <= TANAKA_TOLERANCE * dp.abs().max(1.0),
        detail: format!("E[X_{m}] = {dp} (DP) vs {via_local_time} (local times), gap {gap:.3e}"),
    });

    let mono = check_monotonicity(&profile, k);
    checks.push(CheckResult {
        name: "local-time monotonicity",
        passed: mono.holds,
        detail: match mono.first_violation {
            None => format!("E[L^(x_n)] nonincreasing for n >= {k}"),
            Some(v) => format!(
                "E[L^(x_{})] = {} < E[L^(x_{})] = {}",
                v.n,
                v.value,
                v.n + 1,
                v.next
            ),
        },
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (u8, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut argv = vec!["bdscale"];
        argv.extend_from_slice(args);
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_capture(&["analyze"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(
            run_capture(&["analyze", "--chain", "constant:p=2", "--k", "1"]).0,
            EXIT_USAGE
        );
        assert_eq!(
            run_capture(&["curve", "--chain", "paper-harmonic", "--k", "0", "--m", "3"]).0,
            EXIT_USAGE
        );
        // Randomized commands refuse to run without a seed.
        assert_eq!(
            run_capture(&["embed", "--chain", "paper-harmonic", "--k", "1", "--steps", "3"]).0,
            EXIT_USAGE
        );
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("analyze"));
    }

    #[test]
    fn analyze_inconclusive_exits_two() {
        let (code, out, err) = run_capture(&[
            "analyze",
            "--chain",
            "constant:p=0.5000001",
            "--k",
            "1",
            "--max-terms",
            "5000",
        ]);
        assert_eq!(code, EXIT_INCONCLUSIVE);
        assert!(err.contains("warning: extinction probability not certified"));
        assert!(out.contains("not certified"));
    }

    #[test]
    fn verify_reports_every_check() {
        let checks = verify(&ChainSpec::harmonic(), 2, 50, &Oracle::default()).unwrap();
        let names: Vec<_> = checks.iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "skeleton identity",
                "mass conservation",
                "local-time expansion",
                "local-time monotonicity"
            ]
        );
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
