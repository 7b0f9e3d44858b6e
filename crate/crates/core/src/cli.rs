//! Experiment runner behind the `bam` binary.
//!
//! A JSON config names a built-in problem, a preset (or per-block
//! strategies), solver settings and the diagnostics to run. The runner writes
//! a trace CSV and a JSON report. Exit codes: 0 when the run completed and
//! every requested check passed, 2 on a check failure or divergence, 1 on a
//! configuration error. See `docs/config.md` for the schema.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blockvec::BlockVector;
use crate::bregman::{check_generator_convexity, DEFAULT_PROBE_RADIUS};
use crate::diagnostics::{
    check_blockwise_sufficient_decrease, check_monotone_descent, check_residual_bound, check_residual_vanishes,
    check_sufficient_decrease, finite_length_monitor, gradcheck,
    observed_decrease_ratio, prox_bruteforce_check, residual_bound_constant, CheckReport, CheckStatus,
};
use crate::driver::{
    resolve_strategy_preset, run, step_block, validate_strategies, AlphaRule, BlockStrategy, InnerFlag,
    IterateTrace, RunResult, RunStatus, SolverConfig, DEFAULT_AUGMENTED_ALPHA, DEFAULT_LINEARIZED_GAMMA,
};
use crate::error::{BamError, Result};
use crate::problem::{
    build_multiblock_quadratic, build_separable_quadratic, cross_lipschitz, read_matrix_csv, Problem,
    SparseGroupInstance,
};
use crate::prox::GroupPartition;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Header of every trace CSV written by `run`.
pub const TRACE_HEADER: [&str; 8] =
    ["k", "phi", "phi_half", "step_norm_sq", "bregman_paid", "residual", "cum_step", "inner_flag"];

pub const PROBLEMS: [&str; 3] = ["separable_quadratic", "sparse_group", "multiblock_quadratic"];

pub const CHECKS: [&str; 10] = [
    "monotone_descent",
    "sufficient_decrease",
    "blockwise_sufficient_decrease",
    "residual_bound",
    "residual_vanishes",
    "critical_point",
    "finite_length",
    "gradcheck",
    "generator_convexity",
    "prox_bruteforce",
];

const GRADCHECK_STEP: f64 = 1e-6;
const CONVEXITY_PROBES: usize = 100;
const PROX_CASES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub strategies: Option<Vec<StrategySpec>>,
    /// Presets for `compare`.
    #[serde(default)]
    pub presets: Option<Vec<String>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: Vec<String>,
    /// Starting point; zeros when absent.
    #[serde(default)]
    pub x0: Option<StartSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

/// `"zeros"`, `"random"` (uniform on `[-1, 1]`, seeded by the problem seed)
/// or an explicit flattened vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    Named(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: ProblemParams,
    /// Adds a constant offset to one partial-gradient coordinate.
    #[serde(default)]
    pub gradient_fault: Option<GradientFault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemParams {
    pub n1: usize,
    pub n2: usize,
    pub group_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_blocks: usize,
    /// Loads `A` from CSV instead of drawing it.
    pub matrix_csv: Option<PathBuf>,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self { n1: 50, n2: 40, group_size: 5, lambda1: 0.1, lambda2: 0.1, n_blocks: 4, matrix_csv: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientFault {
    pub block: String,
    pub index: usize,
    pub offset: f64,
}

/// Per-block strategy. `linearized` takes `gamma` (`alpha = gamma * L_i`) or a
/// fixed `alpha`; `augmented` takes `alpha` or `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategySpec {
    Exact,
    Linearized {
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default)]
        alpha: Option<f64>,
    },
    Augmented {
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default)]
        alpha: Option<f64>,
    },
}

impl StrategySpec {
    fn to_strategy(&self, block: usize) -> Result<BlockStrategy> {
        let rule = |gamma: Option<f64>, alpha: Option<f64>, default: AlphaRule| match (gamma, alpha) {
            (Some(_), Some(_)) => Err(BamError::Configuration(format!(
                "strategies[{block}]: give either gamma or alpha, not both"
            ))),
            (Some(g), None) => Ok(AlphaRule::Scaled(g)),
            (None, Some(a)) => Ok(AlphaRule::Constant(a)),
            (None, None) => Ok(default),
        };
        Ok(match self {
            Self::Exact => BlockStrategy::Exact,
            Self::Linearized { gamma, alpha } => {
                BlockStrategy::Linearized(rule(*gamma, *alpha, AlphaRule::Scaled(DEFAULT_LINEARIZED_GAMMA))?)
            }
            Self::Augmented { gamma, alpha } => {
                BlockStrategy::Augmented(rule(*gamma, *alpha, AlphaRule::Constant(DEFAULT_AUGMENTED_ALPHA))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub trace: PathBuf,
    pub report: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { trace: "trace.csv".into(), report: "report.json".into() }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonOpts {
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Overrides the problem and solver seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppresses the stdout summary.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Parser)]
#[command(name = "bam", version, about = "Bregman alternating minimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: CommonOpts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy and write its trace and report.
    Run { config: PathBuf },
    /// Run every preset in `presets` from the same start.
    Compare { config: PathBuf },
    /// Oracle checks, then a run with every trace check.
    Check { config: PathBuf },
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run { config } => cmd_run(&config, &cli.opts),
        Command::Compare { config } => cmd_compare(&config, &cli.opts),
        Command::Check { config } => cmd_check(&config, &cli.opts),
    }
}

/// Reads and parses a config; errors carry the file name and serde's
/// line/column and field diagnostic.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| BamError::Configuration(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| BamError::Configuration(format!("{}: {e}", path.display())))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| BamError::Configuration(e.to_string()))?;
    for c in &cfg.checks {
        if !CHECKS.contains(&c.as_str()) {
            return Err(BamError::Configuration(format!(
                "unknown check '{c}' (expected one of {})",
                CHECKS.join(", ")
            )));
        }
    }
    cfg.solver.validate()?;
    Ok(cfg)
}

fn apply_overrides(mut cfg: ExperimentConfig, opts: &CommonOpts) -> ExperimentConfig {
    if let Some(seed) = opts.seed {
        cfg.problem.seed = seed;
        cfg.solver.seed = seed;
    }
    cfg
}

/// Builds the named problem, applying any configured gradient fault.
pub fn build_problem(spec: &ProblemSpec) -> Result<Problem> {
    let p = match spec.name.as_str() {
        "separable_quadratic" => build_separable_quadratic(),
        "sparse_group" => {
            let prm = &spec.params;
            let inst = match &prm.matrix_csv {
                Some(path) => {
                    let a = read_matrix_csv(path)?;
                    let groups = GroupPartition::contiguous(a.nrows(), prm.group_size)?;
                    SparseGroupInstance::from_matrix(a, groups, prm.lambda1, prm.lambda2, spec.seed)?
                }
                None => {
                    let groups = GroupPartition::contiguous(prm.n2, prm.group_size)?;
                    SparseGroupInstance::random(prm.n1, prm.n2, groups, spec.seed, prm.lambda1, prm.lambda2)?
                }
            };
            inst.problem()
        }
        "multiblock_quadratic" => build_multiblock_quadratic(spec.params.n_blocks, spec.seed)?,
        other => {
            return Err(BamError::Configuration(format!(
                "unknown problem '{other}' (expected one of {})",
                PROBLEMS.join(", ")
            )))
        }
    };
    match &spec.gradient_fault {
        None => Ok(p),
        Some(f) => {
            let block = p.layout().iter().position(|(id, _)| *id == f.block).ok_or_else(|| {
                BamError::Configuration(format!("gradient_fault: no block named '{}'", f.block))
            })?;
            p.with_gradient_fault(block, f.index, f.offset)
        }
    }
}

fn starting_point(cfg: &ExperimentConfig, p: &Problem) -> Result<BlockVector> {
    match &cfg.x0 {
        None => Ok(p.zeros()),
        Some(StartSpec::Named(n)) if n == "zeros" => Ok(p.zeros()),
        Some(StartSpec::Named(n)) if n == "random" => p.random_point(cfg.problem.seed, 1.0),
        Some(StartSpec::Named(n)) => {
            Err(BamError::Configuration(format!("x0: expected \"zeros\", \"random\" or an array, got \"{n}\"")))
        }
        Some(StartSpec::Values(flat)) => p
            .zeros()
            .from_flat_like(flat)
            .map_err(|e| BamError::Configuration(format!("x0: {e}"))),
    }
}

/// Strategies from `strategies` if present, else from `preset`.
pub fn resolve_strategies(cfg: &ExperimentConfig, p: &Problem) -> Result<(String, Vec<BlockStrategy>)> {
    match (&cfg.preset, &cfg.strategies) {
        (_, Some(list)) => {
            if cfg.preset.as_deref().is_some_and(|n| n != "custom") {
                return Err(BamError::Configuration(
                    "give either a named preset or 'strategies' (with preset 'custom'), not both".into(),
                ));
            }
            let s = list.iter().enumerate().map(|(i, s)| s.to_strategy(i)).collect::<Result<Vec<_>>>()?;
            Ok(("custom".into(), s))
        }
        (Some(name), None) => Ok((name.clone(), resolve_strategy_preset(name, p.num_blocks())?)),
        (None, None) => Err(BamError::Configuration("config needs 'preset' or 'strategies'".into())),
    }
}

fn describe(s: &BlockStrategy) -> String {
    match s {
        BlockStrategy::Linearized(AlphaRule::Scaled(g)) | BlockStrategy::Augmented(AlphaRule::Scaled(g)) => {
            format!("{}(gamma={g})", s.kind())
        }
        BlockStrategy::Linearized(AlphaRule::Constant(a)) | BlockStrategy::Augmented(AlphaRule::Constant(a)) => {
            format!("{}(alpha={a})", s.kind())
        }
        _ => s.kind().to_string(),
    }
}

fn resolve_output(opts: &CommonOpts, path: &Path) -> PathBuf {
    match &opts.out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| BamError::Configuration(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-block inner-solve flags joined by `|`.
pub fn inner_flag_label(flags: &[InnerFlag]) -> String {
    flags
        .iter()
        .map(|f| match f {
            InnerFlag::ClosedForm => "closed-form".to_string(),
            InnerFlag::Converged { iterations } => format!("converged:{iterations}"),
            InnerFlag::HitCap { iterations } => format!("hit-cap:{iterations}"),
        })
        .collect::<Vec<_>>()
        .join("|")
}

/// Serializes a trace; with `preset` set, a leading `preset` column is added.
pub fn trace_csv<'a>(runs: impl IntoIterator<Item = (Option<&'a str>, &'a IterateTrace)>) -> Result<Vec<u8>> {
    let io = |e: csv::Error| BamError::Evaluation(format!("trace csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header_written = false;
    for (preset, trace) in runs {
        if !header_written {
            let mut header: Vec<&str> = Vec::new();
            if preset.is_some() {
                header.push("preset");
            }
            header.extend(TRACE_HEADER);
            w.write_record(&header).map_err(io)?;
            header_written = true;
        }
        for r in &trace.records {
            let mut row: Vec<String> = Vec::with_capacity(9);
            if let Some(name) = preset {
                row.push(name.to_string());
            }
            row.push(r.k.to_string());
            for v in [r.phi, r.phi_half(), r.step_norm_sq, r.bregman_paid, r.residual, r.cum_step] {
                row.push(fmt_float(v));
            }
            row.push(inner_flag_label(&r.inner));
            w.write_record(&row).map_err(io)?;
        }
    }
    if !header_written {
        w.write_record(TRACE_HEADER).map_err(io)?;
    }
    w.into_inner().map_err(|e| BamError::Evaluation(format!("trace csv: {e}")))
}

/// Trace-level diagnostics for a finished run.
pub fn trace_checks(p: &Problem, res: &RunResult, names: &[String], x0: &BlockVector, seed: u64) -> Result<Vec<CheckReport>> {
    let needs_l_hat = names.iter().any(|n| n == "residual_bound" || n == "residual_vanishes");
    let l_hat = if needs_l_hat {
        residual_bound_constant(p.num_blocks(), cross_lipschitz(p, x0, seed)?, res.max_generator_lipschitz)
    } else {
        0.0
    };
    let mut out = Vec::new();
    for name in names {
        let report = match name.as_str() {
            "monotone_descent" => check_monotone_descent(&res.trace),
            "sufficient_decrease" => check_sufficient_decrease(&res.trace, res.nu_min),
            "blockwise_sufficient_decrease" => check_blockwise_sufficient_decrease(&res.trace),
            "residual_bound" => check_residual_bound(&res.trace, l_hat),
            "residual_vanishes" => {
                if res.status.converged() {
                    check_residual_vanishes(&res.trace, l_hat)
                } else {
                    CheckReport::inconclusive(name, format!("run ended with status {}", res.status.as_str()))
                }
            }
            "critical_point" => {
                if res.status == RunStatus::ResidualConverged || res.status == RunStatus::StepConverged {
                    res.certificate.clone()
                } else {
                    CheckReport::inconclusive(name, format!("run ended with status {}", res.status.as_str()))
                        .with_note(res.certificate.note.clone())
                }
            }
            "finite_length" => finite_length_report(res),
            _ => continue,
        };
        out.push(report);
    }
    Ok(out)
}

fn finite_length_report(res: &RunResult) -> CheckReport {
    let m = finite_length_monitor(&res.trace);
    let note = format!("total length {:e}, tail increment {:e}", m.total, m.tail_increment);
    if m.plateau || m.total == 0.0 {
        let mut r = CheckReport::inconclusive("finite_length", note);
        r.status = CheckStatus::Pass;
        r.pass = true;
        r
    } else if res.status.converged() {
        CheckReport::inconclusive("finite_length", format!("{note}; run stopped before a plateau formed"))
    } else {
        CheckReport::inconclusive("finite_length", format!("{note}; run did not converge"))
    }
}

/// Oracle-level checks at `x0`, run before any sweep.
pub fn oracle_checks(
    p: &Problem,
    strategies: &[BlockStrategy],
    names: &[String],
    x0: &BlockVector,
    solver: &SolverConfig,
) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for name in names {
        match name.as_str() {
            "gradcheck" => out.push(gradcheck(p, x0, GRADCHECK_STEP, solver.seed)),
            "prox_bruteforce" => out.push(prox_bruteforce_check(PROX_CASES, solver.seed)),
            "generator_convexity" => {
                let mut worst = f64::NEG_INFINITY;
                let mut notes = Vec::new();
                let mut violations = Vec::new();
                let mut x = x0.clone();
                for (i, s) in strategies.iter().enumerate() {
                    let step = step_block(p, &x, i, s, 0, solver)?;
                    let r = check_generator_convexity(
                        step.generator.as_ref(),
                        CONVEXITY_PROBES,
                        solver.seed.wrapping_add(i as u64),
                        DEFAULT_PROBE_RADIUS,
                    )?;
                    let excess = r.declared_modulus - r.min_ratio;
                    worst = worst.max(excess);
                    violations.push((i, excess));
                    notes.push(format!(
                        "{}: {} declared nu {:e}, observed {:e}",
                        p.layout()[i].0,
                        r.label,
                        r.declared_modulus,
                        r.min_ratio
                    ));
                    x = x.with_block(i, step.value)?;
                }
                let tol = 1e-8;
                let pass = worst <= tol;
                out.push(CheckReport {
                    name: "generator_convexity".into(),
                    pass,
                    status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
                    worst_violation: worst.max(0.0),
                    worst_iteration: violations
                        .iter()
                        .max_by(|a, b| a.1.total_cmp(&b.1))
                        .map(|v| v.0)
                        .filter(|_| !pass),
                    tolerance: tol,
                    note: notes.join("; "),
                    details: violations.iter().map(|v| tol - v.1).collect(),
                });
            }
            _ => {}
        }
    }
    Ok(out)
}

fn run_summary(preset: &str, strategies: &[BlockStrategy], res: &RunResult, residual_tol: f64) -> Value {
    let sweeps_to_tol = res
        .trace
        .records
        .iter()
        .find(|r| r.residual <= residual_tol)
        .map(|r| r.k + 1);
    json!({
        "preset": preset,
        "strategies": strategies.iter().map(describe).collect::<Vec<_>>(),
        "status": res.status.as_str(),
        "sweeps": res.sweeps,
        "sweeps_to_residual_tol": sweeps_to_tol,
        "final_phi": res.final_phi,
        "final_residual": res.final_residual,
        "total_cum_step": res.trace.last().map_or(0.0, |r| r.cum_step),
        "nu_min": res.nu_min,
        "min_decrease_ratio": observed_decrease_ratio(&res.trace),
        "inner_cap_hits": res.inner_cap_hits,
        "final_x": res.final_x.flatten(),
    })
}

fn outcome(res_ok: bool, checks: &[CheckReport]) -> i32 {
    if res_ok && checks.iter().all(CheckReport::acceptable) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn report_error(e: &BamError) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

fn print_checks(checks: &[CheckReport]) {
    for c in checks {
        let status = serde_json::to_value(c.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        println!("  {:<30} {:<12} worst {:.3e}  {}", c.name, status, c.worst_violation, c.note);
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    problem: Problem,
    x0: BlockVector,
}

fn prepare(path: &Path, opts: &CommonOpts) -> Result<Prepared> {
    let cfg = apply_overrides(load_config(path)?, opts);
    let problem = build_problem(&cfg.problem)?;
    let x0 = starting_point(&cfg, &problem)?;
    Ok(Prepared { cfg, problem, x0 })
}

/// `bam run <config>`.
pub fn cmd_run(path: &Path, opts: &CommonOpts) -> i32 {
    match try_run(path, opts) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn try_run(path: &Path, opts: &CommonOpts) -> Result<i32> {
    let Prepared { cfg, problem, x0 } = prepare(path, opts)?;
    let (preset, strategies) = resolve_strategies(&cfg, &problem)?;
    validate_strategies(&problem, &strategies, &x0)?;

    let mut checks = oracle_checks(&problem, &strategies, &cfg.checks, &x0, &cfg.solver)?;
    let res = run(&problem, &strategies, &cfg.solver, &x0)?;
    checks.extend(trace_checks(&problem, &res, &cfg.checks, &x0, cfg.solver.seed)?);

    let trace_path = resolve_output(opts, &cfg.output.trace);
    let report_path = resolve_output(opts, &cfg.output.report);
    write_file(&trace_path, &trace_csv([(None, &res.trace)])?)?;
    let code = outcome(res.status != RunStatus::Diverged, &checks);
    let report = json!({
        "command": "run",
        "problem": problem.name(),
        "run": run_summary(&preset, &strategies, &res, cfg.solver.residual_tol),
        "certificate": res.certificate,
        "checks": checks,
        "exit_code": code,
    });
    write_json(&report_path, &report)?;

    if !opts.quiet {
        println!(
            "{} on {}: {} after {} sweeps, phi = {:.12e}, residual = {:.3e}",
            preset,
            problem.name(),
            res.status.as_str(),
            res.sweeps,
            res.final_phi,
            res.final_residual
        );
        print_checks(&checks);
        println!("trace: {}\nreport: {}", trace_path.display(), report_path.display());
    }
    Ok(code)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| BamError::Evaluation(e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// `bam compare <config>`.
pub fn cmd_compare(path: &Path, opts: &CommonOpts) -> i32 {
    match try_compare(path, opts) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn try_compare(path: &Path, opts: &CommonOpts) -> Result<i32> {
    let Prepared { cfg, problem, x0 } = prepare(path, opts)?;
    let presets = cfg.presets.clone().unwrap_or_default();
    if presets.len() < 2 {
        return Err(BamError::Configuration(format!(
            "compare needs at least 2 entries in 'presets', got {}",
            presets.len()
        )));
    }
    let mut plans = Vec::with_capacity(presets.len());
    for name in &presets {
        let s = resolve_strategy_preset(name, problem.num_blocks())?;
        validate_strategies(&problem, &s, &x0).map_err(|e| BamError::Configuration(format!("preset '{name}': {e}")))?;
        plans.push((name.clone(), s));
    }

    let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = plans
            .iter()
            .map(|(_, s)| {
                let (problem, solver, x0) = (&problem, &cfg.solver, &x0);
                scope.spawn(move || run(problem, s, solver, x0))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(BamError::Evaluation("run panicked".into()))))
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut summaries = Vec::new();
    let mut all_checks = Vec::new();
    let mut code = EXIT_OK;
    for ((name, s), res) in plans.iter().zip(&results) {
        let checks = trace_checks(&problem, res, &cfg.checks, &x0, cfg.solver.seed)?;
        code = code.max(outcome(res.status != RunStatus::Diverged, &checks));
        let mut summary = run_summary(name, s, res, cfg.solver.residual_tol);
        summary["checks"] = serde_json::to_value(&checks).map_err(|e| BamError::Evaluation(e.to_string()))?;
        summaries.push(summary);
        all_checks.push((name.clone(), checks));
    }
    let phis: Vec<f64> = results.iter().map(|r| r.final_phi).collect();
    let spread = phis.iter().copied().fold(f64::NEG_INFINITY, f64::max) - phis.iter().copied().fold(f64::INFINITY, f64::min);

    let trace_path = resolve_output(opts, &cfg.output.trace);
    let report_path = resolve_output(opts, &cfg.output.report);
    let csv = trace_csv(plans.iter().zip(&results).map(|((n, _), r)| (Some(n.as_str()), &r.trace)))?;
    write_file(&trace_path, &csv)?;
    write_json(
        &report_path,
        &json!({
            "command": "compare",
            "problem": problem.name(),
            "runs": summaries,
            "final_phi_spread": spread,
            "exit_code": code,
        }),
    )?;

    if !opts.quiet {
        println!("{:<10} {:<20} {:>8} {:>12} {:>24} {:>14}", "preset", "status", "sweeps", "to_tol", "final_phi", "cum_step");
        for ((name, _), res) in plans.iter().zip(&results) {
            let to_tol = res
                .trace
                .records
                .iter()
                .find(|r| r.residual <= cfg.solver.residual_tol)
                .map_or("-".to_string(), |r| (r.k + 1).to_string());
            println!(
                "{:<10} {:<20} {:>8} {:>12} {:>24.16e} {:>14.6e}",
                name,
                res.status.as_str(),
                res.sweeps,
                to_tol,
                res.final_phi,
                res.trace.last().map_or(0.0, |r| r.cum_step)
            );
        }
        for (name, checks) in &all_checks {
            if !checks.is_empty() {
                println!("{name}:");
                print_checks(checks);
            }
        }
        println!("final phi spread: {spread:.3e}");
        println!("trace: {}\nreport: {}", trace_path.display(), report_path.display());
    }
    Ok(code)
}

/// `bam check <config>`: gradient check, generator convexity probes,
/// prox brute force, then a run with every trace check.
pub fn cmd_check(path: &Path, opts: &CommonOpts) -> i32 {
    match try_check(path, opts) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn try_check(path: &Path, opts: &CommonOpts) -> Result<i32> {
    let Prepared { cfg, problem, x0 } = prepare(path, opts)?;
    let (preset, strategies) = resolve_strategies(&cfg, &problem)?;
    validate_strategies(&problem, &strategies, &x0)?;
    let all: Vec<String> = if cfg.checks.is_empty() {
        CHECKS.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.checks.clone()
    };

    let mut checks = oracle_checks(&problem, &strategies, &all, &x0, &cfg.solver)?;
    let res = run(&problem, &strategies, &cfg.solver, &x0)?;
    checks.extend(trace_checks(&problem, &res, &all, &x0, cfg.solver.seed)?);
    let code = outcome(res.status != RunStatus::Diverged, &checks);

    let trace_path = resolve_output(opts, &cfg.output.trace);
    let report_path = resolve_output(opts, &cfg.output.report);
    write_file(&trace_path, &trace_csv([(None, &res.trace)])?)?;
    write_json(
        &report_path,
        &json!({
            "command": "check",
            "problem": problem.name(),
            "run": run_summary(&preset, &strategies, &res, cfg.solver.residual_tol),
            "checks": checks,
            "exit_code": code,
        }),
    )?;
    if !opts.quiet {
        println!("check {} with {}: run {}", problem.name(), preset, res.status.as_str());
        print_checks(&checks);
        let _ = std::io::stdout().flush();
    }
    Ok(code)
}
