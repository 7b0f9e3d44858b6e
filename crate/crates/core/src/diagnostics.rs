//! Runtime checks for the descent and convergence guarantees of the
//! alternating scheme, plus oracle validation (gradient checks, prox
//! brute force).
//!
//! Every check is a pure function of its inputs and returns a
//! [`CheckReport`]; violations are reported, never raised.

use rand::Rng;
use serde::Serialize;

use crate::blockvec::BlockVector;
use crate::bregman::BregmanGenerator;
use crate::driver::IterateTrace;
use crate::error::{BamError, Result};
use crate::problem::Problem;
use crate::prox::{group_soft_threshold, soft_threshold, GroupPartition};
use crate::rng;

/// Absolute slack for sufficient-decrease and residual-bound checks.
pub const CHECK_SLACK: f64 = 1e-10;
/// Relative slack `1e-10 * (1 + |Phi(x^0)|)` for the descent chain.
pub const DESCENT_REL_SLACK: f64 = 1e-10;
/// Default per-coordinate relative error accepted by [`gradcheck`].
pub const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_PROBES: usize = 10;
const MIN_TREND_RECORDS: usize = 20;
const RATIO_MIN_STEP_SQ: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub status: CheckStatus,
    pub worst_violation: f64,
    pub worst_iteration: Option<usize>,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
    /// Per-item margins (positive means satisfied).
    #[serde(skip)]
    pub details: Vec<f64>,
}

impl CheckReport {
    fn evaluated(name: &str, tolerance: f64, violations: &[(usize, f64)]) -> Self {
        let (worst_iteration, worst) = violations
            .iter()
            .copied()
            .fold((None, f64::NEG_INFINITY), |(wi, w), (i, v)| if v > w || v.is_nan() { (Some(i), v) } else { (wi, w) });
        let worst_violation = if worst.is_nan() { f64::NAN } else { worst.max(0.0) };
        let pass = worst_violation <= tolerance;
        Self {
            name: name.into(),
            pass,
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            worst_violation,
            worst_iteration: if violations.is_empty() { None } else { worst_iteration },
            tolerance,
            note: String::new(),
            details: violations.iter().map(|&(_, v)| tolerance - v).collect(),
        }
    }

    fn not_run(name: &str, status: CheckStatus, note: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: false,
            status,
            worst_violation: 0.0,
            worst_iteration: None,
            tolerance: 0.0,
            note: note.into(),
            details: Vec::new(),
        }
    }

    pub fn skipped(name: &str, reason: impl Into<String>) -> Self {
        Self::not_run(name, CheckStatus::Skipped, reason)
    }

    pub fn inconclusive(name: &str, reason: impl Into<String>) -> Self {
        Self::not_run(name, CheckStatus::Inconclusive, reason)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// True unless the check ran and failed.
    pub fn acceptable(&self) -> bool {
        self.status != CheckStatus::Fail
    }
}

/// Descent chain `Phi(x^{k+1}) <= .. <= Phi(after block 1) <= Phi(x^k)` per
/// recorded sweep, and across consecutive records.
pub fn check_monotone_descent(trace: &IterateTrace) -> CheckReport {
    let Some(phi0) = trace.phi0() else {
        return CheckReport::inconclusive("monotone_descent", "empty trace");
    };
    let slack = DESCENT_REL_SLACK * (1.0 + phi0.abs());
    let mut violations = Vec::with_capacity(trace.len());
    let mut prev_end: Option<f64> = None;
    for r in &trace.records {
        let mut worst = f64::NEG_INFINITY;
        if let Some(e) = prev_end {
            worst = worst.max(r.phi - e);
        }
        let mut before = r.phi;
        for &after in &r.block_phi {
            worst = worst.max(after - before);
            if after.is_nan() {
                worst = f64::NAN;
            }
            before = after;
        }
        violations.push((r.k, worst));
        prev_end = Some(r.phi_next());
    }
    CheckReport::evaluated("monotone_descent", slack, &violations)
}

/// `Phi(x^k) - Phi(x^{k+1}) >= (nu_min/2) |x^{k+1} - x^k|^2 - 1e-10` per sweep.
///
/// Also reports the smallest observed ratio `(Phi(x^k) - Phi(x^{k+1})) / |dx|^2`
/// and whether it supports the stronger constant `nu_min`.
pub fn check_sufficient_decrease(trace: &IterateTrace, nu_min: f64) -> CheckReport {
    const NAME: &str = "sufficient_decrease";
    if !(nu_min > 0.0) {
        return CheckReport::skipped(NAME, format!("nu_min = {nu_min}: no strongly convex generator on every block"));
    }
    if trace.is_empty() {
        return CheckReport::inconclusive(NAME, "empty trace");
    }
    let rho = 0.5 * nu_min;
    let violations: Vec<(usize, f64)> = trace
        .records
        .iter()
        .map(|r| (r.k, rho * r.step_norm_sq - (r.phi - r.phi_next())))
        .collect();
    let ratio = observed_decrease_ratio(trace);
    let supports = match ratio {
        Some(q) if q >= nu_min => "nu",
        Some(q) if q >= rho => "nu/2",
        Some(_) => "neither",
        None => "n/a",
    };
    CheckReport::evaluated(NAME, CHECK_SLACK, &violations).with_note(format!(
        "rho = nu_min/2 = {rho:e}; min observed decrease ratio = {}; data supports {supports}",
        ratio.map_or("n/a".to_string(), |q| format!("{q:e}"))
    ))
}

/// Smallest `(Phi(x^k) - Phi(x^{k+1})) / |x^{k+1} - x^k|^2` over records whose
/// squared step exceeds `1e-8 * (1 + |Phi(x^k)|)`; below that the decrease is
/// lost in rounding.
pub fn observed_decrease_ratio(trace: &IterateTrace) -> Option<f64> {
    trace
        .records
        .iter()
        .filter(|r| r.step_norm_sq > RATIO_MIN_STEP_SQ * (1.0 + r.phi.abs()))
        .map(|r| (r.phi - r.phi_next()) / r.step_norm_sq)
        .reduce(f64::min)
}

/// Per-block sufficient decrease using each block's recorded generator
/// modulus; blocks with `nu = 0` are not checked.
pub fn check_blockwise_sufficient_decrease(trace: &IterateTrace) -> CheckReport {
    const NAME: &str = "blockwise_sufficient_decrease";
    let mut violations = Vec::new();
    for r in &trace.records {
        let mut before = r.phi;
        for (i, &after) in r.block_phi.iter().enumerate() {
            let nu = r.block_nu[i];
            if nu > 0.0 {
                violations.push((r.k, 0.5 * nu * r.block_step_norm_sq[i] - (before - after)));
            }
            before = after;
        }
    }
    if violations.is_empty() {
        return CheckReport::skipped(NAME, "no block uses a strongly convex generator");
    }
    CheckReport::evaluated(NAME, CHECK_SLACK, &violations)
}

/// The explicit subgradient `v^{k+1}` of `Phi` at `x_next`:
///
/// `v_i = grad_i H(x^{k+1}) - grad_i H(m_i) + grad phi_i(x_i^k) - grad phi_i(x_i^{k+1})`
///
/// where `m_i` is the point block `i`'s subproblem saw, with block `i` at its
/// new value (earlier blocks new, later blocks old).
pub fn subgradient_residual(
    p: &Problem,
    x_prev: &BlockVector,
    x_next: &BlockVector,
    generators: &[&dyn BregmanGenerator],
) -> Result<(BlockVector, f64)> {
    p.check_structure(x_prev)?;
    p.check_structure(x_next)?;
    let n = p.num_blocks();
    if generators.len() != n {
        return Err(BamError::Configuration(format!("{} generators for {n} blocks", generators.len())));
    }
    let mut blocks = Vec::with_capacity(n);
    // m_i before the block-i update: blocks < i new, blocks >= i old
    let mut seen = x_prev.clone();
    for (i, gen) in generators.iter().enumerate() {
        if let Some((frozen, fb)) = gen.frozen() {
            let consistent = fb == i
                && frozen.same_structure(&seen)
                && (0..n).filter(|&j| j != i).all(|j| frozen.block(j) == seen.block(j));
            if !consistent {
                return Err(BamError::Configuration(format!(
                    "generator '{}' for block {i} was not built at the point its subproblem saw",
                    gen.label()
                )));
            }
        }
        let mixed = seen.with_block(i, x_next.block(i).to_vec())?;
        let g_full = p.coupling().partial_grad(x_next, i);
        let g_mixed = p.coupling().partial_grad(&mixed, i);
        let gp_prev = gen.gradient(x_prev.block(i));
        let gp_next = gen.gradient(x_next.block(i));
        let vi: Vec<f64> = (0..g_full.len())
            .map(|j| g_full[j] - g_mixed[j] + gp_prev[j] - gp_next[j])
            .collect();
        blocks.push((p.layout()[i].0.clone(), vi));
        seen = mixed;
    }
    let v = BlockVector::new(blocks).map_err(|e| BamError::Evaluation(format!("subgradient: {e}")))?;
    let norm = crate::blockvec::norm_sq(&v).sqrt();
    Ok((v, norm))
}

/// `|v^{k+1}| <= l_hat * |x^{k+1} - x^k| + 1e-10` per recorded sweep.
pub fn check_residual_bound(trace: &IterateTrace, l_hat: f64) -> CheckReport {
    if trace.is_empty() {
        return CheckReport::inconclusive("residual_bound", "empty trace");
    }
    let violations: Vec<(usize, f64)> =
        trace.records.iter().map(|r| (r.k, r.residual - l_hat * r.step_norm())).collect();
    CheckReport::evaluated("residual_bound", CHECK_SLACK, &violations)
        .with_note(format!("L_hat = {l_hat:e}"))
}

/// `sqrt(n_blocks) * (l_cross + max generator Lipschitz)`; with two blocks
/// this is `sqrt(2) * (L_cross + max(L_phi, L_psi))`.
pub fn residual_bound_constant(n_blocks: usize, l_cross: f64, max_generator_lipschitz: f64) -> f64 {
    (n_blocks as f64).sqrt() * (l_cross + max_generator_lipschitz)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trend surrogate for `dist(0, dPhi(x^k)) -> 0`:
///
/// - over the last 10% of records, median residual `<= 10 * l_hat *` median step norm;
/// - final residual below the smallest of the first 10 residuals (or exactly 0).
///
/// Traces with fewer than 20 records are inconclusive.
pub fn check_residual_vanishes(trace: &IterateTrace, l_hat: f64) -> CheckReport {
    const NAME: &str = "residual_vanishes";
    let n = trace.len();
    if n < MIN_TREND_RECORDS {
        return CheckReport::inconclusive(NAME, format!("{n} records; need at least {MIN_TREND_RECORDS}"));
    }
    let tail = &trace.records[n - n.div_ceil(10)..];
    let med_res = median(tail.iter().map(|r| r.residual).collect());
    let med_step = median(tail.iter().map(|r| r.step_norm()).collect());
    let early_min = trace.records[..10].iter().map(|r| r.residual).fold(f64::INFINITY, f64::min);
    let last = trace.records[n - 1].residual;

    let tail_excess = med_res - 10.0 * l_hat * med_step;
    let trend_ok = last < early_min || last == 0.0;
    let mut report = CheckReport::evaluated(NAME, 0.0, &[(tail[0].k, tail_excess)]);
    if !trend_ok {
        report.pass = false;
        report.status = CheckStatus::Fail;
        report.worst_violation = report.worst_violation.max(last - early_min);
        report.worst_iteration = Some(trace.records[n - 1].k);
    }
    report.with_note(format!(
        "tail median residual {med_res:e}, tail median step {med_step:e}, final residual {last:e}, early min {early_min:e}"
    ))
}

/// Critical-point conditions `-grad_i H(x) in df_i(x_i)` for every block,
/// via each term's subdifferential-distance oracle.
pub fn critical_point_certificate(p: &Problem, x: &BlockVector, tol: f64) -> CheckReport {
    const NAME: &str = "critical_point";
    if let Err(e) = p.check_structure(x) {
        return CheckReport::inconclusive(NAME, e.to_string());
    }
    let mut violations = Vec::new();
    let mut missing = Vec::new();
    let mut dists = Vec::new();
    for i in 0..p.num_blocks() {
        let g = p.coupling().partial_grad(x, i);
        match p.term(i).function.subdiff_distance(x.block(i), &g) {
            Some(d) => {
                violations.push((i, d));
                dists.push(format!("{}: {d:e}", p.layout()[i].0));
            }
            None => missing.push(p.layout()[i].0.clone()),
        }
    }
    let mut report = CheckReport::evaluated(NAME, tol, &violations);
    report.note = format!("distances {{{}}}", dists.join(", "));
    if !missing.is_empty() && report.pass {
        report.status = CheckStatus::Inconclusive;
        report.pass = false;
        report.note.push_str(&format!("; no certificate oracle for blocks {missing:?}"));
    }
    report
}

/// Central differences of `H` against the coupling's partial gradients at
/// `x` and `GRADCHECK_PROBES` seeded points around it. Step per coordinate is
/// `h * max(1, |x_j|)`.
pub fn gradcheck(p: &Problem, x: &BlockVector, h: f64, seed: u64) -> CheckReport {
    gradcheck_with(p, x, h, GRADCHECK_PROBES, seed, GRADCHECK_TOL)
}

pub fn gradcheck_with(p: &Problem, x: &BlockVector, h: f64, probes: usize, seed: u64, tol: f64) -> CheckReport {
    const NAME: &str = "gradcheck";
    if let Err(e) = p.check_structure(x) {
        return CheckReport::inconclusive(NAME, e.to_string());
    }
    if !(h > 0.0) {
        return CheckReport::inconclusive(NAME, format!("step must be positive, got {h}"));
    }
    let mut rng = rng::derived(seed, 0x6C);
    let flat = x.flatten();
    let mut worst = (f64::NEG_INFINITY, None::<(usize, usize, usize)>);
    let mut violations = Vec::new();
    for probe in 0..probes {
        let shifted: Vec<f64> = flat.iter().map(|v| v + rng.random_range(-1.0..=1.0)).collect();
        let Ok(point) = x.from_flat_like(&shifted) else {
            return CheckReport::inconclusive(NAME, "probe point is not finite");
        };
        let mut probe_worst = f64::NEG_INFINITY;
        for b in 0..p.num_blocks() {
            let g = p.coupling().partial_grad(&point, b);
            for j in 0..g.len() {
                let hj = h * point.block(b)[j].abs().max(1.0);
                let mut plus = point.block(b).to_vec();
                let mut minus = plus.clone();
                plus[j] += hj;
                minus[j] -= hj;
                let (Ok(xp), Ok(xm)) = (point.with_block(b, plus), point.with_block(b, minus)) else {
                    return CheckReport::inconclusive(NAME, "perturbed point is not finite");
                };
                let fd = (p.coupling().value(&xp) - p.coupling().value(&xm)) / (2.0 * hj);
                let rel = (fd - g[j]).abs() / 1f64.max(fd.abs()).max(g[j].abs());
                if rel > worst.0 || rel.is_nan() {
                    worst = (rel, Some((probe, b, j)));
                }
                probe_worst = probe_worst.max(rel);
            }
        }
        violations.push((probe, probe_worst));
    }
    let report = CheckReport::evaluated(NAME, tol, &violations);
    let loc = match worst.1 {
        Some((probe, b, j)) => format!(
            "worst relative error {:e} at block '{}' coordinate {j} (probe {probe})",
            worst.0,
            p.layout()[b].0
        ),
        None => String::new(),
    };
    report.with_note(loc)
}

/// Locates the coordinate with the largest gradient error, as `(block, index)`.
pub fn gradcheck_worst_coordinate(report: &CheckReport, p: &Problem) -> Option<(usize, usize)> {
    let rest = report.note.split("at block '").nth(1)?;
    let (id, rest) = rest.split_once("' coordinate ")?;
    let idx = rest.split_whitespace().next()?.parse().ok()?;
    let block = p.layout().iter().position(|(lid, _)| lid == id)?;
    Some((block, idx))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteLengthReport {
    pub cum_step: Vec<f64>,
    pub total: f64,
    /// Path length contributed by the last 10% of records.
    pub tail_increment: f64,
    /// Set when the tail contributes less than 1% of the total.
    pub plateau: bool,
}

/// Empirical finite-length monitor on the cumulative step length.
pub fn finite_length_monitor(trace: &IterateTrace) -> FiniteLengthReport {
    let curve: Vec<f64> = trace.records.iter().map(|r| r.cum_step).collect();
    let n = curve.len();
    if n < 2 {
        return FiniteLengthReport { cum_step: curve, total: 0.0, tail_increment: 0.0, plateau: false };
    }
    let total = curve[n - 1];
    let tail_start = n - n.div_ceil(10);
    let tail_increment = total - curve[tail_start - 1];
    FiniteLengthReport {
        plateau: total > 0.0 && tail_increment < 0.01 * total,
        cum_step: curve,
        total,
        tail_increment,
    }
}

/// Compares the closed-form prox maps with a grid search on seeded cases:
/// 1-D soft thresholding on a `1e-4` grid, 2-D group shrinkage on a `1e-3`
/// grid, compared coordinatewise. Grids are lattices of step multiples, so
/// the origin is always a candidate.
pub fn prox_bruteforce_check(cases: usize, seed: u64) -> CheckReport {
    const STEP_1D: f64 = 1e-4;
    const STEP_2D: f64 = 1e-3;
    let mut rng = rng::derived(seed, 0x9802);
    let mut violations = Vec::with_capacity(2 * cases);
    // lattice indices covering [lo, hi] with a margin of one step
    let span = |lo: f64, hi: f64, h: f64| ((lo / h).floor() as i64 - 1)..=((hi / h).ceil() as i64 + 1);
    for c in 0..cases {
        let v = rng.random_range(-3.0..=3.0);
        let tau = rng.random_range(0.05..=2.0);
        let closed = soft_threshold(&[v], tau).map(|u| u[0]).unwrap_or(f64::NAN);
        let obj = |u: f64| tau * u.abs() + 0.5 * (u - v) * (u - v);
        // the minimizer lies between 0 and v
        let best = span(v.min(0.0), v.max(0.0), STEP_1D)
            .map(|i| i as f64 * STEP_1D)
            .min_by(|a, b| obj(*a).total_cmp(&obj(*b)))
            .expect("non-empty grid");
        violations.push((c, (best - closed).abs()));
    }
    let groups = GroupPartition::new(vec![vec![0, 1]]).expect("static partition");
    for c in 0..cases {
        let v = [rng.random_range(-1.5..=1.5), rng.random_range(-1.5..=1.5)];
        let tau = rng.random_range(0.05..=1.0);
        let closed = group_soft_threshold(&v, &groups, tau).unwrap_or_else(|_| vec![f64::NAN; 2]);
        let obj = |a: f64, b: f64| tau * (a * a + b * b).sqrt() + 0.5 * ((a - v[0]).powi(2) + (b - v[1]).powi(2));
        // the minimizer lies on the segment [0, v]
        let (mut best, mut best_u) = (f64::INFINITY, [0.0, 0.0]);
        for ia in span(v[0].min(0.0), v[0].max(0.0), STEP_2D) {
            let a = ia as f64 * STEP_2D;
            for ib in span(v[1].min(0.0), v[1].max(0.0), STEP_2D) {
                let b = ib as f64 * STEP_2D;
                let o = obj(a, b);
                if o < best {
                    best = o;
                    best_u = [a, b];
                }
            }
        }
        violations.push((cases + c, (best_u[0] - closed[0]).abs().max((best_u[1] - closed[1]).abs())));
    }
    CheckReport::evaluated("prox_bruteforce", 1e-3, &violations)
}
