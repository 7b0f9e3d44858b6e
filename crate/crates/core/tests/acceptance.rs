//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use bam_core::cli::{cmd_run, CommonOpts};
use bam_core::diagnostics::{
    check_blockwise_sufficient_decrease, check_monotone_descent, check_residual_bound, check_residual_vanishes,
    check_sufficient_decrease, critical_point_certificate, gradcheck_with, gradcheck_worst_coordinate,
    residual_bound_constant, CheckReport,
};
use bam_core::driver::{resolve_strategy_preset, PRESETS};
use bam_core::problem::{
    build_multiblock_quadratic, build_multiblock_quadratic_with, build_separable_quadratic, cross_lipschitz,
    SparseGroupInstance,
};
use bam_core::prox::{group_soft_threshold, soft_threshold, GroupPartition};
use bam_core::{run, BlockVector, Problem, RunResult, RunStatus, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, title: &str, o: &Outcome) {
    println!("[{}] criterion {id:>2}: {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn sparse_group_instance() -> SparseGroupInstance {
    SparseGroupInstance::random(50, 40, GroupPartition::contiguous(40, 5).unwrap(), SEED, 0.1, 0.1).unwrap()
}

fn builtin_problems() -> Vec<Problem> {
    vec![
        build_separable_quadratic(),
        sparse_group_instance().problem(),
        build_multiblock_quadratic(4, SEED).unwrap(),
    ]
}

/// Seeded start in `[-1, 1]^d`; the origin is critical for the sparse/group instance.
fn start(p: &Problem) -> BlockVector {
    p.random_point(SEED, 1.0).unwrap()
}

fn run_preset(p: &Problem, preset: &str, cfg: &SolverConfig) -> RunResult {
    let s = resolve_strategy_preset(preset, p.num_blocks()).unwrap();
    run(p, &s, cfg, &start(p)).unwrap()
}

fn l_hat(p: &Problem, res: &RunResult) -> f64 {
    residual_bound_constant(p.num_blocks(), cross_lipschitz(p, &p.zeros(), SEED).unwrap(), res.max_generator_lipschitz)
}

// ---------------------------------------------------------------------------
// independent oracles
// ---------------------------------------------------------------------------

fn oracle_soft(v: f64, tau: f64) -> f64 {
    v.signum() * (v.abs() - tau).max(0.0)
}

/// Dense Gaussian elimination with partial pivoting.
fn oracle_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / m[i][i];
    }
    x
}

/// Grid argmin over lattice points `i * h` in `[lo - h, hi + h]`.
fn lattice(lo: f64, hi: f64, h: f64) -> impl Iterator<Item = f64> + Clone {
    ((lo / h).floor() as i64 - 1..=(hi / h).ceil() as i64 + 1).map(move |i| i as f64 * h)
}

/// Hand-written PLAM on `l1|y|_1 + |Ay - z|^2 + l2|z|_{1,2}` with contiguous groups.
fn oracle_plam(inst: &SparseGroupInstance, x0: &[f64], group_size: usize, gamma: f64, sweeps: usize) -> Vec<Vec<f64>> {
    let a = &inst.a;
    let (m, n) = (a.nrows(), a.ncols());
    let ay = inst.lipschitz_y * gamma;
    let az = 2.0 * gamma;
    let mut y = x0[..n].to_vec();
    let mut z = x0[n..].to_vec();
    let mut out = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let r: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[(i, j)] * y[j]).sum::<f64>() - z[i]).collect();
        for j in 0..n {
            let g = 2.0 * (0..m).map(|i| a[(i, j)] * r[i]).sum::<f64>();
            y[j] = oracle_soft(y[j] - g / ay, inst.lambda1 / ay);
        }
        let r: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[(i, j)] * y[j]).sum::<f64>() - z[i]).collect();
        let w: Vec<f64> = (0..m).map(|i| z[i] + 2.0 * r[i] / az).collect();
        let t = inst.lambda2 / az;
        for g0 in (0..m).step_by(group_size) {
            let norm = w[g0..g0 + group_size].iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm <= t { 0.0 } else { 1.0 - t / norm };
            for i in g0..g0 + group_size {
                z[i] = scale * w[i];
            }
        }
        out.push(y.iter().chain(&z).copied().collect());
    }
    out
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let problems = builtin_problems();
    let cfg = SolverConfig { max_outer_iter: 500, ..Default::default() };

    // 1. descent for every preset on every built-in problem
    let clock = Instant::now();
    let mut runs: Vec<(usize, &str, RunResult)> = Vec::new();
    for (pi, p) in problems.iter().enumerate() {
        for preset in PRESETS {
            runs.push((pi, preset, run_preset(p, preset, &cfg)));
        }
    }
    let elapsed = clock.elapsed().as_secs_f64();
    let mut bad = Vec::new();
    let mut caps = 0;
    for (pi, preset, res) in &runs {
        caps += res.inner_cap_hits;
        let r = check_monotone_descent(&res.trace);
        if !r.pass {
            bad.push(format!("{}/{preset}: {:e} at k={:?}", problems[*pi].name(), r.worst_violation, r.worst_iteration));
        }
    }
    results.push((
        1,
        "descent chain, 5 presets x 3 problems, < 10 s",
        outcome(
            bad.is_empty() && elapsed < 10.0,
            format!("{} runs in {elapsed:.2} s, {caps} inner cap hits, violations {bad:?}", runs.len()),
        ),
    ));

    // 2. sufficient decrease where nu_min > 0, blockwise on hybrids
    let mut bad = Vec::new();
    let mut checked = 0;
    for (pi, preset, res) in &runs {
        let r: CheckReport = match *preset {
            "plam" | "aam" => check_sufficient_decrease(&res.trace, res.nu_min),
            "am-plam" | "plam-am" => check_blockwise_sufficient_decrease(&res.trace),
            _ => continue,
        };
        checked += 1;
        if !r.pass {
            bad.push(format!("{}/{preset}: {:?} {}", problems[*pi].name(), r.status, r.note));
        }
    }
    results.push((
        2,
        "sufficient decrease with nu_min/2",
        outcome(bad.is_empty() && checked == 12, format!("{checked} runs checked, failures {bad:?}")),
    ));

    // 3. engine plam vs hand-written PLAM on the sparse/group instance
    let inst = sparse_group_instance();
    let p = inst.problem();
    let x0 = start(&p);
    let reference = oracle_plam(&inst, &x0.flatten(), 5, 1.1, 100);
    let strategies = resolve_strategy_preset("plam", 2).unwrap();
    let mut worst: f64 = 0.0;
    for (k, expected) in reference.iter().enumerate() {
        let c = SolverConfig { max_outer_iter: k + 1, residual_tol: 0.0, step_tol: 0.0, ..Default::default() };
        let got = run(&p, &strategies, &c, &x0).unwrap().final_x.flatten();
        let d = got.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    results.push((
        3,
        "generic plam == hand-written PLAM over 100 sweeps",
        outcome(worst <= 1e-12, format!("max abs difference {worst:e}")),
    ));

    // 4. exact minimization reaches the analytic / linear-solve minimizer
    let sep = build_separable_quadratic();
    let c = SolverConfig { max_outer_iter: 200, ..Default::default() };
    let am = run(&sep, &resolve_strategy_preset("am", 2).unwrap(), &c, &sep.zeros()).unwrap();
    let (y, z) = (am.final_x.block(0)[0], am.final_x.block(1)[0]);
    let phi_err = (sep.phi_value(&am.final_x).unwrap() - 4.0 / 3.0).abs();
    let sep_ok = (y - 1.0 / 3.0).abs() <= 1e-8 && (z + 1.0 / 3.0).abs() <= 1e-8 && phi_err <= 1e-8 && am.sweeps <= 200;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let n = 4;
    let mut coeffs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.1..1.0);
            coeffs[i][j] = v;
            coeffs[j][i] = v;
        }
    }
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let system: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 + coeffs[i].iter().sum::<f64>() } else { -coeffs[i][j] }).collect())
        .collect();
    let expected = oracle_solve(system, targets.clone());
    let mb = build_multiblock_quadratic_with(coeffs, targets).unwrap();
    let c = SolverConfig { max_outer_iter: 2000, residual_tol: 1e-12, ..Default::default() };
    let mb_res = run_preset(&mb, "am", &c);
    let mb_err = mb_res.final_x.flatten().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    results.push((
        4,
        "am reaches the exact minimizer",
        outcome(
            sep_ok && mb_err <= 1e-8,
            format!(
                "separable: ({y:.12}, {z:.12}) |Phi - 4/3| = {phi_err:e} in {} sweeps; 4-block max error {mb_err:e}",
                am.sweeps
            ),
        ),
    ));

    // 5. prox maps vs lattice brute force
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for _ in 0..100 {
        let v: f64 = rng.random_range(-3.0..3.0);
        let tau: f64 = rng.random_range(0.05..2.0);
        let obj = |u: f64| tau * u.abs() + 0.5 * (u - v) * (u - v);
        let best = lattice(v.min(0.0), v.max(0.0), 1e-4).min_by(|a, b| obj(*a).total_cmp(&obj(*b))).unwrap();
        worst1 = worst1.max((soft_threshold(&[v], tau).unwrap()[0] - best).abs());
    }
    let one = GroupPartition::new(vec![vec![0, 1]]).unwrap();
    for _ in 0..100 {
        let v = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let tau: f64 = rng.random_range(0.05..1.0);
        let obj = |a: f64, b: f64| tau * a.hypot(b) + 0.5 * ((a - v[0]).powi(2) + (b - v[1]).powi(2));
        let ys = lattice(v[1].min(0.0), v[1].max(0.0), 1e-3);
        let best = lattice(v[0].min(0.0), v[0].max(0.0), 1e-3)
            .flat_map(|a| ys.clone().map(move |b| (a, b)))
            .min_by(|p, q| obj(p.0, p.1).total_cmp(&obj(q.0, q.1)))
            .unwrap();
        let closed = group_soft_threshold(&v, &one, tau).unwrap();
        worst2 = worst2.max((closed[0] - best.0).abs().max((closed[1] - best.1).abs()));
    }
    results.push((
        5,
        "prox maps agree with grid brute force",
        outcome(worst1 <= 1e-3 && worst2 <= 1e-3, format!("1-D worst {worst1:e}, 2-D worst {worst2:e}")),
    ));

    // 6. residual bound with analytic constants
    let c = SolverConfig { max_outer_iter: 200, residual_tol: 0.0, step_tol: 0.0, ..Default::default() };
    let aam = run_preset(&sep, "aam", &c);
    let bound = 2f64.sqrt() * (2.0 + 1.0);
    let r = check_residual_bound(&aam.trace, bound);
    results.push((
        6,
        "|v| <= sqrt(2)(L_cross + alpha)|dx| on separable aam",
        outcome(
            r.pass && aam.trace.len() == aam.sweeps && aam.sweeps <= 200,
            format!("{} sweeps ({}), worst excess {:e}", aam.sweeps, aam.status.as_str(), r.worst_violation),
        ),
    ));

    // 7. residual trend on convergent runs; plam and plam-am reach 1e-8 on the sparse/group instance
    let mut bad = Vec::new();
    let mut n_conv = 0;
    for (pi, preset, res) in &runs {
        if !res.status.converged() {
            continue;
        }
        n_conv += 1;
        let r = check_residual_vanishes(&res.trace, l_hat(&problems[*pi], res));
        if !r.acceptable() {
            bad.push(format!("{}/{preset}: {}", problems[*pi].name(), r.note));
        }
    }
    let c = SolverConfig { max_outer_iter: 5000, residual_tol: 1e-8, step_tol: 0.0, ..Default::default() };
    let mut long = Vec::new();
    for preset in ["plam", "plam-am"] {
        let res = run_preset(&p, preset, &c);
        long.push((preset, res.final_residual, res.sweeps));
    }
    let long_ok = long.iter().all(|(_, r, _)| *r <= 1e-8);
    results.push((
        7,
        "residual vanishes",
        outcome(
            bad.is_empty() && long_ok,
            format!("{n_conv} convergent runs, trend failures {bad:?}; sparse/group final residuals {long:?}"),
        ),
    ));

    // 8. certificate at residual-converged runs
    let mut bad = Vec::new();
    let mut n_cert = 0;
    for (pi, preset, res) in &runs {
        if res.status == RunStatus::ResidualConverged {
            n_cert += 1;
            let r = critical_point_certificate(&problems[*pi], &res.final_x, 1e-6);
            if !r.pass {
                bad.push(format!("{}/{preset}: {}", problems[*pi].name(), r.note));
            }
        }
    }
    results.push((
        8,
        "critical-point certificate at residual-converged runs",
        outcome(bad.is_empty() && n_cert > 0, format!("{n_cert} runs certified, failures {bad:?}")),
    ));

    // 9. gradient checks and fault localization
    let mut bad = Vec::new();
    for p in &problems {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let flat: Vec<f64> = (0..p.zeros().total_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: BlockVector = p.zeros().from_flat_like(&flat).unwrap();
        let r = gradcheck_with(p, &x, 1e-6, 10, SEED, 1e-6);
        if !r.pass {
            bad.push(format!("{}: {}", p.name(), r.note));
        }
    }
    let faulty = problems[1].with_gradient_fault(1, 3, 0.1).unwrap();
    let r = gradcheck_with(&faulty, &faulty.zeros(), 1e-6, 10, SEED, 1e-6);
    let located = gradcheck_worst_coordinate(&r, &faulty);
    results.push((
        9,
        "gradient checks",
        outcome(
            bad.is_empty() && !r.pass && located == Some((1, 3)),
            format!("failures {bad:?}; injected fault located at {located:?}"),
        ),
    ));

    // 10. byte-identical traces from identical configs
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"problem": {"name": "sparse_group", "seed": 7, "params": {"lambda1": 0.1, "lambda2": 0.1}},
            "x0": "random", "preset": "plam-am", "solver": {"max_outer_iter": 200}, "checks": ["monotone_descent"]}"#,
    )
    .unwrap();
    let mut traces = Vec::new();
    let mut codes = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let opts = CommonOpts { out_dir: Some(out.clone()), seed: None, quiet: true };
        codes.push(cmd_run(&config, &opts));
        traces.push(std::fs::read(out.join("trace.csv")).unwrap_or_default());
    }
    results.push((
        10,
        "deterministic traces",
        outcome(
            codes == [0, 0] && !traces[0].is_empty() && traces[0] == traces[1],
            format!("exit codes {codes:?}, {} trace bytes", traces[0].len()),
        ),
    ));

    for (id, title, o) in &results {
        report(*id, title, o);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
