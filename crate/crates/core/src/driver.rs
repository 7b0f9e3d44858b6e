//! The alternating engine: Gauss-Seidel sweeps of Bregman block subproblems.
//!
//! Each block update solves
//!
//! ```text
//! x_i^{k+1} in argmin_u H(x_1^{k+1}, .., x_{i-1}^{k+1}, u, x_{i+1}^k, .., x_n^k)
//!                       + f_i(u) + B_{phi_i^k}(u, x_i^k)
//! ```
//!
//! with `phi_i^k` produced by the block's [`BlockStrategy`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blockvec::{norm_sq, slice_dist_sq, BlockVector};
use crate::bregman::{
    bregman_distance, make_augmented_generator, make_linearization_generator, make_zero_generator,
    BregmanGenerator,
};
use crate::diagnostics::{critical_point_certificate, subgradient_residual, CheckReport};
use crate::error::{BamError, Result};
use crate::problem::{estimate_partial_lipschitz, Problem};
use crate::prox::{inner_exact_min, BlockSubproblem, DEFAULT_INNER_MAX_ITER, DEFAULT_INNER_TOL};

/// Iterates with a Euclidean norm above this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Default safety factor `gamma` for linearized blocks (`alpha = gamma * L_i`).
pub const DEFAULT_LINEARIZED_GAMMA: f64 = 1.1;
/// Default proximal weight for augmented blocks.
pub const DEFAULT_AUGMENTED_ALPHA: f64 = 1.0;

const LIPSCHITZ_PROBES: usize = 20;

/// How `alpha_k` is chosen for a linearized or augmented block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `alpha_k = c`.
    Constant(f64),
    /// `alpha_k = gamma * L_i`, with `L_i` the block's partial Lipschitz constant.
    Scaled(f64),
}

/// Builds a custom per-iteration generator for a block.
pub trait GeneratorFactory: Send + Sync {
    /// `x` holds the newest values: blocks before `block` already updated
    /// this sweep, `block` and later ones at iteration `k`.
    fn build(&self, k: usize, x: &BlockVector, block: usize) -> Result<Box<dyn BregmanGenerator>>;
}

/// Per-block update rule.
#[derive(Clone)]
pub enum BlockStrategy {
    /// Zero generator: exact block minimization.
    Exact,
    /// `phi = (alpha/2)|u|^2 - H(.., u, ..)`: one prox-linear step.
    Linearized(AlphaRule),
    /// `phi = (alpha/2)|u|^2`: exact minimization plus a proximal term.
    Augmented(AlphaRule),
    Custom(Arc<dyn GeneratorFactory>),
}

impl std::fmt::Debug for BlockStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Exact => write!(f, "Exact"),
            Self::Linearized(r) => write!(f, "Linearized({r:?})"),
            Self::Augmented(r) => write!(f, "Augmented({r:?})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl BlockStrategy {
    pub fn linearized(gamma: f64) -> Self {
        Self::Linearized(AlphaRule::Scaled(gamma))
    }

    pub fn augmented(alpha: f64) -> Self {
        Self::Augmented(AlphaRule::Constant(alpha))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Linearized(_) => "linearized",
            Self::Augmented(_) => "augmented",
            Self::Custom(_) => "custom",
        }
    }
}

/// Per-block strategies for a named scheme.
///
/// `am`, `plam` and `aam` use the same rule on every block. `am-plam` keeps
/// the first block exact and linearizes the rest; `plam-am` does the reverse.
pub fn resolve_strategy_preset(name: &str, n_blocks: usize) -> Result<Vec<BlockStrategy>> {
    if n_blocks == 0 {
        return Err(BamError::Configuration("no blocks".into()));
    }
    let lin = BlockStrategy::linearized(DEFAULT_LINEARIZED_GAMMA);
    let first_then_rest = |first: BlockStrategy, rest: BlockStrategy| {
        std::iter::once(first).chain(std::iter::repeat_n(rest, n_blocks - 1)).collect()
    };
    Ok(match name {
        "am" => vec![BlockStrategy::Exact; n_blocks],
        "plam" => vec![lin; n_blocks],
        "aam" => vec![BlockStrategy::augmented(DEFAULT_AUGMENTED_ALPHA); n_blocks],
        "am-plam" => first_then_rest(BlockStrategy::Exact, lin),
        "plam-am" => first_then_rest(lin, BlockStrategy::Exact),
        "custom" => {
            return Err(BamError::Configuration(
                "preset 'custom' needs an explicit per-block strategy list".into(),
            ))
        }
        other => {
            return Err(BamError::Configuration(format!(
                "unknown preset '{other}' (expected am, plam, aam, am-plam, plam-am or custom)"
            )))
        }
    })
}

pub const PRESETS: [&str; 5] = ["am", "plam", "aam", "am-plam", "plam-am"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_outer_iter: usize,
    pub residual_tol: f64,
    pub step_tol: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub record_every: usize,
    pub certificate_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iter: 1000,
            residual_tol: 1e-8,
            step_tol: 1e-12,
            inner_tol: DEFAULT_INNER_TOL,
            inner_max_iter: DEFAULT_INNER_MAX_ITER,
            record_every: 1,
            certificate_tol: 1e-6,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BamError::Configuration(m.to_string()));
        if self.max_outer_iter == 0 {
            return bad("max_outer_iter must be at least 1");
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1");
        }
        for (name, v) in [
            ("residual_tol", self.residual_tol),
            ("step_tol", self.step_tol),
            ("inner_tol", self.inner_tol),
            ("certificate_tol", self.certificate_tol),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(BamError::Configuration(format!("{name} must be a finite nonnegative number")));
            }
        }
        Ok(())
    }
}

/// How a block subproblem was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerFlag {
    ClosedForm,
    Converged { iterations: usize },
    HitCap { iterations: usize },
}

impl InnerFlag {
    pub fn hit_cap(&self) -> bool {
        matches!(self, Self::HitCap { .. })
    }
}

/// Everything recorded for one sweep `x^k -> x^{k+1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `Phi(x^k)`.
    pub phi: f64,
    /// `Phi` right after each block update; the last entry is `Phi(x^{k+1})`.
    pub block_phi: Vec<f64>,
    pub block_step_norm_sq: Vec<f64>,
    /// `|x^{k+1} - x^k|^2`.
    pub step_norm_sq: f64,
    /// `sum_i B_{phi_i^k}(x_i^{k+1}, x_i^k)`.
    pub bregman_paid: f64,
    /// Norm of the explicit subgradient `v^{k+1}`.
    pub residual: f64,
    /// `sum_{j <= k} |x^{j+1} - x^j|`, over all sweeps (recorded or not).
    pub cum_step: f64,
    /// Declared modulus of each block's generator this sweep.
    pub block_nu: Vec<f64>,
    /// Declared gradient Lipschitz bound of each block's generator.
    pub block_generator_lipschitz: Vec<f64>,
    pub inner: Vec<InnerFlag>,
}

impl TraceRecord {
    /// `Phi` after the first block update (`Phi(y^{k+1}, z^k)` for two blocks).
    pub fn phi_half(&self) -> f64 {
        self.block_phi[0]
    }

    pub fn phi_next(&self) -> f64 {
        *self.block_phi.last().expect("at least one block")
    }

    pub fn step_norm(&self) -> f64 {
        self.step_norm_sq.sqrt()
    }

    pub fn inner_hit_cap(&self) -> bool {
        self.inner.iter().any(InnerFlag::hit_cap)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterateTrace {
    pub records: Vec<TraceRecord>,
}

impl IterateTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phi0(&self) -> Option<f64> {
        self.records.first().map(|r| r.phi)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    ResidualConverged,
    StepConverged,
    MaxIter,
    Diverged,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ResidualConverged => "residual-converged",
            Self::StepConverged => "step-converged",
            Self::MaxIter => "max-iter",
            Self::Diverged => "diverged",
        }
    }

    pub fn converged(&self) -> bool {
        matches!(self, Self::ResidualConverged | Self::StepConverged)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_x: BlockVector,
    pub trace: IterateTrace,
    pub status: RunStatus,
    /// Number of completed sweeps.
    pub sweeps: usize,
    pub final_phi: f64,
    pub final_residual: f64,
    /// Smallest generator modulus seen over all blocks and sweeps.
    pub nu_min: f64,
    /// Largest generator gradient Lipschitz bound seen over all blocks and sweeps.
    pub max_generator_lipschitz: f64,
    pub inner_cap_hits: usize,
    pub certificate: CheckReport,
}

/// Result of one block update.
pub struct BlockStep {
    pub value: Vec<f64>,
    pub generator: Box<dyn BregmanGenerator>,
    pub inner: InnerFlag,
}

/// Partial Lipschitz constant of block `i` at `x`: declared, else estimated.
fn block_lipschitz(p: &Problem, x: &BlockVector, block: usize, k: usize, cfg: &SolverConfig) -> Result<f64> {
    match p.partial_lipschitz(x, block) {
        Some(l) => Ok(l),
        None => estimate_partial_lipschitz(
            p,
            x,
            block,
            LIPSCHITZ_PROBES,
            cfg.seed.wrapping_add((k as u64) << 8).wrapping_add(block as u64),
        ),
    }
}

fn alpha_for(rule: AlphaRule, lip: f64) -> f64 {
    match rule {
        AlphaRule::Constant(c) => c,
        AlphaRule::Scaled(gamma) => gamma * lip,
    }
}

/// Solves block `block`'s subproblem at `x` (whose earlier blocks already
/// hold this sweep's values).
pub fn step_block(
    p: &Problem,
    x: &BlockVector,
    block: usize,
    strategy: &BlockStrategy,
    k: usize,
    cfg: &SolverConfig,
) -> Result<BlockStep> {
    let term = p.term(block);
    let dim = x.block(block).len();
    let anchor = x.block(block);

    let solve_with = |generator: Box<dyn BregmanGenerator>, lip: f64| -> Result<BlockStep> {
        if let (Some(c), Some(exact)) = (generator.isotropic_curvature(), &term.exact_min) {
            let value = exact.argmin(x, c, anchor);
            return Ok(BlockStep { value, generator, inner: InnerFlag::ClosedForm });
        }
        let gen_lip = generator.lipschitz().ok_or_else(|| {
            BamError::Configuration(format!(
                "generator '{}' has no Lipschitz bound; the inner solver cannot pick a step",
                generator.label()
            ))
        })?;
        let sub = BlockSubproblem {
            problem: p,
            point: x,
            block,
            generator: generator.as_ref(),
            smooth_lipschitz: lip + gen_lip,
        };
        let sol = inner_exact_min(&sub, cfg.inner_tol, cfg.inner_max_iter)?;
        let inner = if sol.converged {
            InnerFlag::Converged { iterations: sol.iterations }
        } else {
            InnerFlag::HitCap { iterations: sol.iterations }
        };
        Ok(BlockStep { value: sol.point, generator, inner })
    };

    match strategy {
        BlockStrategy::Exact => {
            let lip = if term.exact_min.is_some() { 0.0 } else { block_lipschitz(p, x, block, k, cfg)? };
            solve_with(Box::new(make_zero_generator(dim)?), lip)
        }
        BlockStrategy::Augmented(rule) => {
            let lip = block_lipschitz(p, x, block, k, cfg)?;
            let alpha = alpha_for(*rule, lip);
            solve_with(Box::new(make_augmented_generator(alpha, dim)?), lip)
        }
        BlockStrategy::Linearized(rule) => {
            let lip = block_lipschitz(p, x, block, k, cfg)?;
            let alpha = alpha_for(*rule, lip);
            let generator = make_linearization_generator(alpha, Arc::clone(p.coupling()), x.clone(), block, lip)?;
            // argmin <grad_i H(x), u - x_i> + (alpha/2)|u - x_i|^2 + f_i(u)
            let grad = p.coupling().partial_grad(x, block);
            let v: Vec<f64> = anchor.iter().zip(&grad).map(|(a, g)| a - g / alpha).collect();
            let value = term.function.prox(&v, 1.0 / alpha).ok_or_else(|| {
                BamError::Configuration(format!("block '{}' has no prox oracle", p.layout()[block].0))
            })?;
            Ok(BlockStep { value, generator: Box::new(generator), inner: InnerFlag::ClosedForm })
        }
        BlockStrategy::Custom(factory) => {
            let generator = factory.build(k, x, block)?;
            if generator.dim() != dim {
                return Err(BamError::Configuration(format!(
                    "custom generator for block {block} has dimension {}, expected {dim}",
                    generator.dim()
                )));
            }
            let lip = if generator.isotropic_curvature().is_some() && term.exact_min.is_some() {
                0.0
            } else {
                block_lipschitz(p, x, block, k, cfg)?
            };
            solve_with(generator, lip)
        }
    }
}

/// Rejects strategy lists the problem's oracles cannot serve.
pub fn validate_strategies(p: &Problem, strategies: &[BlockStrategy], x0: &BlockVector) -> Result<()> {
    if strategies.len() != p.num_blocks() {
        return Err(BamError::Configuration(format!(
            "{} strategies for {} blocks",
            strategies.len(),
            p.num_blocks()
        )));
    }
    for (i, s) in strategies.iter().enumerate() {
        let id = &p.layout()[i].0;
        let term = p.term(i);
        let has_prox = term.function.has_prox();
        let has_exact = term.exact_min.is_some();
        match s {
            BlockStrategy::Exact | BlockStrategy::Augmented(_) | BlockStrategy::Custom(_)
                if !has_prox && !has_exact =>
            {
                return Err(BamError::Configuration(format!(
                    "block '{id}': {} strategy needs a closed-form minimizer or a prox oracle",
                    s.kind()
                )));
            }
            BlockStrategy::Linearized(_) if !has_prox => {
                return Err(BamError::Configuration(format!(
                    "block '{id}': linearized strategy needs a prox oracle"
                )));
            }
            _ => {}
        }
        match s {
            BlockStrategy::Linearized(AlphaRule::Scaled(gamma)) if !(*gamma > 1.0) => {
                return Err(BamError::Configuration(format!(
                    "block '{id}': linearized gamma = {gamma} violates alpha_k > L_i (need gamma > 1 for a convex generator)"
                )));
            }
            BlockStrategy::Linearized(AlphaRule::Constant(c)) => {
                if let Some(l) = p.partial_lipschitz(x0, i) {
                    if !(*c > l) {
                        return Err(BamError::Configuration(format!(
                            "block '{id}': linearized alpha = {c} violates alpha_k > L_i = {l}"
                        )));
                    }
                }
            }
            BlockStrategy::Augmented(AlphaRule::Constant(c) | AlphaRule::Scaled(c)) if !(*c > 0.0) => {
                return Err(BamError::Configuration(format!(
                    "block '{id}': augmented strategy needs a positive alpha rule, got {c}"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs Gauss-Seidel sweeps from `x0` until a stopping rule fires.
///
/// Stopping rules, checked after every sweep in this order: divergence
/// (non-finite `Phi` or `|x| > 1e12`), `|x^{k+1} - x^k| <= step_tol`,
/// `|v^{k+1}| <= residual_tol`, and the sweep cap.
pub fn run(p: &Problem, strategies: &[BlockStrategy], cfg: &SolverConfig, x0: &BlockVector) -> Result<RunResult> {
    cfg.validate()?;
    p.check_structure(x0)?;
    validate_strategies(p, strategies, x0)?;
    let phi0 = p.phi_value(x0)?;

    let n = p.num_blocks();
    let mut x = x0.clone();
    let mut phi = phi0;
    let mut trace = IterateTrace::default();
    let mut cum_step = 0.0;
    let mut nu_min = f64::INFINITY;
    let mut max_gen_lip: f64 = 0.0;
    let mut inner_cap_hits = 0;
    let mut status = RunStatus::MaxIter;
    let mut final_residual = f64::INFINITY;
    let mut sweeps = 0;

    for k in 0..cfg.max_outer_iter {
        let x_prev = x.clone();
        let mut generators: Vec<Box<dyn BregmanGenerator>> = Vec::with_capacity(n);
        let mut block_phi = Vec::with_capacity(n);
        let mut inner = Vec::with_capacity(n);
        let mut diverged = false;

        for (i, strategy) in strategies.iter().enumerate() {
            let step = step_block(p, &x, i, strategy, k, cfg)?;
            match x.with_block(i, step.value) {
                Ok(next) => x = next,
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
            block_phi.push(p.phi_raw(&x));
            if step.inner.hit_cap() {
                inner_cap_hits += 1;
            }
            inner.push(step.inner);
            generators.push(step.generator);
        }
        sweeps = k + 1;
        if diverged {
            log::warn!("sweep {k}: non-finite block update, stopping");
            status = RunStatus::Diverged;
            break;
        }

        let block_step_norm_sq: Vec<f64> =
            (0..n).map(|i| slice_dist_sq(x.block(i), x_prev.block(i))).collect();
        let step_norm_sq: f64 = block_step_norm_sq.iter().sum();
        cum_step += step_norm_sq.sqrt();

        let mut bregman_paid = 0.0;
        for (i, g) in generators.iter().enumerate() {
            bregman_paid += bregman_distance(g.as_ref(), x.block(i), x_prev.block(i)).unwrap_or(f64::NAN);
        }
        let gen_refs: Vec<&dyn BregmanGenerator> = generators.iter().map(|g| g.as_ref()).collect();
        let residual = match subgradient_residual(p, &x_prev, &x, &gen_refs) {
            Ok((_, r)) => r,
            Err(BamError::Configuration(m)) => return Err(BamError::Configuration(m)),
            Err(_) => f64::NAN,
        };
        final_residual = residual;

        let block_nu: Vec<f64> = generators.iter().map(|g| g.modulus()).collect();
        let block_generator_lipschitz: Vec<f64> =
            generators.iter().map(|g| g.lipschitz().unwrap_or(f64::INFINITY)).collect();
        nu_min = block_nu.iter().copied().fold(nu_min, f64::min);
        max_gen_lip = block_generator_lipschitz.iter().copied().fold(max_gen_lip, f64::max);

        let phi_next = *block_phi.last().expect("n >= 1");
        let step_norm = step_norm_sq.sqrt();
        let stop = if !phi_next.is_finite() || !residual.is_finite() || norm_sq(&x).sqrt() > DIVERGENCE_NORM {
            Some(RunStatus::Diverged)
        } else if step_norm <= cfg.step_tol {
            Some(RunStatus::StepConverged)
        } else if residual <= cfg.residual_tol {
            Some(RunStatus::ResidualConverged)
        } else {
            None
        };

        if k % cfg.record_every == 0 || stop.is_some() || k + 1 == cfg.max_outer_iter {
            trace.records.push(TraceRecord {
                k,
                phi,
                block_phi,
                block_step_norm_sq,
                step_norm_sq,
                bregman_paid,
                residual,
                cum_step,
                block_nu,
                block_generator_lipschitz,
                inner,
            });
        }
        log::debug!("sweep {k}: phi = {phi_next:.6e}, step = {step_norm:.3e}, residual = {residual:.3e}");
        phi = phi_next;

        if let Some(s) = stop {
            status = s;
            break;
        }
    }

    if status == RunStatus::Diverged {
        log::warn!("run on '{}' diverged after {sweeps} sweeps", p.name());
    }
    let certificate = critical_point_certificate(p, &x, cfg.certificate_tol);
    Ok(RunResult {
        final_x: x,
        trace,
        status,
        sweeps,
        final_phi: phi,
        final_residual,
        nu_min: if nu_min.is_finite() { nu_min } else { 0.0 },
        max_generator_lipschitz: max_gen_lip,
        inner_cap_hits,
        certificate,
    })
}
