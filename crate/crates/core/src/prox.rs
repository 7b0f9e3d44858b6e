//! Proximal maps and the inner solver for block subproblems without a
//! closed form.

use crate::blockvec::{slice_dist_sq, BlockVector};
use crate::bregman::{bregman_distance, BregmanGenerator};
use crate::error::{BamError, Result};
use crate::problem::Problem;

/// Default stopping tolerance on the prox-gradient residual.
pub const DEFAULT_INNER_TOL: f64 = 1e-10;
/// Default iteration cap of [`inner_exact_min`].
pub const DEFAULT_INNER_MAX_ITER: usize = 5000;

const ROUNDING_SLACK: f64 = 1e-14;

/// A partition of `0..dim` into non-empty groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    dim: usize,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let dim: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; dim];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(BamError::InvalidInput(format!("group {gi} is empty")));
            }
            for &j in g {
                if j >= dim || seen[j] {
                    return Err(BamError::InvalidInput(format!(
                        "groups do not partition 0..{dim}: index {j} out of range or repeated"
                    )));
                }
                seen[j] = true;
            }
        }
        if dim == 0 {
            return Err(BamError::InvalidInput("empty partition".into()));
        }
        Ok(Self { groups, dim })
    }

    /// Consecutive groups of `size` indices; the last one may be shorter.
    pub fn contiguous(dim: usize, size: usize) -> Result<Self> {
        if dim == 0 || size == 0 {
            return Err(BamError::InvalidInput("dimension and group size must be positive".into()));
        }
        Self::new((0..dim).step_by(size).map(|s| (s..(s + size).min(dim)).collect()).collect())
    }

    pub fn singletons(dim: usize) -> Result<Self> {
        Self::contiguous(dim, 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.groups.iter().map(Vec::as_slice)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(BamError::Parameter(format!("threshold must be positive and finite, got {tau}")))
    }
}

/// `sign(v_i) * max(|v_i| - tau, 0)`, the prox of `tau*|.|_1`.
pub fn soft_threshold(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(v.iter().map(|&x| shrink(x, tau)).collect())
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    let m = x.abs() - tau;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}

/// Groupwise `max(1 - tau/|v_g|, 0) * v_g`, the prox of `tau * sum_g |.|_2`.
pub fn group_soft_threshold(v: &[f64], groups: &GroupPartition, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if v.len() != groups.dim() {
        return Err(BamError::Shape(format!(
            "vector has {} entries but groups cover {}",
            v.len(),
            groups.dim()
        )));
    }
    let mut out = vec![0.0; v.len()];
    for g in groups.iter() {
        let norm = g.iter().map(|&j| v[j] * v[j]).sum::<f64>().sqrt();
        if norm > tau {
            let scale = 1.0 - tau / norm;
            for &j in g {
                out[j] = scale * v[j];
            }
        }
    }
    Ok(out)
}

/// One block subproblem of the alternating scheme:
///
/// `min_u H(point with block = u) + f_block(u) + B_phi(u, anchor)`
///
/// where `anchor` is the current value of the block in `point`.
pub struct BlockSubproblem<'a> {
    pub problem: &'a Problem,
    pub point: &'a BlockVector,
    pub block: usize,
    pub generator: &'a dyn BregmanGenerator,
    /// Lipschitz constant of the gradient of the smooth part
    /// `u -> H(.., u, ..) + B_phi(u, anchor)`.
    pub smooth_lipschitz: f64,
}

impl BlockSubproblem<'_> {
    pub fn anchor(&self) -> &[f64] {
        self.point.block(self.block)
    }

    fn at(&self, u: &[f64]) -> Result<BlockVector> {
        self.point
            .with_block(self.block, u.to_vec())
            .map_err(|e| BamError::Evaluation(format!("inner iterate rejected: {e}")))
    }

    pub fn objective(&self, u: &[f64]) -> Result<f64> {
        let h = self.problem.coupling().value(&self.at(u)?);
        let f = self.problem.term(self.block).function.value(u);
        let b = bregman_distance(self.generator, u, self.anchor())?;
        let total = h + f + b;
        if total.is_finite() {
            Ok(total)
        } else {
            Err(BamError::Evaluation(format!("subproblem objective is {total}")))
        }
    }

    fn smooth_gradient(&self, u: &[f64], anchor_grad: &[f64]) -> Result<Vec<f64>> {
        let gh = self.problem.coupling().partial_grad(&self.at(u)?, self.block);
        let gphi = self.generator.gradient(u);
        Ok(gh.iter().zip(&gphi).zip(anchor_grad).map(|((a, b), c)| a + b - c).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final prox-gradient residual `L * |u_{t+1} - u_t|`.
    pub residual: f64,
}

/// Monotone accelerated proximal gradient (FISTA with a function-value
/// safeguard and momentum restart) with step `1/L`, started at the anchor.
/// Iterates never increase the subproblem objective. Stops once the
/// prox-gradient residual at the extrapolated point is at most `tol`.
pub fn inner_exact_min(sub: &BlockSubproblem<'_>, tol: f64, max_iter: usize) -> Result<InnerSolution> {
    inner_exact_min_observed(sub, tol, max_iter, |_, _| {})
}

/// [`inner_exact_min`] with a callback receiving `(iteration, iterate)`.
pub fn inner_exact_min_observed(
    sub: &BlockSubproblem<'_>,
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<InnerSolution> {
    let term = &sub.problem.term(sub.block).function;
    if !term.has_prox() {
        return Err(BamError::Configuration(format!(
            "block '{}' has no prox oracle; the inner solver needs one",
            sub.problem.layout()[sub.block].0
        )));
    }
    let lip = sub.smooth_lipschitz;
    if !(lip.is_finite() && lip >= 0.0) {
        return Err(BamError::Configuration(format!("inner solver needs a finite Lipschitz bound, got {lip}")));
    }
    let anchor = sub.anchor().to_vec();
    let anchor_grad = sub.generator.gradient(&anchor);
    // A zero smooth curvature means the subproblem is the prox of f alone.
    let step_lip = if lip > 0.0 { lip } else { 1.0 };

    let mut x = anchor.clone();
    let mut f_best = sub.objective(&x)?;
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    observe(0, &x);
    while iterations < max_iter {
        let g = sub.smooth_gradient(&y, &anchor_grad)?;
        let v: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi / step_lip).collect();
        let z = term
            .prox(&v, 1.0 / step_lip)
            .ok_or_else(|| BamError::Configuration("prox oracle declined the request".into()))?;
        if z.iter().any(|c| !c.is_finite()) {
            return Err(BamError::Evaluation("inner iterate became non-finite".into()));
        }
        residual = step_lip * slice_dist_sq(&z, &y).sqrt();
        iterations += 1;

        let fz = sub.objective(&z)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // comparisons below rounding level would trigger spurious restarts
        let slack = ROUNDING_SLACK * (1.0 + f_best.abs());
        // a plain prox-gradient step (t == 1) descends up to rounding
        if fz <= f_best + slack || t == 1.0 {
            // gradient restart test: the step z - x points against the prox-gradient mapping y - z
            let restart = y.iter().zip(&z).zip(&x).map(|((yi, zi), xi)| (yi - zi) * (zi - xi)).sum::<f64>() > 0.0;
            let prev = std::mem::replace(&mut x, z);
            f_best = f_best.min(fz);
            if restart {
                y = x.clone();
                t = 1.0;
            } else {
                let beta = (t - 1.0) / t_next;
                y = x.iter().zip(&prev).map(|(xi, pi)| xi + beta * (xi - pi)).collect();
                t = t_next;
            }
        } else {
            y = x.clone();
            t = 1.0;
        }
        observe(iterations, &x);
        if residual <= tol {
            break;
        }
    }
    Ok(InnerSolution { point: x, iterations, converged: residual <= tol, residual })
}
