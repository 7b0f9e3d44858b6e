//! Composite problems `Phi(x) = H(x_1, .., x_n) + sum_i f_i(x_i)`.
//!
//! A [`Problem`] couples a smooth [`Coupling`] term with one [`BlockTerm`] per
//! block. Block terms expose whatever oracles they can (value always, prox,
//! closed-form coupled minimizer and a subdifferential certificate when
//! available); the driver picks strategies among the oracles present.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::blockvec::{slice_dist_sq, slice_norm_sq, BlockVector};
use crate::error::{BamError, Result};
use crate::prox::{group_soft_threshold, soft_threshold, GroupPartition};
use crate::rng;

/// The smooth coupling term `H` with block-partial gradients.
pub trait Coupling: Send + Sync {
    fn value(&self, x: &BlockVector) -> f64;

    /// `grad_{x_i} H(x)`.
    fn partial_grad(&self, x: &BlockVector, block: usize) -> Vec<f64>;

    /// Lipschitz constant of `u -> grad_i H(.., u, ..)` with the other blocks
    /// fixed at their values in `x`. `None` when not known analytically.
    fn partial_lipschitz(&self, _x: &BlockVector, _block: usize) -> Option<f64> {
        None
    }

    /// Constant `L` with `|grad_i H(x_i, w) - grad_i H(x_i, w')| <= L |w - w'|`
    /// where `w` collects all blocks other than `i`, maximized over `i`.
    fn cross_lipschitz(&self) -> Option<f64> {
        None
    }
}

/// A per-block term `f_i`.
pub trait BlockFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn has_prox(&self) -> bool {
        false
    }

    /// `argmin_u tau*f(u) + 0.5*|u - v|^2`, when available.
    fn prox(&self, _v: &[f64], _tau: f64) -> Option<Vec<f64>> {
        None
    }

    /// Distance from `-g` to the subdifferential of `f` at `x`, when available.
    fn subdiff_distance(&self, _x: &[f64], _g: &[f64]) -> Option<f64> {
        None
    }

    fn label(&self) -> String;
}

/// Closed-form minimizer of a coupled block subproblem:
/// `argmin_u H(x with block = u) + f(u) + (curvature/2)|u - anchor|^2`.
pub trait ExactBlockMin: Send + Sync {
    fn argmin(&self, x: &BlockVector, curvature: f64, anchor: &[f64]) -> Vec<f64>;
}

#[derive(Clone)]
pub struct BlockTerm {
    pub function: Arc<dyn BlockFunction>,
    pub exact_min: Option<Arc<dyn ExactBlockMin>>,
}

impl BlockTerm {
    pub fn new(function: impl BlockFunction + 'static) -> Self {
        Self { function: Arc::new(function), exact_min: None }
    }

    pub fn with_exact_min(mut self, exact: impl ExactBlockMin + 'static) -> Self {
        self.exact_min = Some(Arc::new(exact));
        self
    }
}

#[derive(Clone)]
pub struct Problem {
    name: String,
    layout: Vec<(String, usize)>,
    coupling: Arc<dyn Coupling>,
    terms: Vec<BlockTerm>,
    known_minimizer: Option<BlockVector>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem").field("name", &self.name).field("layout", &self.layout).finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        layout: Vec<(String, usize)>,
        coupling: Arc<dyn Coupling>,
        terms: Vec<BlockTerm>,
    ) -> Result<Self> {
        if layout.is_empty() {
            return Err(BamError::InvalidInput("problem has no blocks".into()));
        }
        if layout.len() != terms.len() {
            return Err(BamError::InvalidInput(format!(
                "{} blocks but {} block terms",
                layout.len(),
                terms.len()
            )));
        }
        // validates ids and dimensions
        BlockVector::zeros(&layout)?;
        Ok(Self { name: name.into(), layout, coupling, terms, known_minimizer: None })
    }

    pub fn with_known_minimizer(mut self, x: BlockVector) -> Result<Self> {
        if !x.same_structure(&self.zeros()) {
            return Err(BamError::Shape("known minimizer does not match the layout".into()));
        }
        self.known_minimizer = Some(x);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layout(&self) -> &[(String, usize)] {
        &self.layout
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.len()
    }

    pub fn coupling(&self) -> &Arc<dyn Coupling> {
        &self.coupling
    }

    pub fn term(&self, block: usize) -> &BlockTerm {
        &self.terms[block]
    }

    pub fn terms(&self) -> &[BlockTerm] {
        &self.terms
    }

    /// Global minimizer, for instances where it is known in closed form.
    pub fn known_minimizer(&self) -> Option<&BlockVector> {
        self.known_minimizer.as_ref()
    }

    pub fn zeros(&self) -> BlockVector {
        BlockVector::zeros(&self.layout).expect("layout validated at construction")
    }

    /// Seeded point with i.i.d. entries uniform on `[-radius, radius]`.
    pub fn random_point(&self, seed: u64, radius: f64) -> Result<BlockVector> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(BamError::Parameter(format!("radius must be finite and nonnegative, got {radius}")));
        }
        let mut r = rng::derived(seed, 0x78_30);
        let blocks = self
            .layout
            .iter()
            .map(|(id, d)| (id.clone(), (0..*d).map(|_| radius * r.random_range(-1.0..=1.0)).collect()))
            .collect();
        BlockVector::new(blocks)
    }

    pub fn check_structure(&self, x: &BlockVector) -> Result<()> {
        let ok = x.num_blocks() == self.layout.len()
            && x.ids().iter().zip(&self.layout).all(|(id, (lid, _))| id == lid)
            && x.block_dims().iter().zip(&self.layout).all(|(d, (_, ld))| d == ld);
        if ok {
            Ok(())
        } else {
            Err(BamError::Shape(format!(
                "point has layout {:?}/{:?}, problem '{}' expects {:?}",
                x.ids(),
                x.block_dims(),
                self.name,
                self.layout
            )))
        }
    }

    /// `Phi(x) = H(x) + sum_i f_i(x_i)`.
    pub fn phi_value(&self, x: &BlockVector) -> Result<f64> {
        self.check_structure(x)?;
        let h = self.coupling.value(x);
        if !h.is_finite() {
            return Err(BamError::Evaluation(format!("coupling value is {h}")));
        }
        let mut total = h;
        for (i, term) in self.terms.iter().enumerate() {
            let fi = term.function.value(x.block(i));
            if !fi.is_finite() {
                return Err(BamError::Evaluation(format!(
                    "term of block '{}' evaluated to {fi}",
                    self.layout[i].0
                )));
            }
            total += fi;
        }
        Ok(total)
    }

    /// `Phi(x)` without validation; non-finite results pass through.
    pub(crate) fn phi_raw(&self, x: &BlockVector) -> f64 {
        self.coupling.value(x)
            + self.terms.iter().enumerate().map(|(i, t)| t.function.value(x.block(i))).sum::<f64>()
    }

    /// Declared partial Lipschitz constant of block `i` at `x`.
    pub fn partial_lipschitz(&self, x: &BlockVector, block: usize) -> Option<f64> {
        self.coupling.partial_lipschitz(x, block)
    }

    /// Copy of this problem whose coupling gradient is off by `offset` at one
    /// coordinate. Used to exercise the gradient check.
    pub fn with_gradient_fault(&self, block: usize, index: usize, offset: f64) -> Result<Self> {
        if block >= self.num_blocks() || index >= self.layout[block].1 {
            return Err(BamError::InvalidInput(format!(
                "fault location ({block}, {index}) outside the problem layout"
            )));
        }
        let mut p = self.clone();
        p.name = format!("{}+fault", self.name);
        p.coupling = Arc::new(FaultyCoupling { inner: Arc::clone(&self.coupling), block, index, offset });
        Ok(p)
    }
}

struct FaultyCoupling {
    inner: Arc<dyn Coupling>,
    block: usize,
    index: usize,
    offset: f64,
}

impl Coupling for FaultyCoupling {
    fn value(&self, x: &BlockVector) -> f64 {
        self.inner.value(x)
    }
    fn partial_grad(&self, x: &BlockVector, block: usize) -> Vec<f64> {
        let mut g = self.inner.partial_grad(x, block);
        if block == self.block {
            g[self.index] += self.offset;
        }
        g
    }
    fn partial_lipschitz(&self, x: &BlockVector, block: usize) -> Option<f64> {
        self.inner.partial_lipschitz(x, block)
    }
    fn cross_lipschitz(&self) -> Option<f64> {
        self.inner.cross_lipschitz()
    }
}

// ---------------------------------------------------------------------------
// Block terms
// ---------------------------------------------------------------------------

/// `lambda * |x|_1`.
#[derive(Debug, Clone)]
pub struct L1Norm {
    pub lambda: f64,
}

impl BlockFunction for L1Norm {
    fn value(&self, x: &[f64]) -> f64 {
        self.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
    }
    fn has_prox(&self) -> bool {
        true
    }
    fn prox(&self, v: &[f64], tau: f64) -> Option<Vec<f64>> {
        soft_threshold(v, tau * self.lambda).ok()
    }
    fn subdiff_distance(&self, x: &[f64], g: &[f64]) -> Option<f64> {
        let d2: f64 = x
            .iter()
            .zip(g)
            .map(|(&xi, &gi)| {
                let d = if xi == 0.0 {
                    (gi.abs() - self.lambda).max(0.0)
                } else {
                    (gi + self.lambda * xi.signum()).abs()
                };
                d * d
            })
            .sum();
        Some(d2.sqrt())
    }
    fn label(&self) -> String {
        format!("{}*l1", self.lambda)
    }
}

/// `lambda * sum_g |x_g|_2`.
#[derive(Debug, Clone)]
pub struct GroupL1Norm {
    pub lambda: f64,
    pub groups: GroupPartition,
}

impl BlockFunction for GroupL1Norm {
    fn value(&self, x: &[f64]) -> f64 {
        self.lambda
            * self
                .groups
                .iter()
                .map(|g| g.iter().map(|&j| x[j] * x[j]).sum::<f64>().sqrt())
                .sum::<f64>()
    }
    fn has_prox(&self) -> bool {
        true
    }
    fn prox(&self, v: &[f64], tau: f64) -> Option<Vec<f64>> {
        group_soft_threshold(v, &self.groups, tau * self.lambda).ok()
    }
    fn subdiff_distance(&self, x: &[f64], g: &[f64]) -> Option<f64> {
        let mut d2 = 0.0;
        for group in self.groups.iter() {
            let xn = group.iter().map(|&j| x[j] * x[j]).sum::<f64>().sqrt();
            if xn == 0.0 {
                let gn = group.iter().map(|&j| g[j] * g[j]).sum::<f64>().sqrt();
                d2 += (gn - self.lambda).max(0.0).powi(2);
            } else {
                d2 += group
                    .iter()
                    .map(|&j| (g[j] + self.lambda * x[j] / xn).powi(2))
                    .sum::<f64>();
            }
        }
        Some(d2.sqrt())
    }
    fn label(&self) -> String {
        format!("{}*l12[{} groups]", self.lambda, self.groups.len())
    }
}

/// `|x - target|^2`.
#[derive(Debug, Clone)]
pub struct ShiftedSquare {
    pub target: Vec<f64>,
}

impl BlockFunction for ShiftedSquare {
    fn value(&self, x: &[f64]) -> f64 {
        slice_dist_sq(x, &self.target)
    }
    fn has_prox(&self) -> bool {
        true
    }
    fn prox(&self, v: &[f64], tau: f64) -> Option<Vec<f64>> {
        if !(tau > 0.0) {
            return None;
        }
        Some(
            v.iter()
                .zip(&self.target)
                .map(|(vi, ti)| (vi + 2.0 * tau * ti) / (1.0 + 2.0 * tau))
                .collect(),
        )
    }
    fn subdiff_distance(&self, x: &[f64], g: &[f64]) -> Option<f64> {
        let d2: f64 = x
            .iter()
            .zip(&self.target)
            .zip(g)
            .map(|((xi, ti), gi)| (gi + 2.0 * (xi - ti)).powi(2))
            .sum();
        Some(d2.sqrt())
    }
    fn label(&self) -> String {
        "shifted-square".into()
    }
}

// ---------------------------------------------------------------------------
// Separable quadratic: f(y) = (y-1)^2, H = (y-z)^2, g(z) = (z+1)^2
// ---------------------------------------------------------------------------

struct SeparableCoupling;

impl Coupling for SeparableCoupling {
    fn value(&self, x: &BlockVector) -> f64 {
        let d = x.block(0)[0] - x.block(1)[0];
        d * d
    }
    fn partial_grad(&self, x: &BlockVector, block: usize) -> Vec<f64> {
        let d = x.block(0)[0] - x.block(1)[0];
        if block == 0 {
            vec![2.0 * d]
        } else {
            vec![-2.0 * d]
        }
    }
    fn partial_lipschitz(&self, _x: &BlockVector, _block: usize) -> Option<f64> {
        Some(2.0)
    }
    fn cross_lipschitz(&self) -> Option<f64> {
        Some(2.0)
    }
}

struct SeparableYMin;

impl ExactBlockMin for SeparableYMin {
    fn argmin(&self, x: &BlockVector, c: f64, anchor: &[f64]) -> Vec<f64> {
        let z = x.block(1)[0];
        vec![(2.0 + 2.0 * z + c * anchor[0]) / (4.0 + c)]
    }
}

struct SeparableZMin;

impl ExactBlockMin for SeparableZMin {
    fn argmin(&self, x: &BlockVector, c: f64, anchor: &[f64]) -> Vec<f64> {
        let y = x.block(0)[0];
        vec![(2.0 * y - 2.0 + c * anchor[0]) / (4.0 + c)]
    }
}

/// Two scalar blocks with `f(y) = (y-1)^2`, `H(y,z) = (y-z)^2`, `g(z) = (z+1)^2`.
///
/// Unique minimizer `(1/3, -1/3)` with `Phi* = 4/3`.
pub fn build_separable_quadratic() -> Problem {
    let layout = vec![("y".to_string(), 1), ("z".to_string(), 1)];
    let terms = vec![
        BlockTerm::new(ShiftedSquare { target: vec![1.0] }).with_exact_min(SeparableYMin),
        BlockTerm::new(ShiftedSquare { target: vec![-1.0] }).with_exact_min(SeparableZMin),
    ];
    let minimizer =
        BlockVector::new(vec![("y", vec![1.0 / 3.0]), ("z", vec![-1.0 / 3.0])]).expect("finite");
    Problem::new("separable_quadratic", layout, Arc::new(SeparableCoupling), terms)
        .and_then(|p| p.with_known_minimizer(minimizer))
        .expect("static layout")
}

// ---------------------------------------------------------------------------
// Sparse + group-sparse least squares: l1*|y|_1 + |Ay - z|^2 + l2*|z|_{1,2}
// ---------------------------------------------------------------------------

/// Data of the sparse / group-sparse coupled least-squares instance.
#[derive(Debug, Clone)]
pub struct SparseGroupInstance {
    pub a: DMatrix<f64>,
    pub groups: GroupPartition,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `2 * lambda_max(A^T A)`, the partial Lipschitz constant of block `y`.
    pub lipschitz_y: f64,
}

impl SparseGroupInstance {
    /// Random instance: `A` is `n2 x n1` with i.i.d. standard normal entries.
    pub fn random(
        n1: usize,
        n2: usize,
        groups: GroupPartition,
        seed: u64,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(BamError::Parameter("n1 and n2 must be at least 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let a = DMatrix::from_fn(n2, n1, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_matrix(a, groups, lambda1, lambda2, seed)
    }

    pub fn from_matrix(
        a: DMatrix<f64>,
        groups: GroupPartition,
        lambda1: f64,
        lambda2: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(lambda1 > 0.0) || !(lambda2 > 0.0) {
            return Err(BamError::Parameter(format!(
                "lambda1 and lambda2 must be positive, got {lambda1} and {lambda2}"
            )));
        }
        if groups.dim() != a.nrows() {
            return Err(BamError::InvalidInput(format!(
                "groups cover {} indices but z has dimension {}",
                groups.dim(),
                a.nrows()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(BamError::InvalidInput("matrix has non-finite entries".into()));
        }
        let lmax = power_iteration_ata(&a, seed, 1e-8, 1000);
        Ok(Self { a, groups, lambda1, lambda2, lipschitz_y: 2.0 * lmax })
    }

    /// Residual `Ay - z`.
    pub fn residual(&self, y: &[f64], z: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(y) - DVector::from_column_slice(z)
    }

    pub fn problem(&self) -> Problem {
        let coupling = Arc::new(SparseGroupCoupling { inst: self.clone() });
        let layout = vec![("y".to_string(), self.a.ncols()), ("z".to_string(), self.a.nrows())];
        let terms = vec![
            BlockTerm::new(L1Norm { lambda: self.lambda1 }),
            BlockTerm::new(GroupL1Norm { lambda: self.lambda2, groups: self.groups.clone() })
                .with_exact_min(SparseGroupZMin { inst: self.clone() }),
        ];
        Problem::new("sparse_group", layout, coupling, terms).expect("dimensions validated")
    }

    /// Writes `A` as CSV, one matrix row per line.
    pub fn write_matrix_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| BamError::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
        for r in 0..self.a.nrows() {
            w.write_record(self.a.row(r).iter().map(|v| format!("{v:e}"))).map_err(io)?;
        }
        w.flush().map_err(|e| BamError::InvalidInput(format!("{}: {e}", path.display())))
    }
}

/// Reads a dense matrix written by [`SparseGroupInstance::write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let err = |msg: String| BamError::InvalidInput(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| err(format!("'{s}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(err("matrix must be non-empty and rectangular".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Build the sparse / group-sparse instance with a random `A`.
pub fn build_sparse_group_instance(
    n1: usize,
    n2: usize,
    groups: GroupPartition,
    seed: u64,
    lambda1: f64,
    lambda2: f64,
) -> Result<Problem> {
    Ok(SparseGroupInstance::random(n1, n2, groups, seed, lambda1, lambda2)?.problem())
}

/// Largest eigenvalue of `A^T A` by power iteration on the Rayleigh quotient.
pub fn power_iteration_ata(a: &DMatrix<f64>, seed: u64, rel_tol: f64, max_iter: usize) -> f64 {
    let mut rng = rng::derived(seed, 0x5057);
    let mut v = DVector::from_fn(a.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    v /= n;
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = a.tr_mul(&(a * &v));
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        let converged = (next - lambda).abs() <= rel_tol * next.abs();
        lambda = next;
        if converged {
            break;
        }
    }
    lambda
}

struct SparseGroupCoupling {
    inst: SparseGroupInstance,
}

impl Coupling for SparseGroupCoupling {
    fn value(&self, x: &BlockVector) -> f64 {
        self.inst.residual(x.block(0), x.block(1)).norm_squared()
    }
    fn partial_grad(&self, x: &BlockVector, block: usize) -> Vec<f64> {
        let r = self.inst.residual(x.block(0), x.block(1));
        if block == 0 {
            (self.inst.a.tr_mul(&r) * 2.0).as_slice().to_vec()
        } else {
            (r * -2.0).as_slice().to_vec()
        }
    }
    fn partial_lipschitz(&self, _x: &BlockVector, block: usize) -> Option<f64> {
        Some(if block == 0 { self.inst.lipschitz_y } else { 2.0 })
    }
    fn cross_lipschitz(&self) -> Option<f64> {
        // 2 * sigma_max(A) bounds both cross maps 2A and 2A^T.
        Some((2.0 * self.inst.lipschitz_y).sqrt())
    }
}

struct SparseGroupZMin {
    inst: SparseGroupInstance,
}

impl ExactBlockMin for SparseGroupZMin {
    fn argmin(&self, x: &BlockVector, c: f64, anchor: &[f64]) -> Vec<f64> {
        // |Ay - z|^2 + (c/2)|z - a|^2 = (1 + c/2)|z - w|^2 + const,
        // w = (2Ay + c a) / (2 + c); then shrink with lambda2 / (2 + c).
        let ay = &self.inst.a * DVector::from_column_slice(x.block(0));
        let w: Vec<f64> =
            ay.iter().zip(anchor).map(|(ayi, ai)| (2.0 * ayi + c * ai) / (2.0 + c)).collect();
        group_soft_threshold(&w, &self.inst.groups, self.inst.lambda2 / (2.0 + c))
            .expect("positive threshold")
    }
}

// ---------------------------------------------------------------------------
// Multi-block quadratic: H = sum_{i<j} c_ij (x_i - x_j)^2, f_i = (x_i - t_i)^2
// ---------------------------------------------------------------------------

struct ChainCoupling {
    coeffs: Arc<Vec<Vec<f64>>>,
}

impl Coupling for ChainCoupling {
    fn value(&self, x: &BlockVector) -> f64 {
        let n = self.coeffs.len();
        let mut h = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = x.block(i)[0] - x.block(j)[0];
                h += self.coeffs[i][j] * d * d;
            }
        }
        h
    }
    fn partial_grad(&self, x: &BlockVector, block: usize) -> Vec<f64> {
        let xi = x.block(block)[0];
        let g = (0..self.coeffs.len())
            .filter(|&j| j != block)
            .map(|j| 2.0 * self.coeffs[block][j] * (xi - x.block(j)[0]))
            .sum();
        vec![g]
    }
    fn partial_lipschitz(&self, _x: &BlockVector, block: usize) -> Option<f64> {
        Some(2.0 * self.coeffs[block].iter().sum::<f64>())
    }
    fn cross_lipschitz(&self) -> Option<f64> {
        self.coeffs.iter().map(|row| 2.0 * slice_norm_sq(row).sqrt()).reduce(f64::max)
    }
}

struct ChainBlockMin {
    block: usize,
    target: f64,
    coeffs: Arc<Vec<Vec<f64>>>,
}

impl ExactBlockMin for ChainBlockMin {
    fn argmin(&self, x: &BlockVector, c: f64, anchor: &[f64]) -> Vec<f64> {
        let row = &self.coeffs[self.block];
        let (mut pull, mut weight) = (0.0, 0.0);
        for (j, &cij) in row.iter().enumerate() {
            if j != self.block {
                pull += cij * x.block(j)[0];
                weight += cij;
            }
        }
        vec![(2.0 * self.target + 2.0 * pull + c * anchor[0]) / (2.0 + 2.0 * weight + c)]
    }
}

/// Multi-block quadratic with explicit symmetric coefficients (zero diagonal)
/// and per-block targets. Blocks are scalars named `x1`, `x2`, ...
pub fn build_multiblock_quadratic_with(coeffs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Problem> {
    let n = targets.len();
    if n < 3 {
        return Err(BamError::Parameter(format!("need at least 3 blocks, got {n}")));
    }
    if coeffs.len() != n || coeffs.iter().any(|r| r.len() != n) {
        return Err(BamError::Shape("coefficient matrix must be n x n".into()));
    }
    for i in 0..n {
        for j in 0..n {
            let (c, ct) = (coeffs[i][j], coeffs[j][i]);
            if i != j && (!(c > 0.0) || c != ct) {
                return Err(BamError::Parameter("coefficients must be positive and symmetric".into()));
            }
        }
    }
    let coeffs: Arc<Vec<Vec<f64>>> = Arc::new(
        coeffs
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r[i] = 0.0;
                r
            })
            .collect(),
    );

    // (I + Laplacian(C)) x = t
    let system = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 + coeffs[i].iter().sum::<f64>()
        } else {
            -coeffs[i][j]
        }
    });
    let solution = system
        .cholesky()
        .ok_or_else(|| BamError::Evaluation("stationarity system is not positive definite".into()))?
        .solve(&DVector::from_column_slice(&targets));

    let layout: Vec<(String, usize)> = (1..=n).map(|i| (format!("x{i}"), 1)).collect();
    let terms = (0..n)
        .map(|i| {
            BlockTerm::new(ShiftedSquare { target: vec![targets[i]] }).with_exact_min(
                ChainBlockMin { block: i, target: targets[i], coeffs: Arc::clone(&coeffs) },
            )
        })
        .collect();
    let minimizer =
        BlockVector::new(layout.iter().zip(solution.iter()).map(|((id, _), v)| (id.clone(), vec![*v])).collect())?;
    Problem::new("multiblock_quadratic", layout, Arc::new(ChainCoupling { coeffs }), terms)?
        .with_known_minimizer(minimizer)
}

/// Seeded multi-block quadratic: `c_ij ~ U[0.1, 1]`, `t_i ~ U[-1, 1]`.
pub fn build_multiblock_quadratic(n_blocks: usize, seed: u64) -> Result<Problem> {
    if n_blocks < 3 {
        return Err(BamError::Parameter(format!("need at least 3 blocks, got {n_blocks}")));
    }
    let mut rng = rng::seeded(seed);
    let mut coeffs = vec![vec![0.0; n_blocks]; n_blocks];
    for i in 0..n_blocks {
        for j in i + 1..n_blocks {
            let c = rng.random_range(0.1..=1.0);
            coeffs[i][j] = c;
            coeffs[j][i] = c;
        }
    }
    let targets = (0..n_blocks).map(|_| rng.random_range(-1.0..=1.0)).collect();
    build_multiblock_quadratic_with(coeffs, targets)
}

// ---------------------------------------------------------------------------
// Empirical Lipschitz estimates
// ---------------------------------------------------------------------------

const LIPSCHITZ_SAFETY: f64 = 1.5;
const MAX_DEGENERATE: usize = 100;

/// Empirical partial Lipschitz constant of `grad_i H` around `x`.
///
/// Samples pairs in the unit box around `x_i`, other blocks fixed, and
/// returns `1.5 * max |d grad| / |d x_i|`, capped by the declared constant.
pub fn estimate_partial_lipschitz(
    p: &Problem,
    x: &BlockVector,
    block: usize,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    estimate_partial_lipschitz_in_box(p, x, block, probes, seed, 1.0)
}

pub fn estimate_partial_lipschitz_in_box(
    p: &Problem,
    x: &BlockVector,
    block: usize,
    probes: usize,
    seed: u64,
    radius: f64,
) -> Result<f64> {
    p.check_structure(x)?;
    if probes < 2 {
        return Err(BamError::Parameter("need at least 2 probes".into()));
    }
    if block >= p.num_blocks() {
        return Err(BamError::Shape(format!("no block {block}")));
    }
    let mut rng = rng::derived(seed, block as u64 + 1);
    let center = x.block(block);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        center.iter().map(|c| c + radius * rng.random_range(-1.0..=1.0)).collect()
    };
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut done = 0;
    while done < probes {
        let u = sample(&mut rng);
        let w = sample(&mut rng);
        let dx = slice_dist_sq(&u, &w).sqrt();
        if !(dx > 0.0) {
            failures += 1;
            if failures >= MAX_DEGENERATE {
                return Err(BamError::Estimation(format!(
                    "{failures} degenerate probe pairs for block {block}"
                )));
            }
            continue;
        }
        let gu = p.coupling().partial_grad(&x.with_block(block, u)?, block);
        let gw = p.coupling().partial_grad(&x.with_block(block, w)?, block);
        worst = worst.max(slice_dist_sq(&gu, &gw).sqrt() / dx);
        done += 1;
    }
    let estimate = LIPSCHITZ_SAFETY * worst;
    Ok(match p.partial_lipschitz(x, block) {
        Some(declared) => estimate.min(declared),
        None => estimate,
    })
}

/// Empirical cross-block constant: `1.5 * max_i |d grad_i H| / |d x_{-i}|`
/// over seeded perturbations of all blocks other than `i`.
pub fn estimate_cross_lipschitz(p: &Problem, x: &BlockVector, probes: usize, seed: u64) -> Result<f64> {
    p.check_structure(x)?;
    if probes < 1 {
        return Err(BamError::Parameter("need at least 1 probe".into()));
    }
    let mut rng = rng::derived(seed, 0xC805);
    let mut worst: f64 = 0.0;
    for i in 0..p.num_blocks() {
        let base = p.coupling().partial_grad(x, i);
        for _ in 0..probes {
            let mut moved = x.clone();
            let mut dx2 = 0.0;
            for j in (0..p.num_blocks()).filter(|&j| j != i) {
                let delta: Vec<f64> = x.block(j).iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
                dx2 += slice_norm_sq(&delta);
                let shifted = x.block(j).iter().zip(&delta).map(|(a, d)| a + d).collect();
                moved = moved.with_block(j, shifted)?;
            }
            if dx2 == 0.0 {
                continue;
            }
            let g = p.coupling().partial_grad(&moved, i);
            worst = worst.max(slice_dist_sq(&g, &base).sqrt() / dx2.sqrt());
        }
    }
    Ok(LIPSCHITZ_SAFETY * worst)
}

/// Cross-block constant: declared when available, otherwise estimated.
pub fn cross_lipschitz(p: &Problem, x: &BlockVector, seed: u64) -> Result<f64> {
    match p.coupling().cross_lipschitz() {
        Some(l) => Ok(l),
        None => estimate_cross_lipschitz(p, x, 20, seed),
    }
}

/// Full gradient of the smooth part `H`, blockwise.
pub fn coupling_gradient(p: &Problem, x: &BlockVector) -> Vec<Vec<f64>> {
    (0..p.num_blocks()).map(|i| p.coupling().partial_grad(x, i)).collect()
}
