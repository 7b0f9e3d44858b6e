//! Bregman generators and distances.
//!
//! `B_phi(x, y) = phi(x) - phi(y) - <grad phi(y), x - y>` for a differentiable
//! convex generator `phi`. Three generator families cover the classical
//! alternating schemes:
//!
//! | generator                         | scheme |
//! |-----------------------------------|--------|
//! | `0`                               | AM     |
//! | `(alpha/2)|x|^2 - H(x, frozen)`   | PLAM   |
//! | `(alpha/2)|x|^2`                  | AAM    |

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::blockvec::{dot, slice_dist_sq, slice_norm_sq, BlockVector};
use crate::error::{BamError, Result};
use crate::problem::Coupling;
use crate::rng;

/// Default half-width of the probe box used by [`check_generator_convexity`].
pub const DEFAULT_PROBE_RADIUS: f64 = 10.0;

/// Oracle for a differentiable convex function used as a Bregman generator.
///
/// `modulus` and `lipschitz` are declared by whoever builds the generator;
/// [`check_generator_convexity`] validates them empirically.
pub trait BregmanGenerator: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// Declared strong-convexity modulus `nu`:
    /// `<grad(u) - grad(v), u - v> >= nu |u - v|^2`.
    fn modulus(&self) -> f64;

    /// Declared gradient Lipschitz bound; `None` when unbounded.
    fn lipschitz(&self) -> Option<f64>;

    fn label(&self) -> String;

    /// `Some(c)` when `B(u, v) = (c/2)|u - v|^2` identically. Closed-form
    /// block minimizers can only absorb generators of this shape.
    fn isotropic_curvature(&self) -> Option<f64> {
        None
    }

    /// For generators built around the other blocks' values: the frozen
    /// point and the block this generator acts on.
    fn frozen(&self) -> Option<(&BlockVector, usize)> {
        None
    }
}

impl std::fmt::Debug for dyn BregmanGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BregmanGenerator({})", self.label())
    }
}

/// `phi = 0`. Every Bregman distance vanishes.
#[derive(Debug, Clone)]
pub struct ZeroGenerator {
    dim: usize,
}

impl BregmanGenerator for ZeroGenerator {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn modulus(&self) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
    fn label(&self) -> String {
        "zero".into()
    }
    fn isotropic_curvature(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `phi(x) = (alpha/2)|x|^2`.
#[derive(Debug, Clone)]
pub struct AugmentedGenerator {
    alpha: f64,
    dim: usize,
}

impl AugmentedGenerator {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl BregmanGenerator for AugmentedGenerator {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.alpha * slice_norm_sq(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.alpha * v).collect()
    }
    fn modulus(&self) -> f64 {
        self.alpha
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.alpha)
    }
    fn label(&self) -> String {
        format!("aam({})", self.alpha)
    }
    fn isotropic_curvature(&self) -> Option<f64> {
        Some(self.alpha)
    }
}

/// `phi(u) = (alpha/2)|u|^2 - H(frozen with block = u)`.
///
/// Convex whenever `alpha` exceeds the partial Lipschitz constant of
/// `grad_block H`; the subproblem it induces is the linearized proximal step.
#[derive(Clone)]
pub struct LinearizationGenerator {
    alpha: f64,
    partial_lipschitz: f64,
    coupling: Arc<dyn Coupling>,
    frozen: BlockVector,
    block: usize,
}

impl std::fmt::Debug for LinearizationGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearizationGenerator")
            .field("alpha", &self.alpha)
            .field("partial_lipschitz", &self.partial_lipschitz)
            .field("block", &self.block)
            .finish_non_exhaustive()
    }
}

impl LinearizationGenerator {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl BregmanGenerator for LinearizationGenerator {
    fn dim(&self) -> usize {
        self.frozen.block(self.block).len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        match self.frozen.with_block(self.block, x.to_vec()) {
            Ok(point) => 0.5 * self.alpha * slice_norm_sq(x) - self.coupling.value(&point),
            Err(_) => f64::NAN,
        }
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self.frozen.with_block(self.block, x.to_vec()) {
            Ok(point) => {
                let g = self.coupling.partial_grad(&point, self.block);
                x.iter().zip(g).map(|(xi, gi)| self.alpha * xi - gi).collect()
            }
            Err(_) => vec![f64::NAN; x.len()],
        }
    }
    fn modulus(&self) -> f64 {
        self.alpha - self.partial_lipschitz
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.alpha + self.partial_lipschitz)
    }
    fn label(&self) -> String {
        format!("plam({}, frozen block {})", self.alpha, self.block)
    }
    fn frozen(&self) -> Option<(&BlockVector, usize)> {
        Some((&self.frozen, self.block))
    }
}

/// `phi(x) = x^T M x` for a symmetric positive semidefinite `M`.
#[derive(Debug, Clone)]
pub struct QuadraticFormGenerator {
    m: DMatrix<f64>,
    nu: f64,
    lip: f64,
}

impl QuadraticFormGenerator {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(BamError::Shape("quadratic form needs a non-empty square matrix".into()));
        }
        if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
            return Err(BamError::Parameter("quadratic form matrix must be symmetric".into()));
        }
        let eig = m.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo < -1e-12 * (1.0 + hi.abs()) {
            return Err(BamError::Parameter(format!(
                "quadratic form matrix is not positive semidefinite (min eigenvalue {lo})"
            )));
        }
        Ok(Self { m, nu: 2.0 * lo.max(0.0), lip: 2.0 * hi })
    }

    /// `phi(x) = |x|^2`.
    pub fn squared_norm(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is PSD")
    }
}

impl BregmanGenerator for QuadraticFormGenerator {
    fn dim(&self) -> usize {
        self.m.nrows()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        v.dot(&(&self.m * &v))
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x);
        (&self.m * v * 2.0).as_slice().to_vec()
    }
    fn modulus(&self) -> f64 {
        self.nu
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lip)
    }
    fn label(&self) -> String {
        format!("quadratic-form({}x{})", self.m.nrows(), self.m.ncols())
    }
}

pub fn make_zero_generator(dim: usize) -> Result<ZeroGenerator> {
    if dim == 0 {
        return Err(BamError::Parameter("generator dimension must be at least 1".into()));
    }
    Ok(ZeroGenerator { dim })
}

pub fn make_augmented_generator(alpha: f64, dim: usize) -> Result<AugmentedGenerator> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(BamError::Parameter(format!("augmented generator needs alpha > 0, got {alpha}")));
    }
    if dim == 0 {
        return Err(BamError::Parameter("generator dimension must be at least 1".into()));
    }
    Ok(AugmentedGenerator { alpha, dim })
}

/// Builds the linearization generator for `block`, freezing every other
/// block at its value in `frozen`. Requires `alpha > partial_lipschitz` so
/// that the generator is convex.
pub fn make_linearization_generator(
    alpha: f64,
    coupling: Arc<dyn Coupling>,
    frozen: BlockVector,
    block: usize,
    partial_lipschitz: f64,
) -> Result<LinearizationGenerator> {
    if block >= frozen.num_blocks() {
        return Err(BamError::Shape(format!("no block {block} in the frozen point")));
    }
    if !(partial_lipschitz >= 0.0) {
        return Err(BamError::Parameter(format!(
            "partial Lipschitz constant must be nonnegative, got {partial_lipschitz}"
        )));
    }
    if !(alpha > partial_lipschitz) || !alpha.is_finite() {
        return Err(BamError::Parameter(format!(
            "linearization generator is convex only for alpha > L_partial; got alpha = {alpha}, L_partial = {partial_lipschitz}"
        )));
    }
    Ok(LinearizationGenerator { alpha, partial_lipschitz, coupling, frozen, block })
}

/// `B_phi(x, y) = phi(x) - phi(y) - <grad phi(y), x - y>`.
pub fn bregman_distance(gen: &dyn BregmanGenerator, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != gen.dim() || y.len() != gen.dim() {
        return Err(BamError::Shape(format!(
            "generator '{}' has dimension {}, got points of dimension {} and {}",
            gen.label(),
            gen.dim(),
            x.len(),
            y.len()
        )));
    }
    if x == y {
        return Ok(0.0);
    }
    let (px, py) = (gen.value(x), gen.value(y));
    let gy = gen.gradient(y);
    if !px.is_finite() || !py.is_finite() || gy.iter().any(|v| !v.is_finite()) {
        return Err(BamError::Evaluation(format!("generator '{}' returned non-finite output", gen.label())));
    }
    let lin: f64 = gy.iter().zip(x.iter().zip(y)).map(|(g, (a, b))| g * (a - b)).sum();
    Ok(px - py - lin)
}

/// Outcome of an empirical monotonicity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub label: String,
    /// Smallest `<grad(u) - grad(v), u - v> / |u - v|^2` observed.
    pub min_ratio: f64,
    pub declared_modulus: f64,
    pub probes: usize,
    pub pass: bool,
}

/// Probes random pairs in `[-radius, radius]^d` and checks the declared
/// strong-convexity modulus against the observed monotonicity ratio.
pub fn check_generator_convexity(
    gen: &dyn BregmanGenerator,
    probes: usize,
    seed: u64,
    radius: f64,
) -> Result<ConvexityReport> {
    if probes == 0 {
        return Err(BamError::Parameter("need at least one probe".into()));
    }
    if !(radius > 0.0) {
        return Err(BamError::Parameter(format!("probe radius must be positive, got {radius}")));
    }
    let mut rng = rng::seeded(seed);
    let d = gen.dim();
    let mut min_ratio = f64::INFINITY;
    let mut done = 0;
    while done < probes {
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..=radius)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..=radius)).collect();
        let dx2 = slice_dist_sq(&u, &v);
        if dx2 == 0.0 {
            continue;
        }
        let (gu, gv) = (gen.gradient(&u), gen.gradient(&v));
        if gu.iter().chain(&gv).any(|g| !g.is_finite()) {
            return Err(BamError::Evaluation(format!("generator '{}' returned non-finite gradient", gen.label())));
        }
        let dg: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        min_ratio = min_ratio.min(dot(&dg, &dx) / dx2);
        done += 1;
    }
    let nu = gen.modulus();
    Ok(ConvexityReport {
        label: gen.label(),
        min_ratio,
        declared_modulus: nu,
        probes,
        pass: min_ratio >= nu - 1e-8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_separable_quadratic, SparseGroupInstance};
    use crate::prox::GroupPartition;
    use proptest::prelude::*;
    use rand::Rng;

    /// `H(y, z) = (y - z)^2` as a standalone coupling for generator tests.
    fn square_gap() -> Arc<dyn Coupling> {
        Arc::clone(build_separable_quadratic().coupling())
    }

    fn yz(y: f64, z: f64) -> BlockVector {
        BlockVector::new(vec![("y", vec![y]), ("z", vec![z])]).unwrap()
    }

    #[test]
    fn squared_norm_distance() {
        let g = QuadraticFormGenerator::squared_norm(2);
        assert_eq!(bregman_distance(&g, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(bregman_distance(&g, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_form_distance() {
        let g = QuadraticFormGenerator::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])))
            .unwrap();
        assert_eq!(bregman_distance(&g, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(g.modulus(), 4.0);
        assert_eq!(g.lipschitz(), Some(6.0));
        assert!(QuadraticFormGenerator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn zero_generator() {
        let g = make_zero_generator(1).unwrap();
        assert_eq!(bregman_distance(&g, &[5.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(g.modulus(), 0.0);
        assert_eq!(g.lipschitz(), Some(0.0));
        assert!(make_zero_generator(0).is_err());
    }

    #[test]
    fn augmented_generator() {
        let g = make_augmented_generator(2.0, 2).unwrap();
        // (alpha/2)|x - y|^2 = (2/2) * 1
        assert_eq!(bregman_distance(&g, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let g1 = make_augmented_generator(1.0, 2).unwrap();
        assert_eq!(bregman_distance(&g1, &[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        let (u, v) = ([1.5, -2.0], [0.25, 3.0]);
        let dg: Vec<f64> = g.gradient(&u).iter().zip(g.gradient(&v)).map(|(a, b)| a - b).collect();
        let dx = [u[0] - v[0], u[1] - v[1]];
        assert_eq!(dot(&dg, &dx), 2.0 * slice_norm_sq(&dx));
        assert!(matches!(make_augmented_generator(0.0, 1), Err(BamError::Parameter(_))));
        assert!(make_augmented_generator(-1.0, 1).is_err());
    }

    #[test]
    fn linearization_generator_on_square_gap() {
        // H = (y - z)^2, z frozen at 0, alpha = 3, L = 2: B(y, y') = (1/2)(y - y')^2
        let g = make_linearization_generator(3.0, square_gap(), yz(0.0, 0.0), 0, 2.0).unwrap();
        for (a, b) in [(1.0, 0.0), (0.7, -1.3), (-2.0, 4.0)] {
            let expected = 0.5 * (a - b) * (a - b);
            assert!((bregman_distance(&g, &[a], &[b]).unwrap() - expected).abs() < 1e-12);
        }
        assert_eq!(bregman_distance(&g, &[0.4], &[0.4]).unwrap(), 0.0);
        assert_eq!(g.modulus(), 1.0);
        assert_eq!(g.lipschitz(), Some(5.0));
        let rep = check_generator_convexity(&g, 200, 1, DEFAULT_PROBE_RADIUS).unwrap();
        assert!(rep.pass && rep.min_ratio >= 1.0 - 1e-8);
    }

    #[test]
    fn linearization_rejects_small_alpha() {
        let err = make_linearization_generator(2.0, square_gap(), yz(0.0, 0.0), 0, 2.0).unwrap_err();
        match err {
            BamError::Parameter(msg) => assert!(msg.contains("alpha > L_partial")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convexity_probe_examples() {
        let aug = make_augmented_generator(1.0, 3).unwrap();
        let rep = check_generator_convexity(&aug, 100, 0, DEFAULT_PROBE_RADIUS).unwrap();
        assert!(rep.pass);
        assert!((rep.min_ratio - 1.0).abs() < 1e-12);

        let zero = make_zero_generator(3).unwrap();
        let rep = check_generator_convexity(&zero, 100, 0, DEFAULT_PROBE_RADIUS).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.min_ratio, 0.0);

        let inst = SparseGroupInstance::random(50, 40, GroupPartition::contiguous(40, 5).unwrap(), 7, 0.1, 0.1)
            .unwrap();
        let p = inst.problem();
        let l1 = inst.lipschitz_y;
        let lin = make_linearization_generator(1.1 * l1, Arc::clone(p.coupling()), p.zeros(), 0, l1).unwrap();
        let rep = check_generator_convexity(&lin, 200, 2, DEFAULT_PROBE_RADIUS).unwrap();
        assert!(rep.pass);
        assert!(rep.min_ratio >= 0.1 * l1 - 1e-8);
    }

    #[test]
    fn overclaimed_modulus_fails_probe() {
        struct Liar;
        impl BregmanGenerator for Liar {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, x: &[f64]) -> f64 {
                0.5 * slice_norm_sq(x)
            }
            fn gradient(&self, x: &[f64]) -> Vec<f64> {
                x.to_vec()
            }
            fn modulus(&self) -> f64 {
                2.0
            }
            fn lipschitz(&self) -> Option<f64> {
                Some(2.0)
            }
            fn label(&self) -> String {
                "liar".into()
            }
        }
        assert!(!check_generator_convexity(&Liar, 10, 0, 1.0).unwrap().pass);
    }

    #[test]
    fn distance_shape_error() {
        let g = make_augmented_generator(1.0, 2).unwrap();
        assert!(matches!(bregman_distance(&g, &[1.0], &[0.0, 0.0]), Err(BamError::Shape(_))));
    }

    fn generators() -> Vec<Box<dyn BregmanGenerator>> {
        let inst = SparseGroupInstance::random(6, 4, GroupPartition::contiguous(4, 2).unwrap(), 3, 0.1, 0.1)
            .unwrap();
        let p = inst.problem();
        let frozen = p.zeros().with_block(1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        vec![
            Box::new(make_zero_generator(6).unwrap()),
            Box::new(make_augmented_generator(0.8, 6).unwrap()),
            Box::new(
                QuadraticFormGenerator::new(DMatrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { 0.3 }))
                    .unwrap(),
            ),
            Box::new(
                make_linearization_generator(
                    1.3 * inst.lipschitz_y,
                    Arc::clone(p.coupling()),
                    frozen,
                    0,
                    inst.lipschitz_y,
                )
                .unwrap(),
            ),
        ]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(9);
        for g in generators() {
            for _ in 0..5 {
                let x: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
                let dir: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
                let h = 1e-5;
                let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
                let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
                let fd = (g.value(&xp) - g.value(&xm)) / (2.0 * h);
                let an = dot(&g.gradient(&x), &dir);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{}: {fd} vs {an}", g.label());
            }
            if let Some(l) = g.lipschitz() {
                assert!(g.modulus() <= l);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_properties(
            x in prop::collection::vec(-5.0f64..5.0, 6),
            y in prop::collection::vec(-5.0f64..5.0, 6),
            w in prop::collection::vec(-5.0f64..5.0, 6),
            t in 0.0f64..1.0,
        ) {
            for g in generators() {
                let g = g.as_ref();
                let b = bregman_distance(g, &x, &y).unwrap();
                prop_assert!(b >= -1e-12 * (1.0 + g.value(&x).abs()));
                prop_assert_eq!(bregman_distance(g, &x, &x).unwrap(), 0.0);
                prop_assert!(b >= 0.5 * g.modulus() * slice_dist_sq(&x, &y) - 1e-10 * (1.0 + g.value(&x).abs()));
                let mix: Vec<f64> = x.iter().zip(&w).map(|(a, c)| t * a + (1.0 - t) * c).collect();
                let lhs = bregman_distance(g, &mix, &y).unwrap();
                let rhs = t * b + (1.0 - t) * bregman_distance(g, &w, &y).unwrap();
                prop_assert!(lhs <= rhs + 1e-10 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn linearized_subproblem_matches_prox_linear_model(
            xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 3),
            anchor in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let inst = SparseGroupInstance::random(6, 4, GroupPartition::contiguous(4, 2).unwrap(), 3, 0.1, 0.1).unwrap();
            let p = inst.problem();
            let frozen = p.zeros().with_block(0, anchor.clone()).unwrap().with_block(1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
            let alpha = 1.2 * inst.lipschitz_y;
            let g = make_linearization_generator(alpha, Arc::clone(p.coupling()), frozen.clone(), 0, inst.lipschitz_y).unwrap();
            let grad_anchor = p.coupling().partial_grad(&frozen, 0);
            let gap = |x: &[f64]| {
                let h = p.coupling().value(&frozen.with_block(0, x.to_vec()).unwrap());
                let model: f64 = dot(&grad_anchor, &x.iter().zip(&anchor).map(|(a, b)| a - b).collect::<Vec<_>>())
                    + 0.5 * alpha * slice_dist_sq(x, &anchor);
                h + bregman_distance(&g, x, &anchor).unwrap() - model
            };
            let base = gap(&anchor);
            for x in &xs {
                let d = gap(x) - base;
                prop_assert!(d.abs() <= 1e-10 * (1.0 + alpha * slice_norm_sq(x)), "{}", d);
            }
        }
    }
}
