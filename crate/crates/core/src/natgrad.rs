//! Gram systems, regularized pseudo-inverses, tangent-space projections and
//! the additive retraction.
//!
//! A [`GramSystem`] holds the (metric-weighted) Gram matrix of a generating
//! system together with its eigendecomposition, computed once at assembly.
//! The same decomposition serves the gradient solve, the momentum projection
//! and any diagnostics within one iteration.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{NatmoError, Result};
use crate::models::{ParameterVector, TangentFeatures};
use crate::quadrature::QuadratureSet;

/// Relative threshold below which negative eigenvalues are plain roundoff.
const NEGATIVE_EIG_TOL: f64 = 1e-10;

/// Regularization of `G^+`. Cutoff and flooring thresholds are relative to
/// the largest eigenvalue; the Tikhonov shift is absolute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegPolicy {
    /// Drop eigenpairs with `lambda <= eps_rel * lambda_max`.
    Cutoff { eps_rel: f64 },
    /// Solve `(G + eps I) c = rhs`.
    Shift { eps: f64 },
    /// Cutoff, plus `eps^-1 u u^T` on the discarded eigenvectors.
    Flooring { eps_rel: f64 },
}

impl Default for RegPolicy {
    fn default() -> Self {
        RegPolicy::Flooring { eps_rel: 1e-10 }
    }
}

impl RegPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RegPolicy::Cutoff { eps_rel } | RegPolicy::Flooring { eps_rel } => eps_rel > 0.0 && eps_rel.is_finite(),
            RegPolicy::Shift { eps } => eps > 0.0 && eps.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(NatmoError::invalid(format!("regularization threshold must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct GramSystem {
    gram: DMatrix<f64>,
    /// Descending, negative roundoff clamped to zero.
    eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors as columns, same order as `eigenvalues`.
    eigenvectors: DMatrix<f64>,
    reg: RegPolicy,
}

impl GramSystem {
    /// Decomposes a symmetric positive semi-definite matrix.
    pub fn from_matrix(gram: DMatrix<f64>, reg: RegPolicy) -> Result<Self> {
        reg.validate()?;
        if !gram.is_square() {
            return Err(NatmoError::shape("Gram matrix must be square"));
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(NatmoError::NonFinite("Gram matrix entry".into()));
        }
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = SymmetricEigen::new(gram.clone());
        let d = gram.nrows();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let lambda_max = order.first().map_or(0.0, |i| eig.eigenvalues[*i].max(0.0));
        let mut eigenvalues = DVector::zeros(d);
        let mut eigenvectors = DMatrix::zeros(d, d);
        for (dst, &src) in order.iter().enumerate() {
            let lam = eig.eigenvalues[src];
            if lam < -NEGATIVE_EIG_TOL * lambda_max {
                log::warn!("Gram eigenvalue {lam:e} below roundoff tolerance (lambda_max = {lambda_max:e})");
            }
            eigenvalues[dst] = lam.max(0.0);
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(Self {
            gram,
            eigenvalues,
            eigenvectors,
            reg,
        })
    }

    /// `G_{ii'} = sum_j w_j h_j psi[j, i] psi[j, i']`.
    pub fn assemble(psi: &TangentFeatures, q: &QuadratureSet, metric: Option<&[f64]>, reg: RegPolicy) -> Result<Self> {
        q.check_len(psi.nrows(), "tangent features")?;
        let wh = q.metric_weights(metric)?;
        let mut scaled = psi.clone();
        for (j, s) in wh.iter().enumerate() {
            let r = s.sqrt();
            scaled.row_mut(j).scale_mut(r);
        }
        Self::from_matrix(scaled.tr_mul(&scaled), reg)
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn reg(&self) -> RegPolicy {
        self.reg
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn lambda_max(&self) -> f64 {
        if self.eigenvalues.is_empty() {
            0.0
        } else {
            self.eigenvalues[0]
        }
    }

    /// Same decomposition under another regularization.
    pub fn with_policy(&self, reg: RegPolicy) -> Result<Self> {
        reg.validate()?;
        Ok(Self { reg, ..self.clone() })
    }

    /// Spectral multiplier applied to the coordinate along eigenvector `i`.
    fn multiplier(&self, lam: f64) -> f64 {
        let lmax = self.lambda_max();
        match self.reg {
            RegPolicy::Shift { eps } => 1.0 / (lam + eps),
            _ if lmax == 0.0 => 0.0,
            RegPolicy::Cutoff { eps_rel } => {
                if lam > eps_rel * lmax {
                    1.0 / lam
                } else {
                    0.0
                }
            }
            RegPolicy::Flooring { eps_rel } => 1.0 / lam.max(eps_rel * lmax),
        }
    }

    /// Regularized `G^+ rhs` through the cached decomposition.
    pub fn apply_pinv(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(NatmoError::shape(format!(
                "right-hand side has length {}, Gram is {}x{}",
                rhs.len(),
                self.dim(),
                self.dim()
            )));
        }
        let mut coords = self.eigenvectors.tr_mul(rhs);
        for (c, lam) in coords.iter_mut().zip(self.eigenvalues.iter()) {
            *c *= self.multiplier(*lam);
        }
        Ok(&self.eigenvectors * coords)
    }

    /// The regularized pseudo-inverse as a dense matrix (diagnostics only).
    pub fn pinv_matrix(&self) -> DMatrix<f64> {
        let scales = DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|l| self.multiplier(*l)));
        let mut scaled = self.eigenvectors.clone();
        for (i, s) in scales.iter().enumerate() {
            scaled.column_mut(i).scale_mut(*s);
        }
        scaled * self.eigenvectors.transpose()
    }
}

/// Natural-gradient descent direction `-G^+ grad`.
pub fn natural_direction(gs: &GramSystem, grad: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(-gs.apply_pinv(grad)?)
}

/// `sum_j w_j h_j psi[j, .] values_j`, the right-hand side of a projection.
pub fn weighted_rhs(psi: &TangentFeatures, values: &[f64], q: &QuadratureSet, metric: Option<&[f64]>) -> Result<DVector<f64>> {
    q.check_len(psi.nrows(), "tangent features")?;
    q.check_len(values.len(), "projection target")?;
    let wh = q.metric_weights(metric)?;
    let scaled = DVector::from_iterator(values.len(), wh.iter().zip(values).map(|(w, v)| w * v));
    Ok(psi.tr_mul(&scaled))
}

/// Coefficients `c` minimizing `sum_j w_j h_j (target_j - (psi c)_j)^2`, solved
/// through the Gram system so the regularization matches the gradient solve.
pub fn project_onto_tangent(
    gs: &GramSystem,
    psi: &TangentFeatures,
    target: &[f64],
    q: &QuadratureSet,
    metric: Option<&[f64]>,
) -> Result<DVector<f64>> {
    gs.apply_pinv(&weighted_rhs(psi, target, q, metric)?)
}

/// `(psi_k, psi_km1^T p)_X` without forming the cross-Gram matrix.
pub fn cross_apply(
    psi_k: &TangentFeatures,
    psi_km1: &TangentFeatures,
    q: &QuadratureSet,
    metric: Option<&[f64]>,
    p_km1: &DVector<f64>,
) -> Result<DVector<f64>> {
    if psi_k.shape() != psi_km1.shape() {
        return Err(NatmoError::shape(format!(
            "tangent features {:?} and {:?} do not share a quadrature",
            psi_k.shape(),
            psi_km1.shape()
        )));
    }
    if p_km1.len() != psi_km1.ncols() {
        return Err(NatmoError::shape("momentum length differs from parameter count"));
    }
    let transported = psi_km1 * p_km1;
    weighted_rhs(psi_k, transported.as_slice(), q, metric)
}

/// Dense cross-Gram `(psi_k[., i], psi_km1[., i'])_X`.
pub fn cross_gram(
    psi_k: &TangentFeatures,
    psi_km1: &TangentFeatures,
    q: &QuadratureSet,
    metric: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    if psi_k.shape() != psi_km1.shape() {
        return Err(NatmoError::shape("tangent features do not share a quadrature"));
    }
    q.check_len(psi_k.nrows(), "tangent features")?;
    let wh = q.metric_weights(metric)?;
    let mut weighted = psi_km1.clone();
    for (j, w) in wh.iter().enumerate() {
        weighted.row_mut(j).scale_mut(*w);
    }
    Ok(psi_k.tr_mul(&weighted))
}

/// `R(v + psi^T delta) = D(theta + delta)`.
pub fn retract(theta: &ParameterVector, delta: &DVector<f64>) -> Result<ParameterVector> {
    if theta.len() != delta.len() {
        return Err(NatmoError::shape(format!(
            "step has length {}, parameters {}",
            delta.len(),
            theta.len()
        )));
    }
    Ok(theta + delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::inner;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag20() -> GramSystem {
        GramSystem::from_matrix(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0])), RegPolicy::Cutoff { eps_rel: 1e-10 }).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gram_of_one_and_x() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 2).unwrap();
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let gs = GramSystem::assemble(&psi, &q, None, RegPolicy::default()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]);
        assert!((gs.gram() - expect).norm() < 1e-15);
    }

    #[test]
    fn orthonormal_columns_give_identity() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 4).unwrap();
        // Columns orthonormal under weights 1/4: scaled Hadamard rows.
        let psi = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0]);
        let gs = GramSystem::assemble(&psi, &q, None, RegPolicy::default()).unwrap();
        assert!((gs.gram() - DMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 10).unwrap();
        let mut psi = random_matrix(10, 4, 2);
        let c = psi.column(1).into_owned();
        psi.set_column(3, &c);
        let gs = GramSystem::assemble(&psi, &q, None, RegPolicy::default()).unwrap();
        let ev = gs.eigenvalues();
        assert!(ev[3] <= 1e-12 * ev[0]);
        assert!(ev.iter().zip(ev.iter().skip(1)).all(|(a, b)| a >= b));
    }

    #[test]
    fn reconstruction_matches_gram() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 30).unwrap();
        let psi = random_matrix(30, 8, 3);
        let gs = GramSystem::assemble(&psi, &q, Some(&vec![0.5; 30]), RegPolicy::default()).unwrap();
        let u = gs.eigenvectors();
        let recon = u * DMatrix::from_diagonal(gs.eigenvalues()) * u.transpose();
        assert!((recon - gs.gram()).norm() <= 1e-8 * gs.gram().norm());
    }

    #[test]
    fn pinv_examples() {
        let rhs = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(diag20().apply_pinv(&rhs).unwrap().as_slice(), &[0.5, 0.0]);
        let floor = diag20().with_policy(RegPolicy::Flooring { eps_rel: 0.05 }).unwrap();
        let r = floor.apply_pinv(&rhs).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 10.0).abs() < 1e-12);
        let shift = diag20().with_policy(RegPolicy::Shift { eps: 1.0 }).unwrap();
        let r = shift.apply_pinv(&rhs).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert!(diag20().apply_pinv(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn policies_are_validated() {
        assert!(RegPolicy::Cutoff { eps_rel: 0.0 }.validate().is_err());
        assert!(RegPolicy::Shift { eps: -1.0 }.validate().is_err());
        assert!(RegPolicy::Flooring { eps_rel: 1e-10 }.validate().is_ok());
    }

    #[test]
    fn natural_direction_basics() {
        let gs = GramSystem::from_matrix(DMatrix::identity(3, 3), RegPolicy::default()).unwrap();
        let g = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(natural_direction(&gs, &g).unwrap(), -g.clone());
        assert_eq!(natural_direction(&gs, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn singular_gram_gives_finite_directions() {
        let gs = GramSystem::from_matrix(DMatrix::zeros(3, 3), RegPolicy::default()).unwrap();
        let r = gs.apply_pinv(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn flooring_parts_are_orthogonal() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 20).unwrap();
        let mut psi = random_matrix(20, 6, 9);
        let c = psi.column(0) * 2.0 - psi.column(2);
        psi.set_column(5, &c);
        let gs = GramSystem::assemble(&psi, &q, None, RegPolicy::Flooring { eps_rel: 1e-6 }).unwrap();
        let rhs = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.7]);
        let cut = gs.with_policy(RegPolicy::Cutoff { eps_rel: 1e-6 }).unwrap().apply_pinv(&rhs).unwrap();
        let floor_part = gs.apply_pinv(&rhs).unwrap() - &cut;
        assert!(floor_part.norm() > 0.0);
        assert!(cut.dot(&floor_part).abs() <= 1e-10 * cut.norm() * floor_part.norm());
    }

    #[test]
    fn projection_examples() {
        let q = QuadratureSet::uniform_grid(-1.0, 1.0, 25).unwrap();
        let psi = DMatrix::from_fn(25, 3, |j, i| q.point(j)[0].powi(i as i32));
        let gs = GramSystem::assemble(&psi, &q, None, RegPolicy::Cutoff { eps_rel: 1e-12 }).unwrap();
        // In-span target.
        let coef = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let target = &psi * &coef;
        let c = project_onto_tangent(&gs, &psi, target.as_slice(), &q, None).unwrap();
        let resid = (&psi * &c - &target).iter().map(|v| v * v).sum::<f64>() / 25.0;
        assert!(resid.sqrt() <= 1e-8);
        // Idempotence of a generic target.
        let generic: Vec<f64> = q.points().map(|x| (3.0 * x[0]).sin()).collect();
        let c1 = project_onto_tangent(&gs, &psi, &generic, &q, None).unwrap();
        let f1 = &psi * &c1;
        let c2 = project_onto_tangent(&gs, &psi, f1.as_slice(), &q, None).unwrap();
        assert!((&psi * c2 - f1).amax() <= 1e-8);
        // Orthogonal target: x^3 - 0.6 x is orthogonal to 1, x, x^2 only
        // approximately on a grid, so build an exact one by deflation.
        let mut orth = DVector::from_iterator(25, q.points().map(|x| x[0].powi(3)));
        orth -= &psi * project_onto_tangent(&gs, &psi, orth.clone().as_slice(), &q, None).unwrap();
        let c = project_onto_tangent(&gs, &psi, orth.as_slice(), &q, None).unwrap();
        let pc = &psi * c;
        assert!(inner(pc.as_slice(), pc.as_slice(), &q, None).unwrap().sqrt() <= 1e-8);
    }

    #[test]
    fn cross_apply_examples() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 15).unwrap();
        let a = random_matrix(15, 5, 1);
        let b = random_matrix(15, 5, 2);
        let p = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0, 0.0]);
        let gs = GramSystem::assemble(&a, &q, None, RegPolicy::default()).unwrap();
        let same = cross_apply(&a, &a, &q, None, &p).unwrap();
        assert!((same - gs.gram() * &p).amax() <= 1e-12);
        assert_eq!(cross_apply(&a, &b, &q, None, &DVector::zeros(5)).unwrap(), DVector::zeros(5));
        // Dense oracle.
        let dense = cross_gram(&a, &b, &q, None).unwrap() * &p;
        assert!((cross_apply(&a, &b, &q, None, &p).unwrap() - dense).amax() <= 1e-10);
        assert!(cross_apply(&a, &random_matrix(14, 5, 3), &q, None, &p).is_err());
    }

    #[test]
    fn retraction_is_additive() {
        let theta = DVector::from_vec(vec![1.0, 2.0]);
        let d1 = DVector::from_vec(vec![0.5, -1.0]);
        let d2 = DVector::from_vec(vec![0.25, 3.0]);
        assert_eq!(retract(&theta, &DVector::zeros(2)).unwrap(), theta);
        let two = retract(&retract(&theta, &d1).unwrap(), &d2).unwrap();
        assert_eq!(two, retract(&theta, &(&d1 + &d2)).unwrap());
        assert!(retract(&theta, &DVector::zeros(3)).is_err());
    }

    proptest! {
        #[test]
        fn cutoff_pinv_satisfies_penrose(seed in 0u64..500, rank in 1usize..6) {
            let d = 7;
            let factor = random_matrix(d, rank, seed);
            let g = &factor * factor.transpose();
            let gs = GramSystem::from_matrix(g.clone(), RegPolicy::Cutoff { eps_rel: 1e-10 }).unwrap();
            let pinv = gs.pinv_matrix();
            prop_assert!((&g * &pinv * &g - &g).norm() <= 1e-8 * g.norm());
        }
    }
}
