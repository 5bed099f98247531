//! Empirical measures `sum_j w_j delta_{x_j}` and the inner products they induce.

use crate::error::{NatmoError, Result};

/// Points in `R^n` with strictly positive weights.
///
/// Points are stored row-major in one flat buffer of length `m * dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureSet {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureSet {
    /// Builds a set from explicit points and weights.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(NatmoError::invalid("quadrature needs at least one point"));
        }
        if points.len() != weights.len() {
            return Err(NatmoError::shape(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(NatmoError::invalid("points must have dimension >= 1"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(NatmoError::invalid(format!("weight {w} is not positive")));
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(NatmoError::shape("points have inconsistent dimensions"));
            }
            coords.extend_from_slice(p);
        }
        Ok(Self { dim, coords, weights })
    }

    /// `m` equispaced points on `[a, b]` including both endpoints, weights `1/m`.
    pub fn uniform_grid(a: f64, b: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(NatmoError::invalid(format!("uniform grid needs m >= 2, got {m}")));
        }
        if !(a < b) {
            return Err(NatmoError::invalid(format!("uniform grid needs a < b, got [{a}, {b}]")));
        }
        let step = (b - a) / (m - 1) as f64;
        let mut coords: Vec<f64> = (0..m).map(|j| a + step * j as f64).collect();
        coords[m - 1] = b;
        Ok(Self {
            dim: 1,
            coords,
            weights: vec![1.0 / m as f64; m],
        })
    }

    /// Monte-Carlo style set: the given samples, each with weight `1/m`.
    pub fn from_samples(points: Vec<Vec<f64>>) -> Result<Self> {
        let m = points.len();
        if m == 0 {
            return Err(NatmoError::invalid("from_samples needs a nonempty sample list"));
        }
        Self::new(points, vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same points, weights multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(NatmoError::invalid("weight scale must be positive"));
        }
        Ok(Self {
            dim: self.dim,
            coords: self.coords.clone(),
            weights: self.weights.iter().map(|w| w * c).collect(),
        })
    }

    /// Combined per-point weights `w_j * h_j` (or just `w_j` without a metric).
    pub fn metric_weights(&self, metric: Option<&[f64]>) -> Result<Vec<f64>> {
        match metric {
            None => Ok(self.weights.clone()),
            Some(h) => {
                self.check_len(h.len(), "metric")?;
                if let Some(bad) = h.iter().find(|v| !(**v >= 0.0)) {
                    return Err(NatmoError::invalid(format!("metric weight {bad} is negative")));
                }
                Ok(self.weights.iter().zip(h).map(|(w, h)| w * h).collect())
            }
        }
    }

    pub(crate) fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.len() {
            return Err(NatmoError::shape(format!(
                "{what} has length {n}, quadrature has {} points",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `sum_j w_j h_j a_j b_j`; `h = 1` when no metric is supplied.
pub fn inner(a: &[f64], b: &[f64], q: &QuadratureSet, metric: Option<&[f64]>) -> Result<f64> {
    q.check_len(a.len(), "first argument")?;
    q.check_len(b.len(), "second argument")?;
    let s = match metric {
        None => q.weights.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum(),
        Some(h) => {
            q.check_len(h.len(), "metric")?;
            if h.iter().any(|v| !(*v >= 0.0)) {
                return Err(NatmoError::invalid("metric weights must be nonnegative"));
            }
            q.weights
                .iter()
                .zip(h)
                .zip(a.iter().zip(b))
                .map(|((w, h), (a, b))| w * h * a * b)
                .sum()
        }
    };
    Ok(s)
}

/// `sqrt(inner(a, a))`.
pub fn norm(a: &[f64], q: &QuadratureSet, metric: Option<&[f64]>) -> Result<f64> {
    Ok(inner(a, a, q, metric)?.max(0.0).sqrt())
}
