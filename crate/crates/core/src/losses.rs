//! Point-wise losses, empirical loss values and their functional derivatives.

use nalgebra::DVector;

use crate::error::{NatmoError, Result};
use crate::models::TangentFeatures;
use crate::quadrature::QuadratureSet;

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    /// `1/2 (v - u(x))^2`
    LeastSquares { targets: Vec<f64> },
    /// `-y log v - (1 - y) log(1 - v)`, labels in `{0, 1}`.
    BinaryCrossEntropy { labels: Vec<f64> },
    /// `1/2 (w - f(x))^2` on the operator-induced class.
    ResidualLs { rhs: Vec<f64> },
    /// Cross-entropy of `sigmoid(v)`, so `v` is a logit.
    LogitCrossEntropy { labels: Vec<f64> },
}

/// Which inner product equips the tangent space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MetricChoice {
    #[default]
    #[serde(alias = "l2", alias = "L2")]
    L2,
    /// Weights `l''(v(x))`, i.e. the Gauss-Newton metric.
    #[serde(alias = "hessian", alias = "gauss_newton")]
    HessianInduced,
}

/// Test metrics monitored alongside the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestMetricKind {
    /// `sum_j w_j (v_j - ref_j)^2`
    Mse,
    /// `sqrt(sum_j w_j (v_j - ref_j)^2)`
    L2Residual,
}

impl LossSpec {
    pub fn binary_cross_entropy(labels: Vec<f64>) -> Result<Self> {
        if let Some(y) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(NatmoError::invalid(format!("label {y} is not in {{0, 1}}")));
        }
        Ok(LossSpec::BinaryCrossEntropy { labels })
    }

    /// Targets, labels or right-hand side, whichever this loss carries.
    pub fn reference(&self) -> &[f64] {
        match self {
            LossSpec::LeastSquares { targets } => targets,
            LossSpec::BinaryCrossEntropy { labels } | LossSpec::LogitCrossEntropy { labels } => labels,
            LossSpec::ResidualLs { rhs } => rhs,
        }
    }

    /// What `v` predicts: a probability for logit losses, `v` itself otherwise.
    pub fn prediction(&self, v: f64) -> f64 {
        match self {
            LossSpec::LogitCrossEntropy { .. } => sigmoid(v),
            _ => v,
        }
    }

    fn check(&self, v: &[f64], q: &QuadratureSet) -> Result<()> {
        q.check_len(self.reference().len(), "loss reference")?;
        q.check_len(v.len(), "model values")
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `log(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn clamp_prob(v: f64) -> f64 {
    v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn pointwise(loss: &LossSpec, v: f64, y: f64) -> f64 {
    match loss {
        LossSpec::LeastSquares { .. } | LossSpec::ResidualLs { .. } => 0.5 * (v - y) * (v - y),
        LossSpec::BinaryCrossEntropy { .. } => {
            let p = clamp_prob(v);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        }
        LossSpec::LogitCrossEntropy { .. } => softplus(v) - y * v,
    }
}

/// `L_m = sum_j w_j l(v_j, x_j)`.
pub fn loss_value(loss: &LossSpec, v: &[f64], q: &QuadratureSet) -> Result<f64> {
    loss.check(v, q)?;
    Ok(q
        .weights()
        .iter()
        .zip(v)
        .zip(loss.reference())
        .map(|((w, v), y)| w * pointwise(loss, *v, *y))
        .sum())
}

/// First and second derivative of the point-wise loss in its first argument.
pub fn pointwise_derivs(loss: &LossSpec, v: &[f64], q: &QuadratureSet) -> Result<(Vec<f64>, Vec<f64>)> {
    loss.check(v, q)?;
    let y = loss.reference();
    Ok(match loss {
        LossSpec::LeastSquares { .. } | LossSpec::ResidualLs { .. } => (
            v.iter().zip(y).map(|(v, y)| v - y).collect(),
            vec![1.0; v.len()],
        ),
        LossSpec::BinaryCrossEntropy { .. } => v
            .iter()
            .zip(y)
            .map(|(v, y)| {
                let p = clamp_prob(*v);
                let g = -y / p + (1.0 - y) / (1.0 - p);
                let h = y / (p * p) + (1.0 - y) / ((1.0 - p) * (1.0 - p));
                (g, h)
            })
            .unzip(),
        LossSpec::LogitCrossEntropy { .. } => v
            .iter()
            .zip(y)
            .map(|(v, y)| {
                let p = sigmoid(*v);
                (p - y, p * (1.0 - p))
            })
            .unzip(),
    })
}

/// `grad_i = sum_j w_j g_j psi[j, i]` for point-wise derivatives `g`.
pub fn grad_from_pointwise(g: &[f64], psi: &TangentFeatures, q: &QuadratureSet) -> Result<DVector<f64>> {
    q.check_len(g.len(), "pointwise derivative")?;
    q.check_len(psi.nrows(), "tangent features")?;
    let wg = DVector::from_iterator(g.len(), q.weights().iter().zip(g).map(|(w, g)| w * g));
    Ok(psi.tr_mul(&wg))
}

/// Gradient of the empirical loss in parameter space, `L'(v)(psi)`.
pub fn grad_coeffs(loss: &LossSpec, v: &[f64], psi: &TangentFeatures, q: &QuadratureSet) -> Result<DVector<f64>> {
    let (g, _) = pointwise_derivs(loss, v, q)?;
    grad_from_pointwise(&g, psi, q)
}

/// Metric weights for the requested tangent-space inner product.
pub fn metric_weights(choice: MetricChoice, loss: &LossSpec, v: &[f64], q: &QuadratureSet) -> Result<Vec<f64>> {
    match choice {
        MetricChoice::L2 => Ok(vec![1.0; q.len()]),
        MetricChoice::HessianInduced => Ok(pointwise_derivs(loss, v, q)?.1),
    }
}

pub fn test_metric(kind: TestMetricKind, v: &[f64], reference: &[f64], q: &QuadratureSet) -> Result<f64> {
    q.check_len(v.len(), "values")?;
    q.check_len(reference.len(), "reference")?;
    let mse: f64 = q
        .weights()
        .iter()
        .zip(v.iter().zip(reference))
        .map(|(w, (v, r))| w * (v - r) * (v - r))
        .sum();
    Ok(match kind {
        TestMetricKind::Mse => mse,
        TestMetricKind::L2Residual => mse.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Activation, ModelSpec};
    use nalgebra::DMatrix;

    fn grid2() -> QuadratureSet {
        QuadratureSet::uniform_grid(0.0, 1.0, 2).unwrap()
    }

    #[test]
    fn least_squares_values() {
        let q = grid2();
        let loss = LossSpec::LeastSquares { targets: vec![0.0, 0.0] };
        assert_eq!(loss_value(&loss, &[0.0, 0.0], &q).unwrap(), 0.0);
        assert_eq!(loss_value(&loss, &[1.0, 1.0], &q).unwrap(), 0.5);
        assert!(loss_value(&loss, &[1.0], &q).is_err());
    }

    #[test]
    fn bce_perfect_fit_is_small_and_finite() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 4).unwrap();
        let loss = LossSpec::binary_cross_entropy(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(loss_value(&loss, &[0.0, 1.0, 1.0, 0.0], &q).unwrap() <= 1e-6);
        let worst = loss_value(&loss, &[1.0, 0.0, 0.0, 1.0], &q).unwrap();
        assert!(worst.is_finite());
        assert!(LossSpec::binary_cross_entropy(vec![0.5]).is_err());
    }

    #[test]
    fn pointwise_derivative_examples() {
        let q = QuadratureSet::from_samples(vec![vec![0.0]]).unwrap();
        let ls = LossSpec::LeastSquares { targets: vec![0.3] };
        assert_eq!(pointwise_derivs(&ls, &[0.3], &q).unwrap(), (vec![0.0], vec![1.0]));
        let bce = LossSpec::BinaryCrossEntropy { labels: vec![1.0] };
        let (g, h) = pointwise_derivs(&bce, &[0.5], &q).unwrap();
        assert!((g[0] + 2.0).abs() < 1e-15);
        assert!((h[0] - 4.0).abs() < 1e-15);
        let res = LossSpec::ResidualLs { rhs: vec![1.0] };
        assert_eq!(pointwise_derivs(&res, &[1.0], &q).unwrap().0, vec![0.0]);
    }

    #[test]
    fn logit_cross_entropy_matches_squashed_value() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 4).unwrap();
        let labels = vec![0.0, 1.0, 1.0, 0.0];
        let z = [-2.0, 0.3, 4.0, 1.5];
        let p: Vec<f64> = z.iter().map(|z| sigmoid(*z)).collect();
        let a = loss_value(&LossSpec::LogitCrossEntropy { labels: labels.clone() }, &z, &q).unwrap();
        let b = loss_value(&LossSpec::BinaryCrossEntropy { labels }, &p, &q).unwrap();
        assert!((a - b).abs() < 1e-14);
        let big = loss_value(&LossSpec::LogitCrossEntropy { labels: vec![0.0; 4] }, &[800.0; 4], &q).unwrap();
        assert!((big - 800.0).abs() < 1e-9);
    }

    #[test]
    fn logit_derivatives() {
        let q = QuadratureSet::from_samples(vec![vec![0.0], vec![1.0]]).unwrap();
        let loss = LossSpec::LogitCrossEntropy { labels: vec![1.0, 0.0] };
        let (g, h) = pointwise_derivs(&loss, &[0.0, 0.0], &q).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
        assert_eq!(h, vec![0.25, 0.25]);
        let step = 1e-6;
        for z in [-3.0, 0.2, 2.5] {
            let lp = pointwise(&loss, z + step, 1.0);
            let lm = pointwise(&loss, z - step, 1.0);
            let (g, _) = pointwise_derivs(&loss, &[z, z], &q).unwrap();
            assert!(((lp - lm) / (2.0 * step) - g[0]).abs() < 1e-8);
        }
        assert_eq!(loss.prediction(0.0), 0.5);
        assert_eq!(LossSpec::LeastSquares { targets: vec![] }.prediction(0.7), 0.7);
    }

    #[test]
    fn hessian_weights_positive_for_clamped_bce() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 5).unwrap();
        let bce = LossSpec::BinaryCrossEntropy { labels: vec![0.0, 1.0, 0.0, 1.0, 1.0] };
        let h = metric_weights(MetricChoice::HessianInduced, &bce, &[0.0, 1.0, 0.2, 0.9, 0.0], &q).unwrap();
        assert!(h.iter().all(|h| *h > 0.0 && h.is_finite()));
        let ls = LossSpec::LeastSquares { targets: vec![0.0; 5] };
        assert_eq!(metric_weights(MetricChoice::HessianInduced, &ls, &[3.0; 5], &q).unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn linear_gradient_example() {
        let q = grid2();
        let loss = LossSpec::LeastSquares { targets: vec![0.0, 0.0] };
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let grad = grad_coeffs(&loss, &[1.0, 2.0], &psi, &q).unwrap();
        assert_eq!(grad.as_slice(), &[1.5, 1.0]);
        let zero = grad_coeffs(&loss, &[0.0, 0.0], &psi, &q).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let q = QuadratureSet::from_samples((0..12).map(|j| vec![0.4 * j as f64 - 2.0, 1.0 - 0.15 * j as f64]).collect()).unwrap();
        let labels: Vec<f64> = (0..12).map(|j| (j % 2) as f64).collect();
        let cases = vec![
            (ModelSpec::shallow(2, 4, Activation::Sigmoid), LossSpec::LeastSquares { targets: labels.iter().map(|y| 0.5 * y - 0.2).collect() }),
            (
                ModelSpec::OutputSquash(Box::new(ModelSpec::shallow(2, 4, Activation::Sigmoid))),
                LossSpec::BinaryCrossEntropy { labels: labels.clone() },
            ),
        ];
        for (spec, loss) in cases {
            for seed in 0..3 {
                let theta = init_params(&spec, seed);
                let (v, psi) = spec.values_and_tangents(&theta, &q).unwrap();
                let grad = grad_coeffs(&loss, &v, &psi, &q).unwrap();
                let step = 1e-6;
                for i in 0..theta.len() {
                    let mut tp = theta.clone();
                    tp[i] += step;
                    let mut tm = theta.clone();
                    tm[i] -= step;
                    let lp = loss_value(&loss, &spec.evaluate(&tp, &q, false).unwrap().v, &q).unwrap();
                    let lm = loss_value(&loss, &spec.evaluate(&tm, &q, false).unwrap().v, &q).unwrap();
                    let fd = (lp - lm) / (2.0 * step);
                    assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + grad[i].abs()), "{fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn test_metrics() {
        let q = QuadratureSet::uniform_grid(0.0, 1.0, 4).unwrap();
        assert_eq!(test_metric(TestMetricKind::Mse, &[1.0; 4], &[1.0; 4], &q).unwrap(), 0.0);
        assert!((test_metric(TestMetricKind::Mse, &[2.0; 4], &[1.0; 4], &q).unwrap() - 1.0).abs() < 1e-15);
        assert!((test_metric(TestMetricKind::L2Residual, &[2.0; 4], &[1.0; 4], &q).unwrap() - 1.0).abs() < 1e-15);
    }
}
