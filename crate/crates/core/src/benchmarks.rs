//! The four benchmark problems: Mackey-Glass regression, nine-cluster XOR
//! classification, and two collocation PDE problems solved through the
//! operator-induced model class.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NatmoError, Result};
use crate::losses::{test_metric, LossSpec, TestMetricKind};
use crate::models::{Activation, BoundaryTransform, ModelSpec, ParameterVector, PdeOperator};
use crate::quadrature::QuadratureSet;

pub const MACKEY_GLASS: &str = "mackey_glass";
pub const XOR9: &str = "xor9";
pub const XOR9_SQUASHED: &str = "xor9_squashed";
pub const ADVECTION_DIFFUSION: &str = "advection_diffusion";
pub const REACTION_DIFFUSION: &str = "reaction_diffusion";

pub const PROBLEM_NAMES: [&str; 5] = [MACKEY_GLASS, XOR9, XOR9_SQUASHED, ADVECTION_DIFFUSION, REACTION_DIFFUSION];

/// Diffusion coefficient of the advection-diffusion problem.
pub const ADVECTION_MU: f64 = 0.2;

/// Default iteration cap for every benchmark.
pub const DEFAULT_MAX_ITERS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMetric {
    /// `sum_j w_j (v_j - y_j)^2` on the training set.
    MseTrain,
    /// `sqrt(sum_j w_j (A(u)_j - f_j)^2)` on the collocation points.
    L2ResidualTrain,
}

impl StopMetric {
    pub fn name(self) -> &'static str {
        match self {
            StopMetric::MseTrain => "mse_train",
            StopMetric::L2ResidualTrain => "l2_residual_train",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    pub metric: StopMetric,
    pub threshold: f64,
}

/// Closed-form solution of a 1-D PDE with its first two derivatives.
#[derive(Clone, Copy, Debug)]
pub struct ExactSolution {
    pub u: fn(f64) -> f64,
    pub u_x: fn(f64) -> f64,
    pub u_xx: fn(f64) -> f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundaryCondition {
    /// `u = 0` at both ends of the domain.
    Dirichlet { a: f64, b: f64 },
    /// `u' = 0` at both ends of the domain.
    Neumann { a: f64, b: f64 },
}

#[derive(Clone, Debug)]
pub struct PdeData {
    pub operator: PdeOperator,
    pub rhs: fn(f64) -> f64,
    pub exact: ExactSolution,
    pub boundary: BoundaryCondition,
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub train_q: QuadratureSet,
    pub test_q: QuadratureSet,
    pub stop: StopRule,
    /// Reference values on `test_q` for the solution model: targets, labels
    /// or the exact PDE solution.
    pub test_reference: Vec<f64>,
    pub pde: Option<PdeData>,
    pub max_iters: usize,
    /// Generator parameters, written to the dataset manifest.
    pub manifest: Vec<(String, String)>,
}

impl Problem {
    /// Stop metric from model values on the training points.
    pub fn stop_metric(&self, train_values: &[f64]) -> Result<f64> {
        let kind = match self.stop.metric {
            StopMetric::MseTrain => TestMetricKind::Mse,
            StopMetric::L2ResidualTrain => TestMetricKind::L2Residual,
        };
        let pred: Vec<f64> = train_values.iter().map(|v| self.loss.prediction(*v)).collect();
        test_metric(kind, &pred, self.loss.reference(), &self.train_q)
    }

    /// Test MSE of the solution model against `test_reference`.
    pub fn test_metric(&self, theta: &ParameterVector) -> Result<f64> {
        let v: Vec<f64> = self
            .model
            .solution_model()
            .evaluate(theta, &self.test_q, false)?
            .v
            .into_iter()
            .map(|v| self.loss.prediction(v))
            .collect();
        test_metric(TestMetricKind::Mse, &v, &self.test_reference, &self.test_q)
    }

    pub fn by_name(name: &str, data_seed: u64) -> Result<Problem> {
        match name {
            MACKEY_GLASS => Ok(mackey_glass_problem()),
            XOR9 => Ok(xor9_problem(data_seed)),
            XOR9_SQUASHED => Ok(xor9_squashed_problem(data_seed)),
            ADVECTION_DIFFUSION => Ok(advection_diffusion_problem()),
            REACTION_DIFFUSION => Ok(reaction_diffusion_problem()),
            other => Err(NatmoError::UnknownProblem(other.to_string())),
        }
    }

    pub fn manifest_text(&self) -> String {
        let mut out = format!("problem={}\n", self.name);
        for (k, v) in &self.manifest {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

// --- Mackey-Glass -----------------------------------------------------------

pub const MG_A: f64 = 0.2;
pub const MG_B: f64 = 0.1;
pub const MG_TAU: usize = 17;
pub const MG_HISTORY: f64 = 1.2;
const MG_LAGS: [usize; 4] = [0, 6, 12, 18];
const MG_HORIZON: usize = 6;
const MG_TRAIN: (usize, usize) = (200, 700);
const MG_TEST: (usize, usize) = (5000, 5500);

/// `z(0..len)` of `z(t+1) = (1-b) z(t) + a z(t-tau) / (1 + z(t-tau)^10)`
/// with constant history `z(t) = history` for `t <= 0`.
pub fn mackey_glass_series(len: usize, history: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(len);
    z.push(history);
    for t in 0..len.saturating_sub(1) {
        let lagged = if t >= MG_TAU { z[t - MG_TAU] } else { history };
        let next = (1.0 - MG_B) * z[t] + MG_A * lagged / (1.0 + lagged.powi(10));
        z.push(next);
    }
    z
}

fn mackey_pairs(z: &[f64], window: (usize, usize)) -> (Vec<Vec<f64>>, Vec<f64>) {
    (window.0..window.1)
        .map(|t| (MG_LAGS.iter().map(|lag| z[t - lag]).collect(), z[t + MG_HORIZON]))
        .unzip()
}

pub fn mackey_glass_problem() -> Problem {
    let z = mackey_glass_series(MG_TEST.1 + MG_HORIZON + 1, MG_HISTORY);
    let (train_x, train_y) = mackey_pairs(&z, MG_TRAIN);
    let (test_x, test_y) = mackey_pairs(&z, MG_TEST);
    Problem {
        name: MACKEY_GLASS.into(),
        model: ModelSpec::shallow(4, 10, Activation::Sigmoid),
        loss: LossSpec::LeastSquares { targets: train_y },
        train_q: QuadratureSet::from_samples(train_x).expect("nonempty train window"),
        test_q: QuadratureSet::from_samples(test_x).expect("nonempty test window"),
        stop: StopRule {
            metric: StopMetric::MseTrain,
            threshold: 2e-5,
        },
        test_reference: test_y,
        pde: None,
        max_iters: DEFAULT_MAX_ITERS,
        manifest: vec![
            ("a".into(), MG_A.to_string()),
            ("b".into(), MG_B.to_string()),
            ("tau".into(), MG_TAU.to_string()),
            ("history".into(), MG_HISTORY.to_string()),
            ("lags".into(), "0,6,12,18".into()),
            ("horizon".into(), MG_HORIZON.to_string()),
            ("train_t".into(), format!("[{},{})", MG_TRAIN.0, MG_TRAIN.1)),
            ("test_t".into(), format!("[{},{})", MG_TEST.0, MG_TEST.1)),
        ],
    }
}

// --- nine-cluster XOR -------------------------------------------------------

/// Distance between neighbouring cluster centers.
pub const XOR_SPACING: f64 = 5.0;
/// Per-cluster training counts: label-1 clusters (corners and center) and
/// label-0 clusters (edges). Five label-1 and four label-0 clusters give
/// 900 / 900 samples.
pub const XOR_TRAIN_COUNTS: (usize, usize) = (180, 225);
pub const XOR_TEST_PER_CLUSTER: usize = 100;

/// Centers on a 3x3 grid and checkerboard labels.
pub fn xor_clusters() -> Vec<([f64; 2], f64)> {
    let mut out = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let c = [(i as f64 - 1.0) * XOR_SPACING, (j as f64 - 1.0) * XOR_SPACING];
            out.push((c, if (i + j) % 2 == 0 { 1.0 } else { 0.0 }));
        }
    }
    out
}

fn xor_sample(rng: &mut ChaCha8Rng, counts: impl Fn(f64) -> usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (center, label) in xor_clusters() {
        for _ in 0..counts(label) {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            x.push(vec![center[0] + dx, center[1] + dy]);
            y.push(label);
        }
    }
    (x, y)
}

/// XOR with the logistic map inside the loss: the network output is a
/// logit and the Hessian metric is taken in logit space.
pub fn xor9_problem(seed: u64) -> Problem {
    xor9_with_head(seed, false)
}

/// XOR with the logistic map inside the model, so cross-entropy and its
/// Hessian act on probabilities.
pub fn xor9_squashed_problem(seed: u64) -> Problem {
    xor9_with_head(seed, true)
}

fn xor9_with_head(seed: u64, squashed: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_x, train_y) = xor_sample(&mut rng, |label| {
        if label == 1.0 {
            XOR_TRAIN_COUNTS.0
        } else {
            XOR_TRAIN_COUNTS.1
        }
    });
    let (test_x, test_y) = xor_sample(&mut rng, |_| XOR_TEST_PER_CLUSTER);
    let net = ModelSpec::shallow(2, 10, Activation::Sigmoid);
    let (name, model, loss, head) = if squashed {
        (
            XOR9_SQUASHED,
            ModelSpec::OutputSquash(Box::new(net)),
            LossSpec::BinaryCrossEntropy { labels: train_y },
            "probability",
        )
    } else {
        (XOR9, net, LossSpec::LogitCrossEntropy { labels: train_y }, "logit")
    };
    Problem {
        name: name.into(),
        model,
        loss,
        train_q: QuadratureSet::from_samples(train_x).expect("nonempty train set"),
        test_q: QuadratureSet::from_samples(test_x).expect("nonempty test set"),
        stop: StopRule {
            metric: StopMetric::MseTrain,
            threshold: 3e-2,
        },
        test_reference: test_y,
        pde: None,
        max_iters: DEFAULT_MAX_ITERS,
        manifest: vec![
            ("data_seed".into(), seed.to_string()),
            ("centers".into(), format!("{{-{s},0,{s}}}^2", s = XOR_SPACING)),
            ("labels".into(), "checkerboard, corners and center = 1".into()),
            ("cluster_std".into(), "1".into()),
            ("train_per_cluster".into(), format!("label1={},label0={}", XOR_TRAIN_COUNTS.0, XOR_TRAIN_COUNTS.1)),
            ("test_per_cluster".into(), XOR_TEST_PER_CLUSTER.to_string()),
            ("model_output".into(), head.into()),
        ],
    }
}

// --- PDE problems -----------------------------------------------------------

fn adv_u(x: f64) -> f64 {
    let mu = ADVECTION_MU;
    x - ((x / mu).exp() - 1.0) / ((1.0 / mu).exp() - 1.0)
}

fn adv_u_x(x: f64) -> f64 {
    let mu = ADVECTION_MU;
    1.0 - (x / mu).exp() / (mu * ((1.0 / mu).exp() - 1.0))
}

fn adv_u_xx(x: f64) -> f64 {
    let mu = ADVECTION_MU;
    -(x / mu).exp() / (mu * mu * ((1.0 / mu).exp() - 1.0))
}

fn adv_rhs(_x: f64) -> f64 {
    1.0
}

fn rd_u(x: f64) -> f64 {
    (PI * x).cos()
}

fn rd_u_x(x: f64) -> f64 {
    -PI * (PI * x).sin()
}

fn rd_u_xx(x: f64) -> f64 {
    -PI * PI * (PI * x).cos()
}

/// `-u'' + u^3` at `u = cos(pi x)`.
fn rd_rhs(x: f64) -> f64 {
    let c = (PI * x).cos();
    PI * PI * c + c * c * c
}

fn pde_problem(
    name: &str,
    domain: (f64, f64),
    transform: BoundaryTransform,
    pde: PdeData,
    manifest: Vec<(String, String)>,
) -> Problem {
    let train_q = QuadratureSet::uniform_grid(domain.0, domain.1, 1000).expect("valid grid");
    let test_q = QuadratureSet::uniform_grid(domain.0, domain.1, 10000).expect("valid grid");
    let rhs = train_q.points().map(|x| (pde.rhs)(x[0])).collect();
    let test_reference = test_q.points().map(|x| (pde.exact.u)(x[0])).collect();
    Problem {
        name: name.into(),
        model: ModelSpec::ResidualWrap {
            inner: Box::new(ModelSpec::BcWrap {
                inner: Box::new(ModelSpec::deep(vec![1, 5, 5, 1], Activation::Tanh)),
                transform,
            }),
            operator: pde.operator,
        },
        loss: LossSpec::ResidualLs { rhs },
        train_q,
        test_q,
        stop: StopRule {
            metric: StopMetric::L2ResidualTrain,
            threshold: 1e-4,
        },
        test_reference,
        pde: Some(pde),
        max_iters: DEFAULT_MAX_ITERS,
        manifest,
    }
}

pub fn advection_diffusion_problem() -> Problem {
    pde_problem(
        ADVECTION_DIFFUSION,
        (0.0, 1.0),
        BoundaryTransform::AdvectionDiffusion,
        PdeData {
            operator: PdeOperator::AdvectionDiffusion { mu: ADVECTION_MU },
            rhs: adv_rhs,
            exact: ExactSolution {
                u: adv_u,
                u_x: adv_u_x,
                u_xx: adv_u_xx,
            },
            boundary: BoundaryCondition::Dirichlet { a: 0.0, b: 1.0 },
        },
        vec![
            ("operator".into(), format!("-{ADVECTION_MU} u'' + u'")),
            ("rhs".into(), "1".into()),
            ("domain".into(), "[0,1]".into()),
            ("train_points".into(), "1000".into()),
            ("test_points".into(), "10000".into()),
        ],
    )
}

pub fn reaction_diffusion_problem() -> Problem {
    pde_problem(
        REACTION_DIFFUSION,
        (-1.0, 1.0),
        BoundaryTransform::ReactionDiffusion,
        PdeData {
            operator: PdeOperator::ReactionDiffusion,
            rhs: rd_rhs,
            exact: ExactSolution {
                u: rd_u,
                u_x: rd_u_x,
                u_xx: rd_u_xx,
            },
            boundary: BoundaryCondition::Neumann { a: -1.0, b: 1.0 },
        },
        vec![
            ("operator".into(), "-u'' + u^3".into()),
            ("rhs".into(), "pi^2 cos(pi x) + cos^3(pi x)".into()),
            ("domain".into(), "[-1,1]".into()),
            ("train_points".into(), "1000".into()),
            ("test_points".into(), "10000".into()),
        ],
    )
}

/// Largest of the PDE residual of the closed-form solution on the training
/// points and its boundary-condition defect. `shift` perturbs `u` by a constant.
pub fn exact_residual(problem: &Problem, shift: f64) -> Result<f64> {
    let pde = problem
        .pde
        .as_ref()
        .ok_or_else(|| NatmoError::invalid(format!("{} has no exact solution", problem.name)))?;
    let e = pde.exact;
    let mut worst: f64 = 0.0;
    for x in problem.train_q.points() {
        let x = x[0];
        let r = pde.operator.apply((e.u)(x) + shift, (e.u_x)(x), (e.u_xx)(x)) - (pde.rhs)(x);
        worst = worst.max(r.abs());
    }
    let bc = match pde.boundary {
        BoundaryCondition::Dirichlet { a, b } => ((e.u)(a) + shift).abs().max(((e.u)(b) + shift).abs()),
        BoundaryCondition::Neumann { a, b } => (e.u_x)(a).abs().max((e.u_x)(b).abs()),
    };
    Ok(worst.max(bc))
}
