//! Independent checks: finite-difference Jacobians, Penrose identities,
//! one-step convergence on linear models, the curvature scaling of the
//! approximate momenta, exact PDE solutions and the collapse of every
//! method to its classical counterpart on linear models.
//!
//! Reference computations use dense Cholesky and QR solves, never the
//! eigendecomposition path of [`crate::natgrad`].

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::benchmarks::{self, exact_residual, Problem, StopMetric, StopRule};
use crate::error::{NatmoError, Result};
use crate::losses::{LossSpec, MetricChoice};
use crate::models::{curvature_probe, init_params, Activation, ModelSpec, ParameterVector};
use crate::natgrad::{cross_apply, weighted_rhs, GramSystem, RegPolicy};
use crate::optimizers::{step, Evaluation, Method, OptConfig, OptState};
use crate::quadrature::{norm, QuadratureSet};

/// One measured quantity and the closed interval it must fall in.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub label: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Check {
    pub fn at_most(label: impl Into<String>, value: f64, hi: f64) -> Self {
        Self {
            label: label.into(),
            value,
            lo: f64::NEG_INFINITY,
            hi,
        }
    }

    pub fn within(label: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            label: label.into(),
            value,
            lo,
            hi,
        }
    }

    pub fn ok(&self) -> bool {
        self.value >= self.lo && self.value <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, checks: Vec<Check>) -> Self {
        let pass = !checks.is_empty() && checks.iter().all(Check::ok);
        Self {
            name: name.into(),
            checks,
            pass,
        }
    }

    /// `name,label,value,lo,hi,ok` rows.
    pub fn csv_rows(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{},{},{:e},{:e},{:e},{}\n", self.name, c.label, c.value, c.lo, c.hi, c.ok()))
            .collect()
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.pass { "PASS" } else { "FAIL" }, self.name)?;
        for c in &self.checks {
            let bound = match (c.lo.is_finite(), c.hi.is_finite()) {
                (true, true) => format!("in [{:.3e}, {:.3e}]", c.lo, c.hi),
                (false, _) => format!("<= {:.3e}", c.hi),
                (true, false) => format!(">= {:.3e}", c.lo),
            };
            write!(f, " | {}={:.3e} {}", c.label, c.value, bound)?;
        }
        Ok(())
    }
}

pub const FD_STEP: f64 = 1e-5;

fn rel_max_error(approx: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    let scale = exact.amax().max(1.0);
    (approx - exact).amax() / scale
}

/// Max entrywise error of central differences against the tangent
/// features, relative to `max(1, max |psi|)`.
pub fn fd_jacobian_error(spec: &ModelSpec, theta: &ParameterVector, q: &QuadratureSet) -> Result<f64> {
    let psi = spec.tangent_features(theta, q)?;
    let mut fd = DMatrix::zeros(q.len(), theta.len());
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += FD_STEP;
        let mut tm = theta.clone();
        tm[i] -= FD_STEP;
        let vp = spec.evaluate(&tp, q, false)?.v;
        let vm = spec.evaluate(&tm, q, false)?.v;
        for j in 0..q.len() {
            fd[(j, i)] = (vp[j] - vm[j]) / (2.0 * FD_STEP);
        }
    }
    Ok(rel_max_error(&fd, &psi))
}

pub fn fd_jacobian_check(spec: &ModelSpec, theta: &ParameterVector, q: &QuadratureSet) -> Result<OracleReport> {
    let tol = if matches!(spec, ModelSpec::ResidualWrap { .. }) { 1e-5 } else { 1e-6 };
    let err = fd_jacobian_error(spec, theta, q)?;
    Ok(OracleReport::new("fd_jacobian", vec![Check::at_most("rel_error", err, tol)]))
}

fn pde_model(transform: crate::models::BoundaryTransform, operator: crate::models::PdeOperator) -> ModelSpec {
    ModelSpec::ResidualWrap {
        inner: Box::new(ModelSpec::BcWrap {
            inner: Box::new(ModelSpec::deep(vec![1, 5, 5, 1], Activation::Tanh)),
            transform,
        }),
        operator,
    }
}

/// The Jacobian check on every model family used by the benchmarks.
pub fn fd_jacobian_suite() -> Result<OracleReport> {
    use crate::models::{BoundaryTransform, PdeOperator};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sample = |rng: &mut ChaCha8Rng, m: usize, n: usize, s: f64| -> QuadratureSet {
        QuadratureSet::from_samples((0..m).map(|_| (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()).collect())
            .expect("nonempty")
    };
    let cases: Vec<(&str, ModelSpec, QuadratureSet)> = vec![
        ("linear", ModelSpec::polynomial(4), QuadratureSet::uniform_grid(-1.0, 1.0, 30)?),
        ("shallow_sigmoid", ModelSpec::shallow(4, 10, Activation::Sigmoid), sample(&mut rng, 30, 4, 1.0)),
        (
            "squashed_sigmoid",
            ModelSpec::OutputSquash(Box::new(ModelSpec::shallow(2, 10, Activation::Sigmoid))),
            sample(&mut rng, 30, 2, 3.0),
        ),
        (
            "advection_residual",
            pde_model(BoundaryTransform::AdvectionDiffusion, PdeOperator::AdvectionDiffusion { mu: benchmarks::ADVECTION_MU }),
            QuadratureSet::uniform_grid(0.0, 1.0, 25)?,
        ),
        (
            "reaction_residual",
            pde_model(BoundaryTransform::ReactionDiffusion, PdeOperator::ReactionDiffusion),
            QuadratureSet::uniform_grid(-1.0, 1.0, 25)?,
        ),
    ];
    let mut checks = Vec::new();
    for (seed, (label, spec, q)) in cases.into_iter().enumerate() {
        let theta = init_params(&spec, seed as u64);
        let tol = if matches!(spec, ModelSpec::ResidualWrap { .. }) { 1e-5 } else { 1e-6 };
        checks.push(Check::at_most(label, fd_jacobian_error(&spec, &theta, &q)?, tol));
    }
    Ok(OracleReport::new("fd_jacobian", checks))
}

/// Penrose identities of the cutoff pseudo-inverse, all relative errors.
pub fn pinv_property_errors(g: &DMatrix<f64>) -> Result<[f64; 4]> {
    let gs = GramSystem::from_matrix(g.clone(), RegPolicy::Cutoff { eps_rel: 1e-10 })?;
    let p = gs.pinv_matrix();
    let rel = |a: DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE);
    let gp = g * &p;
    let pg = &p * g;
    Ok([
        rel(&gp * g, g),
        if p.norm() == 0.0 { 0.0 } else { rel(&pg * &p, &p) },
        if gp.norm() == 0.0 { 0.0 } else { rel(gp.transpose(), &gp) },
        if pg.norm() == 0.0 { 0.0 } else { rel(pg.transpose(), &pg) },
    ])
}

pub fn pinv_property_check(g: &DMatrix<f64>) -> Result<OracleReport> {
    let e = pinv_property_errors(g)?;
    Ok(OracleReport::new(
        "pinv_property",
        vec![
            Check::at_most("GPG", e[0], 1e-8),
            Check::at_most("PGP", e[1], 1e-8),
            Check::at_most("GP_sym", e[2], 1e-8),
            Check::at_most("PG_sym", e[3], 1e-8),
        ],
    ))
}

/// `Psi^T Psi` for a 30 x 20 Gaussian `Psi` whose last five columns repeat
/// earlier ones, so the rank is 15.
pub fn rank_deficient_gram(seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = DMatrix::from_fn(30, 20, |_, _| rng.sample::<f64, _>(StandardNormal));
    for c in 15..20 {
        let src = psi.column(c - 15).clone_owned();
        psi.set_column(c, &src);
    }
    psi.transpose() * psi
}

pub fn pinv_property_suite() -> Result<OracleReport> {
    let mut checks = Vec::new();
    let cases = [
        ("diag", DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))),
        ("identity", DMatrix::identity(6, 6)),
        ("rank15_of_20", rank_deficient_gram(5)),
    ];
    for (label, g) in cases {
        let worst = pinv_property_errors(&g)?.into_iter().fold(0.0, f64::max);
        checks.push(Check::at_most(label, worst, 1e-8));
    }
    Ok(OracleReport::new("pinv_property", checks))
}

/// Linear least-squares problem with monomial features on `[-1, 1]`.
pub fn linear_problem(degree: u32, m: usize, targets: Vec<f64>) -> Result<Problem> {
    let q = QuadratureSet::uniform_grid(-1.0, 1.0, m)?;
    q.check_len(targets.len(), "targets")?;
    Ok(Problem {
        name: "linear_ls".into(),
        model: ModelSpec::polynomial(degree),
        loss: LossSpec::LeastSquares { targets: targets.clone() },
        train_q: q.clone(),
        test_q: q,
        stop: StopRule {
            metric: StopMetric::MseTrain,
            threshold: 0.0,
        },
        test_reference: targets,
        pde: None,
        max_iters: 20,
        manifest: vec![],
    })
}

/// Weighted least-squares coefficients through a QR factorization of
/// `sqrt(W) Psi`.
fn dense_projection(psi: &DMatrix<f64>, target: &[f64], q: &QuadratureSet) -> Result<DVector<f64>> {
    let mut a = psi.clone();
    let mut b = DVector::from_column_slice(target);
    for (j, w) in q.weights().iter().enumerate() {
        let s = w.sqrt();
        a.row_mut(j).scale_mut(s);
        b[j] *= s;
    }
    let qr = a.qr();
    let rhs = qr.q().tr_mul(&b);
    qr.r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| NatmoError::invalid("singular least-squares system"))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One NGD step with `s = 1` against the dense weighted normal-equation
/// solution; returns the function-space error.
pub fn one_step_error(targets: Vec<f64>, seed: u64) -> Result<f64> {
    let problem = linear_problem(4, targets.len(), targets)?;
    let mut cfg = OptConfig::new(Method::Ngd);
    cfg.fixed_step = Some(1.0);
    let mut state = OptState::new(init_params(&problem.model, seed));
    let e = Evaluation::at(&problem, &state.theta_k)?;
    let psi = e.psi.clone();
    step(&mut state, &problem, &cfg, e)?;
    let c = dense_projection(&psi, problem.loss.reference(), &problem.train_q)?;
    let diff = &psi * (&state.theta_k - c);
    norm(diff.as_slice(), &problem.train_q, None)
}

pub fn one_step_linear_check() -> Result<OracleReport> {
    let m = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = QuadratureSet::uniform_grid(-1.0, 1.0, m)?;
    let random = gaussian_vec(&mut rng, m);
    let in_span: Vec<f64> = q.points().map(|x| 1.0 - 2.0 * x[0] + 0.5 * x[0].powi(4)).collect();
    let mut checks = Vec::new();
    for seed in 0..3 {
        checks.push(Check::at_most(format!("random_target_seed{seed}"), one_step_error(random.clone(), seed)?, 1e-8));
    }
    checks.push(Check::at_most("target_in_span", one_step_error(in_span, 0)?, 1e-8));
    Ok(OracleReport::new("one_step_linear", checks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropositionKind {
    Qnhb,
    NhbFd,
}

/// Momentum gaps `Delta(h)` of one approximate momentum against exact
/// transport, the sampled curvature and the constants of the bound.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingData {
    pub hs: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Sampled `kappa_max` at the point the bound refers to, per `h`.
    pub kappas: Vec<f64>,
    pub beta: f64,
}

pub const SCALING_STEPS: [f64; 4] = [1e-1, 5e-2, 2.5e-2, 1.25e-2];
const CURVATURE_PROBE_STEP: f64 = 1e-3;
const CURVATURE_DIRECTIONS: usize = 50;

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    let v = DVector::from_vec(gaussian_vec(rng, d));
    let n = v.norm();
    v / n
}

/// `max ||H_D(theta)(q, q)||_X` over `p` and 50 random unit directions.
pub fn sampled_kappa(spec: &ModelSpec, theta: &ParameterVector, p: &DVector<f64>, q: &QuadratureSet, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = vec![p.clone()];
    dirs.extend((0..CURVATURE_DIRECTIONS).map(|_| random_unit(&mut rng, theta.len())));
    let mut best: f64 = 0.0;
    for dir in dirs {
        let hq = curvature_probe(spec, theta, &dir, CURVATURE_PROBE_STEP, q)?;
        best = best.max(norm(&hq, q, None)?);
    }
    Ok(best)
}

/// `Delta(h) = beta ||psi_k^T (m_variant - m_nhb)||_X` with
/// `theta_k = theta_km1 + h p` on a shallow tanh net.
pub fn proposition_scaling_data(kind: PropositionKind, linear: bool) -> Result<ScalingData> {
    let spec = if linear {
        ModelSpec::polynomial(4)
    } else {
        ModelSpec::shallow(1, 5, Activation::Tanh)
    };
    let q = QuadratureSet::uniform_grid(-2.0, 2.0, 200)?;
    let theta_km1 = init_params(&spec, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = random_unit(&mut rng, theta_km1.len());
    let beta = 0.5;
    let reg = RegPolicy::Cutoff { eps_rel: 1e-12 };

    let psi_km1 = spec.tangent_features(&theta_km1, &q)?;
    let v_km1 = spec.evaluate(&theta_km1, &q, false)?.v;
    let kappa_km1 = sampled_kappa(&spec, &theta_km1, &p, &q, 23)?;
    let mut data = ScalingData {
        hs: SCALING_STEPS.to_vec(),
        deltas: Vec::new(),
        kappas: Vec::new(),
        beta,
    };
    for &h in &SCALING_STEPS {
        let theta_k = &theta_km1 + h * &p;
        let (v_k, psi_k) = spec.values_and_tangents(&theta_k, &q)?;
        let gs = GramSystem::assemble(&psi_k, &q, None, reg)?;
        let exact = gs.apply_pinv(&cross_apply(&psi_k, &psi_km1, &q, None, &p)?)?;
        let approx = match kind {
            PropositionKind::Qnhb => p.clone(),
            PropositionKind::NhbFd => {
                let diff: Vec<f64> = v_k.iter().zip(&v_km1).map(|(a, b)| (a - b) / h).collect();
                gs.apply_pinv(&weighted_rhs(&psi_k, &diff, &q, None)?)?
            }
        };
        let gap = &psi_k * (approx - exact);
        data.deltas.push(beta * norm(gap.as_slice(), &q, None)?);
        data.kappas.push(match kind {
            PropositionKind::Qnhb => sampled_kappa(&spec, &theta_k, &p, &q, 23)?,
            PropositionKind::NhbFd => kappa_km1,
        });
    }
    Ok(data)
}

/// Bound constant: `h` for QNHB, `h / 2` for NHB-FD.
fn bound_factor(kind: PropositionKind) -> f64 {
    match kind {
        PropositionKind::Qnhb => 1.0,
        PropositionKind::NhbFd => 0.5,
    }
}

pub fn proposition_scaling(kind: PropositionKind) -> Result<OracleReport> {
    let name = match kind {
        PropositionKind::Qnhb => "proposition_scaling_qnhb",
        PropositionKind::NhbFd => "proposition_scaling_nhb_fd",
    };
    let d = proposition_scaling_data(kind, false)?;
    let n = d.hs.len();
    let mut checks = Vec::new();
    for i in n - 3..n - 1 {
        checks.push(Check::within(format!("ratio_h{:.4}", d.hs[i]), d.deltas[i] / d.deltas[i + 1], 1.7, 2.3));
    }
    let worst = (0..n)
        .map(|i| d.deltas[i] / (bound_factor(kind) * d.hs[i] * d.beta * d.kappas[i]))
        .fold(0.0, f64::max);
    checks.push(Check::at_most("delta_over_bound", worst, 1.5));
    if kind == PropositionKind::NhbFd {
        let q = proposition_scaling_data(PropositionKind::Qnhb, false)?;
        checks.push(Check::within("fd_over_qnhb", d.deltas[n - 1] / q.deltas[n - 1], 0.25, 1.0));
    }
    let lin = proposition_scaling_data(kind, true)?;
    checks.push(Check::at_most("linear_model_delta", lin.deltas.iter().copied().fold(0.0, f64::max), 1e-10));
    Ok(OracleReport::new(name, checks))
}

pub fn exact_solution_residual(problem: &Problem) -> Result<OracleReport> {
    Ok(OracleReport::new(
        format!("exact_solution_residual_{}", problem.name),
        vec![
            Check::at_most("residual", exact_residual(problem, 0.0)?, 1e-9),
            Check::within("perturbed_residual", exact_residual(problem, 0.01)?, 1e-9, f64::INFINITY),
        ],
    ))
}

// --- linear collapse --------------------------------------------------------

/// Dense reference optimizer on a linear least-squares problem: classical
/// Heavy-Ball or Nesterov preconditioned by the exact Gram inverse.
struct ClassicalLinear {
    psi: DMatrix<f64>,
    gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
    targets: DVector<f64>,
}

impl ClassicalLinear {
    fn new(problem: &Problem) -> Result<Self> {
        let q = &problem.train_q;
        let psi = problem.model.tangent_features(&DVector::zeros(problem.model.param_count()), q)?;
        let weights = DVector::from_column_slice(q.weights());
        let mut wpsi = psi.clone();
        for (j, w) in weights.iter().enumerate() {
            wpsi.row_mut(j).scale_mut(*w);
        }
        let gram = (psi.transpose() * wpsi)
            .cholesky()
            .ok_or_else(|| NatmoError::invalid("linear Gram is not positive definite"))?;
        Ok(Self {
            psi,
            gram,
            weights,
            targets: DVector::from_column_slice(problem.loss.reference()),
        })
    }

    fn direction(&self, theta: &DVector<f64>) -> DVector<f64> {
        let r = (&self.psi * theta - &self.targets).component_mul(&self.weights);
        self.gram.solve(&self.psi.tr_mul(&r))
    }

    fn alpha(&self, dir: &DVector<f64>, cap: f64) -> f64 {
        let n = dir.norm();
        if n > 0.0 {
            (1.0 / n).min(cap)
        } else {
            cap
        }
    }

    fn heavy_ball(&self, theta0: &DVector<f64>, beta: f64, cap: f64, iters: usize) -> Vec<DVector<f64>> {
        let mut out = vec![theta0.clone()];
        let mut h_prev: Option<f64> = None;
        for k in 0..iters {
            let th = &out[k];
            let dir = self.direction(th);
            let a = self.alpha(&dir, cap);
            let h = a.sqrt();
            let mut next = th - a * dir;
            if k > 0 {
                next += (h / h_prev.unwrap()) * beta * (th - &out[k - 1]);
            }
            h_prev = Some(h);
            out.push(next);
        }
        out
    }

    fn nesterov(&self, theta0: &DVector<f64>, scale: f64, cap: f64, iters: usize) -> Vec<DVector<f64>> {
        let mut out = vec![theta0.clone()];
        for k in 0..iters {
            let th = &out[k];
            let beta = if k <= 1 { 0.0 } else { scale * (k as f64 - 1.0) / (k as f64 + 1.0) };
            let y = if k == 0 { th.clone() } else { th + beta * (th - &out[k - 1]) };
            let dir = self.direction(&y);
            let a = self.alpha(&dir, cap);
            out.push(y - a * dir);
        }
        out
    }
}

fn trajectory(problem: &Problem, cfg: &OptConfig, theta0: &DVector<f64>, iters: usize) -> Result<Vec<DVector<f64>>> {
    let mut state = OptState::new(theta0.clone());
    let mut out = vec![theta0.clone()];
    for _ in 0..iters {
        let e = Evaluation::at(problem, &state.theta_k)?;
        step(&mut state, problem, cfg, e)?;
        out.push(state.theta_k.clone());
    }
    Ok(out)
}

fn max_rel_gap(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm() / y.norm().max(1.0))
        .fold(0.0, f64::max)
}

pub const COLLAPSE_ITERS: usize = 20;

/// Worst relative gap of each method's trajectory against its classical
/// reference on three seeds, for given `hb_beta` and Nesterov scale.
pub fn linear_collapse_gaps(hb_beta: f64, nesterov_scale: f64, metric: MetricChoice) -> Result<Vec<(Method, f64)>> {
    let m = 50;
    let mut gaps: Vec<(Method, f64)> = Method::ALL.iter().map(|m| (*m, 0.0)).collect();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let targets: Vec<f64> = gaussian_vec(&mut rng, m).into_iter().map(|t| 3.0 * t).collect();
        let problem = linear_problem(4, m, targets)?;
        let theta0 = init_params(&problem.model, seed);
        let reference = ClassicalLinear::new(&problem)?;
        let cap = 0.1;
        let hb = reference.heavy_ball(&theta0, hb_beta, cap, COLLAPSE_ITERS);
        let hb0 = reference.heavy_ball(&theta0, 0.0, cap, COLLAPSE_ITERS);
        let nest = reference.nesterov(&theta0, nesterov_scale, cap, COLLAPSE_ITERS);
        for (method, gap) in gaps.iter_mut() {
            let mut cfg = OptConfig::new(*method);
            cfg.hb_beta = hb_beta;
            cfg.nesterov_scale = nesterov_scale;
            cfg.metric_w = metric;
            cfg.metric_x = metric;
            let traj = trajectory(&problem, &cfg, &theta0, COLLAPSE_ITERS)?;
            let want = if method.is_heavy_ball() {
                &hb
            } else if method.nesterov().is_some() {
                &nest
            } else {
                &hb0
            };
            *gap = gap.max(max_rel_gap(&traj, want));
        }
    }
    Ok(gaps)
}

pub fn linear_collapse_check() -> Result<OracleReport> {
    let mut checks = Vec::new();
    for (method, gap) in linear_collapse_gaps(0.5, 1.0, MetricChoice::L2)? {
        checks.push(Check::at_most(method.tag(), gap, 1e-10));
    }
    // Zero momentum: every method follows NGD. The Nesterov scale cannot be
    // zero, so a tiny scale stands in and is compared with its own reference.
    for (method, gap) in linear_collapse_gaps(0.0, 1e-300, MetricChoice::HessianInduced)? {
        checks.push(Check::at_most(format!("{}_beta0", method.tag()), gap, 1e-10));
    }
    Ok(OracleReport::new("linear_collapse", checks))
}

// --- regularizer limits -----------------------------------------------------

/// Full-rank Gram matrix and a gradient in its range, from a random
/// 40 x 10 feature matrix.
pub fn random_gram_pair(seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = DMatrix::from_fn(40, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r = DVector::from_vec(gaussian_vec(&mut rng, 40));
    (psi.transpose() * &psi / 40.0, psi.tr_mul(&r) / 40.0)
}

/// Relative gaps of `eps (G + eps I)^-1 g` to `g` at `eps = 1e6 lmax` and of
/// `(G + eps I)^-1 g` to the cutoff direction at `eps = 1e-12 lmax`.
pub fn regularizer_limit_gaps(g: &DMatrix<f64>, grad: &DVector<f64>) -> Result<(f64, f64)> {
    let cutoff = GramSystem::from_matrix(g.clone(), RegPolicy::Cutoff { eps_rel: 1e-10 })?;
    let lmax = cutoff.lambda_max();
    let eps_big = 1e6 * lmax;
    let big = cutoff.with_policy(RegPolicy::Shift { eps: eps_big })?.apply_pinv(grad)? * eps_big;
    let far = (&big - grad).norm() / grad.norm();
    let small = cutoff.with_policy(RegPolicy::Shift { eps: 1e-12 * lmax })?.apply_pinv(grad)?;
    let target = cutoff.apply_pinv(grad)?;
    let near = (&small - &target).norm() / target.norm();
    Ok((far, near))
}

pub fn regularizer_limit_check() -> Result<OracleReport> {
    let (g, grad) = random_gram_pair(29);
    let (far, near) = regularizer_limit_gaps(&g, &grad)?;
    Ok(OracleReport::new(
        "regularizer_limits",
        vec![
            Check::at_most("shift_large_vs_gradient", far, 1e-3),
            Check::at_most("shift_small_vs_cutoff", near, 1e-6),
        ],
    ))
}

/// Every oracle, in a fixed order.
pub fn run_all() -> Result<Vec<OracleReport>> {
    Ok(vec![
        fd_jacobian_suite()?,
        pinv_property_suite()?,
        exact_solution_residual(&benchmarks::advection_diffusion_problem())?,
        exact_solution_residual(&benchmarks::reaction_diffusion_problem())?,
        one_step_linear_check()?,
        linear_collapse_check()?,
        proposition_scaling(PropositionKind::Qnhb)?,
        proposition_scaling(PropositionKind::NhbFd)?,
        regularizer_limit_check()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_pass_flag_follows_checks() {
        assert!(OracleReport::new("a", vec![Check::at_most("x", 1.0, 2.0)]).pass);
        assert!(!OracleReport::new("a", vec![Check::at_most("x", 3.0, 2.0)]).pass);
        assert!(!OracleReport::new("a", vec![Check::within("x", f64::NAN, 0.0, 1.0)]).pass);
        assert!(!OracleReport::new("a", vec![]).pass);
    }

    #[test]
    fn fd_detects_a_wrong_jacobian() {
        let psi = DMatrix::from_element(3, 2, 1.0);
        let mut off = psi.clone();
        off[(1, 1)] += 1e-3;
        assert!(rel_max_error(&off, &psi) > 1e-6);
    }

    #[test]
    fn pinv_examples() {
        assert!(pinv_property_check(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))).unwrap().pass);
        assert!(pinv_property_check(&DMatrix::identity(4, 4)).unwrap().pass);
        let g = rank_deficient_gram(1);
        assert!(pinv_property_check(&g).unwrap().pass);
        let rank = GramSystem::from_matrix(g, RegPolicy::Cutoff { eps_rel: 1e-10 })
            .unwrap()
            .eigenvalues()
            .iter()
            .filter(|l| **l > 1e-8)
            .count();
        assert_eq!(rank, 15);
    }

    #[test]
    fn target_orthogonal_to_span_gives_no_correction() {
        // theta = 0 and a target orthogonal to all features: gradient is zero.
        let q = QuadratureSet::uniform_grid(-1.0, 1.0, 50).unwrap();
        let psi = ModelSpec::polynomial(4).tangent_features(&DVector::zeros(5), &q).unwrap();
        let raw: Vec<f64> = q.points().map(|x| (7.0 * x[0]).sin() + x[0].powi(5)).collect();
        let c = dense_projection(&psi, &raw, &q).unwrap();
        let fitted = &psi * c;
        let orth: Vec<f64> = raw.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
        let problem = linear_problem(4, 50, orth).unwrap();
        let mut cfg = OptConfig::new(Method::Ngd);
        cfg.fixed_step = Some(1.0);
        let mut state = OptState::new(DVector::zeros(5));
        let e = Evaluation::at(&problem, &state.theta_k).unwrap();
        step(&mut state, &problem, &cfg, e).unwrap();
        assert!(state.theta_k.amax() < 1e-10);
    }
}
