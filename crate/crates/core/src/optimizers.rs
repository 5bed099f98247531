//! Update rules: natural gradient descent, the natural Heavy-Ball family
//! (NHB, QNHB, NHB-FD) and the natural Nesterov family (NN-I, NN-II and
//! their functional-difference and quasi variants).
//!
//! All rules share the clipped step `alpha = min(1/|g|, cap)` on the
//! preconditioned gradient direction `g = G_W^+ grad`, with `h = sqrt(alpha)`.
//! Momentum is never clipped.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;

use crate::benchmarks::Problem;
use crate::error::{NatmoError, Result};
use crate::harness::{IterRecord, RunStatus, RunTrace};
use crate::losses::{grad_from_pointwise, loss_value, pointwise_derivs, MetricChoice};
use crate::models::{init_params, ParameterVector, TangentFeatures};
use crate::natgrad::{cross_apply, weighted_rhs, GramSystem, RegPolicy};

/// A run is declared diverged once the loss exceeds this multiple of its
/// initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Ngd,
    Nhb,
    Qnhb,
    NhbFd,
    NnI,
    NnIFd,
    NnII,
    NnIIFd,
    QnnI,
    QnnII,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NesterovFamily {
    /// Gradient step with the Gram matrix at the shifted point.
    NN1,
    /// Gradient step with the Gram matrix at the current point.
    NN2,
}

/// How the Nesterov shift `d_k` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentumTransport {
    CrossGram,
    FunctionalDifference,
    Parametric,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Ngd,
        Method::Nhb,
        Method::Qnhb,
        Method::NhbFd,
        Method::NnI,
        Method::NnIFd,
        Method::NnII,
        Method::NnIIFd,
        Method::QnnI,
        Method::QnnII,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ngd => "NGD",
            Method::Nhb => "NHB",
            Method::Qnhb => "QNHB",
            Method::NhbFd => "NHB-FD",
            Method::NnI => "NN-I",
            Method::NnIFd => "NN-I-FD",
            Method::NnII => "NN-II",
            Method::NnIIFd => "NN-II-FD",
            Method::QnnI => "QNN-I",
            Method::QnnII => "QNN-II",
        }
    }

    pub fn nesterov(self) -> Option<(NesterovFamily, MomentumTransport)> {
        use MomentumTransport::*;
        use NesterovFamily::*;
        match self {
            Method::NnI => Some((NN1, CrossGram)),
            Method::NnIFd => Some((NN1, FunctionalDifference)),
            Method::NnII => Some((NN2, CrossGram)),
            Method::NnIIFd => Some((NN2, FunctionalDifference)),
            Method::QnnI => Some((NN1, Parametric)),
            Method::QnnII => Some((NN2, Parametric)),
            _ => None,
        }
    }

    pub fn is_heavy_ball(self) -> bool {
        matches!(self, Method::Nhb | Method::Qnhb | Method::NhbFd)
    }

    fn needs_prev_features(self) -> bool {
        matches!(self, Method::Nhb | Method::NnI | Method::NnII)
    }

    fn needs_prev_values(self) -> bool {
        matches!(self, Method::NhbFd | Method::NnIFd | Method::NnIIFd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = NatmoError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| NatmoError::UnknownMethod(s.to_string()))
    }
}

/// A method name as written in configs: `[GN-]<tag>[@<nesterov scale>]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub gauss_newton: bool,
    pub scale: Option<f64>,
}

impl FromStr for MethodSpec {
    type Err = NatmoError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || NatmoError::UnknownMethod(s.to_string());
        let (body, scale) = match s.split_once('@') {
            Some((b, sc)) => (b, Some(sc.parse::<f64>().map_err(|_| unknown())?)),
            None => (s, None),
        };
        let (body, gauss_newton) = match body.get(..3) {
            Some(p) if p.eq_ignore_ascii_case("GN-") => (&body[3..], true),
            _ => (body, false),
        };
        let method: Method = body.parse().map_err(|_| unknown())?;
        if scale.is_some() && method.nesterov().is_none() {
            return Err(NatmoError::UnknownMethod(format!("{s}: only Nesterov methods take a scale")));
        }
        Ok(MethodSpec {
            method,
            gauss_newton,
            scale,
        })
    }
}

/// Every accepted method name without a scale suffix.
pub fn method_names() -> Vec<String> {
    let plain = Method::ALL.iter().map(|m| m.tag().to_string());
    let gn = Method::ALL.iter().map(|m| format!("GN-{}", m.tag()));
    plain.chain(gn).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptConfig {
    pub kind: Method,
    pub reg: RegPolicy,
    /// Metric of the gradient preconditioner.
    pub metric_w: MetricChoice,
    /// Metric used to transport and project momentum.
    pub metric_x: MetricChoice,
    pub hb_beta: f64,
    pub nesterov_scale: f64,
    pub clip_cap: f64,
    /// Replaces clipping by a constant step `alpha = s` when set.
    pub fixed_step: Option<f64>,
    pub max_iters: usize,
    /// Overrides the problem's stop threshold when set.
    pub stop_threshold: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self::new(Method::Ngd)
    }
}

impl OptConfig {
    pub fn new(kind: Method) -> Self {
        Self {
            kind,
            reg: RegPolicy::default(),
            metric_w: MetricChoice::L2,
            metric_x: MetricChoice::L2,
            hb_beta: 0.5,
            nesterov_scale: 1.0,
            clip_cap: 0.1,
            fixed_step: None,
            max_iters: crate::benchmarks::DEFAULT_MAX_ITERS,
            stop_threshold: None,
        }
    }

    /// Gauss-Newton variants use the Hessian-induced metric for the gradient
    /// only; momentum stays in `L^2`.
    pub fn from_spec(spec: &MethodSpec) -> Self {
        let mut cfg = Self::new(spec.method);
        if spec.gauss_newton {
            cfg.metric_w = MetricChoice::HessianInduced;
        }
        if let Some(s) = spec.scale {
            cfg.nesterov_scale = s;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if !(0.0..1.0).contains(&self.hb_beta) {
            return Err(NatmoError::Config(format!("hb_beta {} is outside [0, 1)", self.hb_beta)));
        }
        if !(self.nesterov_scale > 0.0 && self.nesterov_scale <= 1.0) {
            return Err(NatmoError::Config(format!("nesterov_scale {} is outside (0, 1]", self.nesterov_scale)));
        }
        if !(self.clip_cap > 0.0 && self.clip_cap.is_finite()) {
            return Err(NatmoError::Config(format!("clip_cap {} must be positive", self.clip_cap)));
        }
        if let Some(s) = self.fixed_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(NatmoError::Config(format!("fixed step {s} must be positive")));
            }
        }
        Ok(())
    }

    /// Method name as written to traces.
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.metric_w == MetricChoice::HessianInduced {
            s.push_str("GN-");
        }
        s.push_str(self.kind.tag());
        if self.kind.nesterov().is_some() && self.nesterov_scale != 1.0 {
            s.push_str(&format!("@{}", self.nesterov_scale));
        }
        s
    }
}

/// `alpha = min(1/|g|, cap)` (`cap` for `g = 0`) and `h = sqrt(alpha)`.
pub fn clipped_alpha(g: &DVector<f64>, cap: f64) -> Result<(f64, f64)> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(NatmoError::NonFinite("gradient direction".into()));
    }
    let n = g.norm();
    let alpha = if n > 0.0 { (1.0 / n).min(cap) } else { cap };
    Ok((alpha, alpha.sqrt()))
}

pub fn beta_heavy_ball(cfg: &OptConfig, _k: usize) -> f64 {
    cfg.hb_beta
}

/// `scale * (k - 1) / (k + 1)`; zero for `k <= 1`.
pub fn beta_nesterov(cfg: &OptConfig, k: usize) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    cfg.nesterov_scale * (k as f64 - 1.0) / (k as f64 + 1.0)
}

/// Model values, tangent features and point-wise loss derivatives at one
/// parameter vector.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub theta: ParameterVector,
    pub v: Vec<f64>,
    pub psi: TangentFeatures,
    pub g: Vec<f64>,
    pub hess: Vec<f64>,
    pub loss: f64,
}

impl Evaluation {
    pub fn at(problem: &Problem, theta: &ParameterVector) -> Result<Self> {
        let (v, psi) = problem.model.values_and_tangents(theta, &problem.train_q)?;
        let (g, hess) = pointwise_derivs(&problem.loss, &v, &problem.train_q)?;
        let loss = loss_value(&problem.loss, &v, &problem.train_q)?;
        Ok(Self {
            theta: theta.clone(),
            v,
            psi,
            g,
            hess,
            loss,
        })
    }

    pub fn grad(&self, problem: &Problem) -> Result<DVector<f64>> {
        grad_from_pointwise(&self.g, &self.psi, &problem.train_q)
    }

    pub fn metric(&self, choice: MetricChoice) -> Option<&[f64]> {
        match choice {
            MetricChoice::L2 => None,
            MetricChoice::HessianInduced => Some(&self.hess),
        }
    }
}

/// Gram systems at one point: the `W` system and, when the metrics differ,
/// a separate `X` system.
struct Grams {
    w: GramSystem,
    x: Option<GramSystem>,
}

impl Grams {
    fn new(problem: &Problem, cfg: &OptConfig, e: &Evaluation, need_x: bool) -> Result<Self> {
        let w = GramSystem::assemble(&e.psi, &problem.train_q, e.metric(cfg.metric_w), cfg.reg)?;
        let x = if need_x && cfg.metric_x != cfg.metric_w {
            Some(GramSystem::assemble(&e.psi, &problem.train_q, e.metric(cfg.metric_x), cfg.reg)?)
        } else {
            None
        };
        Ok(Self { w, x })
    }

    fn x(&self) -> &GramSystem {
        self.x.as_ref().unwrap_or(&self.w)
    }
}

/// Iteration state. `h_km1` is `None` until the first step has been taken.
#[derive(Clone, Debug)]
pub struct OptState {
    pub k: usize,
    pub theta_k: ParameterVector,
    pub theta_km1: ParameterVector,
    pub h_k: f64,
    pub h_km1: Option<f64>,
    pub values_km1: Option<Vec<f64>>,
    pub psi_km1: Option<TangentFeatures>,
}

impl OptState {
    pub fn new(theta0: ParameterVector) -> Self {
        Self {
            k: 0,
            theta_km1: theta0.clone(),
            theta_k: theta0,
            h_k: 0.0,
            h_km1: None,
            values_km1: None,
            psi_km1: None,
        }
    }

    fn advance(&mut self, next: ParameterVector, h: f64, cfg: &OptConfig, e: Evaluation) {
        self.theta_km1 = std::mem::replace(&mut self.theta_k, next);
        self.h_k = h;
        self.h_km1 = Some(h);
        self.values_km1 = cfg.kind.needs_prev_values().then_some(e.v);
        self.psi_km1 = cfg.kind.needs_prev_features().then_some(e.psi);
        self.k += 1;
    }
}

/// Scalars of one step; `grad_norm` is the norm of the preconditioned
/// gradient direction that the clipping acts on.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub alpha: f64,
    pub beta: f64,
    pub grad_norm: f64,
}

fn step_size(cfg: &OptConfig, dir: &DVector<f64>) -> Result<(f64, f64)> {
    match cfg.fixed_step {
        Some(s) => {
            if dir.iter().any(|x| !x.is_finite()) {
                return Err(NatmoError::NonFinite("gradient direction".into()));
            }
            Ok((s, s.sqrt()))
        }
        None => clipped_alpha(dir, cfg.clip_cap),
    }
}

fn check_eval(state: &OptState, e: &Evaluation) -> Result<()> {
    if e.theta != state.theta_k {
        return Err(NatmoError::invalid("evaluation does not belong to the current iterate"));
    }
    Ok(())
}

/// Dispatches on `cfg.kind`. `e` must be the evaluation at `state.theta_k`.
pub fn step(state: &mut OptState, problem: &Problem, cfg: &OptConfig, e: Evaluation) -> Result<StepInfo> {
    match cfg.kind {
        Method::Ngd => step_ngd(state, problem, cfg, e),
        Method::Nhb => step_nhb(state, problem, cfg, e),
        Method::Qnhb => step_qnhb(state, problem, cfg, e),
        Method::NhbFd => step_nhb_fd(state, problem, cfg, e),
        m => {
            let (family, mode) = m.nesterov().expect("remaining methods are Nesterov");
            step_nesterov(state, problem, cfg, e, family, mode)
        }
    }
}

pub fn step_ngd(state: &mut OptState, problem: &Problem, cfg: &OptConfig, e: Evaluation) -> Result<StepInfo> {
    check_eval(state, &e)?;
    let grams = Grams::new(problem, cfg, &e, false)?;
    let dir = grams.w.apply_pinv(&e.grad(problem)?)?;
    let (alpha, h) = step_size(cfg, &dir)?;
    let next = &state.theta_k - alpha * &dir;
    let info = StepInfo {
        alpha,
        beta: 0.0,
        grad_norm: dir.norm(),
    };
    state.advance(next, h, cfg, e);
    Ok(info)
}

fn heavy_ball(
    state: &mut OptState,
    problem: &Problem,
    cfg: &OptConfig,
    e: Evaluation,
    momentum: impl FnOnce(&OptState, &Evaluation, &Grams) -> Result<DVector<f64>>,
) -> Result<StepInfo> {
    check_eval(state, &e)?;
    let first = state.k == 0;
    let grams = Grams::new(problem, cfg, &e, !first)?;
    let dir = grams.w.apply_pinv(&e.grad(problem)?)?;
    let (alpha, h) = step_size(cfg, &dir)?;
    let mut next = &state.theta_k - alpha * &dir;
    let mut beta = 0.0;
    if !first {
        beta = beta_heavy_ball(cfg, state.k);
        if beta != 0.0 {
            let ratio = h / state.h_km1.unwrap_or(h);
            let m = momentum(state, &e, &grams)?;
            next += (ratio * beta) * m;
        }
    }
    let info = StepInfo {
        alpha,
        beta,
        grad_norm: dir.norm(),
    };
    state.advance(next, h, cfg, e);
    Ok(info)
}

fn missing_cache(what: &str) -> NatmoError {
    NatmoError::invalid(format!("state is missing the cached {what}"))
}

/// Momentum transported by the cross-Gram matrix of successive features.
fn transported_momentum(problem: &Problem, cfg: &OptConfig, state: &OptState, e: &Evaluation, gx: &GramSystem) -> Result<DVector<f64>> {
    let psi_km1 = state.psi_km1.as_ref().ok_or_else(|| missing_cache("tangent features"))?;
    let p = &state.theta_k - &state.theta_km1;
    let rhs = cross_apply(&e.psi, psi_km1, &problem.train_q, e.metric(cfg.metric_x), &p)?;
    gx.apply_pinv(&rhs)
}

/// Momentum from the projected function difference `v_k - v_km1`.
fn difference_momentum(problem: &Problem, cfg: &OptConfig, state: &OptState, e: &Evaluation, gx: &GramSystem) -> Result<DVector<f64>> {
    let v_km1 = state.values_km1.as_ref().ok_or_else(|| missing_cache("model values"))?;
    let diff: Vec<f64> = e.v.iter().zip(v_km1).map(|(a, b)| a - b).collect();
    let z = weighted_rhs(&e.psi, &diff, &problem.train_q, e.metric(cfg.metric_x))?;
    gx.apply_pinv(&z)
}

pub fn step_nhb(state: &mut OptState, problem: &Problem, cfg: &OptConfig, e: Evaluation) -> Result<StepInfo> {
    heavy_ball(state, problem, cfg, e, |s, e, g| transported_momentum(problem, cfg, s, e, g.x()))
}

pub fn step_qnhb(state: &mut OptState, problem: &Problem, cfg: &OptConfig, e: Evaluation) -> Result<StepInfo> {
    heavy_ball(state, problem, cfg, e, |s, _, _| Ok(&s.theta_k - &s.theta_km1))
}

pub fn step_nhb_fd(state: &mut OptState, problem: &Problem, cfg: &OptConfig, e: Evaluation) -> Result<StepInfo> {
    heavy_ball(state, problem, cfg, e, |s, e, g| difference_momentum(problem, cfg, s, e, g.x()))
}

pub fn step_nesterov(
    state: &mut OptState,
    problem: &Problem,
    cfg: &OptConfig,
    e: Evaluation,
    family: NesterovFamily,
    mode: MomentumTransport,
) -> Result<StepInfo> {
    check_eval(state, &e)?;
    let beta = if state.k == 0 { 0.0 } else { beta_nesterov(cfg, state.k) };
    let needs_x = beta != 0.0 && mode != MomentumTransport::Parametric;
    // Gram systems at theta_k are needed by NN-II always and by the
    // transported or difference shift.
    let grams_k = if family == NesterovFamily::NN2 || needs_x {
        Some(Grams::new(problem, cfg, &e, needs_x)?)
    } else {
        None
    };
    let y = if beta == 0.0 {
        state.theta_k.clone()
    } else {
        let d = match mode {
            MomentumTransport::Parametric => &state.theta_k - &state.theta_km1,
            MomentumTransport::CrossGram => transported_momentum(problem, cfg, state, &e, grams_k.as_ref().unwrap().x())?,
            MomentumTransport::FunctionalDifference => {
                difference_momentum(problem, cfg, state, &e, grams_k.as_ref().unwrap().x())?
            }
        };
        &state.theta_k + beta * d
    };

    let dir = match family {
        NesterovFamily::NN1 => {
            if beta == 0.0 {
                let gw = match &grams_k {
                    Some(g) => g.w.clone(),
                    None => Grams::new(problem, cfg, &e, false)?.w,
                };
                gw.apply_pinv(&e.grad(problem)?)?
            } else {
                let ey = Evaluation::at(problem, &y)?;
                if !ey.loss.is_finite() {
                    return Err(NatmoError::NonFinite("loss at the shifted point".into()));
                }
                let gw = Grams::new(problem, cfg, &ey, false)?.w;
                gw.apply_pinv(&ey.grad(problem)?)?
            }
        }
        NesterovFamily::NN2 => {
            let gw = &grams_k.as_ref().expect("assembled for NN-II").w;
            let g_w = if beta == 0.0 {
                e.g.clone()
            } else {
                let w = problem.model.evaluate(&y, &problem.train_q, false)?.v;
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(NatmoError::NonFinite("values at the shifted point".into()));
                }
                pointwise_derivs(&problem.loss, &w, &problem.train_q)?.0
            };
            gw.apply_pinv(&grad_from_pointwise(&g_w, &e.psi, &problem.train_q)?)?
        }
    };
    let (alpha, h) = step_size(cfg, &dir)?;
    let next = &y - alpha * &dir;
    let info = StepInfo {
        alpha,
        beta,
        grad_norm: dir.norm(),
    };
    state.advance(next, h, cfg, e);
    Ok(info)
}

/// Runs `cfg` on `problem` from `init_params(model, seed)`.
pub fn run(problem: &Problem, cfg: &OptConfig, seed: u64) -> Result<RunTrace> {
    run_observed(problem, cfg, seed, &mut |_| Ok(()))
}

/// Like [`run`], calling `observe` on every record as soon as it exists.
/// Divergence ends the run with status `Diverged`; only configuration and
/// observer errors are returned as `Err`.
pub fn run_observed(
    problem: &Problem,
    cfg: &OptConfig,
    seed: u64,
    observe: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<RunTrace> {
    cfg.validate()?;
    problem.model.validate()?;
    let threshold = cfg.stop_threshold.unwrap_or(problem.stop.threshold);
    let start = Instant::now();
    let mut trace = RunTrace::new(&problem.name, &cfg.label(), seed);
    let mut state = OptState::new(init_params(&problem.model, seed));
    let mut info = StepInfo::default();
    let mut initial_loss = None;

    let status = loop {
        let e = match Evaluation::at(problem, &state.theta_k) {
            Ok(e) => e,
            Err(err) => {
                log::warn!("{}: evaluation failed at iteration {}: {err}", trace.run_id, state.k);
                break RunStatus::Diverged;
            }
        };
        let stop_metric = problem.stop_metric(&e.v)?;
        let test_metric = problem.test_metric(&state.theta_k)?;
        let record = IterRecord {
            iter: state.k,
            time_ms: start.elapsed().as_secs_f64() * 1e3,
            train_loss: e.loss,
            stop_metric,
            test_metric,
            alpha: info.alpha,
            beta: info.beta,
            grad_norm: info.grad_norm,
        };
        observe(&record)?;
        trace.records.push(record);

        let loss0 = *initial_loss.get_or_insert(e.loss);
        let finite = e.loss.is_finite() && state.theta_k.iter().all(|x| x.is_finite());
        if !finite || e.loss > DIVERGENCE_FACTOR * loss0 {
            break RunStatus::Diverged;
        }
        if stop_metric <= threshold {
            break RunStatus::Converged;
        }
        if state.k >= cfg.max_iters {
            break RunStatus::MaxIters;
        }
        match step(&mut state, problem, cfg, e) {
            Ok(i) => info = i,
            Err(err) => {
                log::warn!("{}: step {} failed: {err}", trace.run_id, state.k);
                break RunStatus::Diverged;
            }
        }
    };
    trace.finish(status)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{StopMetric, StopRule};
    use crate::losses::LossSpec;
    use crate::models::ModelSpec;
    use crate::quadrature::QuadratureSet;

    fn cfg_with(kind: Method) -> OptConfig {
        OptConfig::new(kind)
    }

    #[test]
    fn clipping_examples() {
        let g = DVector::from_vec(vec![60.0, 80.0]);
        let (a, h) = clipped_alpha(&g, 0.1).unwrap();
        assert!((a - 0.01).abs() < 1e-16 && (h - 0.1).abs() < 1e-16);
        assert_eq!(clipped_alpha(&DVector::from_vec(vec![1.0]), 0.1).unwrap().0, 0.1);
        assert_eq!(clipped_alpha(&DVector::from_vec(vec![20.0]), 0.1).unwrap().0, 0.05);
        assert_eq!(clipped_alpha(&DVector::zeros(3), 0.1).unwrap().0, 0.1);
        assert!(clipped_alpha(&DVector::from_vec(vec![f64::NAN]), 0.1).is_err());
    }

    #[test]
    fn beta_schedules() {
        let mut cfg = cfg_with(Method::NnII);
        assert_eq!(beta_heavy_ball(&cfg, 1), 0.5);
        assert_eq!(beta_heavy_ball(&cfg, 100), 0.5);
        assert_eq!(beta_nesterov(&cfg, 1), 0.0);
        assert_eq!(beta_nesterov(&cfg, 3), 0.5);
        cfg.nesterov_scale = 0.75;
        assert_eq!(beta_nesterov(&cfg, 3), 0.375);
    }

    #[test]
    fn method_names_parse() {
        for name in method_names() {
            let spec: MethodSpec = name.parse().unwrap();
            assert_eq!(OptConfig::from_spec(&spec).label(), name);
        }
        assert_eq!(method_names().len(), 20);
        let spec: MethodSpec = "NN-II@0.75".parse().unwrap();
        assert_eq!(spec.scale, Some(0.75));
        assert_eq!(OptConfig::from_spec(&spec).label(), "NN-II@0.75");
        let gn: MethodSpec = "gn-nhb".parse().unwrap();
        assert!(gn.gauss_newton && gn.method == Method::Nhb);
        assert!(matches!("ADAM".parse::<MethodSpec>(), Err(NatmoError::UnknownMethod(_))));
        assert!("NHB@0.5".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = cfg_with(Method::Nhb);
        assert!(cfg.validate().is_ok());
        cfg.hb_beta = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = cfg_with(Method::NnI);
        cfg.nesterov_scale = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = cfg_with(Method::Ngd);
        cfg.clip_cap = 0.0;
        assert!(cfg.validate().is_err());
    }

    fn tiny_problem(targets: Vec<f64>) -> Problem {
        let q = QuadratureSet::uniform_grid(-1.0, 1.0, targets.len()).unwrap();
        Problem {
            name: "tiny".into(),
            model: ModelSpec::polynomial(2),
            loss: LossSpec::LeastSquares { targets: targets.clone() },
            train_q: q.clone(),
            test_q: q,
            stop: StopRule {
                metric: StopMetric::MseTrain,
                threshold: 0.0,
            },
            test_reference: targets,
            pde: None,
            max_iters: 10,
            manifest: vec![],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = tiny_problem(vec![0.0; 7]);
        let theta = DVector::zeros(3);
        let mut state = OptState::new(theta.clone());
        let e = Evaluation::at(&p, &theta).unwrap();
        let info = step_ngd(&mut state, &p, &cfg_with(Method::Ngd), e).unwrap();
        assert_eq!(state.theta_k, theta);
        assert_eq!(info.alpha, 0.1);
    }

    fn trajectory(p: &Problem, cfg: &OptConfig, iters: usize) -> Vec<ParameterVector> {
        let mut state = OptState::new(DVector::from_vec(vec![1.0, -2.0, 0.5]));
        let mut out = vec![state.theta_k.clone()];
        for _ in 0..iters {
            let e = Evaluation::at(p, &state.theta_k).unwrap();
            step(&mut state, p, cfg, e).unwrap();
            out.push(state.theta_k.clone());
        }
        out
    }

    #[test]
    fn zero_beta_reduces_heavy_ball_to_ngd() {
        let p = tiny_problem((0..9).map(|j| (j as f64 * 0.7).sin()).collect());
        let ngd = trajectory(&p, &cfg_with(Method::Ngd), 8);
        for kind in [Method::Nhb, Method::Qnhb, Method::NhbFd] {
            let mut cfg = cfg_with(kind);
            cfg.hb_beta = 0.0;
            assert_eq!(trajectory(&p, &cfg, 8), ngd);
        }
    }

    #[test]
    fn first_momentum_step_is_ngd() {
        let p = tiny_problem((0..9).map(|j| (j as f64 * 0.7).cos()).collect());
        let ngd = trajectory(&p, &cfg_with(Method::Ngd), 1);
        for kind in Method::ALL {
            assert_eq!(trajectory(&p, &cfg_with(kind), 1), ngd, "{kind}");
        }
        // Nesterov's beta is still zero at k = 1.
        let ngd2 = trajectory(&p, &cfg_with(Method::Ngd), 2);
        for kind in Method::ALL.into_iter().filter(|m| m.nesterov().is_some()) {
            assert_eq!(trajectory(&p, &cfg_with(kind), 2), ngd2, "{kind}");
        }
    }

    #[test]
    fn gauss_newton_equals_l2_for_least_squares() {
        let p = tiny_problem((0..9).map(|j| (j as f64).sqrt()).collect());
        for kind in Method::ALL {
            let plain = trajectory(&p, &cfg_with(kind), 6);
            let gn = trajectory(&p, &OptConfig::from_spec(&MethodSpec { method: kind, gauss_newton: true, scale: None }), 6);
            assert_eq!(plain, gn, "{kind}");
        }
    }

    #[test]
    fn caches_follow_the_method() {
        let p = tiny_problem(vec![1.0; 5]);
        for kind in Method::ALL {
            let cfg = cfg_with(kind);
            let mut state = OptState::new(DVector::zeros(3));
            let e = Evaluation::at(&p, &state.theta_k).unwrap();
            step(&mut state, &p, &cfg, e).unwrap();
            assert_eq!(state.psi_km1.is_some(), kind.needs_prev_features(), "{kind}");
            assert_eq!(state.values_km1.is_some(), kind.needs_prev_values(), "{kind}");
            assert!(state.h_k > 0.0);
        }
    }

    #[test]
    fn zero_max_iters_records_initial_point_only() {
        let p = tiny_problem(vec![1.0; 5]);
        let mut cfg = cfg_with(Method::Nhb);
        cfg.max_iters = 0;
        let t = run(&p, &cfg, 0).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.status, Some(RunStatus::MaxIters));
    }

    #[test]
    fn runs_are_deterministic() {
        let p = tiny_problem((0..11).map(|j| (j as f64 * 0.3).exp()).collect());
        let cfg = cfg_with(Method::NnIFd);
        let a = run(&p, &cfg, 4).unwrap();
        let b = run(&p, &cfg, 4).unwrap();
        assert_eq!(a.numeric_columns(), b.numeric_columns());
    }

    #[test]
    fn wrong_evaluation_is_rejected() {
        let p = tiny_problem(vec![1.0; 5]);
        let mut state = OptState::new(DVector::zeros(3));
        let e = Evaluation::at(&p, &DVector::from_element(3, 1.0)).unwrap();
        assert!(step_ngd(&mut state, &p, &cfg_with(Method::Ngd), e).is_err());
    }
}
