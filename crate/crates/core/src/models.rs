//! Differentiable parametrizations `theta -> D(theta)` evaluated on quadrature points.
//!
//! Every model computes, per point, a second-order jet `(v, v_x, v_xx)` in the
//! (one-dimensional) input, and the parameter gradient of any linear
//! combination `c0 v + c1 v_x + c2 v_xx` by a reverse sweep through the jet
//! recursion. Tangent features of the operator-induced class `A(D(theta))`
//! fall out of the same sweep with point-dependent coefficients, so mixed
//! derivatives like `d^3 v / dx^2 dtheta_i` never need finite differences.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NatmoError, Result};
use crate::quadrature::QuadratureSet;

pub type ParameterVector = DVector<f64>;

/// `m x d` table, entry `(j, i)` is `psi_i(theta)(x_j)`.
pub type TangentFeatures = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    /// `[s, s', s'', s''']` at `z`.
    fn derivs(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Sigmoid => {
                let s = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                let s1 = s * (1.0 - s);
                let s2 = s1 * (1.0 - 2.0 * s);
                let s3 = s1 * (1.0 - 2.0 * s).powi(2) - 2.0 * s1 * s1;
                [s, s1, s2, s3]
            }
            Activation::Tanh => {
                let t = z.tanh();
                let t1 = 1.0 - t * t;
                let t2 = -2.0 * t * t1;
                let t3 = -2.0 * t1 * t1 + 4.0 * t * t * t1;
                [t, t1, t2, t3]
            }
        }
    }
}

/// Basis function of a linear model, acting on the first input coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearFeature {
    Monomial(u32),
}

impl LinearFeature {
    fn jet(self, x: f64) -> Jet {
        match self {
            LinearFeature::Monomial(0) => Jet::new(1.0, 0.0, 0.0),
            LinearFeature::Monomial(1) => Jet::new(x, 1.0, 0.0),
            LinearFeature::Monomial(p) => {
                let p = p as i32;
                let pf = p as f64;
                Jet::new(
                    x.powi(p),
                    pf * x.powi(p - 1),
                    pf * (pf - 1.0) * x.powi(p - 2),
                )
            }
        }
    }
}

/// Output transforms that build boundary conditions into the model class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryTransform {
    /// `x (1 - x) N(x)`: homogeneous Dirichlet on `[0, 1]`.
    AdvectionDiffusion,
    /// `N(x) (1 - x)^2 (1 + x)^2 + c + a (x^3/3 - x)`: homogeneous Neumann on
    /// `[-1, 1]`. Appends `(a, c)` to the parameter vector.
    ReactionDiffusion,
}

impl BoundaryTransform {
    fn extra_params(self) -> usize {
        match self {
            BoundaryTransform::AdvectionDiffusion => 0,
            BoundaryTransform::ReactionDiffusion => 2,
        }
    }

    fn factor(self, x: f64) -> Jet {
        match self {
            BoundaryTransform::AdvectionDiffusion => Jet::new(x * (1.0 - x), 1.0 - 2.0 * x, -2.0),
            BoundaryTransform::ReactionDiffusion => {
                let r = 1.0 - x * x;
                Jet::new(r * r, -4.0 * x * r, 12.0 * x * x - 4.0)
            }
        }
    }
}

/// PDE operators `A` defining the operator-induced class `A o D`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PdeOperator {
    /// `-mu u'' + u'`
    AdvectionDiffusion { mu: f64 },
    /// `-u'' + u^3`
    ReactionDiffusion,
}

impl PdeOperator {
    pub fn apply(self, u: f64, u_x: f64, u_xx: f64) -> f64 {
        match self {
            PdeOperator::AdvectionDiffusion { mu } => -mu * u_xx + u_x,
            PdeOperator::ReactionDiffusion => -u_xx + u * u * u,
        }
    }

    /// Coefficients of the linearized operator acting on `(du, du_x, du_xx)` at `u`.
    fn linearization(self, u: f64) -> Jet {
        match self {
            PdeOperator::AdvectionDiffusion { mu } => Jet::new(0.0, 1.0, -mu),
            PdeOperator::ReactionDiffusion => Jet::new(3.0 * u * u, 0.0, -1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    /// `sum_i theta_i phi_i`
    Linear { features: Vec<LinearFeature> },
    /// `a^T sigma(A x + b) + c`, `d = (n + 2) k + 1`.
    ShallowMlp {
        input_dim: usize,
        width: usize,
        activation: Activation,
    },
    /// Fully connected network; `widths` lists input, hidden and output sizes
    /// (output must be 1). The activation is applied on every hidden layer.
    DeepMlp {
        widths: Vec<usize>,
        activation: Activation,
    },
    /// Logistic map applied to the inner output.
    OutputSquash(Box<ModelSpec>),
    BcWrap {
        inner: Box<ModelSpec>,
        transform: BoundaryTransform,
    },
    ResidualWrap {
        inner: Box<ModelSpec>,
        operator: PdeOperator,
    },
}

/// Point values of a model, optionally with first and second input derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBundle {
    pub v: Vec<f64>,
    pub v_x: Option<Vec<f64>>,
    pub v_xx: Option<Vec<f64>>,
}

/// Anything that maps a parameter vector to point values on a quadrature.
pub trait Parametrization {
    fn param_count(&self) -> usize;
    fn values(&self, theta: &ParameterVector, q: &QuadratureSet) -> Result<Vec<f64>>;
}

impl Parametrization for ModelSpec {
    fn param_count(&self) -> usize {
        ModelSpec::param_count(self)
    }

    fn values(&self, theta: &ParameterVector, q: &QuadratureSet) -> Result<Vec<f64>> {
        Ok(self.evaluate(theta, q, false)?.v)
    }
}

/// Second-order Taylor data in the input coordinate; also reused as a
/// coefficient triple for reverse sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Jet {
    v: f64,
    d1: f64,
    d2: f64,
}

impl Jet {
    fn new(v: f64, d1: f64, d2: f64) -> Self {
        Self { v, d1, d2 }
    }
}

/// The seed for a reverse sweep may depend on the node's own jet.
type SeedFn<'a> = &'a dyn Fn(Jet) -> Jet;

impl ModelSpec {
    pub fn shallow(input_dim: usize, width: usize, activation: Activation) -> Self {
        ModelSpec::ShallowMlp {
            input_dim,
            width,
            activation,
        }
    }

    pub fn deep(widths: Vec<usize>, activation: Activation) -> Self {
        ModelSpec::DeepMlp { widths, activation }
    }

    pub fn polynomial(degree: u32) -> Self {
        ModelSpec::Linear {
            features: (0..=degree).map(LinearFeature::Monomial).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Linear { features } => features.len(),
            ModelSpec::ShallowMlp {
                input_dim, width, ..
            } => (input_dim + 2) * width + 1,
            ModelSpec::DeepMlp { widths, .. } => {
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
            ModelSpec::OutputSquash(inner) => inner.param_count(),
            ModelSpec::BcWrap { inner, transform } => inner.param_count() + transform.extra_params(),
            ModelSpec::ResidualWrap { inner, .. } => inner.param_count(),
        }
    }

    /// Input dimension the model expects, if it constrains it.
    fn input_dim(&self) -> Option<usize> {
        match self {
            ModelSpec::Linear { .. } => None,
            ModelSpec::ShallowMlp { input_dim, .. } => Some(*input_dim),
            ModelSpec::DeepMlp { widths, .. } => widths.first().copied(),
            ModelSpec::OutputSquash(inner) => inner.input_dim(),
            ModelSpec::BcWrap { .. } | ModelSpec::ResidualWrap { .. } => Some(1),
        }
    }

    /// Structural checks: layer sizes, and operator wraps only at the top.
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(true)
    }

    fn validate_inner(&self, top: bool) -> Result<()> {
        match self {
            ModelSpec::Linear { features } => {
                if features.is_empty() {
                    return Err(NatmoError::invalid("linear model needs at least one feature"));
                }
            }
            ModelSpec::ShallowMlp {
                input_dim, width, ..
            } => {
                if *input_dim == 0 || *width == 0 {
                    return Err(NatmoError::invalid("shallow network needs n >= 1 and k >= 1"));
                }
            }
            ModelSpec::DeepMlp { widths, .. } => {
                if widths.len() < 2 || widths.contains(&0) || *widths.last().unwrap() != 1 {
                    return Err(NatmoError::invalid(format!(
                        "deep network widths {widths:?} must be positive with scalar output"
                    )));
                }
            }
            ModelSpec::OutputSquash(inner) => inner.validate_inner(false)?,
            ModelSpec::BcWrap { inner, .. } => {
                if inner.input_dim().is_some_and(|n| n != 1) {
                    return Err(NatmoError::invalid("boundary wraps need a 1-D input"));
                }
                inner.validate_inner(false)?
            }
            ModelSpec::ResidualWrap { inner, .. } => {
                if !top {
                    return Err(NatmoError::invalid("residual wrap must be the outermost model"));
                }
                if inner.input_dim().is_some_and(|n| n != 1) {
                    return Err(NatmoError::invalid("residual wrap needs a 1-D input"));
                }
                inner.validate_inner(false)?
            }
        }
        Ok(())
    }

    /// For the operator-induced class, the solution model `D` inside `A o D`.
    pub fn solution_model(&self) -> &ModelSpec {
        match self {
            ModelSpec::ResidualWrap { inner, .. } => inner,
            other => other,
        }
    }

    fn check(&self, theta: &ParameterVector, q: &QuadratureSet, derivs: bool) -> Result<()> {
        self.validate()?;
        if theta.len() != self.param_count() {
            return Err(NatmoError::shape(format!(
                "parameter vector has length {}, model expects {}",
                theta.len(),
                self.param_count()
            )));
        }
        if let Some(n) = self.input_dim() {
            if n != q.dim() {
                return Err(NatmoError::shape(format!(
                    "model expects inputs of dimension {n}, quadrature has {}",
                    q.dim()
                )));
            }
        }
        if derivs {
            if q.dim() != 1 {
                return Err(NatmoError::invalid(
                    "input derivatives are only available for 1-D inputs",
                ));
            }
            if matches!(self, ModelSpec::ResidualWrap { .. }) {
                return Err(NatmoError::invalid(
                    "input derivatives of a PDE residual are not provided",
                ));
            }
        }
        Ok(())
    }

    /// Values (and optionally `v_x`, `v_xx`) at every quadrature point.
    pub fn evaluate(
        &self,
        theta: &ParameterVector,
        q: &QuadratureSet,
        want_input_derivs: bool,
    ) -> Result<EvalBundle> {
        self.check(theta, q, want_input_derivs)?;
        let derivs = want_input_derivs || matches!(self, ModelSpec::ResidualWrap { .. });
        let mut ws = Workspace::default();
        let m = q.len();
        let mut v = Vec::with_capacity(m);
        let mut v_x = Vec::with_capacity(if want_input_derivs { m } else { 0 });
        let mut v_xx = Vec::with_capacity(if want_input_derivs { m } else { 0 });
        for x in q.points() {
            let jet = self.forward(theta.as_slice(), x, derivs, &mut ws);
            v.push(jet.v);
            if want_input_derivs {
                v_x.push(jet.d1);
                v_xx.push(jet.d2);
            }
        }
        Ok(EvalBundle {
            v,
            v_x: want_input_derivs.then_some(v_x),
            v_xx: want_input_derivs.then_some(v_xx),
        })
    }

    /// Parameter Jacobian on the quadrature points.
    pub fn tangent_features(&self, theta: &ParameterVector, q: &QuadratureSet) -> Result<TangentFeatures> {
        Ok(self.values_and_tangents(theta, q)?.1)
    }

    /// Values and tangent features from a single sweep per point.
    pub fn values_and_tangents(
        &self,
        theta: &ParameterVector,
        q: &QuadratureSet,
    ) -> Result<(Vec<f64>, TangentFeatures)> {
        self.check(theta, q, false)?;
        let derivs = matches!(self, ModelSpec::ResidualWrap { .. });
        let d = self.param_count();
        let m = q.len();
        let mut ws = Workspace::default();
        let mut psi = DMatrix::zeros(m, d);
        let mut row = vec![0.0; d];
        let mut values = Vec::with_capacity(m);
        let unit = |_: Jet| Jet::new(1.0, 0.0, 0.0);
        for (j, x) in q.points().enumerate() {
            row.iter_mut().for_each(|r| *r = 0.0);
            let jet = self.vjp(theta.as_slice(), x, derivs, &unit, &mut row, &mut ws);
            values.push(jet.v);
            for (i, r) in row.iter().enumerate() {
                psi[(j, i)] = *r;
            }
        }
        Ok((values, psi))
    }

    fn forward(&self, theta: &[f64], x: &[f64], derivs: bool, ws: &mut Workspace) -> Jet {
        match self {
            ModelSpec::Linear { features } => {
                features
                    .iter()
                    .zip(theta)
                    .fold(Jet::default(), |acc, (f, t)| {
                        let phi = f.jet(x[0]);
                        Jet::new(acc.v + t * phi.v, acc.d1 + t * phi.d1, acc.d2 + t * phi.d2)
                    })
            }
            ModelSpec::ShallowMlp {
                input_dim,
                width,
                activation,
            } => {
                let widths = [*input_dim, *width, 1];
                mlp_forward(&widths, *activation, theta, x, derivs, ws)
            }
            ModelSpec::DeepMlp { widths, activation } => {
                mlp_forward(widths, *activation, theta, x, derivs, ws)
            }
            ModelSpec::OutputSquash(inner) => {
                let n = inner.forward(theta, x, derivs, ws);
                squash_jet(n)
            }
            ModelSpec::BcWrap { inner, transform } => {
                let k = inner.param_count();
                let n = inner.forward(&theta[..k], x, true, ws);
                bc_jet(*transform, &theta[k..], x[0], n)
            }
            ModelSpec::ResidualWrap { inner, operator } => {
                let u = inner.forward(theta, x, true, ws);
                Jet::new(operator.apply(u.v, u.d1, u.d2), 0.0, 0.0)
            }
        }
    }

    /// Returns this node's jet at `x` and accumulates into `grad` the parameter
    /// gradient of `seed(jet) . jet`.
    fn vjp(
        &self,
        theta: &[f64],
        x: &[f64],
        derivs: bool,
        seed: SeedFn<'_>,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> Jet {
        match self {
            ModelSpec::Linear { features } => {
                let jet = self.forward(theta, x, derivs, ws);
                let c = seed(jet);
                for (g, f) in grad.iter_mut().zip(features) {
                    let phi = f.jet(x[0]);
                    *g += c.v * phi.v + c.d1 * phi.d1 + c.d2 * phi.d2;
                }
                jet
            }
            ModelSpec::ShallowMlp {
                input_dim,
                width,
                activation,
            } => {
                let widths = [*input_dim, *width, 1];
                mlp_vjp(&widths, *activation, theta, x, derivs, seed, grad, ws)
            }
            ModelSpec::DeepMlp { widths, activation } => {
                mlp_vjp(widths, *activation, theta, x, derivs, seed, grad, ws)
            }
            ModelSpec::OutputSquash(inner) => {
                let inner_seed = |n: Jet| {
                    let c = seed(squash_jet(n));
                    let [_, s1, s2, s3] = Activation::Sigmoid.derivs(n.v);
                    activation_pullback(c, n, s1, s2, s3)
                };
                let n = inner.vjp(theta, x, derivs, &inner_seed, grad, ws);
                squash_jet(n)
            }
            ModelSpec::BcWrap { inner, transform } => {
                let k = inner.param_count();
                let extra = &theta[k..];
                let x0 = x[0];
                let own_seed = Cell::new(Jet::default());
                let inner_seed = |n: Jet| {
                    let c = seed(bc_jet(*transform, extra, x0, n));
                    own_seed.set(c);
                    let g = transform.factor(x0);
                    Jet::new(
                        c.v * g.v + c.d1 * g.d1 + c.d2 * g.d2,
                        c.d1 * g.v + 2.0 * c.d2 * g.d1,
                        c.d2 * g.v,
                    )
                };
                let (inner_grad, extra_grad) = grad.split_at_mut(k);
                let n = inner.vjp(&theta[..k], x, true, &inner_seed, inner_grad, ws);
                if let BoundaryTransform::ReactionDiffusion = transform {
                    let c = own_seed.get();
                    let p = reaction_poly(x0);
                    extra_grad[0] += c.v * p.v + c.d1 * p.d1 + c.d2 * p.d2;
                    extra_grad[1] += c.v;
                }
                bc_jet(*transform, extra, x0, n)
            }
            ModelSpec::ResidualWrap { inner, operator } => {
                let inner_seed = |u: Jet| {
                    let c = seed(Jet::new(operator.apply(u.v, u.d1, u.d2), 0.0, 0.0));
                    let lin = operator.linearization(u.v);
                    Jet::new(c.v * lin.v, c.v * lin.d1, c.v * lin.d2)
                };
                let u = inner.vjp(theta, x, true, &inner_seed, grad, ws);
                Jet::new(operator.apply(u.v, u.d1, u.d2), 0.0, 0.0)
            }
        }
    }
}

fn squash_jet(n: Jet) -> Jet {
    let [s, s1, s2, _] = Activation::Sigmoid.derivs(n.v);
    Jet::new(s, s1 * n.d1, s2 * n.d1 * n.d1 + s1 * n.d2)
}

fn reaction_poly(x: f64) -> Jet {
    Jet::new(x * x * x / 3.0 - x, x * x - 1.0, 2.0 * x)
}

fn bc_jet(transform: BoundaryTransform, extra: &[f64], x: f64, n: Jet) -> Jet {
    let g = transform.factor(x);
    let mut u = Jet::new(
        g.v * n.v,
        g.d1 * n.v + g.v * n.d1,
        g.d2 * n.v + 2.0 * g.d1 * n.d1 + g.v * n.d2,
    );
    if let BoundaryTransform::ReactionDiffusion = transform {
        let (a, c) = (extra[0], extra[1]);
        let p = reaction_poly(x);
        u.v += a * p.v + c;
        u.d1 += a * p.d1;
        u.d2 += a * p.d2;
    }
    u
}

/// Adjoint of `(z, z1, z2) -> (s(z), s'(z) z1, s''(z) z1^2 + s'(z) z2)`.
fn activation_pullback(c: Jet, z: Jet, s1: f64, s2: f64, s3: f64) -> Jet {
    Jet::new(
        c.v * s1 + c.d1 * s2 * z.d1 + c.d2 * (s3 * z.d1 * z.d1 + s2 * z.d2),
        c.d1 * s1 + 2.0 * c.d2 * s2 * z.d1,
        c.d2 * s1,
    )
}

/// Per-point scratch buffers for the network sweeps.
#[derive(Default)]
struct Workspace {
    // Layer inputs, one (a, a_x, a_xx) triple per layer.
    a: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    a2: Vec<Vec<f64>>,
    // Hidden pre-activation data per hidden layer: z_x, z_xx, s', s'', s'''.
    z1: Vec<Vec<f64>>,
    z2: Vec<Vec<f64>>,
    s1: Vec<Vec<f64>>,
    s2: Vec<Vec<f64>>,
    s3: Vec<Vec<f64>>,
    // Adjoint buffers.
    dz: Vec<f64>,
    dz1: Vec<f64>,
    dz2: Vec<f64>,
    da: Vec<f64>,
    da1: Vec<f64>,
    da2: Vec<f64>,
}

fn resize(buf: &mut Vec<Vec<f64>>, sizes: impl Iterator<Item = usize>) {
    let sizes: Vec<usize> = sizes.collect();
    buf.resize_with(sizes.len(), Vec::new);
    for (b, n) in buf.iter_mut().zip(sizes) {
        b.clear();
        b.resize(n, 0.0);
    }
}

fn mlp_forward(
    widths: &[usize],
    act: Activation,
    theta: &[f64],
    x: &[f64],
    derivs: bool,
    ws: &mut Workspace,
) -> Jet {
    let layers = widths.len() - 1;
    resize(&mut ws.a, widths[..layers].iter().copied());
    resize(&mut ws.a1, widths[..layers].iter().copied());
    resize(&mut ws.a2, widths[..layers].iter().copied());
    resize(&mut ws.z1, widths[1..layers].iter().copied());
    resize(&mut ws.z2, widths[1..layers].iter().copied());
    resize(&mut ws.s1, widths[1..layers].iter().copied());
    resize(&mut ws.s2, widths[1..layers].iter().copied());
    resize(&mut ws.s3, widths[1..layers].iter().copied());

    ws.a[0].copy_from_slice(&x[..widths[0]]);
    if derivs {
        ws.a1[0][0] = 1.0;
    }
    let mut off = 0;
    let mut out = Jet::default();
    for l in 0..layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &theta[off..off + n_in * n_out];
        let b = &theta[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            let mut z = b[r];
            let mut z1 = 0.0;
            let mut z2 = 0.0;
            for c in 0..n_in {
                z += row[c] * ws.a[l][c];
                if derivs {
                    z1 += row[c] * ws.a1[l][c];
                    z2 += row[c] * ws.a2[l][c];
                }
            }
            if l + 1 == layers {
                out = Jet::new(z, z1, z2);
            } else {
                let [s, s1, s2, s3] = act.derivs(z);
                ws.a[l + 1][r] = s;
                ws.a1[l + 1][r] = s1 * z1;
                ws.a2[l + 1][r] = s2 * z1 * z1 + s1 * z2;
                ws.z1[l][r] = z1;
                ws.z2[l][r] = z2;
                ws.s1[l][r] = s1;
                ws.s2[l][r] = s2;
                ws.s3[l][r] = s3;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn mlp_vjp(
    widths: &[usize],
    act: Activation,
    theta: &[f64],
    x: &[f64],
    derivs: bool,
    seed: SeedFn<'_>,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> Jet {
    let out = mlp_forward(widths, act, theta, x, derivs, ws);
    let c = seed(out);
    let layers = widths.len() - 1;

    let offsets: Vec<usize> = widths
        .windows(2)
        .scan(0, |off, w| {
            let start = *off;
            *off += w[0] * w[1] + w[1];
            Some(start)
        })
        .collect();

    ws.dz.clear();
    ws.dz.push(c.v);
    ws.dz1.clear();
    ws.dz1.push(c.d1);
    ws.dz2.clear();
    ws.dz2.push(c.d2);

    for l in (0..layers).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let off = offsets[l];
        let w = &theta[off..off + n_in * n_out];
        {
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for r in 0..n_out {
                let (dz, dz1, dz2) = (ws.dz[r], ws.dz1[r], ws.dz2[r]);
                gb[r] += dz;
                let grow = &mut gw[r * n_in..(r + 1) * n_in];
                for cidx in 0..n_in {
                    grow[cidx] +=
                        dz * ws.a[l][cidx] + dz1 * ws.a1[l][cidx] + dz2 * ws.a2[l][cidx];
                }
            }
        }
        if l == 0 {
            break;
        }
        ws.da.clear();
        ws.da.resize(n_in, 0.0);
        ws.da1.clear();
        ws.da1.resize(n_in, 0.0);
        ws.da2.clear();
        ws.da2.resize(n_in, 0.0);
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            for cidx in 0..n_in {
                ws.da[cidx] += row[cidx] * ws.dz[r];
                ws.da1[cidx] += row[cidx] * ws.dz1[r];
                ws.da2[cidx] += row[cidx] * ws.dz2[r];
            }
        }
        // Through the activation of hidden layer l - 1.
        let h = l - 1;
        ws.dz.resize(n_in, 0.0);
        ws.dz1.resize(n_in, 0.0);
        ws.dz2.resize(n_in, 0.0);
        for r in 0..n_in {
            let back = activation_pullback(
                Jet::new(ws.da[r], ws.da1[r], ws.da2[r]),
                Jet::new(0.0, ws.z1[h][r], ws.z2[h][r]),
                ws.s1[h][r],
                ws.s2[h][r],
                ws.s3[h][r],
            );
            ws.dz[r] = back.v;
            ws.dz1[r] = back.d1;
            ws.dz2[r] = back.d2;
        }
    }
    out
}

/// `d` i.i.d. standard normal entries from a seeded ChaCha stream.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.param_count();
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)))
}

/// Second difference `(D(theta + h q) - 2 D(theta) + D(theta - h q)) / h^2`,
/// an estimate of `H_D(theta)(q, q)` at every point.
pub fn curvature_probe<P: Parametrization + ?Sized>(
    model: &P,
    theta: &ParameterVector,
    direction: &ParameterVector,
    h: f64,
    q: &QuadratureSet,
) -> Result<Vec<f64>> {
    if direction.len() != model.param_count() || theta.len() != model.param_count() {
        return Err(NatmoError::shape("probe direction and parameters must match the model"));
    }
    if direction.norm() == 0.0 {
        return Err(NatmoError::invalid("probe direction must be nonzero"));
    }
    if !(h > 0.0) {
        return Err(NatmoError::invalid("probe step must be positive"));
    }
    let plus = model.values(&(theta + direction * h), q)?;
    let mid = model.values(theta, q)?;
    let minus = model.values(&(theta - direction * h), q)?;
    Ok(plus
        .iter()
        .zip(&mid)
        .zip(&minus)
        .map(|((p, c), m)| (p - 2.0 * c + m) / (h * h))
        .collect())
}
