//! Time integration of perturbed nonautonomous systems.
//!
//! A [`FieldSpec`] holds the ordered perturbation terms of
//! `x' = F_0(t,x) + ε F_1(t,x;μ) + … + ε^k F_k(t,x;μ) + ε^{k+1} F̃(t,x;μ,ε)`.
//! For fields in standard form `F_0` is absent, so the flow at `ε = 0` is the
//! identity. The integrators are an embedded Dormand–Prince 5(4) pair with PI
//! step control and fixed-step RK4 / DP5 variants whose output is a smooth,
//! reproducible function of the initial state.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::ExprError;

/// Evaluator `F(t, x; μ) -> out`.
pub type Term = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) -> Result<(), FieldError> + Send + Sync>;

/// Evaluator `F̃(t, x; μ, ε) -> out`.
pub type Remainder =
    Arc<dyn Fn(f64, &[f64], f64, f64, &mut [f64]) -> Result<(), FieldError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("field is singular at {0}")]
    Singular(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("state has dimension {found}, field expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("tolerance must be positive and finite, got {0}")]
    Tolerance(f64),
    #[error("blow-up at t = {t}: |x|_inf = {norm} exceeds {bound}")]
    BlowUp { t: f64, norm: f64, bound: f64 },
    #[error("maximum of {max} steps exceeded at t = {t}")]
    MaxSteps { t: f64, max: usize },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("field evaluation failed at t = {t}: {source}")]
    Field {
        t: f64,
        #[source]
        source: FieldError,
    },
}

/// Default admissible box `|x|_inf <= 1e3`.
pub const DEFAULT_BOUND: f64 = 1e3;

/// A `T`-periodic perturbed vector field.
#[derive(Clone)]
pub struct FieldSpec {
    dim: usize,
    period: f64,
    unperturbed: Option<Term>,
    terms: Vec<Term>,
    remainder: Option<Remainder>,
    bound: f64,
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FieldSpec")
            .field("dim", &self.dim)
            .field("period", &self.period)
            .field("order", &self.terms.len())
            .field("unperturbed", &self.unperturbed.is_some())
            .field("remainder", &self.remainder.is_some())
            .field("bound", &self.bound)
            .finish()
    }
}

impl FieldSpec {
    pub fn new(dim: usize, period: f64) -> Result<Self, OdeError> {
        if !(dim == 2 || dim == 3) {
            return Err(OdeError::InvalidField(format!("dimension must be 2 or 3, got {dim}")));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(OdeError::InvalidField(format!("period must be positive, got {period}")));
        }
        Ok(FieldSpec {
            dim,
            period,
            unperturbed: None,
            terms: Vec::new(),
            remainder: None,
            bound: DEFAULT_BOUND,
        })
    }

    /// Appends the next perturbation term `F_{k+1}`.
    pub fn with_term<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
    {
        self.terms.push(Arc::new(f));
        self
    }

    /// Appends a term that vanishes identically.
    pub fn with_zero_term(self) -> Self {
        self.with_term(|_, _, _, out| {
            out.fill(0.0);
            Ok(())
        })
    }

    /// Sets the `ε⁰` part. Only used for fields not in standard form.
    pub fn with_unperturbed<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
    {
        self.unperturbed = Some(Arc::new(f));
        self
    }

    pub fn with_remainder<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, f64, &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
    {
        self.remainder = Some(Arc::new(f));
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Number of perturbation terms `k`.
    pub fn order(&self) -> usize {
        self.terms.len()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_standard_form(&self) -> bool {
        self.unperturbed.is_none()
    }

    /// Evaluates `F_i` (1-based).
    pub fn eval_term(
        &self,
        i: usize,
        t: f64,
        x: &[f64],
        mu: f64,
        out: &mut [f64],
    ) -> Result<(), FieldError> {
        match i.checked_sub(1).and_then(|j| self.terms.get(j)) {
            Some(term) => term(t, x, mu, out),
            None => {
                out.fill(0.0);
                Ok(())
            }
        }
    }

    /// Full right-hand side at `(t, x; μ, ε)`.
    pub fn rhs(&self, t: f64, x: &[f64], mu: f64, eps: f64, out: &mut [f64]) -> Result<(), FieldError> {
        let d = self.dim;
        out[..d].fill(0.0);
        let mut buf = [0.0; 3];
        let buf = &mut buf[..d];
        if let Some(f0) = &self.unperturbed {
            f0(t, x, mu, buf)?;
            add_scaled(out, 1.0, buf);
        }
        let mut power = 1.0;
        for term in &self.terms {
            power *= eps;
            if power == 0.0 {
                break;
            }
            term(t, x, mu, buf)?;
            add_scaled(out, power, buf);
        }
        if let Some(rem) = &self.remainder {
            let scale = power * eps;
            if scale != 0.0 {
                rem(t, x, mu, eps, buf)?;
                add_scaled(out, scale, buf);
            }
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<(), OdeError> {
        if x.len() != self.dim {
            return Err(OdeError::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }
}

fn add_scaled(out: &mut [f64], s: f64, v: &[f64]) {
    for (o, vi) in out.iter_mut().zip(v) {
        *o += s * vi;
    }
}

/// Tolerance for the embedded pair, used both as absolute and relative bound.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Tolerance(f64);

impl Tolerance {
    pub fn new(tol: f64) -> Result<Self, OdeError> {
        if tol > 0.0 && tol.is_finite() {
            Ok(Tolerance(tol))
        } else {
            Err(OdeError::Tolerance(tol))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Options for the adaptive integrator.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub tol: Tolerance,
    pub max_steps: usize,
    /// Record `(t, state)` after every accepted step.
    pub record: bool,
}

impl AdaptiveOptions {
    pub fn new(tol: f64) -> Result<Self, OdeError> {
        Ok(AdaptiveOptions {
            tol: Tolerance::new(tol)?,
            max_steps: 200_000,
            record: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub state: Vec<f64>,
    /// `∂φ/∂x`, present when the variational equations were integrated.
    pub jacobian: Option<DMatrix<f64>>,
    pub steps: usize,
    /// Sum of the local error estimates of accepted steps (max norm).
    pub est_error: f64,
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
}

/// Fixed-step scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Dopri5,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Generic Dormand–Prince stepper over a closure `f(t, y, dy)`.
pub(crate) struct Dopri<F> {
    f: F,
    n: usize,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl<F> Dopri<F>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FieldError>,
{
    pub(crate) fn new(f: F, n: usize) -> Self {
        Dopri {
            f,
            n,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    fn call(&mut self, t: f64, stage: usize) -> Result<(), OdeError> {
        let Dopri { f, k, tmp, .. } = self;
        f(t, tmp, &mut k[stage]).map_err(|source| OdeError::Field { t, source })
    }

    /// One step from `(t, y)`; `k[0]` must hold `f(t, y)`. Writes the 5th-order
    /// solution into `out` and `f(t+h, out)` into `k[6]`; returns the error vector in `err`.
    fn step(&mut self, t: f64, y: &[f64], h: f64, out: &mut [f64], err: &mut [f64]) -> Result<(), OdeError> {
        let n = self.n;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s].iter().enumerate().take(s) {
                    acc += a * self.k[j][i];
                }
                self.tmp[i] = y[i] + h * acc;
            }
            self.call(t + C[s] * h, s)?;
        }
        // stage 6 was evaluated at the 5th-order solution
        out.copy_from_slice(&self.tmp);
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * self.k[s][i];
            }
            err[i] = h * e;
        }
        Ok(())
    }

    pub(crate) fn adaptive(
        &mut self,
        y0: &[f64],
        t0: f64,
        t1: f64,
        opts: &AdaptiveOptions,
        guard: &Guard,
    ) -> Result<FlowResult, OdeError> {
        let n = self.n;
        let tol = opts.tol.get();
        let mut y = y0.to_vec();
        let mut trajectory = opts.record.then(|| vec![(t0, y.clone())]);
        if t1 == t0 {
            return Ok(FlowResult {
                state: y,
                jacobian: None,
                steps: 0,
                est_error: 0.0,
                trajectory,
            });
        }
        let dir = (t1 - t0).signum();
        let span = (t1 - t0).abs();
        let mut t = t0;
        self.tmp.copy_from_slice(&y);
        self.call(t, 0)?;
        let mut h = dir * self.initial_step(t, &y, span, tol)?;
        let mut ynew = vec![0.0; n];
        let mut err = vec![0.0; n];
        let mut steps = 0usize;
        let mut est_error = 0.0;
        let mut err_prev: f64 = 1e-4;
        let mut rejected = false;
        loop {
            if steps >= opts.max_steps {
                return Err(OdeError::MaxSteps { t, max: opts.max_steps });
            }
            let remaining = t1 - t;
            let last = h.abs() >= remaining.abs();
            if last {
                h = remaining;
            }
            if h.abs() <= 1e-14 * (1.0 + t.abs()) && !last {
                return Err(OdeError::StepUnderflow { t });
            }
            self.step(t, &y, h, &mut ynew, &mut err)?;
            let mut sum = 0.0;
            for i in 0..n {
                let sc = tol + tol * y[i].abs().max(ynew[i].abs());
                sum += (err[i] / sc).powi(2);
            }
            let en = (sum / n as f64).sqrt();
            if en <= 1.0 {
                steps += 1;
                t = if last { t1 } else { t + h };
                y.copy_from_slice(&ynew);
                est_error += err.iter().fold(0.0f64, |m, e| m.max(e.abs()));
                guard.check(t, &y)?;
                if let Some(tr) = trajectory.as_mut() {
                    tr.push((t, y.clone()));
                }
                if last {
                    break;
                }
                self.k.swap(0, 6);
                // PI controller
                let en_c = en.max(1e-10);
                let mut fac = 0.9 * en_c.powf(-0.17) * err_prev.powf(0.04);
                fac = fac.clamp(0.2, 10.0);
                if rejected {
                    fac = fac.min(1.0);
                }
                h *= fac;
                err_prev = en_c;
                rejected = false;
            } else {
                let fac = if en.is_finite() {
                    (0.9 * en.powf(-0.2)).max(0.2)
                } else {
                    0.2
                };
                h *= fac;
                rejected = true;
            }
        }
        Ok(FlowResult {
            state: y,
            jacobian: None,
            steps,
            est_error,
            trajectory,
        })
    }

    fn initial_step(&mut self, t: f64, y: &[f64], span: f64, tol: f64) -> Result<f64, OdeError> {
        let n = self.n as f64;
        let sc = |v: f64| tol + tol * v.abs();
        let d0 = (y.iter().map(|v| (v / sc(*v)).powi(2)).sum::<f64>() / n).sqrt();
        let d1 = (y
            .iter()
            .zip(&self.k[0])
            .map(|(v, f)| (f / sc(*v)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for i in 0..self.n {
            self.tmp[i] = y[i] + h0 * self.k[0][i];
        }
        self.call(t + h0, 1)?;
        let d2 = (y
            .iter()
            .zip(self.k[1].iter().zip(&self.k[0]))
            .map(|(v, (f1, f0))| ((f1 - f0) / sc(*v)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
            / h0;
        let m = d1.max(d2);
        let h1 = if m <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / m).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    /// `steps` equal Dormand–Prince steps without error control.
    pub(crate) fn fixed(&mut self, y0: &[f64], t0: f64, t1: f64, steps: usize, guard: &Guard) -> Result<Vec<f64>, OdeError> {
        let n = self.n;
        let h = (t1 - t0) / steps as f64;
        let mut y = y0.to_vec();
        let mut ynew = vec![0.0; n];
        let mut err = vec![0.0; n];
        self.tmp.copy_from_slice(&y);
        self.call(t0, 0)?;
        // compensated accumulation keeps the result smooth in the initial data
        let mut comp = vec![0.0; n];
        for s in 0..steps {
            let t = t0 + s as f64 * h;
            self.step(t, &y, h, &mut ynew, &mut err)?;
            for i in 0..n {
                let acc: f64 = A[6].iter().enumerate().map(|(j, a)| a * self.k[j][i]).sum();
                let d = h * acc - comp[i];
                let sum = y[i] + d;
                comp[i] = (sum - y[i]) - d;
                y[i] = sum;
            }
            guard.check(t + h, &y)?;
            self.k.swap(0, 6);
        }
        Ok(y)
    }
}

/// Classical RK4 with `steps` equal steps.
pub(crate) fn rk4_fixed<F>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    guard: &Guard,
) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FieldError>,
{
    let n = y0.len();
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut call = |t: f64, y: &[f64], out: &mut [f64]| f(t, y, out).map_err(|source| OdeError::Field { t, source });
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        call(t, &y, &mut k1)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        call(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        call(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        call(t + h, &tmp, &mut k4)?;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        guard.check(t + h, &y)?;
    }
    Ok(y)
}

/// Blow-up check on the leading `dims` components.
pub(crate) struct Guard {
    pub dims: usize,
    pub bound: f64,
}

impl Guard {
    fn check(&self, t: f64, y: &[f64]) -> Result<(), OdeError> {
        let norm = y[..self.dims].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if norm > self.bound || !norm.is_finite() {
            return Err(OdeError::BlowUp {
                t,
                norm,
                bound: self.bound,
            });
        }
        Ok(())
    }
}

/// Central-difference step for the RHS Jacobian (near the cube root of the unit roundoff).
pub fn jacobian_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    6e-6 * norm.max(1.0)
}

/// RHS together with the variational part: `y = [x, Φ (column-major)]`.
fn variational_rhs(
    field: &FieldSpec,
    mu: f64,
    eps: f64,
) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), FieldError> + '_ {
    let d = field.dim;
    move |t, y, dy| {
        let (x, phi) = y.split_at(d);
        field.rhs(t, x, mu, eps, &mut dy[..d])?;
        let h = jacobian_step(x);
        let mut xp = [0.0; 3];
        let mut fp = [0.0; 3];
        let mut fm = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        for j in 0..d {
            xp[..d].copy_from_slice(x);
            xp[j] = x[j] + h;
            field.rhs(t, &xp[..d], mu, eps, &mut fp[..d])?;
            xp[j] = x[j] - h;
            field.rhs(t, &xp[..d], mu, eps, &mut fm[..d])?;
            for i in 0..d {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for c in 0..d {
            for i in 0..d {
                let mut acc = 0.0;
                for (k, jk) in jac[i][..d].iter().enumerate() {
                    acc += jk * phi[c * d + k];
                }
                dy[d + c * d + i] = acc;
            }
        }
        Ok(())
    }
}

fn identity_augmented(x0: &[f64]) -> Vec<f64> {
    let d = x0.len();
    let mut y = Vec::with_capacity(d + d * d);
    y.extend_from_slice(x0);
    for c in 0..d {
        for i in 0..d {
            y.push(if i == c { 1.0 } else { 0.0 });
        }
    }
    y
}

fn split_augmented(y: &[f64], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    (y[..d].to_vec(), DMatrix::from_column_slice(d, d, &y[d..]))
}

/// Adaptive integration of the field from `t0` to `t1` (either direction).
pub fn integrate(
    field: &FieldSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    mu: f64,
    eps: f64,
    tol: f64,
) -> Result<FlowResult, OdeError> {
    integrate_with(field, x0, t0, t1, mu, eps, &AdaptiveOptions::new(tol)?)
}

pub fn integrate_with(
    field: &FieldSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    mu: f64,
    eps: f64,
    opts: &AdaptiveOptions,
) -> Result<FlowResult, OdeError> {
    field.check_state(x0)?;
    let guard = Guard {
        dims: field.dim,
        bound: field.bound,
    };
    guard.check(t0, x0)?;
    let mut solver = Dopri::new(|t, y: &[f64], dy: &mut [f64]| field.rhs(t, y, mu, eps, dy), field.dim);
    solver.adaptive(x0, t0, t1, opts, &guard)
}

/// Flow over one period from `t = 0` with its state Jacobian, adaptively.
pub fn flow_with_jacobian(
    field: &FieldSpec,
    x0: &[f64],
    period: f64,
    mu: f64,
    eps: f64,
    tol: f64,
) -> Result<FlowResult, OdeError> {
    field.check_state(x0)?;
    let d = field.dim;
    let opts = AdaptiveOptions::new(tol)?;
    let guard = Guard {
        dims: d,
        bound: field.bound,
    };
    guard.check(0.0, x0)?;
    let mut solver = Dopri::new(variational_rhs(field, mu, eps), d + d * d);
    let res = solver.adaptive(&identity_augmented(x0), 0.0, period, &opts, &guard)?;
    let (state, jac) = split_augmented(&res.state, d);
    Ok(FlowResult {
        state,
        jacobian: Some(jac),
        steps: res.steps,
        est_error: res.est_error,
        trajectory: None,
    })
}

/// Fixed-step integration from `t0` to `t1`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_fixed(
    field: &FieldSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    mu: f64,
    eps: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Vec<f64>, OdeError> {
    field.check_state(x0)?;
    let guard = Guard {
        dims: field.dim,
        bound: field.bound,
    };
    guard.check(t0, x0)?;
    let steps = steps.max(1);
    let rhs = |t, y: &[f64], dy: &mut [f64]| field.rhs(t, y, mu, eps, dy);
    match scheme {
        Scheme::Rk4 => rk4_fixed(rhs, x0, t0, t1, steps, &guard),
        Scheme::Dopri5 => Dopri::new(rhs, field.dim).fixed(x0, t0, t1, steps, &guard),
    }
}

/// Fixed-step flow from `t0` to `t1` with the variational equations.
#[allow(clippy::too_many_arguments)]
pub fn flow_with_jacobian_fixed(
    field: &FieldSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    mu: f64,
    eps: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<FlowResult, OdeError> {
    field.check_state(x0)?;
    let d = field.dim;
    let guard = Guard {
        dims: d,
        bound: field.bound,
    };
    guard.check(t0, x0)?;
    let steps = steps.max(1);
    let y0 = identity_augmented(x0);
    let rhs = variational_rhs(field, mu, eps);
    let y = match scheme {
        Scheme::Rk4 => rk4_fixed(rhs, &y0, t0, t1, steps, &guard)?,
        Scheme::Dopri5 => Dopri::new(rhs, d + d * d).fixed(&y0, t0, t1, steps, &guard)?,
    };
    let (state, jac) = split_augmented(&y, d);
    Ok(FlowResult {
        state,
        jacobian: Some(jac),
        steps,
        est_error: f64::NAN,
        trajectory: None,
    })
}

/// Adaptive integration of an arbitrary system; used for quadratures.
pub(crate) fn integrate_system<F>(
    f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    opts: &AdaptiveOptions,
    guard: &Guard,
) -> Result<FlowResult, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FieldError>,
{
    Dopri::new(f, y0.len()).adaptive(y0, t0, t1, opts, guard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    fn linear_field(a: Matrix2<f64>) -> FieldSpec {
        FieldSpec::new(2, 2.0 * std::f64::consts::PI)
            .unwrap()
            .with_term(move |_, x, _, out| {
                out[0] = a[(0, 0)] * x[0] + a[(0, 1)] * x[1];
                out[1] = a[(1, 0)] * x[0] + a[(1, 1)] * x[1];
                Ok(())
            })
    }

    // Scaling-and-squaring with a Taylor kernel, independent of nalgebra's exp.
    fn expm_reference(a: Matrix2<f64>) -> Matrix2<f64> {
        let s = 20;
        let b = a / 2f64.powi(s);
        let mut term = Matrix2::identity();
        let mut sum = Matrix2::identity();
        for k in 1..20 {
            term = term * b / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn zero_field_is_identity() {
        let field = FieldSpec::new(2, 1.0).unwrap().with_zero_term();
        let res = integrate(&field, &[0.3, -0.7], 0.0, 1.0, 0.0, 0.5, 1e-10).unwrap();
        assert_eq!(res.state, vec![0.3, -0.7]);
    }

    #[test]
    fn constant_term_is_exact() {
        let field = FieldSpec::new(2, 3.0).unwrap().with_term(|_, _, _, out| {
            out[0] = 1.0;
            out[1] = 0.0;
            Ok(())
        });
        let eps = 0.25;
        let res = integrate(&field, &[0.0, 0.0], 0.0, 3.0, 0.0, eps, 1e-9).unwrap();
        assert!((res.state[0] - eps * 3.0).abs() <= 1e-9);
        let back = integrate(&field, &res.state, 3.0, 0.0, 0.0, eps, 1e-9).unwrap();
        assert!(back.state[0].abs() <= 1e-9);
    }

    #[test]
    fn rhs_sums_powers_of_eps() {
        let field = FieldSpec::new(2, 1.0)
            .unwrap()
            .with_term(|_, _, _, out| {
                out.fill(1.0);
                Ok(())
            })
            .with_term(|_, _, _, out| {
                out.fill(2.0);
                Ok(())
            })
            .with_remainder(|_, _, _, _, out| {
                out.fill(4.0);
                Ok(())
            });
        let mut out = [0.0; 2];
        field.rhs(0.0, &[0.0, 0.0], 0.0, 0.5, &mut out).unwrap();
        assert_eq!(out, [0.5 + 0.5 + 0.5, 0.5 + 0.5 + 0.5]);
    }

    #[test]
    fn jacobian_at_zero_eps_is_identity() {
        let field = linear_field(Matrix2::new(0.0, -1.0, 1.0, 0.0));
        let res = flow_with_jacobian(&field, &[0.4, 0.1], field.period(), 0.0, 0.0, 1e-10).unwrap();
        let jac = res.jacobian.unwrap();
        assert!((jac - DMatrix::identity(2, 2)).amax() <= 1e-12);
    }

    #[test]
    fn jacobian_matches_matrix_exponential() {
        let a = Matrix2::new(-0.3, -1.2, 0.8, 0.1);
        let eps = 0.05;
        let field = linear_field(a);
        let t = field.period();
        let expected = expm_reference(a * (eps * t));
        let res = flow_with_jacobian(&field, &[0.5, -0.2], t, 0.0, eps, 1e-12).unwrap();
        let jac = res.jacobian.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let rel = (jac[(i, j)] - expected[(i, j)]).abs() / expected.amax();
                assert!(rel <= 1e-8, "entry ({i},{j}): {rel}");
            }
        }
        let fixed = flow_with_jacobian_fixed(&field, &[0.5, -0.2], 0.0, t, 0.0, eps, 64, Scheme::Dopri5).unwrap();
        assert!((fixed.jacobian.unwrap() - DMatrix::from_column_slice(2, 2, expected.as_slice())).amax() <= 1e-8);
    }

    #[test]
    fn rotation_flow_fixed_schemes() {
        let field = linear_field(Matrix2::new(0.0, -1.0, 1.0, 0.0));
        let t = field.period();
        let eps = 0.1;
        let exact = [(eps * t).cos(), (eps * t).sin()];
        for scheme in [Scheme::Rk4, Scheme::Dopri5] {
            let y = integrate_fixed(&field, &[1.0, 0.0], 0.0, t, 0.0, eps, 200, scheme).unwrap();
            assert!((y[0] - exact[0]).abs() < 1e-10 && (y[1] - exact[1]).abs() < 1e-10, "{scheme:?}");
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let field = FieldSpec::new(2, 1.0)
            .unwrap()
            .with_term(|_, x, _, out| {
                out[0] = x[0] * x[0];
                out[1] = 0.0;
                Ok(())
            })
            .with_bound(10.0);
        let err = integrate(&field, &[1.0, 0.0], 0.0, 2.0, 0.0, 1.0, 1e-8).unwrap_err();
        assert!(matches!(err, OdeError::BlowUp { .. }), "{err:?}");
    }

    #[test]
    fn max_steps_is_reported() {
        let field = linear_field(Matrix2::new(0.0, -1.0, 1.0, 0.0));
        let mut opts = AdaptiveOptions::new(1e-12).unwrap();
        opts.max_steps = 3;
        let err = integrate_with(&field, &[1.0, 0.0], 0.0, 100.0, 0.0, 1.0, &opts).unwrap_err();
        assert!(matches!(err, OdeError::MaxSteps { .. }));
    }

    #[test]
    fn invalid_inputs() {
        assert!(FieldSpec::new(4, 1.0).is_err());
        assert!(FieldSpec::new(2, 0.0).is_err());
        assert!(Tolerance::new(-1.0).is_err());
        let field = FieldSpec::new(2, 1.0).unwrap().with_zero_term();
        assert!(matches!(
            integrate(&field, &[1.0], 0.0, 1.0, 0.0, 0.1, 1e-8),
            Err(OdeError::Dimension { .. })
        ));
    }

    #[test]
    fn recorded_trajectory_ends_at_state() {
        let field = linear_field(Matrix2::new(0.0, -1.0, 1.0, 0.0));
        let mut opts = AdaptiveOptions::new(1e-9).unwrap();
        opts.record = true;
        let res = integrate_with(&field, &[1.0, 0.0], 0.0, 1.0, 0.0, 1.0, &opts).unwrap();
        let tr = res.trajectory.unwrap();
        assert_eq!(tr.len(), res.steps + 1);
        assert_eq!(tr.last().unwrap().1, res.state);
        assert_eq!(tr.last().unwrap().0, 1.0);
    }
}
