//! Neimark–Sacker analysis of planar return maps.
//!
//! Fixed points `ξ(μ, ε)` of the period map, the critical curve `|λ(μ(ε), ε)| = 1`,
//! normal-form tensors and the map Lyapunov coefficient `ℓ₁`, and the series
//! coefficients `ℓ₁ = Σ_{j=l}^{k} ε^j ℓ_{1,j}` by two routes: a least-squares
//! fit of `ℓ₁(ε)`, and the closed formula applied to tensor series.

use std::cell::Cell;
use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::hopf::{stencil_derivatives, HopfError, HopfPoint, LocalDerivatives};
use crate::ode::{self, FieldSpec, OdeError, Scheme};

pub type CVector2 = Vector2<Complex64>;

#[derive(Debug, Clone, Error)]
pub enum NsError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Hopf(#[from] HopfError),
    #[error("return map needs a planar field, got dimension {0}")]
    Dimension(usize),
    #[error("epsilon must be nonzero")]
    ZeroEpsilon,
    #[error("fixed-point Newton diverged at mu = {mu}, eps = {eps} (residual {residual:e})")]
    NewtonDivergence { mu: f64, eps: f64, residual: f64 },
    #[error("singular Newton matrix at mu = {mu}, eps = {eps} (possible fold of fixed points)")]
    SingularNewton { mu: f64, eps: f64 },
    #[error("real eigenvalues at mu = {mu}, eps = {eps}: not a Neimark-Sacker candidate")]
    RealEigenvalues { mu: f64, eps: f64 },
    #[error("resonance too close: |1 - e^(i theta)| = {0:e}")]
    Resonance(f64),
    #[error("no root of |lambda| - 1 found near the predictor at eps = {0}")]
    NoRoot(f64),
    #[error("transversality margin violated at eps = {eps}: d|lambda|/dmu = {derivative:e}")]
    Transversality { eps: f64, derivative: f64 },
    #[error("epsilon grid must be positive and strictly increasing")]
    Grid,
    #[error("fit needs at least {needed} distinct epsilon values, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("ill-conditioned Vandermonde system (condition {0:e})")]
    IllConditioned(f64),
    #[error("fit residual {residual:e} exceeds 10% of the leading term {leading:e}")]
    FitResidual { residual: f64, leading: f64 },
    #[error("empty order range l = {l}, k = {k}")]
    EmptyRange { l: usize, k: usize },
    #[error("missing tensor of order {0}")]
    MissingTensor(usize),
}

/// A planar map family `x ↦ P(x; μ, ε)`.
pub trait PlanarMap: Sync {
    fn apply(&self, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Vector2<f64>, NsError>;

    /// `D_x P`, by Richardson-extrapolated central differences unless overridden.
    fn jacobian(&self, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Matrix2<f64>, NsError> {
        let h = 1e-4 * (1.0 + x.norm());
        let mut jac = Matrix2::zeros();
        for j in 0..2 {
            let diff = |h: f64| -> Result<Vector2<f64>, NsError> {
                let mut e = Vector2::zeros();
                e[j] = h;
                Ok((self.apply(&(x + e), mu, eps)? - self.apply(&(x - e), mu, eps)?) / (2.0 * h))
            };
            let coarse = diff(h)?;
            let fine = diff(0.5 * h)?;
            jac.set_column(j, &((fine * 4.0 - coarse) / 3.0));
        }
        Ok(jac)
    }

    fn apply_with_jacobian(
        &self,
        x: &Vector2<f64>,
        mu: f64,
        eps: f64,
    ) -> Result<(Vector2<f64>, Matrix2<f64>), NsError> {
        Ok((self.apply(x, mu, eps)?, self.jacobian(x, mu, eps)?))
    }
}

/// Default fixed steps of the period map.
pub const MAP_STEPS: usize = 256;

/// The period map `x ↦ φ(T, x; μ, ε)` on the section `t ≡ 0 mod T`.
///
/// Uses fixed-step Dormand–Prince so that the map is a smooth function of
/// `(x, μ, ε)`; finite-difference tensors of an adaptively integrated map pick
/// up step-selection noise.
#[derive(Debug, Clone)]
pub struct PoincareMap {
    field: FieldSpec,
    steps: usize,
}

impl PoincareMap {
    pub fn new(field: FieldSpec) -> Result<Self, NsError> {
        if field.dim() != 2 {
            return Err(NsError::Dimension(field.dim()));
        }
        Ok(PoincareMap {
            field,
            steps: MAP_STEPS,
        })
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps.max(1);
        self
    }

    pub fn field(&self) -> &FieldSpec {
        &self.field
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl PlanarMap for PoincareMap {
    fn apply(&self, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Vector2<f64>, NsError> {
        let y = ode::integrate_fixed(
            &self.field,
            x.as_slice(),
            0.0,
            self.field.period(),
            mu,
            eps,
            self.steps,
            Scheme::Dopri5,
        )?;
        Ok(Vector2::new(y[0], y[1]))
    }

    fn jacobian(&self, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Matrix2<f64>, NsError> {
        Ok(self.apply_with_jacobian(x, mu, eps)?.1)
    }

    fn apply_with_jacobian(
        &self,
        x: &Vector2<f64>,
        mu: f64,
        eps: f64,
    ) -> Result<(Vector2<f64>, Matrix2<f64>), NsError> {
        let res = ode::flow_with_jacobian_fixed(
            &self.field,
            x.as_slice(),
            0.0,
            self.field.period(),
            mu,
            eps,
            self.steps,
            Scheme::Dopri5,
        )?;
        let jac = res.jacobian.expect("variational flow returns a Jacobian");
        Ok((
            Vector2::new(res.state[0], res.state[1]),
            Matrix2::new(jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]),
        ))
    }
}

/// Residual accepted for `‖P(ξ) − ξ‖`.
pub const FIXED_POINT_TOL: f64 = 1e-11;

/// Newton's method on `P(x) − x = 0`.
pub fn fixed_point<M: PlanarMap + ?Sized>(
    map: &M,
    mu: f64,
    eps: f64,
    seed: &Vector2<f64>,
) -> Result<Vector2<f64>, NsError> {
    if eps == 0.0 {
        return Err(NsError::ZeroEpsilon);
    }
    let mut x = *seed;
    let mut residual = f64::INFINITY;
    let mut pending: Option<(Vector2<f64>, Matrix2<f64>)> = None;
    for _ in 0..60 {
        let (px, jac) = match pending.take() {
            Some(v) => v,
            None => map.apply_with_jacobian(&x, mu, eps)?,
        };
        let r = px - x;
        residual = r.norm();
        if residual <= FIXED_POINT_TOL {
            return Ok(x);
        }
        let m = jac - Matrix2::identity();
        let scale = m.abs().max();
        if scale == 0.0 || m.determinant().abs() <= 1e-14 * scale * scale {
            return Err(NsError::SingularNewton { mu, eps });
        }
        let dx = m.lu().solve(&r).ok_or(NsError::SingularNewton { mu, eps })?;
        // backtracking keeps Newton on the branch of the seed
        let mut t = 1.0;
        loop {
            let trial = x - dx * t;
            if !trial.iter().all(|v| v.is_finite()) {
                return Err(NsError::NewtonDivergence { mu, eps, residual });
            }
            let eval = map.apply_with_jacobian(&trial, mu, eps);
            let ok = matches!(&eval, Ok((p, _)) if (p - trial).norm() < residual);
            if ok || t < 1e-3 {
                x = trial;
                pending = eval.ok();
                break;
            }
            t *= 0.5;
        }
        if (x - seed).norm() > 1e3 * (1.0 + seed.norm()) {
            break;
        }
    }
    Err(NsError::NewtonDivergence { mu, eps, residual })
}

/// Eigenvalues of a real 2×2 matrix, the one with `Im ≥ 0` first.
pub fn eigenvalues(a: &Matrix2<f64>) -> [Complex64; 2] {
    let half = 0.5 * a.trace();
    let disc = half * half - a.determinant();
    if disc >= 0.0 {
        let s = disc.sqrt();
        [Complex64::new(half + s, 0.0), Complex64::new(half - s, 0.0)]
    } else {
        let s = (-disc).sqrt();
        [Complex64::new(half, s), Complex64::new(half, -s)]
    }
}

/// Leading eigen-data of the map at its fixed point.
#[derive(Debug, Clone, Copy)]
pub struct Eigen {
    pub xi: Vector2<f64>,
    pub lambda: Complex64,
    /// `arg λ ∈ (0, π)`.
    pub theta: f64,
    pub modulus: f64,
}

fn complex_eigen(jac: &Matrix2<f64>, mu: f64, eps: f64) -> Result<(Complex64, f64), NsError> {
    let [lambda, _] = eigenvalues(jac);
    if lambda.im <= 0.0 {
        return Err(NsError::RealEigenvalues { mu, eps });
    }
    // |λ|² = det for a complex pair; avoids cancellation in re² + im²
    Ok((lambda, jac.determinant().sqrt()))
}

pub fn eigen_at<M: PlanarMap + ?Sized>(
    map: &M,
    mu: f64,
    eps: f64,
    seed: &Vector2<f64>,
) -> Result<Eigen, NsError> {
    let xi = fixed_point(map, mu, eps, seed)?;
    let jac = map.jacobian(&xi, mu, eps)?;
    let (lambda, modulus) = complex_eigen(&jac, mu, eps)?;
    Ok(Eigen {
        xi,
        lambda,
        theta: lambda.arg(),
        modulus,
    })
}

/// Solver settings shared by the critical-curve and series routines.
#[derive(Debug, Clone, Copy)]
pub struct NsOptions {
    /// First non-vanishing averaging order.
    pub l: usize,
    /// Margin for `|λ^k − 1|`, `k = 1..4`.
    pub resonance_margin: f64,
    /// Tolerance on `|λ| − 1`.
    pub root_tol: f64,
    /// Powers of `ε` fitted beyond `k` and then discarded; they absorb the
    /// truncation of `ℓ₁(ε)` and of the tensor series.
    pub extra_orders: usize,
}

impl Default for NsOptions {
    fn default() -> Self {
        NsOptions {
            l: 1,
            resonance_margin: 1e-4,
            root_tol: 1e-12,
            extra_orders: 1,
        }
    }
}

/// One point of the critical curve.
#[derive(Debug, Clone, Copy)]
pub struct CurveSample {
    pub eps: f64,
    pub mu: f64,
    pub xi: Vector2<f64>,
    pub lambda: Complex64,
    pub theta: f64,
    /// `|λ| − 1` at the accepted root.
    pub modulus_error: f64,
    pub d_modulus_dmu: f64,
    /// `|λ^k − 1|` for `k = 1..4`.
    pub resonance: [f64; 4],
    pub resonance_ok: bool,
}

#[derive(Debug, Clone)]
pub struct CriticalCurve {
    pub samples: Vec<CurveSample>,
    /// Least-squares line `μ ≈ intercept + slope·ε`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Accepted `|λ| − 1` when the bracket has collapsed before reaching `root_tol`.
const ROOT_ACCEPT: f64 = 1e-10;

/// Solves `|λ(μ, ε)| = 1` for `μ` near the Hopf predictor.
pub fn critical_point<M: PlanarMap + ?Sized>(
    map: &M,
    hopf: &HopfPoint,
    eps: f64,
    opts: &NsOptions,
) -> Result<CurveSample, NsError> {
    if !(eps > 0.0) {
        return Err(NsError::Grid);
    }
    // continuation in μ: each solve starts from the last fixed point found
    let seed = Cell::new(hopf.x);
    let f = |mu: f64| -> Result<(f64, Eigen), NsError> {
        let e = eigen_at(map, mu, eps, &seed.get())?;
        seed.set(e.xi);
        Ok((e.modulus - 1.0, e))
    };
    // |1 + ε^l(α + iβ)| = 1 gives α ≈ −ε^l ω₀²/2 at leading order
    let el = eps.powi(opts.l as i32);
    let predictor = hopf.mu0 - el * hopf.omega0 * hopf.omega0 / (2.0 * hopf.alpha_prime);
    f(predictor)?;
    let mut delta = 0.125 * (predictor - hopf.mu0).abs() + 1e-9 * (1.0 + hopf.mu0.abs());
    let (mut a, mut b);
    let (mut fa, mut fb);
    let mut expansions = 0;
    loop {
        a = predictor - delta;
        b = predictor + delta;
        fa = f(a)?.0;
        fb = f(b)?.0;
        if fa.signum() != fb.signum() || fa == 0.0 || fb == 0.0 {
            break;
        }
        expansions += 1;
        if expansions > 40 {
            return Err(NsError::NoRoot(eps));
        }
        delta *= 2.0;
    }
    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    let mut side = 0i8;
    for _ in 0..200 {
        if best.1.abs() <= opts.root_tol || (b - a).abs() <= 4.0 * f64::EPSILON * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        // Illinois-modified regula falsi
        let mut c = b - fb * (b - a) / (fb - fa);
        if !(c > a.min(b) && c < a.max(b)) {
            c = 0.5 * (a + b);
        }
        let fc = f(c)?.0;
        if fc.abs() < best.1.abs() {
            best = (c, fc);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    let (mu, _) = best;
    let (err, e) = f(mu)?;
    if err.abs() > ROOT_ACCEPT {
        return Err(NsError::NoRoot(eps));
    }
    let h = 1e-6 * (1.0 + mu.abs());
    let d = (f(mu + h)?.0 - f(mu - h)?.0) / (2.0 * h);
    if d.abs() < 1e-3 * el {
        return Err(NsError::Transversality { eps, derivative: d });
    }
    let mut resonance = [0.0; 4];
    let mut power = Complex64::new(1.0, 0.0);
    for r in resonance.iter_mut() {
        power *= e.lambda;
        *r = (power - 1.0).norm();
    }
    Ok(CurveSample {
        eps,
        mu,
        xi: e.xi,
        lambda: e.lambda,
        theta: e.theta,
        modulus_error: err,
        d_modulus_dmu: d,
        resonance,
        resonance_ok: resonance.iter().all(|&r| r >= opts.resonance_margin),
    })
}

fn check_grid(eps_grid: &[f64]) -> Result<(), NsError> {
    let positive = eps_grid.iter().all(|&e| e > 0.0 && e.is_finite());
    let increasing = eps_grid.windows(2).all(|w| w[0] < w[1]);
    if positive && increasing {
        Ok(())
    } else {
        Err(NsError::Grid)
    }
}

/// Ordinary least-squares line through `(x, y)` with its `R²`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (f64::NAN, ys.first().copied().unwrap_or(f64::NAN), f64::NAN);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// `μ(ε)` on a grid, solved independently (and in parallel) per `ε`.
pub fn critical_curve<M: PlanarMap + ?Sized>(
    map: &M,
    hopf: &HopfPoint,
    eps_grid: &[f64],
    opts: &NsOptions,
) -> Result<CriticalCurve, NsError> {
    check_grid(eps_grid)?;
    let samples = eps_grid
        .par_iter()
        .map(|&eps| critical_point(map, hopf, eps, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let xs: Vec<f64> = samples.iter().map(|s| s.eps).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(CriticalCurve {
        samples,
        slope,
        intercept,
        r_squared,
    })
}

/// Symmetric bilinear form `B(u, v)_i = Σ b[i][j][k] u_j v_k`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Bilinear(pub [[[f64; 2]; 2]; 2]);

/// Symmetric trilinear form `C(u, v, w)_i = Σ c[i][j][k][m] u_j v_k w_m`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Trilinear(pub [[[[f64; 2]; 2]; 2]; 2]);

impl Bilinear {
    pub fn from_derivatives(d: &LocalDerivatives) -> Self {
        let mut b = [[[0.0; 2]; 2]; 2];
        for (i, bi) in b.iter_mut().enumerate() {
            for (j, row) in bi.iter_mut().enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = d.second[i][j + k];
                }
            }
        }
        Bilinear(b)
    }

    pub fn apply(&self, u: &CVector2, v: &CVector2) -> CVector2 {
        let mut out = CVector2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    out[i] += u[j] * v[k] * self.0[i][j][k];
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..2).all(|i| self.0[i][0][1] == self.0[i][1][0])
    }
}

impl Trilinear {
    pub fn from_derivatives(d: &LocalDerivatives) -> Self {
        let mut c = [[[[0.0; 2]; 2]; 2]; 2];
        for (i, ci) in c.iter_mut().enumerate() {
            for j in 0..2 {
                for k in 0..2 {
                    for m in 0..2 {
                        // entry depends only on how many arguments are y
                        ci[j][k][m] = d.third[i][j + k + m];
                    }
                }
            }
        }
        Trilinear(c)
    }

    pub fn apply(&self, u: &CVector2, v: &CVector2, w: &CVector2) -> CVector2 {
        let mut out = CVector2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for m in 0..2 {
                        out[i] += u[j] * v[k] * w[m] * self.0[i][j][k][m];
                    }
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        let c = &self.0;
        (0..2).all(|i| {
            (0..2).all(|j| {
                (0..2).all(|k| {
                    (0..2).all(|m| {
                        let v = c[i][j][k][m];
                        v == c[i][j][m][k] && v == c[i][k][j][m] && v == c[i][k][m][j] && v == c[i][m][j][k] && v == c[i][m][k][j]
                    })
                })
            })
        })
    }
}

/// `⟨u, v⟩ = ūᵀ v`.
pub fn inner(u: &CVector2, v: &CVector2) -> Complex64 {
    u[0].conj() * v[0] + u[1].conj() * v[1]
}

/// Normal-form data of the map at a fixed point.
#[derive(Debug, Clone)]
pub struct NsAnalysis {
    pub mu: f64,
    pub eps: f64,
    pub xi: Vector2<f64>,
    pub lambda: Complex64,
    pub modulus: f64,
    pub theta: f64,
    pub a: Matrix2<f64>,
    pub b: Bilinear,
    pub c: Trilinear,
    pub p: CVector2,
    pub q: CVector2,
    pub g20: Complex64,
    pub g11: Complex64,
    pub g02: Complex64,
    pub g21: Complex64,
    pub ell1: f64,
}

/// Minimum `|1 − e^{iθ}|` for which `ℓ₁` is evaluated.
pub const RESONANCE_FLOOR: f64 = 1e-6;

/// The map Lyapunov coefficient from `θ` and the normal-form coefficients.
pub fn ell1_from(theta: f64, g20: Complex64, g11: Complex64, g02: Complex64, g21: Complex64) -> f64 {
    let e = Complex64::from_polar(1.0, theta);
    let ec = e.conj();
    let quad = (1.0 - 2.0 * e) * ec * ec / (2.0 * (1.0 - e)) * g20 * g11;
    (ec * g21).re / 2.0 - quad.re - 0.5 * g11.norm_sqr() - 0.25 * g02.norm_sqr()
}

/// Unit eigenvector of `a` for `λ`, phase fixed so the first nonzero
/// component is real positive.
fn right_eigenvector(a: &Matrix2<f64>, lambda: Complex64) -> CVector2 {
    let c = |v: f64| Complex64::new(v, 0.0);
    let v = if a[(0, 1)].abs() >= a[(1, 0)].abs() {
        CVector2::new(c(a[(0, 1)]), lambda - a[(0, 0)])
    } else {
        CVector2::new(lambda - a[(1, 1)], c(a[(1, 0)]))
    };
    let v = v.unscale(v.norm());
    let lead = if v[0].norm() > 1e-14 { v[0] } else { v[1] };
    v * (lead.conj() / lead.norm())
}

/// Eigenvector of `aᵀ` for `λ̄`, scaled so `⟨p, q⟩ = 1`.
fn left_eigenvector(a: &Matrix2<f64>, lambda: Complex64, q: &CVector2) -> CVector2 {
    let c = |v: f64| Complex64::new(v, 0.0);
    let lb = lambda.conj();
    let p = if a[(1, 0)].abs() >= a[(0, 1)].abs() {
        CVector2::new(c(a[(1, 0)]), lb - a[(0, 0)])
    } else {
        CVector2::new(lb - a[(1, 1)], c(a[(0, 1)]))
    };
    p * (1.0 / inner(&p, q).conj())
}

/// Normal form at a known fixed point, in coordinates `x = ξ + M y`, with the
/// eigenvectors multiplied by `e^{i·gauge}`.
pub fn normal_form_at<M: PlanarMap + ?Sized>(
    map: &M,
    xi: &Vector2<f64>,
    mu: f64,
    eps: f64,
    basis: &Matrix2<f64>,
    gauge: f64,
) -> Result<NsAnalysis, NsError> {
    let inv = basis
        .try_inverse()
        .ok_or(HopfError::SingularJacobian { mu })?;
    let a = inv * map.jacobian(xi, mu, eps)? * basis;
    let local = |y1: f64, y2: f64| -> Result<Vector2<f64>, NsError> {
        let x = xi + basis * Vector2::new(y1, y2);
        Ok(inv * (map.apply(&x, mu, eps)? - xi))
    };
    let d = stencil_derivatives(local, 1.0 + xi.norm())?;
    let b = Bilinear::from_derivatives(&d);
    let c = Trilinear::from_derivatives(&d);
    let (lambda, modulus) = complex_eigen(&a, mu, eps)?;
    let theta = lambda.arg();
    let gap = (1.0 - Complex64::from_polar(1.0, theta)).norm();
    if gap < RESONANCE_FLOOR {
        return Err(NsError::Resonance(gap));
    }
    let phase = Complex64::from_polar(1.0, gauge);
    let q = right_eigenvector(&a, lambda) * phase;
    let p = left_eigenvector(&a, lambda, &q);
    let qb = q.map(|z| z.conj());
    let g20 = inner(&p, &b.apply(&q, &q));
    let g11 = inner(&p, &b.apply(&q, &qb));
    let g02 = inner(&p, &b.apply(&qb, &qb));
    let g21 = inner(&p, &c.apply(&q, &q, &qb));
    Ok(NsAnalysis {
        mu,
        eps,
        xi: *xi,
        lambda,
        modulus,
        theta,
        a,
        b,
        c,
        p,
        q,
        g20,
        g11,
        g02,
        g21,
        ell1: ell1_from(theta, g20, g11, g02, g21),
    })
}

/// Fixed point plus normal form in the original coordinates.
pub fn normal_form<M: PlanarMap + ?Sized>(
    map: &M,
    mu: f64,
    eps: f64,
    seed: &Vector2<f64>,
) -> Result<NsAnalysis, NsError> {
    let xi = fixed_point(map, mu, eps, seed)?;
    normal_form_at(map, &xi, mu, eps, &Matrix2::identity(), 0.0)
}

/// Which route produced a coefficient series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Fit,
    Formula,
}

/// `ℓ_{1,j}` for `j = l..=k` together with the intermediate series.
#[derive(Debug, Clone)]
pub struct CoefficientSeries {
    pub l: usize,
    pub k: usize,
    pub ell: Vec<f64>,
    /// Per-coefficient significance floor; zero for exact inputs.
    pub floor: Vec<f64>,
    pub r: Vec<Complex64>,
    pub s: Vec<Complex64>,
    pub big_l: Vec<Complex64>,
    pub ltilde: Vec<Complex64>,
    pub route: Route,
    /// Largest absolute fit residual (fit route).
    pub residual: f64,
}

impl CoefficientSeries {
    /// `ℓ_{1,j}`, if `j` is in range.
    pub fn coefficient(&self, j: usize) -> Option<f64> {
        j.checked_sub(self.l).and_then(|i| self.ell.get(i).copied())
    }

    /// First order whose coefficient exceeds its floor.
    pub fn j_star(&self) -> Option<usize> {
        self.ell
            .iter()
            .zip(&self.floor)
            .position(|(c, f)| c.abs() > *f)
            .map(|i| i + self.l)
    }
}

/// Result of a scaled-Vandermonde least-squares fit.
#[derive(Debug, Clone)]
pub struct PolyFit {
    /// Coefficients of `ε^j`, `j = l..=k`.
    pub coeffs: Vec<f64>,
    pub residual: f64,
    pub condition: f64,
}

/// Condition number above which a Vandermonde system is rejected.
const MAX_CONDITION: f64 = 1e10;

/// Fits `y ≈ Σ_{j=l}^{k} c_j ε^j` in the basis `(ε/ε_max)^j`.
pub fn poly_fit(eps: &[f64], ys: &[f64], l: usize, k: usize) -> Result<PolyFit, NsError> {
    if k < l {
        return Err(NsError::EmptyRange { l, k });
    }
    let unknowns = k - l + 1;
    let mut distinct: Vec<f64> = eps.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < unknowns + 1 {
        return Err(NsError::TooFewPoints {
            needed: unknowns + 1,
            found: distinct.len(),
        });
    }
    let emax = eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let v = DMatrix::from_fn(eps.len(), unknowns, |i, j| (eps[i] / emax).powi((l + j) as i32));
    let y = DVector::from_column_slice(ys);
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = smax / smin;
    if !(condition <= MAX_CONDITION) {
        return Err(NsError::IllConditioned(condition));
    }
    // Householder QR: nalgebra's SVD solve loses digits on these tall systems
    let qr = v.clone().qr();
    let scaled = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &y))
        .ok_or(NsError::IllConditioned(condition))?;
    let residual = (&v * &scaled - &y).amax();
    let coeffs = scaled
        .iter()
        .enumerate()
        .map(|(j, c)| c / emax.powi((l + j) as i32))
        .collect();
    Ok(PolyFit {
        coeffs,
        residual,
        condition,
    })
}

/// Per-`ε` data on the critical curve.
#[derive(Debug, Clone)]
pub struct SeriesSample {
    pub curve: CurveSample,
    /// Normal form in the Jordan coordinates of the Hopf point.
    pub analysis: NsAnalysis,
}

/// Critical points and normal forms along `μ(ε)`, in parallel over `ε`.
pub fn collect_series<M: PlanarMap + ?Sized>(
    map: &M,
    hopf: &HopfPoint,
    eps_list: &[f64],
    opts: &NsOptions,
) -> Result<Vec<SeriesSample>, NsError> {
    check_grid(eps_list)?;
    eps_list
        .par_iter()
        .map(|&eps| {
            let curve = critical_point(map, hopf, eps, opts)?;
            let analysis = normal_form_at(map, &curve.xi, curve.mu, eps, &hopf.jordan, 0.0)?;
            Ok(SeriesSample { curve, analysis })
        })
        .collect()
}

/// Default `ε` list: 8 geometric points in `[1e-4, 5e-3]`, in units of the
/// Hopf period. For `ω0 > 1` the range shrinks by `1/ω0` so that the return
/// map stays near the identity. For `l > 1` the bounds are taken to the power
/// `1/l`, since the rotation per return is of size `ε^l ω0`.
pub fn default_eps_list(omega0: f64, l: usize) -> Vec<f64> {
    let unit = omega0.abs().max(1.0);
    let root = 1.0 / l.max(1) as f64;
    geometric((1e-4 / unit).powf(root), (5e-3 / unit).powf(root), 8)
}

pub fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (ratio * i as f64).exp()).collect()
}

/// Fit route from collected samples.
///
/// `ℓ₁(ε)` is fitted with powers `l..=k + extra` and the coefficients up to
/// `k` are reported. A coefficient counts as nonzero when it exceeds both twice
/// its change under refitting with one more power (the truncation sensitivity)
/// and ten times the residual scaled by `ε_max^{-j}`.
pub fn fit_series(samples: &[SeriesSample], l: usize, k: usize, extra: usize) -> Result<CoefficientSeries, NsError> {
    if k < l {
        return Err(NsError::EmptyRange { l, k });
    }
    // samples near strong resonance carry no usable ℓ₁
    let usable = || samples.iter().filter(|s| s.curve.resonance_ok);
    let eps: Vec<f64> = usable().map(|s| s.curve.eps).collect();
    let ys: Vec<f64> = usable().map(|s| s.analysis.ell1).collect();
    let fit = poly_fit(&eps, &ys, l, k + extra)?;
    let leading = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if fit.residual > 0.1 * leading {
        return Err(NsError::FitResidual {
            residual: fit.residual,
            leading,
        });
    }
    let emax = eps.iter().fold(0.0f64, |m, e| m.max(*e));
    let n = k - l + 1;
    let noise = |j: usize| 10.0 * fit.residual / emax.powi(j as i32);
    let floor = match poly_fit(&eps, &ys, l, k + extra + 1) {
        Ok(wider) => fit.coeffs[..n]
            .iter()
            .zip(&wider.coeffs)
            .zip(l..=k)
            .map(|((c, w), j)| (2.0 * (c - w).abs()).max(noise(j)))
            .collect(),
        Err(_) => (l..=k).map(noise).collect(),
    };
    Ok(CoefficientSeries {
        l,
        k,
        ell: fit.coeffs[..n].to_vec(),
        floor,
        r: Vec::new(),
        s: Vec::new(),
        big_l: Vec::new(),
        ltilde: Vec::new(),
        route: Route::Fit,
        residual: fit.residual,
    })
}

/// Least-squares fit of `ℓ₁(ε)` along the critical curve.
pub fn lyapunov_series_fit<M: PlanarMap + ?Sized>(
    map: &M,
    hopf: &HopfPoint,
    eps_list: &[f64],
    opts: &NsOptions,
    k: usize,
) -> Result<CoefficientSeries, NsError> {
    let samples = collect_series(map, hopf, eps_list, opts)?;
    fit_series(&samples, opts.l, k, opts.extra_orders)
}

/// Tensor coefficients `A_j = [[α_j, −β_j], [β_j, α_j]]`, `B_j`, `C_j` for
/// `j = l..=k` in real Jordan coordinates.
#[derive(Debug, Clone)]
pub struct TensorSeries {
    pub l: usize,
    pub k: usize,
    pub omega0: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub b: Vec<Bilinear>,
    pub c: Vec<Trilinear>,
}

/// Tensor series fitted from the normal forms along `μ(ε)`.
pub fn fit_tensor_series(
    samples: &[SeriesSample],
    l: usize,
    k: usize,
    extra: usize,
    omega0: f64,
) -> Result<TensorSeries, NsError> {
    if k < l {
        return Err(NsError::EmptyRange { l, k });
    }
    let eps: Vec<f64> = samples.iter().map(|s| s.curve.eps).collect();
    let n = k - l + 1;
    let fit = |f: &dyn Fn(&NsAnalysis) -> f64| -> Result<Vec<f64>, NsError> {
        let ys: Vec<f64> = samples.iter().map(|s| f(&s.analysis)).collect();
        let mut coeffs = poly_fit(&eps, &ys, l, k + extra)?.coeffs;
        coeffs.truncate(n);
        Ok(coeffs)
    };
    let alpha = fit(&|a| a.lambda.re - 1.0)?;
    let beta = fit(&|a| a.lambda.im)?;
    let mut b = vec![Bilinear::default(); n];
    let mut c = vec![Trilinear::default(); n];
    for i in 0..2 {
        for j in 0..2 {
            for kk in j..2 {
                let coeffs = fit(&|a| a.b.0[i][j][kk])?;
                for (bt, v) in b.iter_mut().zip(&coeffs) {
                    bt.0[i][j][kk] = *v;
                    bt.0[i][kk][j] = *v;
                }
            }
        }
        for ny in 0..4 {
            let (j, kk, m) = [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)][ny];
            let coeffs = fit(&|a| a.c.0[i][j][kk][m])?;
            for (ct, v) in c.iter_mut().zip(&coeffs) {
                for jj in 0..2 {
                    for k2 in 0..2 {
                        for m2 in 0..2 {
                            if jj + k2 + m2 == ny {
                                ct.0[i][jj][k2][m2] = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TensorSeries {
        l,
        k,
        omega0,
        alpha,
        beta,
        b,
        c,
    })
}

/// Reading of the `|⟨p, B(·,·)⟩|²` sums in `L̃_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LtildeReading {
    /// Second factor indexed by `n₂`, `−½` on the `B(p̄, p̄)` sum; reproduces
    /// the `−½|g₁₁|² − ¼|g₀₂|²` terms of `ℓ₁`.
    #[default]
    Corrected,
    /// Both factors indexed by `n₁`, `+½` on the `B(p̄, p̄)` sum.
    AsPrinted,
}

fn series_mul(a: &[Complex64], b: &[Complex64], n: usize) -> Vec<Complex64> {
    (0..=n)
        .map(|i| (0..=i).map(|j| a.get(j).copied().unwrap_or_default() * b.get(i - j).copied().unwrap_or_default()).sum())
        .collect()
}

fn series_recip(a: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); n + 1];
    out[0] = 1.0 / a[0];
    for i in 1..=n {
        let acc: Complex64 = (1..=i).map(|j| a.get(j).copied().unwrap_or_default() * out[i - j]).sum();
        out[i] = -acc * out[0];
    }
    out
}

/// Coefficients `ℓ_{1,j}` from tensor series by the closed formula.
pub fn lyapunov_series_formula(t: &TensorSeries, reading: LtildeReading) -> Result<CoefficientSeries, NsError> {
    let (l, k) = (t.l, t.k);
    if k < l || l == 0 {
        return Err(NsError::EmptyRange { l, k });
    }
    let n = k - l;
    for (len, _) in [(t.b.len(), 'b'), (t.c.len(), 'c'), (t.alpha.len(), 'a'), (t.beta.len(), 'b')] {
        if len < n + 1 {
            return Err(NsError::MissingTensor(l + len));
        }
    }
    let cx = |re: f64, im: f64| Complex64::new(re, im);
    // z(ε) with e^{iθ_ε} = 1 + ε^l z(ε); α_l = 0 and β_l = ω₀ by hypothesis
    let z: Vec<Complex64> = (0..=n)
        .map(|j| if j == 0 { cx(0.0, t.omega0) } else { cx(t.alpha[j], t.beta[j]) })
        .collect();
    let mut lam = vec![Complex64::default(); n + 1];
    lam[0] = cx(1.0, 0.0);
    for (j, zj) in z.iter().enumerate() {
        if l + j <= n {
            lam[l + j] += zj;
        }
    }
    let inv_lam = series_recip(&lam, n);
    // e^{−iθ} − 1 = ε^l·(−z/λ)
    let r: Vec<Complex64> = series_mul(&z, &inv_lam, n).into_iter().map(|v| -v).collect();
    // ε^l(1 − 2λ)λ^{−2}/(1 − λ) = −(1 − 2λ)λ^{−2}/z
    let one_minus_2lam: Vec<Complex64> = lam
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 { 1.0 - 2.0 * v } else { -2.0 * v })
        .collect();
    let inv_lam2 = series_mul(&inv_lam, &inv_lam, n);
    let s: Vec<Complex64> = series_mul(&series_mul(&one_minus_2lam, &inv_lam2, n), &series_recip(&z, n), n)
        .into_iter()
        .map(|v| -v)
        .collect();

    let p = CVector2::new(cx(FRAC_1_SQRT_2, 0.0), cx(0.0, -FRAC_1_SQRT_2));
    let pb = p.map(|v| v.conj());
    let cpp: Vec<Complex64> = t.c[..=n].iter().map(|c| inner(&p, &c.apply(&p, &p, &pb))).collect();
    let bpp: Vec<Complex64> = t.b[..=n].iter().map(|b| inner(&p, &b.apply(&p, &p))).collect();
    let bppb: Vec<Complex64> = t.b[..=n].iter().map(|b| inner(&p, &b.apply(&p, &pb))).collect();
    let bpbpb: Vec<Complex64> = t.b[..=n].iter().map(|b| inner(&p, &b.apply(&pb, &pb))).collect();

    let big_l: Vec<Complex64> = (0..=n)
        .map(|m| {
            let mut acc = cpp[m];
            for n1 in 0..=m {
                for n2 in 0..=(m - n1) {
                    acc -= s[n1] * bpp[n2] * bppb[m - n1 - n2];
                }
            }
            acc
        })
        .collect();
    let tilde_len = (n + 1).saturating_sub(l);
    let ltilde: Vec<Complex64> = (0..tilde_len)
        .map(|m| {
            let mut acc = big_l[m];
            for n1 in 0..=m {
                let n2 = m - n1;
                let second = match reading {
                    LtildeReading::Corrected => n2,
                    LtildeReading::AsPrinted => n1,
                };
                acc += r[n1] * cpp[n2];
                acc -= bppb[n1] * bppb[second].conj();
                let half = match reading {
                    LtildeReading::Corrected => -0.5,
                    LtildeReading::AsPrinted => 0.5,
                };
                acc += half * bpbpb[n1] * bpbpb[second].conj();
            }
            acc
        })
        .collect();
    let ell = (0..=n)
        .map(|m| {
            if m < l {
                0.5 * big_l[m].re
            } else {
                0.5 * (big_l[m] + ltilde[m - l] - big_l[m - l]).re
            }
        })
        .collect();
    Ok(CoefficientSeries {
        l,
        k,
        ell,
        floor: vec![0.0; n + 1],
        r,
        s,
        big_l,
        ltilde,
        route: Route::Formula,
        residual: 0.0,
    })
}

/// `H_ε(y; σ) = P(y + ξ(σ + μ_c); σ + μ_c, ε) − ξ(σ + μ_c)`.
///
/// Implements [`PlanarMap`] with `σ` in the parameter slot; the `ε` argument
/// is ignored in favour of the stored one.
pub struct ShiftedMap<'a, M: ?Sized> {
    map: &'a M,
    mu_c: f64,
    eps: f64,
    xi: Vector2<f64>,
}

pub fn shifted_map<'a, M: PlanarMap + ?Sized>(map: &'a M, mu_c: f64, eps: f64, xi: Vector2<f64>) -> ShiftedMap<'a, M> {
    ShiftedMap { map, mu_c, eps, xi }
}

impl<M: PlanarMap + ?Sized> ShiftedMap<'_, M> {
    fn base(&self, sigma: f64) -> Result<Vector2<f64>, NsError> {
        if sigma == 0.0 {
            Ok(self.xi)
        } else {
            fixed_point(self.map, self.mu_c + sigma, self.eps, &self.xi)
        }
    }
}

impl<M: PlanarMap + ?Sized> PlanarMap for ShiftedMap<'_, M> {
    fn apply(&self, y: &Vector2<f64>, sigma: f64, _eps: f64) -> Result<Vector2<f64>, NsError> {
        let xi = self.base(sigma)?;
        Ok(self.map.apply(&(y + xi), self.mu_c + sigma, self.eps)? - xi)
    }

    fn jacobian(&self, y: &Vector2<f64>, sigma: f64, _eps: f64) -> Result<Matrix2<f64>, NsError> {
        let xi = self.base(sigma)?;
        self.map.jacobian(&(y + xi), self.mu_c + sigma, self.eps)
    }
}

/// `w ↦ e^{iθ} w + c w|w|²` written in real coordinates `x = q w + q̄ w̄`,
/// `q = (1, −i)/√2`.
#[derive(Debug, Clone, Copy)]
pub struct CubicNormalFormMap {
    pub theta: f64,
    pub c: Complex64,
}

impl PlanarMap for CubicNormalFormMap {
    fn apply(&self, x: &Vector2<f64>, _mu: f64, _eps: f64) -> Result<Vector2<f64>, NsError> {
        let w = Complex64::new(x[0], x[1]) * FRAC_1_SQRT_2;
        let fw = Complex64::from_polar(1.0, self.theta) * w + self.c * w * w.norm_sqr();
        let out = fw * std::f64::consts::SQRT_2;
        Ok(Vector2::new(out.re, out.im))
    }
}
