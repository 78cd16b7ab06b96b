//! Hopf points of a planar family `x' = g(x; μ)`.
//!
//! The zero branch `g(x_μ; μ) = 0` is followed by natural-parameter
//! continuation, the crossing `α(μ₀) = 0` of the real part of the linearized
//! eigenvalues is located by a safeguarded secant, and the first Lyapunov
//! coefficient is evaluated from second and third derivatives in real Jordan
//! coordinates.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::averaging::{AveragedTable, AveragingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HopfError {
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("Newton failed at mu = {mu} (residual {residual:e})")]
    NewtonFailure { mu: f64, residual: f64 },
    #[error("singular Jacobian at mu = {mu} (possible fold)")]
    SingularJacobian { mu: f64 },
    #[error("continuation step underflow at mu = {mu}")]
    StepUnderflow { mu: f64 },
    #[error("real part of the eigenvalues does not change sign on the branch")]
    NoSignChange,
    #[error("eigenvalues are not a complex pair at mu = {mu}")]
    NotComplex { mu: f64 },
    #[error("transversality fails: alpha' = {0:e}")]
    Transversality(f64),
    #[error("eigenvalues {re} ± {im}i are not purely imaginary")]
    NotPurelyImaginary { re: f64, im: f64 },
    #[error("invalid parameter interval [{0}, {1}]")]
    Interval(f64, f64),
}

impl From<AveragingError> for HopfError {
    fn from(e: AveragingError) -> Self {
        HopfError::Evaluation(e.to_string())
    }
}

/// A planar family `g(x; μ)`.
pub trait PlanarFamily: Sync {
    fn eval(&self, x: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError>;
}

impl<F> PlanarFamily for F
where
    F: Fn(&Vector2<f64>, f64) -> Result<Vector2<f64>, HopfError> + Sync,
{
    fn eval(&self, x: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError> {
        self(x, mu)
    }
}

/// The leading averaged function `g_l` of a table.
impl PlanarFamily for AveragedTable {
    fn eval(&self, x: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError> {
        let v = self.leading(x.as_slice(), mu)?;
        Ok(Vector2::new(v[0], v[1]))
    }
}

/// Residual accepted on the zero branch.
pub const ZERO_TOL: f64 = 1e-10;
/// Default number of continuation samples.
pub const BRANCH_SAMPLES: usize = 21;

/// Central-difference step for `D_x g`.
fn jacobian_step(x: &Vector2<f64>) -> f64 {
    1e-4 * (1.0 + x.norm())
}

/// `D_x g(x; μ)` by Richardson-extrapolated central differences.
pub fn jacobian<G: PlanarFamily + ?Sized>(g: &G, x: &Vector2<f64>, mu: f64) -> Result<Matrix2<f64>, HopfError> {
    let h = jacobian_step(x);
    let mut jac = Matrix2::zeros();
    for j in 0..2 {
        let diff = |h: f64| -> Result<Vector2<f64>, HopfError> {
            let mut e = Vector2::zeros();
            e[j] = h;
            Ok((g.eval(&(x + e), mu)? - g.eval(&(x - e), mu)?) / (2.0 * h))
        };
        let coarse = diff(h)?;
        let fine = diff(0.5 * h)?;
        jac.set_column(j, &((fine * 4.0 - coarse) / 3.0));
    }
    Ok(jac)
}

/// Newton's method on `g(·; μ) = 0` from `seed`.
pub fn newton<G: PlanarFamily + ?Sized>(g: &G, seed: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError> {
    let mut x = *seed;
    let mut res = g.eval(&x, mu)?;
    for _ in 0..40 {
        if res.norm() <= ZERO_TOL {
            return Ok(x);
        }
        let jac = jacobian(g, &x, mu)?;
        let scale = jac.abs().max();
        if jac.determinant().abs() <= 1e-14 * scale * scale {
            return Err(HopfError::SingularJacobian { mu });
        }
        let step = jac.lu().solve(&res).ok_or(HopfError::SingularJacobian { mu })?;
        // damped step keeps Newton from jumping branches
        let mut t = 1.0;
        loop {
            let trial = x - step * t;
            let r = g.eval(&trial, mu)?;
            if r.norm() < res.norm() || t < 1e-3 {
                x = trial;
                res = r;
                break;
            }
            t *= 0.5;
        }
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    if res.norm() <= ZERO_TOL {
        Ok(x)
    } else {
        Err(HopfError::NewtonFailure {
            mu,
            residual: res.norm(),
        })
    }
}

/// Samples of a zero curve `μ ↦ x_μ`.
#[derive(Debug, Clone)]
pub struct ZeroBranch {
    pub samples: Vec<(f64, Vector2<f64>)>,
    /// Requested interval.
    pub interval: (f64, f64),
    /// Why continuation stopped early, if it did.
    pub truncated: Option<HopfError>,
}

impl ZeroBranch {
    /// Parameter interval actually covered.
    pub fn covered(&self) -> (f64, f64) {
        let first = self.samples.first().map_or(self.interval.0, |s| s.0);
        let last = self.samples.last().map_or(self.interval.0, |s| s.0);
        (first, last)
    }

    fn nearest_seed(&self, mu: f64) -> Vector2<f64> {
        let mut best = &self.samples[0];
        for s in &self.samples {
            if (s.0 - mu).abs() < (best.0 - mu).abs() {
                best = s;
            }
        }
        best.1
    }
}

/// Natural-parameter continuation with Newton correction and step halving.
pub fn trace_zero_branch<G: PlanarFamily + ?Sized>(
    g: &G,
    mu_range: (f64, f64),
    x_seed: &Vector2<f64>,
) -> Result<ZeroBranch, HopfError> {
    trace_zero_branch_n(g, mu_range, x_seed, BRANCH_SAMPLES)
}

pub fn trace_zero_branch_n<G: PlanarFamily + ?Sized>(
    g: &G,
    mu_range: (f64, f64),
    x_seed: &Vector2<f64>,
    samples: usize,
) -> Result<ZeroBranch, HopfError> {
    let (a, b) = mu_range;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(HopfError::Interval(a, b));
    }
    let nominal = (b - a) / (samples.max(2) - 1) as f64;
    let min_step = 1e-12 * (b - a);
    let x0 = newton(g, x_seed, a)?;
    let mut out = vec![(a, x0)];
    let mut truncated = None;
    let mut mu = a;
    let mut x = x0;
    let mut step = nominal;
    while mu < b {
        let target = (mu + step).min(b);
        // secant predictor from the last two samples
        let pred = match out.len() {
            n if n >= 2 => {
                let (m1, x1) = out[n - 2];
                let (m2, x2) = out[n - 1];
                x2 + (x2 - x1) * ((target - m2) / (m2 - m1))
            }
            _ => x,
        };
        match newton(g, &pred, target) {
            Ok(xn) => {
                mu = target;
                x = xn;
                out.push((mu, x));
                step = (step * 2.0).min(nominal);
            }
            Err(HopfError::Evaluation(e)) => return Err(HopfError::Evaluation(e)),
            Err(e) => {
                step *= 0.5;
                if step < min_step {
                    truncated = Some(match e {
                        HopfError::SingularJacobian { .. } => e,
                        _ => HopfError::StepUnderflow { mu },
                    });
                    break;
                }
            }
        }
    }
    Ok(ZeroBranch {
        samples: out,
        interval: mu_range,
        truncated,
    })
}

/// Real part and imaginary part (`β ≥ 0`) of the eigenvalues of a real 2×2
/// matrix; `None` when the eigenvalues are real.
pub fn complex_pair(jac: &Matrix2<f64>) -> Option<(f64, f64)> {
    let tr = jac.trace();
    let det = jac.determinant();
    let disc = det - 0.25 * tr * tr;
    (disc > 0.0).then(|| (0.5 * tr, disc.sqrt()))
}

/// A Hopf point of the family.
#[derive(Debug, Clone)]
pub struct HopfPoint {
    pub mu0: f64,
    pub x: Vector2<f64>,
    pub omega0: f64,
    pub alpha_prime: f64,
    /// `M` with `M⁻¹ D_x g M = [[0, -ω₀], [ω₀, 0]]` and unit-norm columns.
    pub jordan: Matrix2<f64>,
    pub ell_1l: f64,
    /// `(μ, α(μ), β(μ))` along the branch samples.
    pub eigen_path: Vec<(f64, f64, f64)>,
}

struct Crossing<'a, G: ?Sized> {
    g: &'a G,
    branch: &'a ZeroBranch,
}

impl<G: PlanarFamily + ?Sized> Crossing<'_, G> {
    fn at(&self, mu: f64, seed: Option<Vector2<f64>>) -> Result<(Vector2<f64>, f64, f64), HopfError> {
        let seed = seed.unwrap_or_else(|| self.branch.nearest_seed(mu));
        let x = newton(self.g, &seed, mu)?;
        let jac = jacobian(self.g, &x, mu)?;
        let (alpha, beta) = complex_pair(&jac).ok_or(HopfError::NotComplex { mu })?;
        Ok((x, alpha, beta))
    }
}

/// Locates `α(μ₀) = 0` on the branch and assembles the Hopf data.
pub fn find_hopf<G: PlanarFamily + ?Sized>(branch: &ZeroBranch, g: &G) -> Result<HopfPoint, HopfError> {
    if branch.samples.len() < 2 {
        return Err(HopfError::NoSignChange);
    }
    let cross = Crossing { g, branch };
    let mut path = Vec::with_capacity(branch.samples.len());
    for &(mu, x) in &branch.samples {
        let jac = jacobian(g, &x, mu)?;
        let (alpha, beta) = complex_pair(&jac).ok_or(HopfError::NotComplex { mu })?;
        path.push((mu, alpha, beta));
    }
    let idx = path
        .windows(2)
        .position(|w| w[0].1 == 0.0 || w[0].1.signum() != w[1].1.signum())
        .ok_or(HopfError::NoSignChange)?;
    let (mut a, mut fa) = (path[idx].0, path[idx].1);
    let (mut b, mut fb) = (path[idx + 1].0, path[idx + 1].1);
    let omega_scale = path[idx].2.max(path[idx + 1].2);
    let tol = 1e-11 * omega_scale;
    let (mut mu0, mut x0, mut alpha0, mut beta0);
    if fa == 0.0 {
        mu0 = a;
        let (x, al, be) = cross.at(a, None)?;
        x0 = x;
        alpha0 = al;
        beta0 = be;
    } else {
        mu0 = 0.5 * (a + b);
        let first = cross.at(mu0, None)?;
        x0 = first.0;
        alpha0 = first.1;
        beta0 = first.2;
        for _ in 0..200 {
            if alpha0.abs() <= tol {
                break;
            }
            if alpha0.signum() == fa.signum() {
                a = mu0;
                fa = alpha0;
            } else {
                b = mu0;
                fb = alpha0;
            }
            let secant = b - fb * (b - a) / (fb - fa);
            let mid = 0.5 * (a + b);
            let inside = secant > a.min(b) && secant < a.max(b);
            let next = if inside && (secant - mid).abs() < 0.5 * (b - a).abs() { secant } else { mid };
            if next == mu0 || (b - a).abs() <= 4.0 * f64::EPSILON * (1.0 + mu0.abs()) {
                break;
            }
            mu0 = next;
            let (x, al, be) = cross.at(mu0, Some(x0))?;
            x0 = x;
            alpha0 = al;
            beta0 = be;
        }
    }
    let (lo, hi) = branch.covered();
    let h = 1e-5 * (hi - lo);
    let (_, ap, _) = cross.at(mu0 + h, Some(x0))?;
    let (_, am, _) = cross.at(mu0 - h, Some(x0))?;
    let alpha_prime = (ap - am) / (2.0 * h);
    if alpha_prime.abs() < 1e-8 {
        return Err(HopfError::Transversality(alpha_prime));
    }
    let jac = jacobian(g, &x0, mu0)?;
    let (jordan, omega0) = jordan_normalize_with_tol(&jac, 1e-9_f64.max(2.0 * alpha0.abs() / beta0))?;
    let ell_1l = lyapunov_in_basis(g, &x0, mu0, &jordan, omega0)?;
    Ok(HopfPoint {
        mu0,
        x: x0,
        omega0,
        alpha_prime,
        jordan,
        ell_1l,
        eigen_path: path,
    })
}

/// Real Jordan transform of a matrix with eigenvalues `±iω`.
///
/// Columns are `(Re v, -Im v)` for the eigenvector `v` of `+iω`, with the
/// phase of `v` chosen so both columns have unit norm.
pub fn jordan_normalize(jac: &Matrix2<f64>) -> Result<(Matrix2<f64>, f64), HopfError> {
    jordan_normalize_with_tol(jac, 1e-9)
}

fn jordan_normalize_with_tol(jac: &Matrix2<f64>, rel_tol: f64) -> Result<(Matrix2<f64>, f64), HopfError> {
    let (re, omega) = complex_pair(jac).ok_or(HopfError::NotPurelyImaginary { re: 0.5 * jac.trace(), im: 0.0 })?;
    if re.abs() > rel_tol * omega {
        return Err(HopfError::NotPurelyImaginary { re, im: omega });
    }
    let (a, b, c, d) = (jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]);
    // v = u + i w
    let (u, w) = if b.abs() >= c.abs() {
        (Vector2::new(b, -a), Vector2::new(0.0, omega))
    } else {
        (Vector2::new(-d, c), Vector2::new(omega, 0.0))
    };
    let uu = u.norm_squared();
    let ww = w.norm_squared();
    let uw = u.dot(&w);
    // a circular eigen-ellipse leaves the phase free: align Re v with e₁
    let base = if (uu - ww).abs() + 2.0 * uw.abs() <= 1e-8 * (uu + ww) {
        u[1].atan2(w[1])
    } else {
        0.5 * (uu - ww).atan2(2.0 * uw)
    };
    let mut best: Option<(Vector2<f64>, Vector2<f64>)> = None;
    for k in 0..4 {
        let phi = base + k as f64 * std::f64::consts::FRAC_PI_2;
        let (s, co) = phi.sin_cos();
        let u2 = u * co - w * s;
        let w2 = u * s + w * co;
        if best.as_ref().is_none_or(|(bu, _)| u2[0] > bu[0] + 1e-14 * bu.norm()) {
            best = Some((u2, w2));
        }
    }
    let (u2, w2) = best.expect("four candidates");
    let scale = u2.norm();
    let m = Matrix2::from_columns(&[u2 / scale, -w2 / scale]);
    Ok((m, omega))
}

/// Second and third partial derivatives of a planar function at the origin.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalDerivatives {
    /// `[component][xx, xy, yy]`
    pub second: [[f64; 3]; 2],
    /// `[component][xxx, xxy, xyy, yyy]`
    pub third: [[f64; 4]; 2],
}

/// Central-difference stencils for `f` around `(0, 0)` with steps
/// `1e-4·scale` (second order) and `5e-3·scale` (third order).
pub fn stencil_derivatives<E, F>(f: F, scale: f64) -> Result<LocalDerivatives, E>
where
    F: Fn(f64, f64) -> Result<Vector2<f64>, E>,
{
    let g0 = f(0.0, 0.0)?;
    let mut d = LocalDerivatives::default();
    {
        let h = 1e-4 * scale;
        let xp = f(h, 0.0)?;
        let xm = f(-h, 0.0)?;
        let yp = f(0.0, h)?;
        let ym = f(0.0, -h)?;
        let pp = f(h, h)?;
        let pm = f(h, -h)?;
        let mp = f(-h, h)?;
        let mm = f(-h, -h)?;
        for c in 0..2 {
            d.second[c][0] = (xp[c] - 2.0 * g0[c] + xm[c]) / (h * h);
            d.second[c][1] = (pp[c] - pm[c] - mp[c] + mm[c]) / (4.0 * h * h);
            d.second[c][2] = (yp[c] - 2.0 * g0[c] + ym[c]) / (h * h);
        }
    }
    {
        let h = 5e-3 * scale;
        let xp = f(h, 0.0)?;
        let xm = f(-h, 0.0)?;
        let x2p = f(2.0 * h, 0.0)?;
        let x2m = f(-2.0 * h, 0.0)?;
        let yp = f(0.0, h)?;
        let ym = f(0.0, -h)?;
        let y2p = f(0.0, 2.0 * h)?;
        let y2m = f(0.0, -2.0 * h)?;
        let pp = f(h, h)?;
        let pm = f(h, -h)?;
        let mp = f(-h, h)?;
        let mm = f(-h, -h)?;
        let h3c = 2.0 * h * h * h;
        for c in 0..2 {
            d.third[c][0] = (x2p[c] - 2.0 * xp[c] + 2.0 * xm[c] - x2m[c]) / h3c;
            // ∂x² ∂y: second x-difference of the y-derivative
            d.third[c][1] = (pp[c] - 2.0 * yp[c] + mp[c] - pm[c] + 2.0 * ym[c] - mm[c]) / h3c;
            // ∂x ∂y²: second y-difference of the x-derivative
            d.third[c][2] = (pp[c] - 2.0 * xp[c] + pm[c] - mp[c] + 2.0 * xm[c] - mm[c]) / h3c;
            d.third[c][3] = (y2p[c] - 2.0 * yp[c] + 2.0 * ym[c] - y2m[c]) / h3c;
        }
    }
    Ok(d)
}

/// Derivatives of `ĝ(y) = M⁻¹ g(x₀ + M y)` at `y = 0`.
pub fn local_derivatives<G: PlanarFamily + ?Sized>(
    g: &G,
    x0: &Vector2<f64>,
    mu0: f64,
    basis: &Matrix2<f64>,
) -> Result<LocalDerivatives, HopfError> {
    let inv = basis.try_inverse().ok_or(HopfError::SingularJacobian { mu: mu0 })?;
    let gh = |y1: f64, y2: f64| -> Result<Vector2<f64>, HopfError> {
        let x = x0 + basis * Vector2::new(y1, y2);
        Ok(inv * g.eval(&x, mu0)?)
    };
    stencil_derivatives(gh, 1.0 + x0.norm())
}

/// The eight-term first Lyapunov coefficient from local derivatives.
pub fn lyapunov_from_derivatives(d: &LocalDerivatives, omega0: f64) -> f64 {
    let [g1, g2] = d.second;
    let (g1xx, g1xy, g1yy) = (g1[0], g1[1], g1[2]);
    let (g2xx, g2xy, g2yy) = (g2[0], g2[1], g2[2]);
    let cubic = d.third[0][0] + d.third[0][2] + d.third[1][1] + d.third[1][3];
    let quad = g1xy * (g1xx + g1yy) - g2xy * (g2xx + g2yy) - g1xx * g2xx + g1yy * g2yy;
    cubic / 8.0 + quad / (8.0 * omega0)
}

/// `ℓ₁` of the family at a point, in the coordinates `y` with `x = x₀ + M y`.
pub fn lyapunov_in_basis<G: PlanarFamily + ?Sized>(
    g: &G,
    x0: &Vector2<f64>,
    mu0: f64,
    basis: &Matrix2<f64>,
    omega0: f64,
) -> Result<f64, HopfError> {
    Ok(lyapunov_from_derivatives(&local_derivatives(g, x0, mu0, basis)?, omega0))
}

/// First Lyapunov coefficient at a Hopf point.
pub fn lyapunov_avg<G: PlanarFamily + ?Sized>(g: &G, hopf: &HopfPoint) -> Result<f64, HopfError> {
    lyapunov_in_basis(g, &hopf.x, hopf.mu0, &hopf.jordan, hopf.omega0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical(x: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError> {
        Ok(Vector2::new(mu * x[0] - x[1], x[0] + mu * x[1]))
    }

    #[test]
    fn canonical_linear_hopf() {
        let branch = trace_zero_branch(&canonical, (-0.5, 0.5), &Vector2::new(0.1, 0.1)).unwrap();
        assert!(branch.samples.iter().all(|(_, x)| x.norm() < 1e-10));
        let hopf = find_hopf(&branch, &canonical).unwrap();
        assert!(hopf.mu0.abs() < 1e-11);
        assert!((hopf.omega0 - 1.0).abs() < 1e-8);
        assert!((hopf.alpha_prime - 1.0).abs() < 1e-6);
        assert!(hopf.ell_1l.abs() < 1e-6);
        assert!((hopf.jordan - Matrix2::identity()).amax() < 1e-12);
    }

    #[test]
    fn linear_branch_is_constant() {
        let c = Vector2::new(0.3, -1.2);
        let g = move |x: &Vector2<f64>, mu: f64| -> Result<Vector2<f64>, HopfError> {
            let a = Matrix2::new(mu, -2.0, 0.5, mu + 0.1);
            Ok(a * (x - c))
        };
        let branch = trace_zero_branch(&g, (-0.2, 0.2), &Vector2::zeros()).unwrap();
        assert!(branch.truncated.is_none());
        assert!(branch.samples.iter().all(|(_, x)| (x - c).norm() < 1e-10));
    }

    #[test]
    fn no_zero_near_seed() {
        let g = |x: &Vector2<f64>, _mu: f64| -> Result<Vector2<f64>, HopfError> {
            Ok(Vector2::new(x[0] * x[0] + 1.0, x[1]))
        };
        assert!(matches!(
            trace_zero_branch(&g, (0.0, 1.0), &Vector2::new(0.5, 0.0)),
            Err(HopfError::NewtonFailure { .. }) | Err(HopfError::SingularJacobian { .. })
        ));
    }

    #[test]
    fn tangential_crossing_is_rejected() {
        let g = |x: &Vector2<f64>, mu: f64| -> Result<Vector2<f64>, HopfError> {
            let m2 = mu * mu;
            Ok(Vector2::new(m2 * x[0] - x[1], x[0] + m2 * x[1]))
        };
        let branch = trace_zero_branch_n(&g, (-0.5, 0.5), &Vector2::zeros(), 20).unwrap();
        assert_eq!(find_hopf(&branch, &g).unwrap_err(), HopfError::NoSignChange);
    }

    #[test]
    fn jordan_examples() {
        let (m, w) = jordan_normalize(&Matrix2::new(0.0, -3.0, 3.0, 0.0)).unwrap();
        assert!((w - 3.0).abs() < 1e-15);
        assert!((m - Matrix2::identity()).amax() < 1e-15);

        let j = Matrix2::new(1.0, -2.0, 1.0, -1.0);
        let (m, w) = jordan_normalize(&j).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
        let canon = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        let back = m.try_inverse().unwrap() * j * m;
        assert!((back - canon).amax() <= 1e-12, "{back}");
        assert!((m.column(0).norm() - 1.0).abs() < 1e-14 && (m.column(1).norm() - 1.0).abs() < 1e-14);

        assert!(matches!(
            jordan_normalize(&Matrix2::new(0.1, -1.0, 1.0, 0.0)),
            Err(HopfError::NotPurelyImaginary { .. })
        ));
        assert!(jordan_normalize(&Matrix2::new(1.0, 0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn cubic_normal_form_coefficient() {
        // third derivatives 6, 2, 2, 6 give (6 + 2 + 2 + 6) / 8 = 2
        let g = |x: &Vector2<f64>, _mu: f64| -> Result<Vector2<f64>, HopfError> {
            let r2 = x.norm_squared();
            Ok(Vector2::new(-x[1] - x[0] * r2, x[0] - x[1] * r2))
        };
        let ell = lyapunov_in_basis(&g, &Vector2::zeros(), 0.0, &Matrix2::identity(), 1.0).unwrap();
        assert!((ell + 2.0).abs() < 1e-6, "{ell}");
    }

    #[test]
    fn linear_family_has_zero_coefficient() {
        let ell = lyapunov_in_basis(&canonical, &Vector2::new(0.0, 0.0), 0.0, &Matrix2::identity(), 1.0).unwrap();
        assert!(ell.abs() < 1e-9);
    }

    #[test]
    fn quadratic_terms_enter_through_frequency() {
        // g1xx = g2xx = 2, so the quadratic part is -4 / (8 ω)
        let g = |x: &Vector2<f64>, _mu: f64| -> Result<Vector2<f64>, HopfError> {
            Ok(Vector2::new(-2.0 * x[1] + x[0] * x[0], 2.0 * x[0] + x[0] * x[0]))
        };
        let d = local_derivatives(&g, &Vector2::zeros(), 0.0, &Matrix2::identity()).unwrap();
        assert!((d.second[0][0] - 2.0).abs() < 1e-7 && (d.second[1][0] - 2.0).abs() < 1e-7);
        let ell = lyapunov_from_derivatives(&d, 2.0);
        assert!((ell + 0.25).abs() < 1e-7, "{ell}");
    }

    fn rotation(phi: f64) -> Matrix2<f64> {
        let (s, c) = phi.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    fn bautin_like(x: &Vector2<f64>, mu: f64) -> Result<Vector2<f64>, HopfError> {
        let (u, v) = (x[0] - 0.5, x[1] + 0.25);
        let r2 = u * u + v * v;
        Ok(Vector2::new(
            mu * u - 1.7 * v + 0.3 * u * u - 0.8 * u * v + 0.1 * v * v - 1.1 * u * r2 + 0.2 * v * v * v,
            1.7 * u + mu * v - 0.4 * u * u + 0.6 * v * v + 0.5 * u * u * v - 0.9 * v * r2,
        ))
    }

    proptest::proptest! {
        #[test]
        fn jordan_conjugates_to_canonical(
            omega in 0.1f64..100.0,
            p in proptest::array::uniform4(-2.0f64..2.0),
        ) {
            let s = Matrix2::new(p[0], p[1], p[2], p[3]);
            proptest::prop_assume!(s.determinant().abs() > 0.2);
            let canon = Matrix2::new(0.0, -omega, omega, 0.0);
            let j = s * canon * s.try_inverse().unwrap();
            let (m, w) = jordan_normalize(&j).unwrap();
            let back = m.try_inverse().unwrap() * j * m;
            proptest::prop_assert!((w - omega).abs() <= 1e-12 * omega * 1e2);
            proptest::prop_assert!((back - Matrix2::new(0.0, -w, w, 0.0)).amax() <= 1e-12 * omega, "{}", back);
        }

        #[test]
        fn lyapunov_is_rotation_invariant(phi in 0.0f64..std::f64::consts::TAU) {
            let x0 = Vector2::new(0.5, -0.25);
            let base = lyapunov_in_basis(&bautin_like, &x0, 0.0, &Matrix2::identity(), 1.7).unwrap();
            let rotated = lyapunov_in_basis(&bautin_like, &x0, 0.0, &rotation(phi), 1.7).unwrap();
            proptest::prop_assert!((rotated - base).abs() <= 1e-6 * base.abs(), "{} vs {}", rotated, base);
        }

        #[test]
        fn scaling_is_covariant(c in 0.1f64..10.0) {
            let scaled = move |x: &Vector2<f64>, mu: f64| bautin_like(x, mu).map(|v| v * c);
            let branch = trace_zero_branch(&bautin_like, (-0.3, 0.2), &Vector2::new(0.5, -0.25)).unwrap();
            let branch_c = trace_zero_branch(&scaled, (-0.3, 0.2), &Vector2::new(0.5, -0.25)).unwrap();
            let h = find_hopf(&branch, &bautin_like).unwrap();
            let hc = find_hopf(&branch_c, &scaled).unwrap();
            proptest::prop_assert!((hc.omega0 - c * h.omega0).abs() <= 1e-8 * c * h.omega0);
            proptest::prop_assert!((hc.ell_1l - c * h.ell_1l).abs() <= 1e-6 * c * h.ell_1l.abs());
            proptest::prop_assert!((hc.mu0 - h.mu0).abs() <= 1e-10);
            proptest::prop_assert_eq!(hc.ell_1l.signum(), h.ell_1l.signum());
        }
    }
}
