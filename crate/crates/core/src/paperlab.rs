//! A worked example: a family of 3D vector fields near the unit circle,
//!
//! ```text
//! x' = -y + ε P1 + ε² P2,   y' = x + ε² Q,   z' = ε R1 + ε² R2,
//! ```
//!
//! with parameters `a`, `b`, its reduction to a `2π`-periodic planar system in
//! `(r, z)` with `θ` as time, and the closed forms of its first two averaged
//! functions, used as oracles for the numerical pipeline.

use std::f64::consts::PI;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::expr::{Expression, ExprError};
use crate::ode::{FieldError, FieldSpec, OdeError};
use crate::torus::SectionStart;

/// Registry name of the example family.
pub const REGISTRY_NAME: &str = "candido-novaes-3d";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperParams {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
    pub eps: f64,
}

impl PaperParams {
    pub fn new(a: f64, b: f64, mu: f64, eps: f64) -> Self {
        PaperParams { a, b, mu, eps }
    }

    /// The bifurcation statements need `a² + b² ≠ 0`.
    pub fn is_nondegenerate(&self) -> bool {
        self.a * self.a + self.b * self.b != 0.0
    }
}

fn rho(x: f64, y: f64) -> Result<f64, FieldError> {
    let r2 = x * x + y * y;
    if r2 == 0.0 {
        return Err(FieldError::Singular(format!("rho at (x, y) = ({x}, {y})")));
    }
    Ok(1.0 / r2.sqrt())
}

/// The five component polynomials for fixed `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub a: f64,
    pub b: f64,
}

impl Components {
    pub fn p1(&self, x: f64, y: f64, z: f64, mu: f64) -> Result<f64, FieldError> {
        let a = self.a;
        let rho = rho(x, y)?;
        Ok(10.0 * x * (3.0 * mu + a * (9.0 + 4.0 * x * x + 3.0 * z * z))
            - 30.0 * x * rho * (z + mu + a * (1.0 + 4.0 * x * x + z * z)))
    }

    pub fn p2(&self, x: f64, y: f64, z: f64, _mu: f64) -> Result<f64, FieldError> {
        let b = self.b;
        let rho = rho(x, y)?;
        Ok(10.0 * b * x * (9.0 + 4.0 * x * x + 3.0 * z * z) - 30.0 * b * x * rho * (1.0 + 4.0 * x * x + z * z))
    }

    pub fn q(&self, x: f64, y: f64, z: f64, mu: f64) -> Result<f64, FieldError> {
        let a = self.a;
        let rho = rho(x, y)?;
        let (y2, z2) = (y * y, z * z);
        let y4 = y2 * y2;
        let outer = 15.0 * (mu * mu - 1.0)
            + 20.0 * a * (mu * (4.0 * y2 + 3.0 * z2 + 9.0) + 3.0 * z)
            + 3.0 * a * a * (24.0 * y4 + 40.0 * y2 * (z2 + 5.0) + 15.0 * (z2 * z2 + 6.0 * z2 + 5.0));
        let inner = 3.0 * mu * mu
            + 6.0 * mu * (2.0 * a * (4.0 * y2 + z2 + 1.0) + z)
            + a * (3.0 * a * (24.0 * y4 + 8.0 * y2 * (3.0 * z2 + 5.0) + 3.0 * (z2 + 1.0).powi(2))
                + 8.0 * y2 * z
                + 6.0 * z2 * z
                + 6.0 * z)
            - 3.0;
        Ok(-30.0 * PI * y * outer + 150.0 * PI * y * rho * inner)
    }

    pub fn r1(&self, x: f64, y: f64, z: f64, mu: f64) -> Result<f64, FieldError> {
        let a = self.a;
        let rho = rho(x, y)?;
        Ok(30.0 * x * x * (1.0 - 2.0 * a * z) * rho
            + 15.0 * (a * (2.0 * x * x * z + z * z * z + z) + mu * z - 1.0))
    }

    pub fn r2(&self, x: f64, y: f64, z: f64, mu: f64) -> Result<f64, FieldError> {
        let (a, b) = (self.a, self.b);
        let rho = rho(x, y)?;
        let (y2, z2) = (y * y, z * z);
        Ok(
            -225.0 * PI * a * a * z * (8.0 * y2 * y2 + 12.0 * y2 * (z2 + 3.0) + 3.0 * (z2 + 1.0).powi(2))
                - 450.0 * PI * a * (y2 * (4.0 * mu * z - 6.0) + (z2 + 1.0) * (2.0 * mu * z - 1.0))
                + 15.0 * b * (2.0 * x * x * z + z2 * z + z)
                - 225.0 * PI * ((mu * mu - 1.0) * z - 2.0 * mu)
                + 60.0
                    * rho
                    * (5.0
                        * PI
                        * y2
                        * (a * ((6.0 * a * z - 1.0) * (4.0 * y2 + 3.0 * z2) + 18.0 * a * z + 12.0 * mu * z - 9.0)
                            - 3.0 * mu)
                        - b * x * x * z),
        )
    }
}

/// The 3D field as a (non standard form) [`FieldSpec`] with nominal period `2π`.
pub fn field_3d(a: f64, b: f64) -> FieldSpec {
    let c = Components { a, b };
    FieldSpec::new(3, 2.0 * PI)
        .expect("valid dimension and period")
        .with_unperturbed(|_, s, _, out| {
            out[0] = -s[1];
            out[1] = s[0];
            out[2] = 0.0;
            Ok(())
        })
        .with_term(move |_, s, mu, out| {
            out[0] = c.p1(s[0], s[1], s[2], mu)?;
            out[1] = 0.0;
            out[2] = c.r1(s[0], s[1], s[2], mu)?;
            Ok(())
        })
        .with_term(move |_, s, mu, out| {
            out[0] = c.p2(s[0], s[1], s[2], mu)?;
            out[1] = c.q(s[0], s[1], s[2], mu)?;
            out[2] = c.r2(s[0], s[1], s[2], mu)?;
            Ok(())
        })
}

/// How the `O(ε³)` part of the reduced system is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Remainder chosen so the reduced field equals `(ṙ/θ̇, ż/θ̇)` exactly.
    #[default]
    Exact,
    /// Only the `ε` and `ε²` terms.
    Truncated,
}

fn check_radius(r: f64) -> Result<(), FieldError> {
    if r > 0.0 {
        Ok(())
    } else {
        Err(FieldError::Singular(format!("r = {r} <= 0")))
    }
}

fn reduced_f1(c: &Components, th: f64, s: &[f64], mu: f64, out: &mut [f64]) -> Result<(), FieldError> {
    let (r, z) = (s[0], s[1]);
    check_radius(r)?;
    let (sn, cs) = th.sin_cos();
    let (x, y) = (r * cs, r * sn);
    out[0] = cs * c.p1(x, y, z, mu)?;
    out[1] = c.r1(x, y, z, mu)?;
    Ok(())
}

fn reduced_f2(c: &Components, th: f64, s: &[f64], mu: f64, out: &mut [f64]) -> Result<(), FieldError> {
    let (r, z) = (s[0], s[1]);
    check_radius(r)?;
    let (sn, cs) = th.sin_cos();
    let (x, y) = (r * cs, r * sn);
    let p1 = c.p1(x, y, z, mu)?;
    let r1 = c.r1(x, y, z, mu)?;
    out[0] = cs * sn * p1 * p1 / r + cs * c.p2(x, y, z, mu)? + sn * c.q(x, y, z, mu)?;
    out[1] = sn * p1 * r1 / r + c.r2(x, y, z, mu)?;
    Ok(())
}

/// `(dr/dθ, dz/dθ)` of the 3D field, without expansion in `ε`.
pub fn reduced_exact(c: &Components, th: f64, s: &[f64], mu: f64, eps: f64, out: &mut [f64]) -> Result<(), FieldError> {
    let (r, z) = (s[0], s[1]);
    check_radius(r)?;
    let (sn, cs) = th.sin_cos();
    let (x, y) = (r * cs, r * sn);
    let e2 = eps * eps;
    let xd = -y + eps * c.p1(x, y, z, mu)? + e2 * c.p2(x, y, z, mu)?;
    let yd = x + e2 * c.q(x, y, z, mu)?;
    let zd = eps * c.r1(x, y, z, mu)? + e2 * c.r2(x, y, z, mu)?;
    let thd = (x * yd - y * xd) / (r * r);
    if !(thd > 0.0) {
        return Err(FieldError::Singular(format!("angular speed {thd} <= 0 at r = {r}, z = {z}")));
    }
    let rd = (x * xd + y * yd) / r;
    out[0] = rd / thd;
    out[1] = zd / thd;
    Ok(())
}

/// The `2π`-periodic planar system in `(r, z)` with `θ` as time.
pub fn reduce_cylindrical(a: f64, b: f64, reduction: Reduction) -> FieldSpec {
    let c = Components { a, b };
    let field = FieldSpec::new(2, 2.0 * PI)
        .expect("valid dimension and period")
        .with_term(move |th, s, mu, out| reduced_f1(&c, th, s, mu, out))
        .with_term(move |th, s, mu, out| reduced_f2(&c, th, s, mu, out));
    match reduction {
        Reduction::Truncated => field,
        Reduction::Exact => field.with_remainder(move |th, s, mu, eps, out| {
            if eps == 0.0 {
                out.fill(0.0);
                return Ok(());
            }
            let mut f1 = [0.0; 2];
            let mut f2 = [0.0; 2];
            reduced_exact(&c, th, s, mu, eps, out)?;
            reduced_f1(&c, th, s, mu, &mut f1)?;
            reduced_f2(&c, th, s, mu, &mut f2)?;
            let e3 = eps * eps * eps;
            for i in 0..2 {
                out[i] = (out[i] - eps * f1[i] - eps * eps * f2[i]) / e3;
            }
            Ok(())
        }),
    }
}

/// Closed form of the first averaged function of the reduced system.
pub fn g1_closed(r: f64, z: f64, mu: f64, a: f64) -> [f64; 2] {
    let u = r - 1.0;
    let s = u * u + z * z;
    [30.0 * PI * (u * mu - z + a * u * s), 30.0 * PI * (u + mu * z + a * z * s)]
}

/// Closed form of the second averaged function of the reduced system.
pub fn g2_closed(r: f64, z: f64, b: f64) -> [f64; 2] {
    let u = r - 1.0;
    let s = u * u + z * z;
    [30.0 * PI * b * u * s, 30.0 * PI * b * z * s]
}

/// Cylindrical coordinates `(r, θ, z)` of a 3D point, `θ ∈ [0, 2π)`.
pub fn to_cylindrical(p: [f64; 3]) -> (f64, f64, f64) {
    let r = p[0].hypot(p[1]);
    let th = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
    (r, th, p[2])
}

/// Start of the reduced system for a 3D point: `(r, z)` at time `θ`.
pub fn section_start(p: [f64; 3]) -> SectionStart {
    let (r, th, z) = to_cylindrical(p);
    SectionStart {
        state: Vector2::new(r, z),
        phase: th,
    }
}

/// Textual transcription of the reduced terms `F1`, `F2` in the variables
/// `t = θ`, `x = r`, `y = z`, for fixed numeric `a` and `b`.
pub fn reduced_expression_sources(a: f64, b: f64) -> [[String; 2]; 2] {
    let a = format!("({a:?})");
    let b = format!("({b:?})");
    let xx = "(x*cos(t))";
    let yy = "(x*sin(t))";
    let zz = "y";
    let rho = format!("(1/sqrt({xx}^2+{yy}^2))");
    let p1 = format!(
        "(10*{xx}*(3*mu+{a}*(9+4*{xx}^2+3*{zz}^2))-30*{xx}*{rho}*({zz}+mu+{a}*(1+4*{xx}^2+{zz}^2)))"
    );
    let p2 = format!("(10*{b}*{xx}*(9+4*{xx}^2+3*{zz}^2)-30*{b}*{xx}*{rho}*(1+4*{xx}^2+{zz}^2))");
    let q = format!(
        "(-30*pi*{yy}*(15*(mu^2-1)+20*{a}*(mu*(4*{yy}^2+3*{zz}^2+9)+3*{zz})\
         +3*{a}^2*(24*{yy}^4+40*{yy}^2*({zz}^2+5)+15*({zz}^4+6*{zz}^2+5)))\
         +150*pi*{yy}*{rho}*(3*mu^2+6*mu*(2*{a}*(4*{yy}^2+{zz}^2+1)+{zz})\
         +{a}*(3*{a}*(24*{yy}^4+8*{yy}^2*(3*{zz}^2+5)+3*({zz}^2+1)^2)+8*{yy}^2*{zz}+6*{zz}^3+6*{zz})-3))"
    );
    let r1 = format!("(30*{xx}^2*(1-2*{a}*{zz})*{rho}+15*({a}*(2*{xx}^2*{zz}+{zz}^3+{zz})+mu*{zz}-1))");
    let r2 = format!(
        "(-225*pi*{a}^2*{zz}*(8*{yy}^4+12*{yy}^2*({zz}^2+3)+3*({zz}^2+1)^2)\
         -450*pi*{a}*({yy}^2*(4*mu*{zz}-6)+({zz}^2+1)*(2*mu*{zz}-1))+15*{b}*(2*{xx}^2*{zz}+{zz}^3+{zz})\
         -225*pi*((mu^2-1)*{zz}-2*mu)+60*{rho}*(5*pi*{yy}^2*({a}*((6*{a}*{zz}-1)*(4*{yy}^2+3*{zz}^2)\
         +18*{a}*{zz}+12*mu*{zz}-9)-3*mu)-{b}*{xx}^2*{zz}))"
    );
    [
        [format!("cos(t)*{p1}"), r1.clone()],
        [
            format!("(1/x)*cos(t)*sin(t)*{p1}^2+cos(t)*{p2}+sin(t)*{q}"),
            format!("(1/x)*sin(t)*{p1}*{r1}+{r2}"),
        ],
    ]
}

/// The truncated reduced field built from [`reduced_expression_sources`].
pub fn reduced_from_expressions(a: f64, b: f64) -> Result<FieldSpec, PaperlabError> {
    let terms = reduced_expression_sources(a, b)
        .into_iter()
        .map(|[fx, fy]| Ok([Expression::parse(&fx)?, Expression::parse(&fy)?]))
        .collect::<Result<Vec<_>, ExprError>>()?;
    Ok(crate::expr::planar_field(2.0 * PI, terms)?)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PaperlabError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unperturbed_3d_field_is_rotation() {
        let f = field_3d(1.3, -0.4);
        let mut out = [0.0; 3];
        f.rhs(0.0, &[0.6, 0.8, 0.0], 0.2, 0.0, &mut out).unwrap();
        assert_eq!(out, [-0.8, 0.6, 0.0]);
    }

    #[test]
    fn rho_singularity_is_reported() {
        let f = field_3d(1.0, 0.0);
        let mut out = [0.0; 3];
        assert!(matches!(
            f.rhs(0.0, &[0.0, 0.0, 0.3], 0.0, 0.1, &mut out),
            Err(FieldError::Singular(_))
        ));
    }

    #[test]
    fn reduced_field_vanishes_at_zero_eps() {
        let f = reduce_cylindrical(1.0, 1.0, Reduction::Exact);
        let mut out = [1.0; 2];
        f.rhs(0.4, &[1.1, 0.2], 0.0, 0.0, &mut out).unwrap();
        assert_eq!(out, [0.0, 0.0]);
        assert!(matches!(
            f.rhs(0.4, &[-0.1, 0.2], 0.0, 0.1, &mut out),
            Err(FieldError::Singular(_))
        ));
    }

    #[test]
    fn first_term_at_reference_point() {
        // θ = 0: x = r, y = 0, ρ = 1/r
        let (r, z, a) = (1.1, 0.2, 1.0);
        let p1 = 10.0 * r * (a * (9.0 + 4.0 * r * r + 3.0 * z * z)) - 30.0 * (z + a * (1.0 + 4.0 * r * r + z * z));
        let r1 = 30.0 * r * (1.0 - 2.0 * a * z) + 15.0 * (a * (2.0 * r * r * z + z * z * z + z) - 1.0);
        let f = reduce_cylindrical(a, 0.0, Reduction::Truncated);
        let mut out = [0.0; 2];
        f.eval_term(1, 0.0, &[r, z], 0.0, &mut out).unwrap();
        assert!((out[0] - p1).abs() < 1e-12 * p1.abs());
        assert!((out[1] - r1).abs() < 1e-12 * r1.abs());
    }

    #[test]
    fn exact_remainder_reproduces_quotient() {
        let c = Components { a: -1.0, b: 2.0 };
        let f = reduce_cylindrical(c.a, c.b, Reduction::Exact);
        let s = [0.97, 0.05];
        for eps in [1e-2, 1e-3] {
            let mut via_terms = [0.0; 2];
            let mut direct = [0.0; 2];
            f.rhs(1.3, &s, 0.01, eps, &mut via_terms).unwrap();
            reduced_exact(&c, 1.3, &s, 0.01, eps, &mut direct).unwrap();
            for i in 0..2 {
                assert!((via_terms[i] - direct[i]).abs() < 1e-14, "{i}: {via_terms:?} {direct:?}");
            }
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(g1_closed(1.0, 0.0, 0.3, -2.0), [0.0, 0.0]);
        let g1 = g1_closed(1.1, 0.2, 0.0, 1.0);
        assert!((g1[0] - 30.0 * PI * -0.195).abs() < 1e-12);
        assert!((g1[1] - 30.0 * PI * 0.11).abs() < 1e-12);
        let g2 = g2_closed(1.1, 0.2, 1.0);
        assert!((g2[0] - 30.0 * PI * 0.005).abs() < 1e-13);
        assert!((g2[1] - 30.0 * PI * 0.01).abs() < 1e-13);
    }

    #[test]
    fn expression_transcription_matches_native() {
        for (a, b) in [(1.0, 0.0), (-1.0, 0.5), (0.3, -80.0)] {
            let native = reduce_cylindrical(a, b, Reduction::Truncated);
            let text = reduced_from_expressions(a, b).unwrap();
            for &(th, r, z, mu) in &[(0.0, 1.1, 0.2, 0.0), (1.7, 0.9, -0.15, 0.05), (4.0, 1.05, 0.1, -0.02)] {
                for i in 1..=2 {
                    let mut u = [0.0; 2];
                    let mut v = [0.0; 2];
                    native.eval_term(i, th, &[r, z], mu, &mut u).unwrap();
                    text.eval_term(i, th, &[r, z], mu, &mut v).unwrap();
                    for c in 0..2 {
                        let scale = 1.0 + u[c].abs();
                        assert!((u[c] - v[c]).abs() <= 1e-12 * scale, "F{i}[{c}] a={a} b={b}: {} vs {}", u[c], v[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn cylindrical_angle_range() {
        let (r, th, z) = to_cylindrical([0.98, 0.21, 0.0]);
        assert!((r - 0.98f64.hypot(0.21)).abs() < 1e-15 && th > 0.0 && th < 0.3 && z == 0.0);
        let (_, th, _) = to_cylindrical([0.5, -0.1, 0.0]);
        assert!(th > PI);
    }
}
