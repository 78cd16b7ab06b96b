//! Certification of the bifurcating invariant torus.
//!
//! The torus shows up on the section `t ≡ 0 mod T` as an invariant closed curve
//! of the period map around the fixed point `ξ(μ, ε)`. A certificate combines
//! the prediction from the sign of `ℓ_{1,j*}` with a direct detection: sample
//! the section (in reversed time for repelling objects), fit a polar curve
//! `r(ψ)` and measure how far the map moves the fitted curve off itself.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::Serialize;
use thiserror::Error;

use crate::hopf::HopfPoint;
use crate::nsmap::{self, CoefficientSeries, NsError, NsOptions, PlanarMap, PoincareMap};
use crate::ode::{self, OdeError, Scheme};

#[derive(Debug, Clone, Error)]
pub enum TorusError {
    #[error(transparent)]
    Ns(#[from] NsError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("orbit left the neighborhood box after {returns} returns: |x - center| = {distance:e} > {radius:e}")]
    Escape { returns: usize, distance: f64, radius: f64 },
    #[error("curve detection needs at least {needed} section points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("all fitted coefficients are below their residual floor")]
    Degenerate,
    #[error("invalid option: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    pub fn opposite(self) -> Self {
        match self {
            Stability::Stable => Stability::Unstable,
            Stability::Unstable => Stability::Stable,
        }
    }
}

/// Time direction of the sampled returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// A state at time `phase ∈ [0, T]`; transported to the section before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionStart {
    pub state: Vector2<f64>,
    pub phase: f64,
}

impl SectionStart {
    pub fn on_section(state: Vector2<f64>) -> Self {
        SectionStart { state, phase: 0.0 }
    }
}

/// Ball that sampled orbits must not leave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighborhood {
    pub center: Vector2<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SectionOptions {
    pub n_returns: usize,
    /// Discarded leading returns; `None` is half of `n_returns`.
    pub transient_skip: Option<usize>,
    pub direction: Direction,
    pub neighborhood: Option<Neighborhood>,
}

impl Default for SectionOptions {
    fn default() -> Self {
        SectionOptions {
            n_returns: 4000,
            transient_skip: None,
            direction: Direction::Forward,
            neighborhood: None,
        }
    }
}

impl SectionOptions {
    pub fn skip(&self) -> usize {
        self.transient_skip.unwrap_or(self.n_returns / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CloudSource {
    pub mu: f64,
    pub eps: f64,
    pub start: [f64; 2],
    pub phase: f64,
}

/// Returns of one orbit to the section, transient removed.
#[derive(Debug, Clone)]
pub struct SectionCloud {
    pub points: Vec<Vector2<f64>>,
    pub transient_skip: usize,
    pub direction: Direction,
    pub source: CloudSource,
}

/// Inverse period map: the flow from `t = T` back to `t = 0`.
#[derive(Debug, Clone, Copy)]
pub struct InverseMap<'a>(pub &'a PoincareMap);

impl PlanarMap for InverseMap<'_> {
    fn apply(&self, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Vector2<f64>, NsError> {
        let field = self.0.field();
        let y = ode::integrate_fixed(field, x.as_slice(), field.period(), 0.0, mu, eps, self.0.steps(), Scheme::Dopri5)?;
        Ok(Vector2::new(y[0], y[1]))
    }
}

fn advance(map: &PoincareMap, direction: Direction, x: &Vector2<f64>, mu: f64, eps: f64) -> Result<Vector2<f64>, NsError> {
    match direction {
        Direction::Forward => map.apply(x, mu, eps),
        Direction::Backward => InverseMap(map).apply(x, mu, eps),
    }
}

/// Integrates `n_returns` periods and records the state at each period boundary.
pub fn sample_section(
    map: &PoincareMap,
    mu: f64,
    eps: f64,
    start: &SectionStart,
    opts: &SectionOptions,
) -> Result<SectionCloud, TorusError> {
    let period = map.field().period();
    if !(0.0..=period).contains(&start.phase) {
        return Err(TorusError::Options(format!("phase {} outside [0, {period}]", start.phase)));
    }
    let skip = opts.skip();
    if skip >= opts.n_returns {
        return Err(TorusError::Options(format!("transient skip {skip} >= {} returns", opts.n_returns)));
    }
    // carry the start to the next section crossing in the sampling direction
    let target = match opts.direction {
        Direction::Forward => period,
        Direction::Backward => 0.0,
    };
    let span = (target - start.phase).abs();
    let mut x = if span == 0.0 {
        start.state
    } else {
        let steps = ((map.steps() as f64 * span / period).ceil() as usize).max(1);
        let y = ode::integrate_fixed(map.field(), start.state.as_slice(), start.phase, target, mu, eps, steps, Scheme::Dopri5)?;
        Vector2::new(y[0], y[1])
    };
    let mut points = Vec::with_capacity(opts.n_returns - skip);
    for n in 1..=opts.n_returns {
        if n > 1 {
            x = advance(map, opts.direction, &x, mu, eps)?;
        }
        if let Some(nb) = opts.neighborhood {
            let distance = (x - nb.center).norm();
            if !(distance <= nb.radius) {
                return Err(TorusError::Escape { returns: n, distance, radius: nb.radius });
            }
        }
        if n > skip {
            points.push(x);
        }
    }
    Ok(SectionCloud {
        points,
        transient_skip: skip,
        direction: opts.direction,
        source: CloudSource {
            mu,
            eps,
            start: [start.state[0], start.state[1]],
            phase: start.phase,
        },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CurveOptions {
    pub harmonics: usize,
    /// Required angular coverage as a fraction of `2π`.
    pub coverage: f64,
    /// Accepted invariance residual relative to the curve diameter.
    pub threshold: f64,
    pub invariance_samples: usize,
    /// Cloud diameters below this count as a fixed point.
    pub collapse_diameter: f64,
    /// Spiral when the last quarter's largest radius falls below this fraction of the first quarter's.
    pub spiral_ratio: f64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            harmonics: 16,
            coverage: 0.9,
            threshold: 0.05,
            invariance_samples: 64,
            collapse_diameter: 1e-8,
            spiral_ratio: 0.5,
        }
    }
}

/// Polar graph `r(ψ) = a₀ + Σ aₖ cos kψ + bₖ sin kψ` around `center`.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantCurve {
    pub center: [f64; 2],
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    /// `(ψ, r(ψ))` at the invariance samples.
    pub samples: Vec<(f64, f64)>,
    pub diameter: f64,
    pub residual: f64,
    /// RMS of the least-squares fit to the cloud radii.
    pub fit_rms: f64,
}

impl InvariantCurve {
    pub fn radius(&self, psi: f64) -> f64 {
        let mut r = self.cos[0];
        for k in 1..self.cos.len() {
            let (s, c) = (k as f64 * psi).sin_cos();
            r += self.cos[k] * c + self.sin[k] * s;
        }
        r
    }

    pub fn point(&self, psi: f64) -> Vector2<f64> {
        let r = self.radius(psi);
        Vector2::new(self.center[0] + r * psi.cos(), self.center[1] + r * psi.sin())
    }

    pub fn polyline(&self, n: usize) -> Vec<Vector2<f64>> {
        (0..n).map(|i| self.point(TAU * i as f64 / n as f64)).collect()
    }

    pub fn radius_derivative(&self, psi: f64) -> f64 {
        (1..self.cos.len())
            .map(|k| {
                let (s, c) = (k as f64 * psi).sin_cos();
                k as f64 * (self.sin[k] * c - self.cos[k] * s)
            })
            .sum()
    }

    /// Distance from `q` to the curve: scan `n` angles, then solve
    /// `(P(ψ) − q)·P′(ψ) = 0` by bisection next to the best one.
    pub fn distance(&self, q: &Vector2<f64>, n: usize) -> f64 {
        let d = |psi: f64| (self.point(psi) - q).norm();
        let slope = |psi: f64| {
            let (s, c) = psi.sin_cos();
            let (r, dr) = (self.radius(psi), self.radius_derivative(psi));
            let tangent = Vector2::new(dr * c - r * s, dr * s + r * c);
            (self.point(psi) - q).dot(&tangent)
        };
        let step = TAU / n as f64;
        let best = (0..n)
            .map(|i| i as f64 * step)
            .min_by(|a, b| d(*a).total_cmp(&d(*b)))
            .unwrap_or(0.0);
        let mut dist = d(best);
        for (mut lo, mut hi) in [(best - step, best), (best, best + step)] {
            let (flo, fhi) = (slope(lo), slope(hi));
            if !(flo <= 0.0 && fhi >= 0.0) {
                continue;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if slope(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            dist = dist.min(d(lo)).min(d(hi));
        }
        dist
    }

    /// Invariance residual or relative fit error, whichever is larger.
    pub fn tolerance(&self) -> f64 {
        self.residual.max(self.fit_rms / self.diameter)
    }

    /// Largest gap to `other` over the samples, relative to this diameter.
    pub fn separation(&self, other: &InvariantCurve) -> f64 {
        self.samples
            .iter()
            .map(|&(psi, _)| other.distance(&self.point(psi), 256))
            .chain(other.samples.iter().map(|&(psi, _)| self.distance(&other.point(psi), 256)))
            .fold(0.0, f64::max)
            / self.diameter
    }
}

/// Outcome of curve detection.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detection {
    Curve(InvariantCurve),
    /// Cloud shrank onto `ξ`.
    Collapsed { diameter: f64 },
    /// Radii decay along the orbit: spiral convergence to `ξ`.
    Spiral { ratio: f64 },
    /// Points do not wind around `ξ`.
    NoWinding { coverage: f64 },
    /// A curve was fitted but the map moves it too far.
    NotInvariant { residual: f64 },
}

impl Detection {
    pub fn curve(&self) -> Option<&InvariantCurve> {
        match self {
            Detection::Curve(c) => Some(c),
            _ => None,
        }
    }

    pub fn converges_to_fixed_point(&self) -> bool {
        matches!(self, Detection::Collapsed { .. } | Detection::Spiral { .. })
    }
}

fn angular_coverage(angles: &mut [f64]) -> f64 {
    angles.sort_by(f64::total_cmp);
    let wrap = angles[0] + TAU - angles[angles.len() - 1];
    let gap = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    TAU - gap
}

fn max_quarter_radius(radii: &[f64]) -> (f64, f64) {
    let q = (radii.len() / 4).max(1);
    let first = radii[..q].iter().copied().fold(0.0, f64::max);
    let last = radii[radii.len() - q..].iter().copied().fold(0.0, f64::max);
    (first, last)
}

/// Fits `r(ψ)` to the cloud around `xi` and measures its invariance under the
/// map in the cloud's direction.
pub fn detect_invariant_curve(
    map: &PoincareMap,
    cloud: &SectionCloud,
    xi: &Vector2<f64>,
    opts: &CurveOptions,
) -> Result<Detection, TorusError> {
    let n = cloud.points.len();
    let unknowns = 2 * opts.harmonics + 1;
    let needed = unknowns.max(100);
    if n < needed {
        return Err(TorusError::TooFewPoints { needed, found: n });
    }
    let radii: Vec<f64> = cloud.points.iter().map(|p| (p - xi).norm()).collect();
    let diameter = 2.0 * radii.iter().copied().fold(0.0, f64::max);
    if diameter <= opts.collapse_diameter {
        return Ok(Detection::Collapsed { diameter });
    }
    let (first, last) = max_quarter_radius(&radii);
    if last < opts.spiral_ratio * first {
        return Ok(Detection::Spiral { ratio: last / first });
    }
    let mut angles: Vec<f64> = cloud.points.iter().map(|p| (p[1] - xi[1]).atan2(p[0] - xi[0])).collect();
    let psi = angles.clone();
    let coverage = angular_coverage(&mut angles) / TAU;
    if coverage < opts.coverage {
        return Ok(Detection::NoWinding { coverage });
    }

    let design = DMatrix::from_fn(n, unknowns, |i, j| match j {
        0 => 1.0,
        j if j % 2 == 1 => (((j + 1) / 2) as f64 * psi[i]).cos(),
        j => ((j / 2) as f64 * psi[i]).sin(),
    });
    let rhs = DVector::from_column_slice(&radii);
    let qr = design.clone().qr();
    let coef = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &rhs))
        .ok_or_else(|| TorusError::Options("harmonic fit is rank deficient; reduce the harmonic count".into()))?;
    let fit_rms = ((&design * &coef - &rhs).norm_squared() / n as f64).sqrt();
    let mut cos = vec![coef[0]];
    let mut sin = vec![0.0];
    for k in 1..=opts.harmonics {
        cos.push(coef[2 * k - 1]);
        sin.push(coef[2 * k]);
    }
    let mut curve = InvariantCurve {
        center: [xi[0], xi[1]],
        cos,
        sin,
        samples: Vec::new(),
        diameter: 0.0,
        residual: f64::NAN,
        fit_rms,
    };
    let m = opts.invariance_samples.max(8);
    curve.samples = (0..m).map(|i| TAU * i as f64 / m as f64).map(|p| (p, curve.radius(p))).collect();
    if curve.samples.iter().any(|&(_, r)| !(r > 0.0)) {
        return Ok(Detection::NotInvariant { residual: f64::INFINITY });
    }
    let outline = curve.polyline(256);
    curve.diameter = outline
        .iter()
        .flat_map(|a| outline.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);

    let (mu, eps) = (cloud.source.mu, cloud.source.eps);
    let mut worst: f64 = 0.0;
    for &(p, _) in &curve.samples {
        let image = advance(map, cloud.direction, &curve.point(p), mu, eps)?;
        worst = worst.max(curve.distance(&image, 512));
    }
    curve.residual = worst / curve.diameter;
    if curve.residual > opts.threshold {
        return Ok(Detection::NotInvariant { residual: curve.residual });
    }
    Ok(Detection::Curve(curve))
}

/// What the coefficient signs predict at `μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub j_star: usize,
    pub ell: f64,
    /// `sign(ℓ_{1,j*}(μ − μ_crit))`.
    pub side: i8,
    pub exists: bool,
    pub torus_stability: Option<Stability>,
    pub cycle_stability: Stability,
}

impl Prediction {
    /// Direction in which the object of interest attracts: forward for `ℓ_{1,j*} < 0`.
    pub fn direction(&self) -> Direction {
        if self.ell < 0.0 {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }
}

pub fn classify(series: &CoefficientSeries, mu: f64, mu_crit: f64) -> Result<Prediction, TorusError> {
    let j_star = series.j_star().ok_or(TorusError::Degenerate)?;
    let ell = series.coefficient(j_star).ok_or(TorusError::Degenerate)?;
    let product = ell * (mu - mu_crit);
    let side = if product > 0.0 {
        1
    } else if product < 0.0 {
        -1
    } else {
        0
    };
    let exists = side < 0;
    let by_sign = if ell < 0.0 { Stability::Stable } else { Stability::Unstable };
    Ok(Prediction {
        j_star,
        ell,
        side,
        exists,
        torus_stability: exists.then_some(by_sign),
        cycle_stability: if exists { by_sign.opposite() } else { by_sign },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub ns: NsOptions,
    pub section: SectionOptions,
    pub curve: CurveOptions,
    /// First orbit start; `None` places it at the normal-form amplitude estimate.
    pub start: Option<SectionStart>,
    /// Neighborhood radius is `box_factor·√|μ − μ(ε)|`.
    pub box_factor: f64,
    /// Orbits run for at least `relaxations / ||λ| − 1|` returns, the
    /// transient time scale near the fixed point.
    pub relaxations: f64,
    /// Upper bound on the number of returns.
    pub max_returns: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            ns: NsOptions::default(),
            section: SectionOptions::default(),
            curve: CurveOptions::default(),
            start: None,
            box_factor: 10.0,
            relaxations: 16.0,
            max_returns: 200_000,
        }
    }
}

/// Weak uniqueness: a second orbit from another radius lands on the same curve.
#[derive(Debug, Clone, Serialize)]
pub struct Uniqueness {
    pub second_start: [f64; 2],
    pub detection: Detection,
    /// Separation of the two curves relative to the diameter.
    pub separation: f64,
    pub unique: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TorusCertificate {
    pub exists: bool,
    pub side: i8,
    pub j_star: usize,
    pub curve: Option<InvariantCurve>,
    pub invariance_residual: f64,
    pub torus_stability: Option<Stability>,
    /// Measured from `|λ|` at `ξ(μ, ε)`.
    pub cycle_stability: Stability,
    pub prediction: Prediction,
    pub mu: f64,
    pub eps: f64,
    pub mu_crit: f64,
    pub xi: [f64; 2],
    pub modulus: f64,
    pub direction: Direction,
    pub detection: Detection,
    pub uniqueness: Option<Uniqueness>,
    /// Prediction and detection agree.
    pub agreement: bool,
    pub diagnostics: Vec<String>,
}

fn series_value(series: &CoefficientSeries, eps: f64) -> f64 {
    series
        .ell
        .iter()
        .enumerate()
        .map(|(i, c)| c * eps.powi((series.l + i) as i32))
        .sum()
}

/// Classifies at `μ`, then samples the section and checks the prediction.
pub fn certify(
    map: &PoincareMap,
    hopf: &HopfPoint,
    series: &CoefficientSeries,
    mu: f64,
    eps: f64,
    opts: &CertifyOptions,
) -> Result<TorusCertificate, TorusError> {
    let crit = nsmap::critical_point(map, hopf, eps, &opts.ns)?;
    let prediction = classify(series, mu, crit.mu)?;
    let xi = nsmap::fixed_point(map, mu, eps, &crit.xi)?;
    let modulus = map.jacobian(&xi, mu, eps)?.determinant().abs().sqrt();
    let cycle_stability = if modulus < 1.0 { Stability::Stable } else { Stability::Unstable };
    let direction = prediction.direction();
    let radius = opts.box_factor * (mu - crit.mu).abs().sqrt();
    let relax = (opts.relaxations / (modulus - 1.0).abs()).ceil();
    let n_returns = if relax.is_finite() {
        opts.section.n_returns.max((relax as usize).min(opts.max_returns))
    } else {
        opts.section.n_returns.max(opts.max_returns)
    };
    let section = SectionOptions {
        n_returns,
        transient_skip: opts.section.transient_skip.map(|s| s * n_returns / opts.section.n_returns.max(1)),
        direction,
        neighborhood: Some(Neighborhood { center: xi, radius }),
        ..opts.section
    };
    // |λ|(1 + ℓ₁ρ²) = 1 on the curve of the truncated normal form
    let amplitude = ((modulus - 1.0) / series_value(series, eps)).abs().sqrt().min(0.5 * radius);
    let start = opts.start.unwrap_or_else(|| SectionStart::on_section(xi + Vector2::new(amplitude, 0.0)));
    let mut diagnostics = Vec::new();

    let cloud = sample_section(map, mu, eps, &start, &section)?;
    let detection = detect_invariant_curve(map, &cloud, &xi, &opts.curve)?;

    let uniqueness = match detection.curve() {
        Some(curve) => {
            let first = cloud.points[0] - xi;
            let dir = if first.norm() > 0.0 { first.normalize() } else { Vector2::new(1.0, 0.0) };
            let psi = dir[1].atan2(dir[0]);
            let r_curve = curve.radius(psi);
            let r0 = (start.state - xi).norm();
            let r2 = if r0 > 0.75 * r_curve { 0.5 * r_curve } else { 1.25 * r_curve };
            let second = xi + dir * r2;
            let cloud2 = sample_section(map, mu, eps, &SectionStart::on_section(second), &section)?;
            let detection2 = detect_invariant_curve(map, &cloud2, &xi, &opts.curve)?;
            let (separation, unique) = match detection2.curve() {
                Some(c2) => {
                    let s = curve.separation(c2);
                    (s, s <= 2.0 * curve.tolerance().max(c2.tolerance()))
                }
                None => (f64::INFINITY, false),
            };
            if !unique {
                diagnostics.push(format!("second orbit from radius {r2:.3e} separated by {separation:.3e}"));
            }
            Some(Uniqueness {
                second_start: [second[0], second[1]],
                detection: detection2,
                separation,
                unique,
            })
        }
        None => None,
    };

    let detected = detection.curve().is_some() && uniqueness.as_ref().is_some_and(|u| u.unique);
    let torus_stability = detected.then_some(match direction {
        Direction::Forward => Stability::Stable,
        Direction::Backward => Stability::Unstable,
    });
    let agreement = if prediction.exists {
        detected && torus_stability == prediction.torus_stability && cycle_stability == prediction.cycle_stability
    } else {
        detection.converges_to_fixed_point() && cycle_stability == prediction.cycle_stability
    };
    if !agreement {
        diagnostics.push(format!(
            "prediction (exists = {}, cycle {:?}) disagrees with detection ({}, cycle {:?})",
            prediction.exists,
            prediction.cycle_stability,
            detection_name(&detection),
            cycle_stability
        ));
    }
    let exists = prediction.exists && detected && agreement;
    Ok(TorusCertificate {
        exists,
        side: prediction.side,
        j_star: prediction.j_star,
        invariance_residual: detection.curve().map_or(f64::NAN, |c| c.residual),
        curve: detection.curve().cloned(),
        torus_stability: if exists { torus_stability } else { None },
        cycle_stability,
        prediction,
        mu,
        eps,
        mu_crit: crit.mu,
        xi: [xi[0], xi[1]],
        modulus,
        direction,
        detection,
        uniqueness,
        agreement,
        diagnostics,
    })
}

fn detection_name(d: &Detection) -> &'static str {
    match d {
        Detection::Curve(_) => "curve",
        Detection::Collapsed { .. } => "collapsed",
        Detection::Spiral { .. } => "spiral",
        Detection::NoWinding { .. } => "no winding",
        Detection::NotInvariant { .. } => "not invariant",
    }
}

/// `μ` values `μ_crit + δ(i − 3 + ½)`, `i = 0..7`: three below, four above.
pub fn sweep_grid(mu_crit: f64, delta: f64) -> Vec<f64> {
    (0..7).map(|i| mu_crit + delta * (i as f64 - 2.5)).collect()
}

/// Number of sign changes of `exists` along a sweep.
pub fn flips(exists: &[bool]) -> usize {
    exists.windows(2).filter(|w| w[0] != w[1]).count()
}
