//! Property checks shared by the per-module suites and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::TAU;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use torusbif::averaging::{bell, y_sequence};
use torusbif::nsmap::{critical_point, inner, linear_fit, normal_form_at, NsOptions, PoincareMap};
use torusbif::ode::{integrate, FieldSpec};
use torusbif::paperlab::{reduce_cylindrical, Reduction};
use torusbif::pipeline::{analyze, PipelineOptions};

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

/// All set partitions of `{0, …, n-1}` as block-size lists.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    // restricted growth strings: a[i] ≤ 1 + max(a[..i])
    fn rec(i: usize, max: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == a.len() {
            let mut sizes = vec![0usize; max + 1];
            a.iter().for_each(|&b| sizes[b] += 1);
            out.push(sizes);
            return;
        }
        for b in 0..=max + 1 {
            a[i] = b;
            rec(i + 1, max.max(b), a, out);
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(1, 0, &mut vec![0usize; n], &mut out);
    }
    out
}

/// `B_{p,q}(x)` as the sum over set partitions of `{1..p}` into `q` blocks of
/// `Π x_{|block|}`.
pub fn bell_brute(p: usize, q: usize, xs: &[f64]) -> f64 {
    set_partitions(p)
        .into_iter()
        .filter(|sizes| sizes.len() == q)
        .map(|sizes| sizes.iter().map(|&s| xs[s - 1]).product::<f64>())
        .sum()
}

/// Exact agreement for `p ≤ 6` at 20 quarter-integer inputs, where every
/// monomial and partial sum is representable.
pub fn bell_equivalence() -> Result<String, String> {
    run(20, prop::collection::vec(-16i32..=16, 6), |raw| {
        let xs: Vec<f64> = raw.iter().map(|&v| v as f64 / 4.0).collect();
        for p in 1..=6 {
            for q in 1..=p {
                let args = &xs[..p - q + 1];
                prop_assert_eq!(bell(p, q, args).unwrap(), bell_brute(p, q, args), "p={} q={}", p, q);
            }
        }
        Ok(())
    })?;
    Ok("20 inputs, p ≤ 6, exact".into())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Log–log slope of `‖φ(T) − x − εy₁ − ε²y₂/2‖` on the reduced example.
pub fn flow_expansion_slope() -> Result<f64, String> {
    let x = [1.1, 0.2];
    let field = reduce_cylindrical(-1.0, 0.0, Reduction::Exact);
    let t = field.period();
    let y = y_sequence(&field, t, &x, 0.0, 2).map_err(|e| e.to_string())?;
    let eps: Vec<f64> = (0..7).map(|i| 1e-4 * 10f64.powf(i as f64 / 3.0)).collect();
    let mut errs = Vec::new();
    for &e in &eps {
        let phi = integrate(&field, &x, 0.0, t, 0.0, e, 1e-13).map_err(|e| e.to_string())?.state;
        let approx: Vec<f64> = (0..2).map(|i| x[i] + e * y[0][i] + 0.5 * e * e * y[1][i]).collect();
        errs.push(max_diff(&phi, &approx));
    }
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    Ok(linear_fit(&lx, &ly).0)
}

/// Planar family with a Hopf point at `(1, 0)`, `μ = 0`, frequency `omega`.
#[derive(Debug, Clone, Copy)]
pub struct Family {
    pub omega: f64,
    pub quad: [f64; 3],
    pub cubic: f64,
}

impl Family {
    fn eval(&self, s: &[f64], mu: f64, out: &mut [f64]) {
        let (u, v) = (s[0] - 1.0, s[1]);
        let r2 = u * u + v * v;
        let [q1, q2, q3] = self.quad;
        out[0] = mu * u - self.omega * v + q1 * u * u + q2 * u * v + self.cubic * u * r2;
        out[1] = self.omega * u + mu * v + q3 * v * v + self.cubic * v * r2;
    }

    /// `F_l = G / T` with the lower orders zero, so that `g_l = G`.
    pub fn field(self, l: usize) -> FieldSpec {
        let mut field = FieldSpec::new(2, TAU).unwrap();
        for _ in 1..l {
            field = field.with_zero_term();
        }
        field.with_term(move |_, s, mu, out| {
            self.eval(s, mu, out);
            out.iter_mut().for_each(|v| *v /= TAU);
            Ok(())
        })
    }
}

pub fn family() -> impl Strategy<Value = Family> {
    (0.5f64..2.0, prop::array::uniform3(-1.0f64..1.0), -2.0f64..-0.5).prop_map(|(omega, quad, cubic)| Family {
        omega,
        quad,
        cubic,
    })
}

/// Worst values seen over the synthetic families.
#[derive(Debug, Default, Clone, Copy)]
pub struct RouteStats {
    pub route_gap: f64,
    pub modulus_error: f64,
    pub pairing_error: f64,
    pub eigen_residual: f64,
}

/// Fit versus formula `ℓ_{1,l}` (3%), `||λ| − 1| ≤ 1e-10` along the curve,
/// `⟨p, q⟩ = 1` to 1e-12 and the eigenpair residual.
pub fn routes_and_normalization(l: usize, cases: u32) -> Result<RouteStats, String> {
    let stats = std::cell::Cell::new(RouteStats::default());
    run(cases, family(), |fam| {
        let a = analyze(fam.field(l), &PipelineOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(a.l, l);
        let (formula, _) = a.formula.clone().expect("formula route");
        let fit = a.fit.coefficient(l).unwrap();
        let pred = formula.coefficient(l).unwrap();
        let gap = (fit - pred).abs() / pred.abs();
        let mut s = stats.get();
        s.route_gap = s.route_gap.max(gap);
        prop_assert!(gap <= 0.03, "fit {} formula {}", fit, pred);
        for sample in &a.samples {
            let n = &sample.analysis;
            let aq = n.a.map(|v| Complex64::new(v, 0.0)) * n.q;
            s.modulus_error = s.modulus_error.max(sample.curve.modulus_error.abs());
            s.pairing_error = s.pairing_error.max((inner(&n.p, &n.q) - 1.0).norm());
            s.eigen_residual = s.eigen_residual.max((aq - n.q * n.lambda).norm() / n.a.norm());
        }
        stats.set(s);
        prop_assert!(s.modulus_error <= 1e-10, "|λ|-1 = {}", s.modulus_error);
        prop_assert!(s.pairing_error <= 1e-12, "⟨p,q⟩ error {}", s.pairing_error);
        prop_assert!(s.eigen_residual <= 1e-10, "eigen residual {}", s.eigen_residual);
        Ok(())
    })?;
    Ok(stats.get())
}

/// `ℓ₁` is unchanged by the eigenvector phase and by rotating the coordinate
/// basis (a non-orthogonal basis changes the unit normalization of `q`).
pub fn gauge_invariance(cases: u32) -> Result<f64, String> {
    let worst = std::cell::Cell::new(0.0f64);
    let strategy = (family(), 0.0f64..TAU, 0.0f64..TAU);
    run(cases, strategy, |(fam, gauge, angle)| {
        let (sn, cs) = angle.sin_cos();
        let basis = Matrix2::new(cs, -sn, sn, cs);
        let map = PoincareMap::new(fam.field(1)).unwrap();
        let hopf = torusbif::hopf::HopfPoint {
            mu0: 0.0,
            x: Vector2::new(1.0, 0.0),
            omega0: fam.omega,
            alpha_prime: 1.0,
            jordan: Matrix2::identity(),
            ell_1l: 0.0,
            eigen_path: Vec::new(),
        };
        let eps = 0.01;
        let c = critical_point(&map, &hopf, eps, &NsOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let nf = |b: &Matrix2<f64>, g: f64| {
            normal_form_at(&map, &c.xi, c.mu, eps, b, g).map(|n| n.ell1).map_err(|e| TestCaseError::fail(e.to_string()))
        };
        let reference = nf(&Matrix2::identity(), 0.0)?;
        let other = nf(&basis, gauge)?;
        let rel = (other - reference).abs() / reference.abs();
        worst.set(worst.get().max(rel));
        prop_assert!(rel <= 1e-6, "{} vs {}", other, reference);
        Ok(())
    })?;
    Ok(worst.get())
}
