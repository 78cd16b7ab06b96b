mod common;

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use proptest::prelude::*;
use torusbif::hopf::HopfPoint;
use torusbif::nsmap::{critical_point, eigen_at, normal_form, shifted_map, NsOptions, PlanarMap, PoincareMap};
use torusbif::ode::FieldSpec;
use torusbif::paperlab::{reduce_cylindrical, Reduction};

#[test]
fn routes_agree_first_order() {
    common::routes_and_normalization(1, 4).unwrap();
}

#[test]
fn routes_agree_second_order() {
    common::routes_and_normalization(2, 4).unwrap();
}

#[test]
fn lyapunov_coefficient_is_gauge_invariant() {
    common::gauge_invariance(8).unwrap();
}

fn linear_hopf(omega: f64, mu0: f64) -> HopfPoint {
    HopfPoint {
        mu0,
        x: Vector2::zeros(),
        omega0: omega,
        alpha_prime: 1.0,
        jordan: Matrix2::identity(),
        ell_1l: 0.0,
        eigen_path: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn symmetric_linear_field_has_flat_critical_curve(
        omega in 0.5f64..2.0,
        mu0 in -0.05f64..0.05,
        eps in 1e-4f64..5e-2,
    ) {
        let field = FieldSpec::new(2, TAU).unwrap().with_term(move |_, s, mu, out| {
            out[0] = (mu - mu0) * s[0] - omega * s[1];
            out[1] = omega * s[0] + (mu - mu0) * s[1];
            Ok(())
        });
        let map = PoincareMap::new(field).unwrap();
        let c = critical_point(&map, &linear_hopf(omega, mu0), eps, &NsOptions::default()).unwrap();
        prop_assert!((c.mu - mu0).abs() <= 1e-10, "μ = {} vs {}", c.mu, mu0);
    }

    #[test]
    fn unit_rotation_has_eigenvalue_exp_two_pi_i_eps(eps in 0.01f64..0.45, x in prop::array::uniform2(-2.0f64..2.0)) {
        let field = FieldSpec::new(2, TAU).unwrap().with_term(|_, s, _, out| {
            out[0] = -s[1];
            out[1] = s[0];
            Ok(())
        });
        let map = PoincareMap::new(field).unwrap();
        let e = eigen_at(&map, 0.0, eps, &Vector2::new(0.1, 0.0)).unwrap();
        prop_assert!((e.lambda - Complex64::from_polar(1.0, TAU * eps)).norm() <= 1e-10);
        // ε = 0 leaves every point in place
        let p = Vector2::new(x[0], x[1]);
        prop_assert_eq!(map.apply(&p, 0.0, 0.0).unwrap(), p);
    }
}

fn example_map(a: f64) -> PoincareMap {
    PoincareMap::new(reduce_cylindrical(a, 0.0, Reduction::Exact)).unwrap()
}

fn example_hopf() -> HopfPoint {
    let mut h = linear_hopf(30.0 * PI, 0.0);
    h.x = Vector2::new(1.0, 0.0);
    h.alpha_prime = 30.0 * PI;
    h
}

#[test]
fn example_fixed_point_tracks_the_hopf_point() {
    let map = example_map(-1.0);
    let c = critical_point(&map, &example_hopf(), 1e-3, &NsOptions::default()).unwrap();
    assert!((c.xi - Vector2::new(1.0, 0.0)).norm() < 5e-3, "ξ = {}", c.xi);

    let dist: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&eps| {
            let xi = torusbif::nsmap::fixed_point(&map, 0.0, eps, &Vector2::new(1.0, 0.0)).unwrap();
            (xi - Vector2::new(1.0, 0.0)).norm()
        })
        .collect();
    assert!(dist.windows(2).all(|w| w[1] < w[0]), "{dist:?}");
}

#[test]
fn example_lyapunov_sign_follows_a() {
    for (a, negative) in [(-1.0, true), (1.0, false)] {
        let map = example_map(a);
        let c = critical_point(&map, &example_hopf(), 1e-3, &NsOptions::default()).unwrap();
        let n = normal_form(&map, c.mu, 1e-3, &c.xi).unwrap();
        assert_eq!(n.ell1 < 0.0, negative, "a = {a}: ℓ₁ = {}", n.ell1);
    }
}

#[test]
fn shifted_map_fixes_the_origin() {
    let map = example_map(-1.0);
    let eps = 1e-3;
    let c = critical_point(&map, &example_hopf(), eps, &NsOptions::default()).unwrap();
    let h = shifted_map(&map, c.mu, eps, c.xi);
    for sigma in [0.0, 1e-3, -1e-3] {
        let y = h.apply(&Vector2::zeros(), sigma, eps).unwrap();
        assert!(y.norm() < 1e-10, "σ = {sigma}: {y}");
    }
    let jac = h.jacobian(&Vector2::zeros(), 0.0, eps).unwrap();
    assert!((jac.determinant().sqrt() - 1.0).abs() < 1e-9);
    // the modulus grows through the critical value
    let det = |s: f64| h.jacobian(&Vector2::zeros(), s, eps).unwrap().determinant();
    assert!(det(1e-3) > 1.0 && det(-1e-3) < 1.0);
}
