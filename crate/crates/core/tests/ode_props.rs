mod common;

use torusbif::ode::integrate;
use torusbif::paperlab::{reduce_cylindrical, Reduction};

const X: [f64; 2] = [1.1, 0.2];

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn halving_tolerance_reduces_error() {
    let field = reduce_cylindrical(-1.0, 0.0, Reduction::Exact);
    let t = field.period();
    let (mu, eps) = (0.01, 1e-2);
    let reference = integrate(&field, &X, 0.0, t, mu, eps, 1e-13).unwrap().state;
    let errors: Vec<f64> = (0..6)
        .map(|k| 1e-5 / 2f64.powi(2 * k))
        .map(|tol| max_diff(&integrate(&field, &X, 0.0, t, mu, eps, tol).unwrap().state, &reference))
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn flow_matches_second_order_expansion() {
    let slope = common::flow_expansion_slope().unwrap();
    assert!(slope >= 2.8, "slope {slope}");
}
