use rayon::prelude::*;
use torusbif::paperlab::{reduce_cylindrical, Reduction};
use torusbif::pipeline::{analyze, Analysis, PipelineOptions};
use torusbif::torus::{certify, flips, sweep_grid, CertifyOptions, Stability, TorusCertificate};

fn example(a: f64, b: f64) -> Analysis {
    analyze(reduce_cylindrical(a, b, Reduction::Exact), &PipelineOptions::default()).unwrap()
}

fn run(an: &Analysis, mu: f64, eps: f64) -> TorusCertificate {
    let opts = CertifyOptions {
        ns: an.ns,
        ..Default::default()
    };
    certify(&an.map, &an.hopf, &an.fit, mu, eps, &opts).unwrap()
}

fn check_duality(c: &TorusCertificate) {
    if c.exists {
        assert_eq!(c.torus_stability.map(Stability::opposite), Some(c.cycle_stability), "μ = {}", c.mu);
    }
}

#[test]
fn sweep_across_the_critical_curve_flips_once() {
    let an = example(-1.0, 0.0);
    let eps = 1e-3;
    let mu_crit = torusbif::nsmap::critical_point(&an.map, &an.hopf, eps, &an.ns).unwrap().mu;
    let grid = sweep_grid(mu_crit, 0.01);
    let certs: Vec<TorusCertificate> = grid.par_iter().map(|&mu| run(&an, mu, eps)).collect();
    let exists: Vec<bool> = certs.iter().map(|c| c.exists).collect();
    assert_eq!(flips(&exists), 1, "{exists:?}");
    // ℓ₁ < 0: the torus lies above the critical curve
    let first = exists.iter().position(|&e| e).unwrap();
    assert!(grid[first - 1] < mu_crit && grid[first] > mu_crit);
    certs.iter().for_each(check_duality);
    assert!(certs.iter().all(|c| c.agreement), "{:?}", certs.iter().map(|c| &c.diagnostics).collect::<Vec<_>>());
}

#[test]
fn subcritical_torus_is_repelling() {
    let an = example(1.0, 0.0);
    let eps = 1e-3;
    let mu_crit = torusbif::nsmap::critical_point(&an.map, &an.hopf, eps, &an.ns).unwrap().mu;
    let c = run(&an, mu_crit - 0.02, eps);
    assert!(c.exists, "{:?}", c.diagnostics);
    assert_eq!(c.torus_stability, Some(Stability::Unstable));
    assert_eq!(c.cycle_stability, Stability::Stable);
    check_duality(&c);
}
