//! Averaged functions of arbitrary order.
//!
//! The functions `y_i(t, x)` satisfy
//!
//! ```text
//! y_1(t,x) = ∫₀ᵗ F_1(s,x) ds
//! y_i(t,x) = ∫₀ᵗ ( i! F_i(s,x) + Σ_{l=1}^{i-1} Σ_{m=1}^{l} (i!/l!) ∂^m F_{i-l}(s,x) · B_{l,m}(y_1,…,y_{l-m+1}) ) ds
//! ```
//!
//! where `B_{l,m}` is the partial Bell polynomial and `∂^m F` acts as an
//! `m`-linear form on the vector arguments of each Bell monomial. The averaged
//! function of order `i` is `g_i(x) = y_i(T, x) / i!`. All `y_i` are integrated
//! together as one triangular system in `t`.

use rayon::prelude::*;
use thiserror::Error;

use crate::ode::{self, AdaptiveOptions, FieldError, FieldSpec, Guard, OdeError};

/// Highest averaging order supported.
pub const MAX_ORDER: usize = 4;
/// Highest Fréchet derivative order supported.
pub const MAX_DERIVATIVE: usize = 3;
/// Nested central-difference steps for `∂^m F`, `m = 1, 2, 3`.
pub const DERIVATIVE_STEPS: [f64; 3] = [1e-5, 1e-4, 5e-3];
/// Quadrature tolerance.
pub const QUADRATURE_TOL: f64 = 1e-10;
pub const DEFAULT_VANISH_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AveragingError {
    #[error("Bell polynomial B_{{{p},{q}}} needs 1 <= q <= p")]
    BellIndex { p: usize, q: usize },
    #[error("B_{{{p},{q}}} takes {expected} arguments, got {found}")]
    ArgumentLength {
        p: usize,
        q: usize,
        expected: usize,
        found: usize,
    },
    #[error("derivative order {0} requested, only orders up to 3 are supported")]
    DerivativeOrder(usize),
    #[error("averaging order {requested} outside 1..={max}")]
    Order { requested: usize, max: usize },
    #[error("quadrature failed: {0}")]
    Quadrature(#[from] OdeError),
    #[error("field evaluation failed: {0}")]
    Field(#[from] FieldError),
    #[error("all averaged functions vanish up to order {0}")]
    AllVanish(usize),
    #[error("probe grid is empty")]
    EmptyGrid,
}

/// One monomial of a partial Bell polynomial: `coeff · Π x_j^{powers[j-1]}`,
/// where `coeff = p! / Π (b_j! (j!)^{b_j})` (an integer).
#[derive(Debug, Clone, PartialEq)]
pub struct BellTerm {
    pub coeff: f64,
    pub powers: Vec<usize>,
}

impl BellTerm {
    /// Degree `q = Σ b_j`.
    pub fn degree(&self) -> usize {
        self.powers.iter().sum()
    }

    /// Argument indices (1-based) repeated by multiplicity.
    pub fn arguments(&self) -> impl Iterator<Item = usize> + '_ {
        self.powers
            .iter()
            .enumerate()
            .flat_map(|(j, &b)| std::iter::repeat(j + 1).take(b))
    }
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Monomials of `B_{p,q}`, one per tuple of the index set.
pub fn bell_terms(p: usize, q: usize) -> Result<Vec<BellTerm>, AveragingError> {
    if q == 0 || q > p {
        return Err(AveragingError::BellIndex { p, q });
    }
    let len = p - q + 1;
    let mut out = Vec::new();
    let mut powers = vec![0usize; len];
    collect_partitions(p, q, len, 0, &mut powers, &mut out);
    Ok(out)
}

fn collect_partitions(
    remaining_sum: usize,
    remaining_count: usize,
    len: usize,
    j: usize,
    powers: &mut Vec<usize>,
    out: &mut Vec<BellTerm>,
) {
    if j == len {
        if remaining_sum == 0 && remaining_count == 0 {
            let p: usize = powers.iter().enumerate().map(|(j, b)| (j + 1) * b).sum();
            let denom: u128 = powers
                .iter()
                .enumerate()
                .map(|(j, &b)| factorial(b) * factorial(j + 1).pow(b as u32))
                .product();
            out.push(BellTerm {
                coeff: (factorial(p) / denom) as f64,
                powers: powers.clone(),
            });
        }
        return;
    }
    let weight = j + 1;
    for b in 0..=remaining_count.min(remaining_sum / weight) {
        powers[j] = b;
        collect_partitions(remaining_sum - b * weight, remaining_count - b, len, j + 1, powers, out);
    }
    powers[j] = 0;
}

/// Partial Bell polynomial `B_{p,q}(x_1, …, x_{p-q+1})`.
pub fn bell(p: usize, q: usize, xs: &[f64]) -> Result<f64, AveragingError> {
    let terms = bell_terms(p, q)?;
    let expected = p - q + 1;
    if xs.len() != expected {
        return Err(AveragingError::ArgumentLength {
            p,
            q,
            expected,
            found: xs.len(),
        });
    }
    Ok(terms
        .iter()
        .map(|term| {
            term.powers
                .iter()
                .zip(xs)
                .fold(term.coeff, |acc, (&b, x)| acc * x.powi(b as i32))
        })
        .sum())
}

/// `∂^m F_i(t, x; μ)[v_1, …, v_m]` by nested central differences.
///
/// Directions are normalized before differencing so the step is absolute.
pub fn frechet_derivative(
    field: &FieldSpec,
    i: usize,
    t: f64,
    x: &[f64],
    mu: f64,
    dirs: &[&[f64]],
    out: &mut [f64],
) -> Result<(), AveragingError> {
    let m = dirs.len();
    if m == 0 {
        field.eval_term(i, t, x, mu, out)?;
        return Ok(());
    }
    if m > MAX_DERIVATIVE {
        return Err(AveragingError::DerivativeOrder(m));
    }
    let d = x.len();
    out[..d].fill(0.0);
    let norms: Vec<f64> = dirs.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt()).collect();
    let scale: f64 = norms.iter().product();
    if scale == 0.0 {
        return Ok(());
    }
    let h = DERIVATIVE_STEPS[m - 1];
    let mut point = [0.0; 3];
    let mut value = [0.0; 3];
    for mask in 0..(1u32 << m) {
        point[..d].copy_from_slice(x);
        let mut sign = 1.0;
        for (k, (dir, norm)) in dirs.iter().zip(&norms).enumerate() {
            let s = if mask & (1 << k) == 0 { 1.0 } else { -1.0 };
            sign *= s;
            for c in 0..d {
                point[c] += s * h * dir[c] / norm;
            }
        }
        field.eval_term(i, t, &point[..d], mu, &mut value[..d])?;
        for c in 0..d {
            out[c] += sign * value[c];
        }
    }
    let denom = (2.0 * h).powi(m as i32);
    for o in out[..d].iter_mut() {
        *o *= scale / denom;
    }
    Ok(())
}

struct RecursionTerm {
    source: usize,
    coeff: f64,
    args: Vec<usize>,
}

/// Precomputed recursion for `y_i`: pairs of `F_{i-l}` and Bell monomials.
fn recursion_plan(up_to: usize) -> Result<Vec<Vec<RecursionTerm>>, AveragingError> {
    let mut plan = Vec::with_capacity(up_to);
    for i in 1..=up_to {
        let mut terms = Vec::new();
        for l in 1..i {
            for m in 1..=l {
                let scale = (factorial(i) / factorial(l)) as f64;
                for bt in bell_terms(l, m)? {
                    terms.push(RecursionTerm {
                        source: i - l,
                        coeff: scale * bt.coeff,
                        args: bt.arguments().collect(),
                    });
                }
            }
        }
        plan.push(terms);
    }
    Ok(plan)
}

/// How the `t`-integrals of the recursion are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    /// Embedded pair with error control at the given tolerance.
    Adaptive(f64),
    /// Equal Dormand–Prince steps. The result is a smooth function of
    /// `(x, μ)`, which finite differences of `g_i` rely on.
    Fixed(usize),
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Adaptive(QUADRATURE_TOL)
    }
}

/// Steps used by [`Quadrature::Fixed`] in the Hopf stage.
pub const SMOOTH_QUADRATURE_STEPS: usize = 2048;

/// `y_1(t,x), …, y_n(t,x)` with `n = up_to`.
pub fn y_sequence(
    field: &FieldSpec,
    t: f64,
    x: &[f64],
    mu: f64,
    up_to: usize,
) -> Result<Vec<Vec<f64>>, AveragingError> {
    y_sequence_with(field, t, x, mu, up_to, Quadrature::default())
}

pub fn y_sequence_with(
    field: &FieldSpec,
    t: f64,
    x: &[f64],
    mu: f64,
    up_to: usize,
    quadrature: Quadrature,
) -> Result<Vec<Vec<f64>>, AveragingError> {
    let max = field.order().min(MAX_ORDER);
    if up_to == 0 || up_to > max {
        return Err(AveragingError::Order { requested: up_to, max });
    }
    let d = field.dim();
    let plan = recursion_plan(up_to)?;
    let mut err_slot: Option<AveragingError> = None;
    let rhs = |s: f64, y: &[f64], dy: &mut [f64]| -> Result<(), FieldError> {
        let mut buf = [0.0; 3];
        for (idx, terms) in plan.iter().enumerate() {
            let i = idx + 1;
            let out = &mut dy[idx * d..(idx + 1) * d];
            field.eval_term(i, s, x, mu, out)?;
            let fact = factorial(i) as f64;
            out.iter_mut().for_each(|v| *v *= fact);
            for term in terms {
                let dirs: Vec<&[f64]> = term.args.iter().map(|&j| &y[(j - 1) * d..j * d]).collect();
                match frechet_derivative(field, term.source, s, x, mu, &dirs, &mut buf[..d]) {
                    Ok(()) => {}
                    Err(AveragingError::Field(e)) => return Err(e),
                    Err(other) => {
                        err_slot.get_or_insert(other);
                        return Err(FieldError::Singular("derivative stencil".into()));
                    }
                }
                for c in 0..d {
                    out[c] += term.coeff * buf[c];
                }
            }
        }
        Ok(())
    };
    let guard = Guard {
        dims: up_to * d,
        bound: f64::INFINITY,
    };
    let y0 = vec![0.0; up_to * d];
    let res = match quadrature {
        Quadrature::Adaptive(tol) => {
            let opts = AdaptiveOptions::new(tol)?;
            ode::integrate_system(rhs, &y0, 0.0, t, &opts, &guard).map(|r| r.state)
        }
        Quadrature::Fixed(steps) => ode::Dopri::new(rhs, y0.len()).fixed(&y0, 0.0, t, steps.max(1), &guard),
    };
    if let Some(e) = err_slot {
        return Err(e);
    }
    Ok(res?.chunks(d).map(<[f64]>::to_vec).collect())
}

/// `g_i(x; μ) = y_i(T, x; μ) / i!`.
pub fn averaged(field: &FieldSpec, i: usize, x: &[f64], mu: f64) -> Result<Vec<f64>, AveragingError> {
    averaged_with(field, i, x, mu, Quadrature::default())
}

pub fn averaged_with(
    field: &FieldSpec,
    i: usize,
    x: &[f64],
    mu: f64,
    quadrature: Quadrature,
) -> Result<Vec<f64>, AveragingError> {
    let ys = y_sequence_with(field, field.period(), x, mu, i, quadrature)?;
    let fact = factorial(i) as f64;
    Ok(ys[i - 1].iter().map(|v| v / fact).collect())
}

/// All averaged functions `g_1, …, g_n` at one point.
pub fn averaged_all(field: &FieldSpec, x: &[f64], mu: f64, n: usize) -> Result<Vec<Vec<f64>>, AveragingError> {
    averaged_all_with(field, x, mu, n, Quadrature::default())
}

pub fn averaged_all_with(
    field: &FieldSpec,
    x: &[f64],
    mu: f64,
    n: usize,
    quadrature: Quadrature,
) -> Result<Vec<Vec<f64>>, AveragingError> {
    let ys = y_sequence_with(field, field.period(), x, mu, n, quadrature)?;
    Ok(ys
        .into_iter()
        .enumerate()
        .map(|(idx, y)| {
            let fact = factorial(idx + 1) as f64;
            y.into_iter().map(|v| v / fact).collect()
        })
        .collect())
}

fn sup_norms(
    field: &FieldSpec,
    grid: &[Vec<f64>],
    mu: f64,
    n: usize,
    quadrature: Quadrature,
) -> Result<Vec<f64>, AveragingError> {
    if grid.is_empty() {
        return Err(AveragingError::EmptyGrid);
    }
    let per_point: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|x| {
            averaged_all_with(field, x, mu, n, quadrature).map(|gs| {
                gs.iter()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect::<Vec<f64>>()
            })
        })
        .collect::<Result<_, _>>()?;
    Ok((0..n)
        .map(|i| per_point.iter().fold(0.0f64, |m, norms| m.max(norms[i])))
        .collect())
}

/// Smallest `i` whose averaged function exceeds `vanish_tol` somewhere on the grid.
pub fn first_nonvanishing(
    field: &FieldSpec,
    grid: &[Vec<f64>],
    mu: f64,
    vanish_tol: f64,
) -> Result<usize, AveragingError> {
    let k = field.order().min(MAX_ORDER);
    let sups = sup_norms(field, grid, mu, k, Quadrature::default())?;
    sups.iter()
        .position(|&s| s > vanish_tol)
        .map(|i| i + 1)
        .ok_or(AveragingError::AllVanish(k))
}

/// Evaluators for `g_1, …, g_k` together with the first non-vanishing order.
#[derive(Debug, Clone)]
pub struct AveragedTable {
    field: FieldSpec,
    order: usize,
    l: usize,
    vanish_tol: f64,
    sup_norms: Vec<f64>,
    quadrature: Quadrature,
}

impl AveragedTable {
    pub fn build(
        field: &FieldSpec,
        grid: &[Vec<f64>],
        mu: f64,
        vanish_tol: f64,
    ) -> Result<Self, AveragingError> {
        Self::build_with(field, grid, mu, vanish_tol, Quadrature::default())
    }

    /// As [`AveragedTable::build`], probing the grid with `probe`.
    pub fn build_with(
        field: &FieldSpec,
        grid: &[Vec<f64>],
        mu: f64,
        vanish_tol: f64,
        probe: Quadrature,
    ) -> Result<Self, AveragingError> {
        let order = field.order().min(MAX_ORDER);
        if order == 0 {
            return Err(AveragingError::Order { requested: 1, max: 0 });
        }
        let sups = sup_norms(field, grid, mu, order, probe)?;
        let l = sups
            .iter()
            .position(|&s| s > vanish_tol)
            .map(|i| i + 1)
            .ok_or(AveragingError::AllVanish(order))?;
        Ok(AveragedTable {
            field: field.clone(),
            order,
            l,
            vanish_tol,
            sup_norms: sups,
            quadrature: Quadrature::default(),
        })
    }

    /// Quadrature used by [`AveragedTable::g`].
    pub fn with_quadrature(mut self, quadrature: Quadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// First non-vanishing order.
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn vanish_tol(&self) -> f64 {
        self.vanish_tol
    }

    /// Sup norm of each `g_i` over the probe grid.
    pub fn sup_norms(&self) -> &[f64] {
        &self.sup_norms
    }

    pub fn field(&self) -> &FieldSpec {
        &self.field
    }

    pub fn g(&self, i: usize, x: &[f64], mu: f64) -> Result<Vec<f64>, AveragingError> {
        if i == 0 || i > self.order {
            return Err(AveragingError::Order {
                requested: i,
                max: self.order,
            });
        }
        averaged_with(&self.field, i, x, mu, self.quadrature)
    }

    /// The leading averaged function `g_l`.
    pub fn leading(&self, x: &[f64], mu: f64) -> Result<Vec<f64>, AveragingError> {
        self.g(self.l, x, mu)
    }
}

/// Rectangular probe grid with `n × n` points.
pub fn rect_grid(x_range: (f64, f64), y_range: (f64, f64), n: usize) -> Vec<Vec<f64>> {
    let lin = |(a, b): (f64, f64), i: usize| {
        if n <= 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (n - 1) as f64
        }
    };
    (0..n)
        .flat_map(|i| (0..n).map(move |j| vec![lin(x_range, i), lin(y_range, j)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn bell_examples() {
        assert_eq!(bell(1, 1, &[2.5]).unwrap(), 2.5);
        assert_eq!(bell(3, 2, &[2.0, 5.0]).unwrap(), 30.0);
        let bell4: f64 = (1..=4).map(|q| bell(4, q, &vec![1.0; 4 - q + 1]).unwrap()).sum();
        assert_eq!(bell4, 15.0);
    }

    #[test]
    fn bell_argument_errors() {
        assert!(matches!(bell(2, 3, &[1.0]), Err(AveragingError::BellIndex { .. })));
        assert!(matches!(bell(3, 1, &[1.0]), Err(AveragingError::ArgumentLength { expected: 3, .. })));
    }

    #[test]
    fn bell_term_arguments_expand_multiplicities() {
        let terms = bell_terms(4, 2).unwrap();
        let args: Vec<Vec<usize>> = terms.iter().map(|t| t.arguments().collect()).collect();
        assert!(args.contains(&vec![1, 3]));
        assert!(args.contains(&vec![2, 2]));
        assert!(terms.iter().all(|t| t.degree() == 2));
    }

    fn circle_field() -> FieldSpec {
        FieldSpec::new(2, 2.0 * PI)
            .unwrap()
            .with_term(|t, _, _, out| {
                out[0] = t.cos();
                out[1] = t.sin();
                Ok(())
            })
            .with_term(|_, _, _, out| {
                out[0] = 1.0;
                out[1] = -2.0;
                Ok(())
            })
    }

    #[test]
    fn constant_integrand_gives_linear_y1() {
        let field = FieldSpec::new(2, 1.0).unwrap().with_term(|_, x, mu, out| {
            out[0] = x[1] + mu;
            out[1] = -x[0];
            Ok(())
        });
        let ys = y_sequence(&field, 0.7, &[0.3, 0.2], 0.1, 1).unwrap();
        assert!((ys[0][0] - 0.7 * 0.3).abs() < 1e-12);
        assert!((ys[0][1] + 0.7 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn second_order_of_autonomous_field_is_flow_expansion() {
        // F1 = G autonomous: y2 = T² DG·G
        let field = FieldSpec::new(2, 1.5).unwrap().with_term(|_, x, _, out| {
            out[0] = x[0] * x[1];
            out[1] = x[0] - x[1] * x[1];
            Ok(())
        });
        let x = [0.4, -0.3];
        let t = field.period();
        let g = [x[0] * x[1], x[0] - x[1] * x[1]];
        let dg_g = [x[1] * g[0] + x[0] * g[1], g[0] - 2.0 * x[1] * g[1]];
        let ys = y_sequence(&field, t, &x, 0.0, 1).unwrap();
        assert!((ys[0][0] - t * g[0]).abs() < 1e-10);
        let field2 = field.clone().with_zero_term();
        let ys = y_sequence(&field2, t, &x, 0.0, 2).unwrap();
        for c in 0..2 {
            assert!((ys[1][c] - t * t * dg_g[c]).abs() < 1e-8, "{c}: {} vs {}", ys[1][c], t * t * dg_g[c]);
        }
    }

    #[test]
    fn zero_mean_first_order_vanishes() {
        let field = circle_field();
        let grid = rect_grid((-1.0, 1.0), (-1.0, 1.0), 3);
        assert_eq!(first_nonvanishing(&field, &grid, 0.0, DEFAULT_VANISH_TOL).unwrap(), 2);
        let table = AveragedTable::build(&field, &grid, 0.0, DEFAULT_VANISH_TOL).unwrap();
        assert_eq!(table.l(), 2);
        let g2 = table.leading(&[0.0, 0.0], 0.0).unwrap();
        assert!((g2[0] - 2.0 * PI).abs() < 1e-8 && (g2[1] + 4.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn zero_field_vanishes_everywhere() {
        let field = FieldSpec::new(2, 1.0).unwrap().with_zero_term().with_zero_term();
        let grid = rect_grid((-1.0, 1.0), (-1.0, 1.0), 2);
        assert_eq!(averaged(&field, 2, &[0.5, 0.5], 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            first_nonvanishing(&field, &grid, 0.0, DEFAULT_VANISH_TOL),
            Err(AveragingError::AllVanish(2))
        );
        assert_eq!(first_nonvanishing(&field, &[], 0.0, 1e-7), Err(AveragingError::EmptyGrid));
    }

    #[test]
    fn derivative_order_is_limited() {
        let field = circle_field();
        let v = [1.0, 0.0];
        let dirs: Vec<&[f64]> = vec![&v; 4];
        let mut out = [0.0; 2];
        assert_eq!(
            frechet_derivative(&field, 1, 0.0, &[0.0, 0.0], 0.0, &dirs, &mut out),
            Err(AveragingError::DerivativeOrder(4))
        );
    }

    #[test]
    fn third_derivative_of_cubic() {
        let field = FieldSpec::new(2, 1.0).unwrap().with_term(|_, x, _, out| {
            out[0] = x[0].powi(3);
            out[1] = x[0] * x[1] * x[1];
            Ok(())
        });
        let u = [1.0, 0.0];
        let v = [0.0, 2.0];
        let mut out = [0.0; 2];
        frechet_derivative(&field, 1, 0.0, &[0.3, 0.1], 0.0, &[&u, &u, &u], &mut out).unwrap();
        assert!((out[0] - 6.0).abs() < 1e-6 && out[1].abs() < 1e-6);
        frechet_derivative(&field, 1, 0.0, &[0.3, 0.1], 0.0, &[&u, &v, &v], &mut out).unwrap();
        assert!((out[1] - 8.0).abs() < 1e-6, "{out:?}");
    }
}
