//! End-to-end driver: averaged functions, Hopf point, map coefficients.

use std::fmt;

use nalgebra::Vector2;
use thiserror::Error;

use crate::averaging::{rect_grid, AveragedTable, Quadrature, DEFAULT_VANISH_TOL, QUADRATURE_TOL, SMOOTH_QUADRATURE_STEPS};
use crate::hopf::{find_hopf, trace_zero_branch, HopfPoint};
use crate::nsmap::{
    self, collect_series, fit_series, fit_tensor_series, lyapunov_series_formula, CoefficientSeries, CriticalCurve,
    LtildeReading, NsOptions, PoincareMap, SeriesSample, MAP_STEPS,
};
use crate::ode::FieldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Averaging,
    Hopf,
    CriticalCurve,
    Series,
    Certify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Averaging => "averaging",
            Stage::Hopf => "hopf",
            Stage::CriticalCurve => "critical-curve",
            Stage::Series => "series",
            Stage::Certify => "certify",
        })
    }
}

#[derive(Debug, Clone, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn stage<T, E: fmt::Display>(stage: Stage, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError {
        stage,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Probe rectangle `[x0, x1] × [y0, y1]` and points per side.
    pub probe_grid: ((f64, f64), (f64, f64), usize),
    pub mu_range: (f64, f64),
    pub vanish_tol: f64,
    /// Adaptive tolerance for the grid probe of the averaged functions.
    pub ode_tol: f64,
    /// `ε` values for the series; `None` uses [`nsmap::default_eps_list`].
    pub eps_list: Option<Vec<f64>>,
    /// `ε` values for the critical-curve slope; `None` reuses the series list.
    pub curve_eps: Option<Vec<f64>>,
    pub ns: NsOptions,
    pub map_steps: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            probe_grid: ((0.8, 1.2), (-0.2, 0.2), 5),
            mu_range: (-0.1, 0.1),
            vanish_tol: DEFAULT_VANISH_TOL,
            ode_tol: QUADRATURE_TOL,
            eps_list: None,
            curve_eps: None,
            ns: NsOptions::default(),
            map_steps: MAP_STEPS,
        }
    }
}

/// Everything up to (and excluding) certification.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub l: usize,
    pub k: usize,
    pub hopf: HopfPoint,
    pub map: PoincareMap,
    pub ns: NsOptions,
    pub eps_list: Vec<f64>,
    pub samples: Vec<SeriesSample>,
    pub curve: CriticalCurve,
    pub fit: CoefficientSeries,
    /// Formula route, corrected and as-printed readings.
    pub formula: Option<(CoefficientSeries, CoefficientSeries)>,
}

pub fn analyze(field: FieldSpec, opts: &PipelineOptions) -> Result<Analysis, PipelineError> {
    let ((x0, x1), (y0, y1), n) = opts.probe_grid;
    let grid = rect_grid((x0, x1), (y0, y1), n);
    let mu_mid = 0.5 * (opts.mu_range.0 + opts.mu_range.1);
    let table = stage(
        Stage::Averaging,
        AveragedTable::build_with(&field, &grid, mu_mid, opts.vanish_tol, Quadrature::Adaptive(opts.ode_tol)),
    )?
    .with_quadrature(Quadrature::Fixed(SMOOTH_QUADRATURE_STEPS));
    let (l, k) = (table.l(), table.order());
    let seed = Vector2::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let branch = stage(Stage::Hopf, trace_zero_branch(&table, opts.mu_range, &seed))?;
    let hopf = stage(Stage::Hopf, find_hopf(&branch, &table))?;

    let map = stage(Stage::Series, PoincareMap::new(field))?.with_steps(opts.map_steps);
    let ns = NsOptions { l, ..opts.ns };
    let eps_list = opts.eps_list.clone().unwrap_or_else(|| nsmap::default_eps_list(hopf.omega0, l));
    let samples = stage(Stage::Series, collect_series(&map, &hopf, &eps_list, &ns))?;
    let curve = match &opts.curve_eps {
        Some(list) => stage(Stage::CriticalCurve, nsmap::critical_curve(&map, &hopf, list, &ns))?,
        None => {
            let pts: Vec<_> = samples.iter().map(|s| s.curve).collect();
            let xs: Vec<f64> = pts.iter().map(|s| s.eps).collect();
            let ys: Vec<f64> = pts.iter().map(|s| s.mu).collect();
            let (slope, intercept, r_squared) = nsmap::linear_fit(&xs, &ys);
            CriticalCurve {
                samples: pts,
                slope,
                intercept,
                r_squared,
            }
        }
    };
    let fit = stage(Stage::Series, fit_series(&samples, l, k, ns.extra_orders))?;
    // the formula route is a cross-check; its failure is not fatal
    let formula = fit_tensor_series(&samples, l, k, ns.extra_orders, hopf.omega0).ok().and_then(|t| {
        let corrected = lyapunov_series_formula(&t, LtildeReading::Corrected).ok()?;
        let printed = lyapunov_series_formula(&t, LtildeReading::AsPrinted).ok()?;
        Some((corrected, printed))
    });
    Ok(Analysis {
        l,
        k,
        hopf,
        map,
        ns,
        eps_list,
        samples,
        curve,
        fit,
        formula,
    })
}
