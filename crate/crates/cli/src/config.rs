//! JSON configuration with path-precise schema errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use torusbif::averaging::{DEFAULT_VANISH_TOL, QUADRATURE_TOL};
use torusbif::expr::Expression;
use torusbif::expr::planar_field;
use torusbif::nsmap::NsOptions;
use torusbif::ode::FieldSpec;
use torusbif::paperlab::{reduce_cylindrical, PaperParams, Reduction, REGISTRY_NAME};
use torusbif::pipeline::PipelineOptions;
use torusbif::torus::{CertifyOptions, CurveOptions, SectionOptions};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub field: FieldConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub outputs: Outputs,
}

/// Either `registry` + `params`, or `expressions` + `period`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub registry: Option<String>,
    pub params: Option<RegistryParams>,
    #[serde(default)]
    pub reduction: Reduction,
    /// Component expressions `[f_x, f_y]` of `F_1, F_2, …` in `t, x, y, mu`.
    pub expressions: Option<Vec<[String; 2]>>,
    pub period: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryParams {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub ode_tol: f64,
    pub newton_tol: f64,
    pub vanish_tol: f64,
    pub resonance_margin: f64,
    pub curve_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let ns = NsOptions::default();
        Tolerances {
            ode_tol: QUADRATURE_TOL,
            newton_tol: ns.root_tol,
            vanish_tol: DEFAULT_VANISH_TOL,
            resonance_margin: ns.resonance_margin,
            curve_residual: CurveOptions::default().threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeGrid {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub mu_range: [f64; 2],
    pub eps_list: Option<Vec<f64>>,
    pub curve_eps: Option<Vec<f64>>,
    pub probe_grid: ProbeGrid,
    pub sweep_mu_points: usize,
    /// `ε` rows of the sweep; defaults to the resolved `eps_list`.
    pub sweep_eps: Option<Vec<f64>>,
}

impl Default for Grids {
    fn default() -> Self {
        let p = PipelineOptions::default();
        let ((x0, x1), (y0, y1), n) = p.probe_grid;
        Grids {
            mu_range: [p.mu_range.0, p.mu_range.1],
            eps_list: None,
            curve_eps: None,
            probe_grid: ProbeGrid { x: [x0, x1], y: [y0, y1], n },
            sweep_mu_points: 7,
            sweep_eps: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyPoint {
    pub mu: f64,
    pub eps: f64,
    /// `x, y[, z]`; 3 components for the registry field.
    pub start: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub points: Vec<CertifyPoint>,
    pub n_returns: usize,
    pub transient_skip: Option<usize>,
    pub harmonics: usize,
    pub max_returns: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        let c = CertifyOptions::default();
        CertifyConfig {
            points: Vec::new(),
            n_returns: c.section.n_returns,
            transient_skip: None,
            harmonics: c.curve.harmonics,
            max_returns: c.max_returns,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { dir: PathBuf::from(".") }
    }
}

fn schema(path: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Schema(format!("{path}: {message}"))
}

fn check_eps(path: &str, list: &[f64], min_len: usize) -> Result<(), CliError> {
    if list.len() < min_len {
        return Err(schema(path, format!("needs at least {min_len} values, got {}", list.len())));
    }
    if let Some(i) = list.iter().position(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(schema(&format!("{path}[{i}]"), "must be positive"));
    }
    if let Some(i) = list.windows(2).position(|w| w[0] >= w[1]) {
        return Err(schema(&format!("{path}[{}]", i + 1), "must be strictly ascending"));
    }
    Ok(())
}

/// How the field is defined; decides the section CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Registry,
    Planar,
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let config: AnalysisConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(&path, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        let t = &self.tolerances;
        for (name, v) in [
            ("ode_tol", t.ode_tol),
            ("newton_tol", t.newton_tol),
            ("vanish_tol", t.vanish_tol),
            ("resonance_margin", t.resonance_margin),
            ("curve_residual", t.curve_residual),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(schema(&format!("tolerances.{name}"), "must be positive"));
            }
        }
        let g = &self.grids;
        if !(g.mu_range[0] < g.mu_range[1]) {
            return Err(schema("grids.mu_range", "must be an increasing pair"));
        }
        if let Some(list) = &g.eps_list {
            // a fit of order k − l needs k − l + 2 points
            check_eps("grids.eps_list", list, 2)?;
        }
        if let Some(list) = &g.curve_eps {
            check_eps("grids.curve_eps", list, 2)?;
        }
        if let Some(list) = &g.sweep_eps {
            check_eps("grids.sweep_eps", list, 0)?;
        }
        let p = &g.probe_grid;
        if !(p.x[0] < p.x[1] && p.y[0] < p.y[1]) || p.n < 2 {
            return Err(schema("grids.probe_grid", "needs increasing ranges and n >= 2"));
        }
        for (i, c) in self.certify.points.iter().enumerate() {
            if !(c.eps.is_finite() && c.eps > 0.0) {
                return Err(schema(&format!("certify.points[{i}].eps"), "must be positive"));
            }
        }
        if self.certify.n_returns == 0 {
            return Err(schema("certify.n_returns", "must be positive"));
        }
        let f = &self.field;
        match (&f.registry, &f.expressions) {
            (Some(name), None) => {
                if name != REGISTRY_NAME {
                    return Err(schema("field.registry", format!("unknown family {name:?}")));
                }
                if f.params.is_none() {
                    return Err(schema("field.params", "required with a registry field"));
                }
            }
            (None, Some(terms)) => {
                if terms.is_empty() {
                    return Err(schema("field.expressions", "needs at least one order"));
                }
                if !f.period.is_some_and(|p| p.is_finite() && p > 0.0) {
                    return Err(schema("field.period", "required and positive with expressions"));
                }
            }
            _ => return Err(schema("field", "give exactly one of `registry` or `expressions`")),
        }
        Ok(())
    }

    pub fn kind(&self) -> FieldKind {
        if self.field.registry.is_some() {
            FieldKind::Registry
        } else {
            FieldKind::Planar
        }
    }

    pub fn build_field(&self) -> Result<FieldSpec, CliError> {
        let f = &self.field;
        if let Some(p) = f.params.filter(|_| f.registry.is_some()) {
            if !PaperParams::new(p.a, p.b, 0.0, 0.0).is_nondegenerate() {
                return Err(CliError::Degenerate("a = b = 0: the cubic coefficients vanish".into()));
            }
            return Ok(reduce_cylindrical(p.a, p.b, f.reduction));
        }
        let terms = f.expressions.as_deref().unwrap_or_default();
        let parsed = terms
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let one = |j: usize| {
                    Expression::parse(&pair[j]).map_err(|e| schema(&format!("field.expressions[{i}][{j}]"), e))
                };
                Ok([one(0)?, one(1)?])
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        planar_field(f.period.unwrap_or_default(), parsed).map_err(|e| schema("field.period", e))
    }

    pub fn ns_options(&self) -> NsOptions {
        NsOptions {
            resonance_margin: self.tolerances.resonance_margin,
            root_tol: self.tolerances.newton_tol,
            ..NsOptions::default()
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        let g = &self.grids;
        let p = &g.probe_grid;
        PipelineOptions {
            probe_grid: ((p.x[0], p.x[1]), (p.y[0], p.y[1]), p.n),
            mu_range: (g.mu_range[0], g.mu_range[1]),
            vanish_tol: self.tolerances.vanish_tol,
            ode_tol: self.tolerances.ode_tol,
            eps_list: g.eps_list.clone(),
            curve_eps: g.curve_eps.clone(),
            ns: self.ns_options(),
            ..PipelineOptions::default()
        }
    }

    pub fn certify_options(&self, ns: NsOptions) -> CertifyOptions {
        let c = &self.certify;
        let base = CertifyOptions::default();
        CertifyOptions {
            ns,
            section: SectionOptions {
                n_returns: c.n_returns,
                transient_skip: c.transient_skip,
                ..base.section
            },
            curve: CurveOptions {
                harmonics: c.harmonics,
                threshold: self.tolerances.curve_residual,
                ..base.curve
            },
            max_returns: c.max_returns,
            ..base
        }
    }
}
