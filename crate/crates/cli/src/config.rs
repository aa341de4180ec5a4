//! TOML experiment description and its validation.

use std::fmt;
use std::path::Path;

use gammalim::dirichlet::SolverConfig;
use gammalim::grid::{Cube, QuadratureRule};
use gammalim::integrand::{builtin, BuiltinParams, Integrand, IntegrandFamily};
use gammalim::matrix::Matrix;
use gammalim::relax::DensityMethod;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Cell,
    Homogenize,
    Envelope,
    Derivative,
    Density,
    Relax,
    GammaGap,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        match self {
            Operation::Cell => "cell",
            Operation::Homogenize => "homogenize",
            Operation::Envelope => "envelope",
            Operation::Derivative => "derivative",
            Operation::Density => "density",
            Operation::Relax => "relax",
            Operation::GammaGap => "gamma-gap",
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Input problems: the config is unusable as written.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ValidationError> {
    Err(ValidationError(msg.into()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `L_ε = L`.
    #[default]
    Constant,
    /// `L_ε(x, v, ξ) = L(x/ε, v, ξ)`.
    Rescaled,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IntegrandSpec {
    pub name: String,
    #[serde(default)]
    pub family: FamilyKind,
    #[serde(flatten)]
    pub params: BuiltinParams,
}

impl IntegrandSpec {
    pub fn build(&self) -> gammalim::Result<Integrand> {
        builtin(&self.name, &self.params)
    }

    pub fn family(&self) -> gammalim::Result<IntegrandFamily> {
        let l = self.build()?;
        Ok(match self.family {
            FamilyKind::Constant => IntegrandFamily::Constant(l),
            FamilyKind::Rescaled => IntegrandFamily::Rescaled(l),
        })
    }
}

/// Points, cubes and gradients the operation acts on.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    /// Base point `x`.
    pub x: Option<Vec<f64>>,
    /// Sample points (derivatives, H-diagnostic, bound chain).
    pub points: Vec<Vec<f64>>,
    /// Field value at `x`, or the offset of an affine field.
    pub v: Option<Vec<f64>>,
    /// Gradients, each given row-major.
    pub xi: Vec<Vec<f64>>,
    /// Side of `Q_ρ(x)` for single-cube operations.
    pub rho: Option<f64>,
    /// Largest period multiple for periodic estimates.
    pub n_max: Option<usize>,
    /// Lower corner and side of the domain `O`.
    pub lower: Option<Vec<f64>>,
    pub side: Option<f64>,
    /// Cubes per axis for the partition recovery.
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    /// Strictly decreasing.
    pub rho: Vec<f64>,
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    /// Strictly increasing.
    pub t: Vec<f64>,
    /// Nodes per edge; strictly increasing when several are given.
    pub resolution: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetFunctionSpec {
    /// `G(Q) = c·λ(Q)`.
    ScaledMeasure { c: f64 },
    /// `G(Q) = ∫_Q (c0 + g·y) dy`; `g` is padded with zeros.
    AffineDensity { c0: f64, g: [f64; 3] },
    /// `G(Q) = m̂(u; Q)` for the configured integrand and affine `u`.
    Dirichlet,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSpec {
    pub depth: u32,
    pub slack: f64,
    /// Run the variant admitting negative values.
    pub signed: bool,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            depth: 6,
            slack: 0.0,
            signed: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSpec {
    pub method: DensityMethod,
    pub tail: usize,
    pub richardson: bool,
    pub allow_noncoercive: bool,
    /// Random cubes per ρ for derivative estimates.
    pub samples: usize,
    pub centered_only: bool,
    /// Subcubes per axis of the quadrature over `O`.
    pub quadrature_cells: usize,
    pub quadrature_rule: QuadratureRule,
    /// Mesh cells per unit length for the H-diagnostic.
    pub cells_per_unit: usize,
    pub tolerance: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            method: DensityMethod::ConstantFamily,
            tail: gammalim::schedule::DEFAULT_TAIL,
            richardson: false,
            allow_noncoercive: false,
            samples: 16,
            centered_only: false,
            quadrature_cells: 2,
            quadrature_rule: QuadratureRule::Midpoint,
            cells_per_unit: 16,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// File stem; defaults to the operation name.
    pub prefix: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub operation: Option<Operation>,
    pub seed: Option<u64>,
    pub integrand: Option<IntegrandSpec>,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub schedules: Schedules,
    #[serde(default)]
    pub solver: SolverConfig,
    pub set_function: Option<SetFunctionSpec>,
    #[serde(default)]
    pub envelope: EnvelopeSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path).map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ValidationError(format!("malformed config {}: {e}", path.display())))
    }

    pub fn prefix(&self, op: Operation) -> String {
        self.output.prefix.clone().unwrap_or_else(|| op.as_str().replace('-', "_"))
    }

    /// Checks everything that does not need a solve; `seed` already merges `--seed`.
    pub fn validate(&self, op: Operation) -> Result<(), ValidationError> {
        let s = &self.schedules;
        if !strictly(&s.rho, |a, b| b < a) {
            return invalid("schedules.rho must be strictly decreasing and positive");
        }
        if !strictly(&s.eps, |a, b| b < a) {
            return invalid("schedules.eps must be strictly decreasing and positive");
        }
        if !strictly(&s.t, |a, b| b > a) {
            return invalid("schedules.t must be strictly increasing and positive");
        }
        let res: Vec<f64> = s.resolution.iter().map(|&r| r as f64).collect();
        if !strictly(&res, |a, b| b > a) || s.resolution.iter().any(|&r| r < 2) {
            return invalid("schedules.resolution must be strictly increasing with at least 2 nodes per edge");
        }
        self.solver.validate().map_err(|e| ValidationError(format!("solver: {e}")))?;

        let needs_integrand = !matches!(op, Operation::Envelope | Operation::Derivative) || matches!(self.set_function, Some(SetFunctionSpec::Dirichlet));
        if needs_integrand && self.integrand.is_none() {
            return invalid(format!("operation `{op}` needs an [integrand] table"));
        }
        if matches!(op, Operation::Envelope | Operation::Derivative) && self.set_function.is_none() {
            return invalid(format!("operation `{op}` needs a [set_function] table"));
        }
        if self.randomized(op) && self.seed.is_none() {
            return invalid(format!("operation `{op}` uses random starts or random cubes; set `seed` or pass --seed"));
        }
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { invalid(format!("operation `{op}` needs {what}")) };
        let g = &self.geometry;
        match op {
            Operation::Cell => {
                need(g.x.is_some(), "geometry.x")?;
                need(g.rho.is_some(), "geometry.rho")?;
                need(g.xi.len() == 1, "exactly one geometry.xi")?;
                need(!s.resolution.is_empty(), "schedules.resolution")?;
            }
            Operation::Homogenize => {
                need(!g.xi.is_empty(), "at least one geometry.xi")?;
                need(g.n_max.is_some_and(|n| n >= 1), "geometry.n_max >= 1")?;
                need(!s.resolution.is_empty(), "schedules.resolution")?;
                if !g.points.is_empty() {
                    need(!s.rho.is_empty() && !s.t.is_empty(), "schedules.rho and schedules.t for the H-diagnostic")?;
                }
            }
            Operation::Envelope => {
                need(g.lower.is_some() && g.side.is_some(), "geometry.lower and geometry.side")?;
            }
            Operation::Derivative => {
                need(g.lower.is_some() && g.side.is_some(), "geometry.lower and geometry.side")?;
                need(!g.points.is_empty(), "geometry.points")?;
                need(!s.rho.is_empty(), "schedules.rho")?;
            }
            Operation::Density => {
                need(g.x.is_some() && g.v.is_some(), "geometry.x and geometry.v")?;
                need(g.xi.len() == 1, "exactly one geometry.xi")?;
                self.density_schedules(op)?;
            }
            Operation::Relax | Operation::GammaGap => {
                need(g.lower.is_some() && g.side.is_some(), "geometry.lower and geometry.side")?;
                need(g.xi.len() == 1, "exactly one geometry.xi (gradient of the affine field)")?;
                self.density_schedules(op)?;
                if op == Operation::GammaGap {
                    need(g.k.is_some_and(|k| k >= 1), "geometry.k >= 1")?;
                }
            }
        }
        if let (Some(side), Some(lower)) = (g.side, &g.lower) {
            if !(side > 0.0 && side.is_finite()) || lower.is_empty() || lower.len() > 3 {
                return invalid("geometry.side must be positive and geometry.lower must have 1 to 3 entries");
            }
        }
        if let Some(rho) = g.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return invalid("geometry.rho must be positive");
            }
        }
        Ok(())
    }

    fn density_schedules(&self, op: Operation) -> Result<(), ValidationError> {
        let s = &self.schedules;
        match self.estimator.method {
            DensityMethod::FrozenDac => {
                if s.resolution.is_empty() {
                    return invalid(format!("operation `{op}` with frozen_dac needs schedules.resolution"));
                }
            }
            _ => {
                if s.rho.is_empty() || s.resolution.is_empty() {
                    return invalid(format!("operation `{op}` needs schedules.rho and schedules.resolution"));
                }
            }
        }
        Ok(())
    }

    fn randomized(&self, op: Operation) -> bool {
        let multistart = self.solver.multistart_count > 1;
        match op {
            Operation::Derivative => !self.estimator.centered_only && self.estimator.samples > 0 || multistart,
            Operation::Envelope => multistart && matches!(self.set_function, Some(SetFunctionSpec::Dirichlet)),
            _ => multistart,
        }
    }

    /// The single configured gradient as an `m × d` matrix.
    pub fn xi(&self, m: usize, d: usize) -> Result<Matrix, ValidationError> {
        let data = self.geometry.xi.first().cloned().unwrap_or_default();
        matrix(data, m, d)
    }

    pub fn xis(&self, m: usize, d: usize) -> Result<Vec<Matrix>, ValidationError> {
        self.geometry.xi.iter().map(|x| matrix(x.clone(), m, d)).collect()
    }

    pub fn domain(&self) -> Result<Cube, ValidationError> {
        match (&self.geometry.lower, self.geometry.side) {
            (Some(lower), Some(side)) => Ok(Cube::new(lower.clone(), side)),
            _ => invalid("geometry.lower and geometry.side are required"),
        }
    }

    /// Solver settings with the resolved seed.
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            rng_seed: self.seed.unwrap_or(self.solver.rng_seed),
            ..self.solver.clone()
        }
    }
}

fn matrix(data: Vec<f64>, m: usize, d: usize) -> Result<Matrix, ValidationError> {
    if data.len() != m * d {
        return invalid(format!("geometry.xi entries need m·d = {} values, got {}", m * d, data.len()));
    }
    Ok(Matrix::from_row_major(m, d, data))
}

fn strictly(values: &[f64], ordered: impl Fn(f64, f64) -> bool) -> bool {
    values.iter().all(|v| *v > 0.0 && v.is_finite()) && values.windows(2).all(|w| ordered(w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> ExperimentConfig {
        toml::from_str(s).unwrap()
    }

    const HOMOG: &str = r#"
operation = "homogenize"
[integrand]
name = "quadratic_coeff_1d"
a = [1.0, 4.0]
[geometry]
xi = [[1.0]]
n_max = 2
[schedules]
resolution = [17]
"#;

    #[test]
    fn homogenize_config_validates() {
        let c = parse(HOMOG);
        assert_eq!(c.operation, Some(Operation::Homogenize));
        c.validate(Operation::Homogenize).unwrap();
        assert_eq!(c.prefix(Operation::GammaGap), "gamma_gap");
    }

    #[test]
    fn increasing_rho_is_named() {
        let mut c = parse(HOMOG);
        c.schedules.rho = vec![0.1, 0.2];
        let err = c.validate(Operation::Homogenize).unwrap_err();
        assert!(err.0.contains("schedules.rho"));
    }

    #[test]
    fn multistart_needs_seed() {
        let mut c = parse(HOMOG);
        c.solver.multistart_count = 4;
        assert!(c.validate(Operation::Homogenize).unwrap_err().0.contains("seed"));
        c.seed = Some(3);
        c.validate(Operation::Homogenize).unwrap();
        assert_eq!(c.solver().rng_seed, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("operation = \"cell\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn set_function_tagged() {
        let c = parse("[set_function]\nkind = \"affine_density\"\nc0 = 0.0\ng = [1.0, 0.0, 0.0]\n");
        assert_eq!(c.set_function, Some(SetFunctionSpec::AffineDensity { c0: 0.0, g: [1.0, 0.0, 0.0] }));
    }
}
