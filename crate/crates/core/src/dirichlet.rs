//! Discrete local Dirichlet infima `m̂_ε(u; O)` on cubes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Assembler, BoundaryData, CellMask, Cube, CubeDomain, DiscreteField, QuadratureChoice, DEFAULT_RESOLUTION_CAP};
use crate::integrand::Integrand;
use crate::lbfgs::{self, LbfgsOptions, LineSearch};
use crate::matrix::Matrix;

/// Volume fractions of the up-slope part tried by laminate starts, in order.
const SAWTOOTH_FRACTIONS: [f64; 7] = [0.5, 0.25, 0.75, 0.375, 0.625, 0.125, 0.875];
/// Cells per sawtooth period.
const SAWTOOTH_PERIOD: usize = 8;
/// Slope jump of a sawtooth start; `2` links the wells `±1` of a double well.
const SAWTOOTH_JUMP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Tolerance on `‖∇E‖∞ / h^d`, a pointwise residual.
    pub gradient_tolerance: f64,
    pub memory: usize,
    pub line_search: LineSearch,
    /// Total number of starts at the coarsest level, the zero start included.
    pub multistart_count: usize,
    pub rng_seed: u64,
    /// Number of dyadic mesh levels ending at the domain's resolution.
    pub refinement_levels: usize,
    /// Largest relative decrease between the last two levels still counted as settled.
    pub stagnation_threshold: f64,
    pub quadrature: QuadratureChoice,
    pub resolution_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-8,
            memory: 12,
            line_search: LineSearch::default(),
            multistart_count: 1,
            rng_seed: 0,
            refinement_levels: 1,
            stagnation_threshold: 1e-3,
            quadrature: QuadratureChoice::Auto,
            resolution_cap: DEFAULT_RESOLUTION_CAP,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidParameter {
                name: "gradient_tolerance",
                reason: format!("must be positive, got {}", self.gradient_tolerance),
            });
        }
        if self.multistart_count == 0 {
            return Err(Error::InvalidParameter {
                name: "multistart_count",
                reason: "need at least one start".into(),
            });
        }
        if self.refinement_levels == 0 {
            return Err(Error::InvalidParameter {
                name: "refinement_levels",
                reason: "need at least one level".into(),
            });
        }
        if self.memory == 0 {
            return Err(Error::InvalidParameter {
                name: "memory",
                reason: "L-BFGS memory must be positive".into(),
            });
        }
        if !(self.line_search.armijo > 0.0 && self.line_search.armijo < 1.0 && self.line_search.shrink > 0.0 && self.line_search.shrink < 1.0) {
            return Err(Error::InvalidParameter {
                name: "line_search",
                reason: "armijo and shrink must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Minimize `∫_O L(x, v, ∇v)` over `v ∈ u_bd + W₀^{1,p}(O)`, optionally with
/// `holes` removed from `O` (their closures carry the boundary values).
#[derive(Debug, Clone)]
pub struct CellProblem {
    pub integrand: Integrand,
    pub domain: CubeDomain,
    pub boundary: BoundaryData,
    pub holes: Vec<Cube>,
    pub config: SolverConfig,
    /// Only used to label output rows.
    pub eps: f64,
    /// Additional starting perturbations (free values at the coarsest level).
    pub extra_starts: Vec<Vec<f64>>,
}

impl CellProblem {
    pub fn new(integrand: Integrand, domain: CubeDomain, boundary: BoundaryData, config: SolverConfig) -> Self {
        Self {
            integrand,
            domain,
            boundary,
            holes: Vec::new(),
            config,
            eps: 1.0,
            extra_starts: Vec::new(),
        }
    }

    /// Affine data `v₀ + ξ(y − anchor)`.
    pub fn affine(integrand: Integrand, domain: CubeDomain, v0: Vec<f64>, xi: Matrix, anchor: Vec<f64>, config: SolverConfig) -> Self {
        Self::new(integrand, domain, BoundaryData::affine(v0, xi, anchor), config)
    }

    /// Linear data `y ↦ ξ·y`, the cell-problem boundary condition.
    pub fn linear(integrand: Integrand, domain: CubeDomain, xi: Matrix, config: SolverConfig) -> Self {
        Self::new(integrand, domain, BoundaryData::linear(xi), config)
    }

    pub fn with_holes(mut self, holes: Vec<Cube>) -> Self {
        self.holes = holes;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    fn components(&self) -> usize {
        self.integrand.components()
    }

    /// Resolutions of the refinement ladder, coarsest first.
    pub fn levels(&self) -> Vec<usize> {
        let mut out = vec![self.domain.resolution()];
        if matches!(self.boundary, BoundaryData::Nodal(_)) {
            return out;
        }
        while out.len() < self.config.refinement_levels {
            let r = out[0];
            if (r - 1) % 2 != 0 || (r - 1) / 2 < 1 {
                break;
            }
            out.insert(0, (r - 1) / 2 + 1);
        }
        out
    }

    fn template(&self, resolution: usize) -> Result<DiscreteField> {
        let dom = self.domain.with_resolution(resolution)?;
        let f = DiscreteField::new(dom.clone(), self.components(), self.boundary.clone())?;
        if self.holes.is_empty() {
            Ok(f)
        } else {
            f.with_mask(CellMask::excluding(&dom, &self.holes))
        }
    }

    fn xi_scale(&self) -> f64 {
        match &self.boundary {
            BoundaryData::Affine { xi, .. } => xi.norm(),
            BoundaryData::Nodal(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StartKind {
    Zero,
    Sawtooth { axis: usize, fraction: f64 },
    Random,
    Supplied,
    /// Refinement of the previous level's best field.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub level: usize,
    pub resolution: usize,
    pub start_id: usize,
    pub kind: StartKind,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Row of the cell-solution CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub rho: f64,
    pub eps: f64,
    pub resolution: usize,
    pub start_id: usize,
    pub value: f64,
    pub normalized_value: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    /// Best discrete energy; an upper bound on the continuum infimum.
    pub value: f64,
    /// `value / λ(O)`.
    pub normalized_value: f64,
    pub minimizer: DiscreteField,
    /// Best value reached on each level, coarsest first.
    pub level_values: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub starts: Vec<StartRecord>,
    pub best_start: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Energy of the unperturbed boundary field on the finest mesh.
    pub boundary_energy: f64,
    pub rho: f64,
    pub eps: f64,
}

impl CellSolution {
    pub fn rows(&self) -> Vec<CellRow> {
        let vol = self.minimizer.domain().volume();
        self.starts
            .iter()
            .map(|s| CellRow {
                rho: self.rho,
                eps: self.eps,
                resolution: s.resolution,
                start_id: s.start_id,
                value: s.value,
                normalized_value: s.value / vol,
                grad_norm: s.grad_norm,
                converged: self.converged,
            })
            .collect()
    }
}

fn sawtooth_start(template: &DiscreteField, axis: usize, fraction: f64) -> Vec<f64> {
    let dom = template.domain();
    let h = dom.spacing();
    let m = template.components();
    let up_cells = (fraction * SAWTOOTH_PERIOD as f64).round();
    let up = SAWTOOTH_JUMP * (1.0 - fraction);
    let down = SAWTOOTH_JUMP * fraction;
    let mut out = Vec::with_capacity(template.free_len());
    for &k in template.free_nodes() {
        let s = (dom.node_index(k)[axis] % SAWTOOTH_PERIOD) as f64;
        let val = if s <= up_cells {
            up * s * h
        } else {
            up * up_cells * h - down * (s - up_cells) * h
        };
        out.extend(std::iter::repeat(val).take(m));
    }
    out
}

fn lbfgs_options(config: &SolverConfig, domain: &CubeDomain, xi_scale: f64) -> LbfgsOptions {
    let h = domain.spacing();
    LbfgsOptions {
        max_iterations: config.max_iterations,
        memory: config.memory,
        gradient_tolerance: config.gradient_tolerance,
        gradient_scale: 1.0 / h.powi(domain.dim() as i32),
        initial_step: 0.5 * h * (1.0 + xi_scale),
        line_search: config.line_search,
    }
}

fn run_start(asm: &Assembler, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<lbfgs::LbfgsOutcome> {
    lbfgs::minimize(|x, g| asm.energy_and_gradient(x, g), x0, opts)
}

/// Best discrete value over multistart descent and a refinement ladder.
pub fn solve_cell(problem: &CellProblem) -> Result<CellSolution> {
    problem.config.validate()?;
    let l = &problem.integrand;
    if l.dim() != problem.domain.dim() {
        return Err(Error::DimensionMismatch(format!(
            "integrand has d = {}, domain has d = {}",
            l.dim(),
            problem.domain.dim()
        )));
    }
    let cfg = &problem.config;
    let levels = problem.levels();
    let xi_scale = problem.xi_scale();
    let mut starts = Vec::new();
    let mut level_values = Vec::new();

    // coarsest level: multistart
    let coarse = problem.template(levels[0])?;
    let rule = cfg.quadrature.resolve(l, coarse.domain());
    let asm = Assembler::new(l, &coarse, rule)?;
    let opts = lbfgs_options(cfg, coarse.domain(), xi_scale);

    let mut candidates: Vec<(StartKind, Vec<f64>)> = vec![(StartKind::Zero, vec![0.0; coarse.free_len()])];
    for x in &problem.extra_starts {
        if x.len() == coarse.free_len() {
            candidates.push((StartKind::Supplied, x.clone()));
        }
    }
    let d = coarse.domain().dim();
    let mut saw = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let amp = 0.5 * coarse.domain().spacing() * (1.0 + xi_scale);
    for _ in 1..cfg.multistart_count {
        if saw < d * SAWTOOTH_FRACTIONS.len() {
            let axis = saw % d;
            let fraction = SAWTOOTH_FRACTIONS[saw / d];
            candidates.push((StartKind::Sawtooth { axis, fraction }, sawtooth_start(&coarse, axis, fraction)));
            saw += 1;
        } else {
            let x = (0..coarse.free_len()).map(|_| rng.gen_range(-amp..=amp)).collect();
            candidates.push((StartKind::Random, x));
        }
    }

    let mut best: Option<(usize, lbfgs::LbfgsOutcome)> = None;
    for (id, (kind, x0)) in candidates.into_iter().enumerate() {
        let out = run_start(&asm, x0, &opts)?;
        starts.push(StartRecord {
            level: 0,
            resolution: levels[0],
            start_id: id,
            kind,
            value: out.value,
            grad_norm: out.grad_norm,
            iterations: out.iterations,
        });
        if best.as_ref().is_none_or(|(_, b)| out.value < b.value) {
            best = Some((id, out));
        }
    }
    let (best_start, mut current) = best.expect("at least one start");
    let mut field = coarse.clone().with_free_values(&current.x)?;
    level_values.push(current.value);
    let mut best_value = current.value;
    let mut best_field = field.clone();
    let mut best_grad = current.grad_norm;

    for (lvl, &res) in levels.iter().enumerate().skip(1) {
        let refined = field.refine(cfg.resolution_cap)?;
        let template = problem.template(res)?;
        let m = template.components();
        let pert = refined.perturbation_values();
        let mut x0 = Vec::with_capacity(template.free_len());
        for &k in template.free_nodes() {
            x0.extend_from_slice(&pert[k * m..(k + 1) * m]);
        }
        let rule = cfg.quadrature.resolve(l, template.domain());
        let asm = Assembler::new(l, &template, rule)?;
        let opts = lbfgs_options(cfg, template.domain(), xi_scale);
        current = run_start(&asm, x0, &opts)?;
        starts.push(StartRecord {
            level: lvl,
            resolution: res,
            start_id: best_start,
            kind: StartKind::Refined,
            value: current.value,
            grad_norm: current.grad_norm,
            iterations: current.iterations,
        });
        field = template.with_free_values(&current.x)?;
        level_values.push(current.value);
        if current.value <= best_value {
            best_value = current.value;
            best_field = field.clone();
            best_grad = current.grad_norm;
        }
    }

    let finest = problem.template(*levels.last().expect("nonempty ladder"))?;
    let rule = cfg.quadrature.resolve(l, finest.domain());
    let boundary_energy = crate::grid::energy(l, &finest, rule)?;

    let settled = match level_values.len() {
        0 | 1 => true,
        n => {
            let (a, b) = (level_values[n - 2], level_values[n - 1]);
            (a - b) / a.abs().max(f64::MIN_POSITIVE) <= cfg.stagnation_threshold
        }
    };
    let vol = problem.domain.volume();
    Ok(CellSolution {
        value: best_value,
        normalized_value: best_value / vol,
        minimizer: best_field,
        level_values,
        resolutions: levels,
        starts,
        best_start,
        grad_norm: best_grad,
        converged: best_grad <= cfg.gradient_tolerance && settled,
        boundary_energy,
        rho: problem.domain.side(),
        eps: problem.eps,
    })
}

/// `m̂_ε(u; O)`: [`solve_cell`] for the rescaled integrand `L(x/ε, v, ξ)`.
pub fn m_eps(boundary: BoundaryData, domain: CubeDomain, l: &Integrand, eps: f64, config: SolverConfig) -> Result<CellSolution> {
    let scaled = l.rescale(eps)?;
    solve_cell(&CellProblem::new(scaled, domain, boundary, config).with_eps(eps))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubadditivityReport {
    pub whole: f64,
    pub parts: Vec<f64>,
    pub remainder: f64,
    /// `Σ parts + remainder − whole`; nonnegative when the inequality holds.
    pub margin: f64,
    pub tolerance: f64,
    pub holds: bool,
    /// Values of the whole problem on a refinement ladder, coarsest first.
    pub refinement_values: Vec<f64>,
    pub refinement_monotone: bool,
}

/// Checks `m̂(u; V) ≤ Σ m̂(u; Q_i) + m̂(u; V ∖ ∪Q̄_i)` on a common mesh.
///
/// The cubes must be pairwise disjoint, inside `V`, and aligned with the
/// mesh of `V` for the comparison to be exact at the discrete level.
pub fn subadditivity_check(boundary: &BoundaryData, cubes: &[Cube], v: &CubeDomain, l: &Integrand, eps: f64, config: &SolverConfig) -> Result<SubadditivityReport> {
    let outer = v.cube();
    for (i, q) in cubes.iter().enumerate() {
        if !outer.contains_cube(q) {
            return Err(Error::CubeOutsideDomain(i));
        }
        for (j, r) in cubes.iter().enumerate().skip(i + 1) {
            if !q.is_disjoint(r) {
                return Err(Error::OverlappingCubes(i, j));
            }
        }
    }
    let scaled = l.rescale(eps)?;
    let single = SolverConfig {
        refinement_levels: 1,
        ..config.clone()
    };
    let h = v.spacing();

    let mut parts = Vec::with_capacity(cubes.len());
    let mut part_fields = Vec::with_capacity(cubes.len());
    for q in cubes {
        let res = (q.side / h).round() as usize + 1;
        let dom = CubeDomain::from_cube(q, res.max(2))?;
        let sol = solve_cell(&CellProblem::new(scaled.clone(), dom, boundary.clone(), single.clone()))?;
        parts.push(sol.value);
        part_fields.push(sol.minimizer);
    }
    let rem = solve_cell(&CellProblem::new(scaled.clone(), v.clone(), boundary.clone(), single.clone()).with_holes(cubes.to_vec()))?;

    // Glue the local minimizers into one admissible competitor on V.
    let whole_template = DiscreteField::new(v.clone(), scaled.components(), boundary.clone())?;
    let glued = glue(&whole_template, &rem.minimizer, &part_fields);
    let whole = solve_cell(&CellProblem {
        extra_starts: vec![glued],
        ..CellProblem::new(scaled.clone(), v.clone(), boundary.clone(), single.clone())
    })?;

    let sum: f64 = parts.iter().sum::<f64>() + rem.value;
    let margin = sum - whole.value;
    let tolerance = 1e-6 + config.gradient_tolerance * v.volume();

    let ladder = solve_cell(&CellProblem::new(
        scaled,
        v.clone(),
        boundary.clone(),
        SolverConfig {
            refinement_levels: config.refinement_levels.max(2),
            ..config.clone()
        },
    ))?;
    let refinement_monotone = ladder
        .level_values
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0) + config.gradient_tolerance * v.volume());

    Ok(SubadditivityReport {
        whole: whole.value,
        parts,
        remainder: rem.value,
        margin,
        tolerance,
        holds: margin >= -tolerance,
        refinement_values: ladder.level_values,
        refinement_monotone,
    })
}

/// Free values on `template` taken from the remainder field and, at nodes
/// inside a cube, from that cube's field.
fn glue(template: &DiscreteField, remainder: &DiscreteField, parts: &[DiscreteField]) -> Vec<f64> {
    let dom = template.domain();
    let m = template.components();
    let rem_vals = remainder.perturbation_values();
    let mut out = Vec::with_capacity(template.free_len());
    for &k in template.free_nodes() {
        let x = dom.node_coords(k);
        let mut val = rem_vals[k * m..(k + 1) * m].to_vec();
        for p in parts {
            let pd = p.domain();
            if pd.cube().contains_point(&x) {
                let lo = pd.lower();
                let h = pd.spacing();
                let n = pd.resolution();
                let mut idx = 0;
                let mut mult = 1;
                for j in 0..x.len() {
                    idx += ((x[j] - lo[j]) / h).round() as usize * mult;
                    mult *= n;
                }
                val.copy_from_slice(&p.perturbation_values()[idx * m..(idx + 1) * m]);
                break;
            }
        }
        out.extend(val);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrand::{make_builtin, BuiltinName, BuiltinParams};

    fn quad14() -> Integrand {
        make_builtin(
            BuiltinName::QuadraticCoeff1d,
            &BuiltinParams {
                a: Some(vec![1.0, 4.0]),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn convex_affine_is_optimal() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(4.0), d: Some(2), ..Default::default() }).unwrap();
        let xi = Matrix::from_row_major(1, 2, vec![0.7, -0.4]);
        let expect = xi.norm().powi(4);
        let dom = CubeDomain::centered(&[0.3, 0.1], 0.5, 9).unwrap();
        let sol = solve_cell(&CellProblem::affine(l, dom, vec![1.0], xi, vec![0.3, 0.1], SolverConfig::default())).unwrap();
        assert!((sol.normalized_value - expect).abs() <= 1e-8 * expect);
        assert!(sol.converged);
    }

    #[test]
    fn harmonic_mean_on_integer_cells() {
        let l = quad14();
        for n in [1.0, 2.0, 3.0] {
            let dom = CubeDomain::cell(1, n, 8 * n as usize + 1).unwrap();
            let sol = solve_cell(&CellProblem::linear(l.clone(), dom, Matrix::scalar(1.0), SolverConfig::default())).unwrap();
            assert!((sol.normalized_value - 1.6).abs() < 1e-8, "n = {n}: {}", sol.normalized_value);
            assert!(sol.value <= sol.boundary_energy);
        }
    }

    #[test]
    fn double_well_sawtooth_reaches_zero() {
        let l = make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap();
        let dom = CubeDomain::cell(1, 1.0, 65).unwrap();
        let cfg = SolverConfig {
            multistart_count: 4,
            ..Default::default()
        };
        let sol = solve_cell(&CellProblem::linear(l, dom, Matrix::scalar(0.0), cfg)).unwrap();
        assert!(sol.normalized_value <= 0.02, "{}", sol.normalized_value);
        assert!((sol.boundary_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_ladder_is_monotone() {
        let l = quad14();
        let dom = CubeDomain::cell(1, 1.0, 33).unwrap();
        let cfg = SolverConfig {
            refinement_levels: 3,
            ..Default::default()
        };
        let sol = solve_cell(&CellProblem::linear(l, dom, Matrix::scalar(1.0), cfg)).unwrap();
        assert_eq!(sol.resolutions, vec![9, 17, 33]);
        for w in sol.level_values.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn m_eps_matches_periodic_cell() {
        let l = quad14();
        let dom = CubeDomain::cell(1, 1.0, 33).unwrap();
        let sol = m_eps(BoundaryData::linear(Matrix::scalar(1.0)), dom.clone(), &l, 0.25, SolverConfig::default()).unwrap();
        assert!((sol.normalized_value - 1.6).abs() < 1e-6);
        let direct = solve_cell(&CellProblem::linear(l.clone(), dom.clone(), Matrix::scalar(1.0), SolverConfig::default())).unwrap();
        let unit = m_eps(BoundaryData::linear(Matrix::scalar(1.0)), dom, &l, 1.0, SolverConfig::default()).unwrap();
        assert_eq!(direct.value, unit.value);
    }

    #[test]
    fn constant_shift_is_invisible() {
        let l = quad14();
        let dom = CubeDomain::cell(1, 2.0, 17).unwrap();
        let a = solve_cell(&CellProblem::affine(l.clone(), dom.clone(), vec![0.0], Matrix::scalar(1.0), vec![0.0], SolverConfig::default())).unwrap();
        let b = solve_cell(&CellProblem::affine(l, dom, vec![5.0], Matrix::scalar(1.0), vec![0.0], SolverConfig::default())).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
    }

    #[test]
    fn subadditivity_halves_and_degenerate() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams::default()).unwrap();
        let v = CubeDomain::cell(1, 1.0, 17).unwrap();
        let bd = BoundaryData::linear(Matrix::scalar(1.5));
        let halves = [Cube::new(vec![0.0], 0.5), Cube::new(vec![0.5], 0.5)];
        let rep = subadditivity_check(&bd, &halves, &v, &l, 1.0, &SolverConfig::default()).unwrap();
        assert!(rep.margin.abs() < 1e-6);
        assert!(rep.holds);
        let rep = subadditivity_check(&bd, &[], &v, &l, 1.0, &SolverConfig::default()).unwrap();
        assert_eq!(rep.margin, 0.0);

        let dw = make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap();
        let cfg = SolverConfig {
            multistart_count: 4,
            ..Default::default()
        };
        let v = CubeDomain::cell(1, 1.0, 65).unwrap();
        let rep = subadditivity_check(&BoundaryData::linear(Matrix::scalar(0.0)), &halves, &v, &dw, 1.0, &cfg).unwrap();
        assert!(rep.holds, "{rep:?}");
    }

    #[test]
    fn overlapping_cubes_rejected() {
        let l = quad14();
        let v = CubeDomain::cell(1, 1.0, 9).unwrap();
        let bd = BoundaryData::linear(Matrix::scalar(1.0));
        let r = subadditivity_check(&bd, &[Cube::new(vec![0.0], 0.5), Cube::new(vec![0.25], 0.5)], &v, &l, 1.0, &SolverConfig::default());
        assert!(matches!(r, Err(Error::OverlappingCubes(0, 1))));
        let r = subadditivity_check(&bd, &[Cube::new(vec![0.75], 0.5)], &v, &l, 1.0, &SolverConfig::default());
        assert!(matches!(r, Err(Error::CubeOutsideDomain(0))));
    }
}
