//! Recovery by partition, the Dirichlet-versus-free comparison, and the
//! chain of pointwise bounds linking the set-function derivative to the
//! cell densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{solve_cell, CellProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{BoundaryData, Cube, CubeDomain, DiscreteField};
use crate::integrand::IntegrandFamily;
use crate::relax::{l0_density, relaxed_functional, DensityConfig, DensityMethod, RelaxedFunctional, SampleQuadrature};
use crate::schedule::{check_decreasing, TailEstimate, DEFAULT_TAIL};
use crate::setfn::{lower_derivative, CubeSetFunction, DerivativeOptions};

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryCell {
    pub center: Vec<f64>,
    pub side: f64,
    /// `m̂_ε(u_c; Q_i)` with affine data from the tangent map at the center.
    pub value: f64,
    pub normalized_value: f64,
    /// Max distance between the affine data and `u` on the cell's nodes.
    pub trace_gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionRecovery {
    pub k: usize,
    pub eps: f64,
    pub cells: Vec<RecoveryCell>,
    pub value: f64,
}

/// The `k^d` congruent subcubes of `o`, axis 0 fastest.
pub fn partition(o: &Cube, k: usize) -> Vec<Cube> {
    let d = o.dim();
    let s = o.side / k as f64;
    (0..k.pow(d as u32))
        .map(|mut c| {
            let lower = (0..d)
                .map(|j| {
                    let i = c % k;
                    c /= k;
                    o.lower[j] + i as f64 * s
                })
                .collect();
            Cube::new(lower, s)
        })
        .collect()
}

/// `Σ_i m̂_ε(u; Q_i)` over a partition of the domain of `u` into `k^d` cubes,
/// each solved with `resolution` nodes per edge.
pub fn partition_recovery(family: &IntegrandFamily, u: &DiscreteField, k: usize, eps: f64, resolution: usize, solver: &SolverConfig) -> Result<PartitionRecovery> {
    if k == 0 {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: "at least one cube per axis".into(),
        });
    }
    let l = family.member(eps)?;
    let cubes = partition(&u.domain().cube(), k);
    let cells: Vec<RecoveryCell> = cubes
        .par_iter()
        .map(|q| {
            let center = q.center();
            let (v, xi) = u.tangent_at(&center)?;
            let dom = CubeDomain::from_cube(q, resolution)?;
            let mut trace_gap: f64 = 0.0;
            for node in (0..dom.node_count()).filter(|&n| dom.is_boundary_node(n)) {
                let y = dom.node_coords(node);
                let exact = u.tangent_at(&y)?.0;
                let affine = BoundaryData::eval_affine(&v, &xi, &center, &y);
                for (a, b) in exact.iter().zip(&affine) {
                    trace_gap = trace_gap.max((a - b).abs());
                }
            }
            let sol = solve_cell(&CellProblem::affine(l.clone(), dom, v, xi, center.clone(), solver.clone()).with_eps(eps))?;
            Ok(RecoveryCell {
                center,
                side: q.side,
                value: sol.value,
                normalized_value: sol.normalized_value,
                trace_gap,
                converged: sol.converged,
            })
        })
        .collect::<Result<_>>()?;
    let value = cells.iter().map(|c| c.value).sum();
    Ok(PartitionRecovery { k, eps, cells, value })
}

#[derive(Debug, Clone, Serialize)]
pub struct DirichletFreeGap {
    pub recovery: PartitionRecovery,
    pub relaxed: RelaxedFunctional,
    pub density_integral: f64,
    pub volume: f64,
    /// `|recovery − density_integral| / max(|density_integral|, λ(O))`.
    pub rel_gap: f64,
}

/// Partition recovery versus the integral of the estimated density.
pub fn dirichlet_free_gap(
    family: &IntegrandFamily,
    u: &DiscreteField,
    k: usize,
    eps: f64,
    resolution: usize,
    quad: &SampleQuadrature,
    density: &DensityConfig,
) -> Result<DirichletFreeGap> {
    let recovery = partition_recovery(family, u, k, eps, resolution, &density.solver)?;
    let relaxed = relaxed_functional(family, u, quad, density)?;
    let volume = u.domain().volume();
    let density_integral = relaxed.total;
    let rel_gap = (recovery.value - density_integral).abs() / density_integral.abs().max(volume);
    Ok(DirichletFreeGap {
        recovery,
        relaxed,
        density_integral,
        volume,
        rel_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandwichConfig {
    pub rho_schedule: Vec<f64>,
    pub eps_schedule: Vec<f64>,
    /// Nodes per edge of every cube solved.
    pub resolution: usize,
    pub derivative: DerivativeOptions,
    pub solver: SolverConfig,
    pub tail: usize,
    pub tolerance: f64,
}

impl Default for SandwichConfig {
    fn default() -> Self {
        Self {
            rho_schedule: vec![0.2, 0.1, 0.05],
            eps_schedule: vec![1.0],
            resolution: 17,
            derivative: DerivativeOptions {
                samples: 4,
                ..Default::default()
            },
            solver: SolverConfig::default(),
            tail: DEFAULT_TAIL,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichSample {
    pub x: Vec<f64>,
    /// Lower derivative of `Q ↦ m_+(u; Q)` at `x`.
    pub derivative: f64,
    /// `liminf_ρ m_+(u; Q_ρ(x))/ρ^d`.
    pub trace_liminf: f64,
    /// `limsup_ρ m_+(u_x; Q_ρ(x))/ρ^d`.
    pub affine_limsup: f64,
    /// `liminf_ρ m_-(u_x; Q_ρ(x))/ρ^d`.
    pub affine_liminf: f64,
    /// Positive parts of the three consecutive differences.
    pub violations: [f64; 3],
    pub max_violation: f64,
    pub flagged: bool,
}

impl SandwichSample {
    pub fn chain(&self) -> [f64; 4] {
        [self.derivative, self.trace_liminf, self.affine_limsup, self.affine_liminf]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub samples: Vec<SandwichSample>,
    pub max_violation: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Row of the chain table.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub x: String,
    pub derivative: f64,
    pub trace_liminf: f64,
    pub affine_limsup: f64,
    pub affine_liminf: f64,
    pub max_violation: f64,
    pub flagged: bool,
}

impl SandwichReport {
    pub fn rows(&self) -> Vec<SandwichRow> {
        self.samples
            .iter()
            .map(|s| SandwichRow {
                x: s.x.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(";"),
                derivative: s.derivative,
                trace_liminf: s.trace_liminf,
                affine_limsup: s.affine_limsup,
                affine_liminf: s.affine_liminf,
                max_violation: s.max_violation,
                flagged: s.flagged,
            })
            .collect()
    }
}

/// Evaluates the four computable links of the pointwise chain at each sample.
/// `m_+` and `m_-` are the max and min over the ε tail.
pub fn sandwich_report(family: &IntegrandFamily, u: &DiscreteField, xs: &[Vec<f64>], cfg: &SandwichConfig) -> Result<SandwichReport> {
    check_decreasing("rho", &cfg.rho_schedule)?;
    check_decreasing("eps", &cfg.eps_schedule)?;
    let members = cfg.eps_schedule.iter().map(|&e| family.member(e)).collect::<Result<Vec<_>>>()?;
    let ambient = u.domain().cube();
    let field = u.clone();
    let resolution = cfg.resolution;
    let solver = cfg.solver.clone();
    let tail = cfg.tail;
    let m_plus = CubeSetFunction::try_from_fn(format!("m+({})", family.base().name()), ambient, move |q| {
        let dom = CubeDomain::from_cube(q, resolution)?;
        let boundary = field.trace_on(&dom)?;
        let mut values = Vec::with_capacity(members.len());
        for l in &members {
            values.push(solve_cell(&CellProblem::new(l.clone(), dom.clone(), boundary.clone(), solver.clone()))?.value);
        }
        Ok(TailEstimate::new(values, tail).upper)
    })
    .memoized();
    let density_cfg = DensityConfig {
        method: if family.is_constant() {
            DensityMethod::ConstantFamily
        } else {
            DensityMethod::EpsFamily
        },
        rho_schedule: cfg.rho_schedule.clone(),
        eps_schedule: cfg.eps_schedule.clone(),
        resolution: cfg.resolution,
        tail: cfg.tail,
        solver: cfg.solver.clone(),
        ..Default::default()
    };
    let d = u.domain().dim() as i32;
    let samples: Vec<SandwichSample> = xs
        .par_iter()
        .map(|x| {
            let derivative = lower_derivative(&m_plus, x, &cfg.rho_schedule, &cfg.derivative)?.lower;
            let mut trace_values = Vec::with_capacity(cfg.rho_schedule.len());
            for &rho in &cfg.rho_schedule {
                trace_values.push(m_plus.eval(&Cube::centered(x, rho))? / rho.powi(d));
            }
            let trace_liminf = TailEstimate::new(trace_values, cfg.tail).lower;
            let (v, xi) = u.tangent_at(x)?;
            let est = l0_density(family, x, &v, &xi, &density_cfg)?;
            let chain = [derivative, trace_liminf, est.value, est.lower_value];
            let violations = [
                (chain[0] - chain[1]).max(0.0),
                (chain[1] - chain[2]).max(0.0),
                (chain[2] - chain[3]).max(0.0),
            ];
            let max_violation = violations.iter().copied().fold(0.0, f64::max);
            Ok(SandwichSample {
                x: x.clone(),
                derivative,
                trace_liminf,
                affine_limsup: est.value,
                affine_liminf: est.lower_value,
                violations,
                max_violation,
                flagged: max_violation > cfg.tolerance,
            })
        })
        .collect::<Result<_>>()?;
    let max_violation = samples.iter().map(|s| s.max_violation).fold(0.0, f64::max);
    Ok(SandwichReport {
        holds: max_violation <= cfg.tolerance,
        samples,
        max_violation,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::QuadratureRule;
    use crate::integrand::{make_builtin, BuiltinName, BuiltinParams};
    use crate::matrix::Matrix;
    use crate::oracle::harmonic_mean;

    fn quadratic() -> crate::integrand::Integrand {
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
    fn partition_covers_domain() {
        let o = Cube::new(vec![0.0, 1.0], 2.0);
        let parts = partition(&o, 3);
        assert_eq!(parts.len(), 9);
        let vol: f64 = parts.iter().map(Cube::volume).sum();
        assert!((vol - 4.0).abs() < 1e-12);
        for (i, p) in parts.iter().enumerate() {
            assert!(o.contains_cube(p));
            assert!(parts[i + 1..].iter().all(|q| p.is_disjoint(q)));
        }
    }

    #[test]
    fn convex_recovery_equals_energy() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(2.0), d: Some(2), ..Default::default() }).unwrap();
        let xi = Matrix::from_row_major(1, 2, vec![0.3, -0.7]);
        let dom = CubeDomain::cell(2, 1.0, 9).unwrap();
        let u = DiscreteField::affine(dom, vec![0.1], xi.clone(), vec![0.0, 0.0]).unwrap();
        let fam = IntegrandFamily::Constant(l);
        for k in [1, 2, 3] {
            let rec = partition_recovery(&fam, &u, k, 1.0, 5, &SolverConfig::default()).unwrap();
            assert!((rec.value - 0.58).abs() < 1e-9, "k = {k}: {}", rec.value);
            assert!(rec.cells.iter().all(|c| c.trace_gap < 1e-12));
        }
    }

    #[test]
    fn periodic_recovery_is_harmonic_mean() {
        let fam = IntegrandFamily::Rescaled(quadratic());
        let dom = CubeDomain::cell(1, 1.0, 17).unwrap();
        let u = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(1.0), vec![0.0]).unwrap();
        let rec = partition_recovery(&fam, &u, 4, 1.0 / 16.0, 65, &SolverConfig::default()).unwrap();
        let oracle = harmonic_mean(&[1.0, 4.0]);
        assert!((rec.value - oracle).abs() < 1e-8, "{}", rec.value);
    }

    #[test]
    fn gap_for_convex_affine_field() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(4.0), ..Default::default() }).unwrap();
        let fam = IntegrandFamily::Constant(l);
        let dom = CubeDomain::cell(1, 1.0, 9).unwrap();
        let u = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(0.9), vec![0.0]).unwrap();
        let cfg = DensityConfig {
            rho_schedule: vec![0.2, 0.1],
            resolution: 9,
            ..Default::default()
        };
        let gap = dirichlet_free_gap(&fam, &u, 2, 1.0, 9, &SampleQuadrature { cells: 2, rule: QuadratureRule::Gauss2 }, &cfg).unwrap();
        assert!(gap.rel_gap <= 1e-6, "{gap:?}");
    }

    #[test]
    fn sandwich_holds_for_convex_quadratic() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(2.0), ..Default::default() }).unwrap();
        let fam = IntegrandFamily::Constant(l);
        let dom = CubeDomain::cell(1, 1.0, 33).unwrap();
        let u = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(0.5), vec![0.0]).unwrap();
        let rep = sandwich_report(&fam, &u, &[vec![0.5], vec![0.3]], &SandwichConfig::default()).unwrap();
        assert!(rep.holds, "{rep:?}");
        for s in &rep.samples {
            for c in s.chain() {
                assert!((c - 0.25).abs() < 1e-8);
            }
        }
    }
}
