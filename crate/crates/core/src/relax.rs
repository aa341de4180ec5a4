//! Estimators of the limit density `L₀(x, v, ξ)`, the frozen-variable
//! quasiconvexification, and integration of densities over a field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{solve_cell, CellProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{energy, Cube, CubeDomain, DiscreteField, QuadratureRule};
use crate::integrand::{Integrand, IntegrandFamily};
use crate::matrix::Matrix;
use crate::schedule::{check_decreasing, check_increasing, TailEstimate, DEFAULT_TAIL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    /// `L_ε = L`: one cell problem per ρ.
    ConstantFamily,
    /// Iterated limsup over an ε tail, then a ρ tail.
    EpsFamily,
    /// Unit-cell problem with `(x, v)` frozen.
    FrozenDac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub method: DensityMethod,
    /// Side lengths of `Q_ρ(x)`, strictly decreasing.
    pub rho_schedule: Vec<f64>,
    /// Strictly decreasing; a single entry for constant families.
    pub eps_schedule: Vec<f64>,
    /// Nodes per edge of `Q_ρ(x)`.
    pub resolution: usize,
    /// Nodes per edge of the unit cell for the frozen problem, increasing.
    pub qdac_resolutions: Vec<usize>,
    pub tail: usize,
    pub solver: SolverConfig,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            method: DensityMethod::ConstantFamily,
            rho_schedule: vec![0.5, 0.25, 0.125],
            eps_schedule: vec![1.0],
            resolution: 33,
            qdac_resolutions: vec![33, 65],
            tail: DEFAULT_TAIL,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-major entries of ξ.
    pub xi: Vec<f64>,
    /// Upper (limsup) proxy; the reported density.
    pub value: f64,
    /// Lower (liminf) proxy of the same schedule.
    pub lower_value: f64,
    pub method: DensityMethod,
    pub rho_schedule: Vec<f64>,
    pub eps_schedule: Vec<f64>,
    /// Per-ρ upper proxy over the ε tail (for the frozen method: one entry per resolution).
    pub rho_tail: Vec<f64>,
    /// Per-ρ lower proxy over the ε tail.
    pub rho_tail_lower: Vec<f64>,
    /// `eps_tail[i][j]`: normalized cell value at `ρ_i`, `ε_j`.
    pub eps_tail: Vec<Vec<f64>>,
}

/// Row of the density CSV table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub x: String,
    pub v: String,
    pub xi: String,
    pub method: DensityMethod,
    pub rho: f64,
    pub eps: f64,
    pub value: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(";")
}

impl DensityEstimate {
    pub fn rows(&self) -> Vec<DensityRow> {
        let mut out = Vec::new();
        for (i, rho) in self.rho_schedule.iter().enumerate() {
            for (j, eps) in self.eps_schedule.iter().enumerate() {
                if let Some(v) = self.eps_tail.get(i).and_then(|r| r.get(j)) {
                    out.push(DensityRow {
                        x: join(&self.x),
                        v: join(&self.v),
                        xi: join(&self.xi),
                        method: self.method,
                        rho: *rho,
                        eps: *eps,
                        value: *v,
                    });
                }
            }
        }
        out
    }
}

fn check_dims(l: &Integrand, x: &[f64], v: &[f64], xi: &Matrix) -> Result<()> {
    if x.len() != l.dim() || v.len() != l.components() || xi.rows() != l.components() || xi.cols() != l.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point (|x| = {}, |v| = {}, ξ {}×{}) does not match d = {}, m = {}",
            x.len(),
            v.len(),
            xi.rows(),
            xi.cols(),
            l.dim(),
            l.components()
        )));
    }
    Ok(())
}

/// Iterated tail estimate of `m_ε(u_x; Q_ρ(x))/ρ^d` with affine data
/// `u_x(y) = v + ξ(y − x)`.
pub fn l0_density(family: &IntegrandFamily, x: &[f64], v: &[f64], xi: &Matrix, cfg: &DensityConfig) -> Result<DensityEstimate> {
    check_dims(family.base(), x, v, xi)?;
    check_decreasing("rho", &cfg.rho_schedule)?;
    check_decreasing("eps", &cfg.eps_schedule)?;
    if family.is_constant() && cfg.eps_schedule.len() != 1 {
        return Err(Error::Schedule {
            name: "eps",
            expected: "a single entry for a constant family",
        });
    }
    let members: Vec<Integrand> = cfg.eps_schedule.iter().map(|&e| family.member(e)).collect::<Result<_>>()?;
    let mut eps_tail = Vec::with_capacity(cfg.rho_schedule.len());
    let mut rho_tail = Vec::with_capacity(cfg.rho_schedule.len());
    let mut rho_tail_lower = Vec::with_capacity(cfg.rho_schedule.len());
    for &rho in &cfg.rho_schedule {
        let domain = CubeDomain::centered(x, rho, cfg.resolution)?;
        let mut row = Vec::with_capacity(members.len());
        for (l, &eps) in members.iter().zip(&cfg.eps_schedule) {
            let problem = CellProblem::affine(l.clone(), domain.clone(), v.to_vec(), xi.clone(), x.to_vec(), cfg.solver.clone()).with_eps(eps);
            row.push(solve_cell(&problem)?.normalized_value);
        }
        let est = TailEstimate::new(row.clone(), cfg.tail);
        rho_tail.push(est.upper);
        rho_tail_lower.push(est.lower);
        eps_tail.push(row);
    }
    let method = if family.is_constant() {
        DensityMethod::ConstantFamily
    } else {
        DensityMethod::EpsFamily
    };
    Ok(DensityEstimate {
        x: x.to_vec(),
        v: v.to_vec(),
        xi: xi.as_slice().to_vec(),
        value: TailEstimate::new(rho_tail.clone(), cfg.tail).upper,
        lower_value: TailEstimate::new(rho_tail_lower.clone(), cfg.tail).lower,
        method,
        rho_schedule: cfg.rho_schedule.clone(),
        eps_schedule: cfg.eps_schedule.clone(),
        rho_tail,
        rho_tail_lower,
        eps_tail,
    })
}

/// [`l0_density`] at the tangent map of `u` at `x`.
pub fn l0_along_field(family: &IntegrandFamily, u: &DiscreteField, x: &[f64], cfg: &DensityConfig) -> Result<DensityEstimate> {
    let (v, xi) = u.tangent_at(x)?;
    l0_density(family, x, &v, &xi, cfg)
}

/// `inf ∫_Y L(x, v, ξ + ∇φ)` over zero-trace `φ` on the unit cell, at
/// increasing resolutions. The reported value is the smallest entry.
pub fn qdac_envelope(l: &Integrand, x: &[f64], v: &[f64], xi: &Matrix, resolutions: &[usize], solver: &SolverConfig) -> Result<DensityEstimate> {
    if !l.is_caratheodory() {
        return Err(Error::NotCaratheodory(l.name().to_string()));
    }
    check_dims(l, x, v, xi)?;
    let as_f64: Vec<f64> = resolutions.iter().map(|&r| r as f64).collect();
    check_increasing("qdac_resolutions", &as_f64)?;
    let frozen = l.frozen_at(x, v)?;
    let unit = Cube::unit(l.dim());
    let mut tail = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let domain = CubeDomain::from_cube(&unit, r)?;
        let problem = CellProblem::linear(frozen.clone(), domain, xi.clone(), solver.clone());
        tail.push(solve_cell(&problem)?.normalized_value);
    }
    let value = tail.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DensityEstimate {
        x: x.to_vec(),
        v: v.to_vec(),
        xi: xi.as_slice().to_vec(),
        value,
        lower_value: value,
        method: DensityMethod::FrozenDac,
        rho_schedule: vec![1.0],
        eps_schedule: vec![1.0],
        rho_tail: tail.clone(),
        rho_tail_lower: tail.clone(),
        eps_tail: tail.iter().map(|t| vec![*t]).collect(),
    })
}

/// Density by the configured method.
pub fn density(family: &IntegrandFamily, x: &[f64], v: &[f64], xi: &Matrix, cfg: &DensityConfig) -> Result<DensityEstimate> {
    match cfg.method {
        DensityMethod::FrozenDac => qdac_envelope(family.base(), x, v, xi, &cfg.qdac_resolutions, &cfg.solver),
        DensityMethod::ConstantFamily | DensityMethod::EpsFamily => l0_density(family, x, v, xi, cfg),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrozenSample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub xi: Vec<f64>,
    pub unfrozen: f64,
    pub frozen: f64,
    /// `|unfrozen(ρ) − frozen|` per ρ.
    pub rho_gaps: Vec<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrozenReport {
    pub samples: Vec<FrozenSample>,
    pub max_gap: f64,
}

/// Compares the moving-point cell problem on `Q_ρ(x)` with the frozen unit-cell problem.
pub fn frozen_vs_unfrozen_check(l: &Integrand, samples: &[(Vec<f64>, Vec<f64>, Matrix)], cfg: &DensityConfig) -> Result<FrozenReport> {
    let family = IntegrandFamily::Constant(l.clone());
    let cfg = DensityConfig {
        eps_schedule: vec![1.0],
        ..cfg.clone()
    };
    let samples: Vec<FrozenSample> = samples
        .par_iter()
        .map(|(x, v, xi)| {
            let un = l0_density(&family, x, v, xi, &cfg)?;
            let fr = qdac_envelope(l, x, v, xi, &cfg.qdac_resolutions, &cfg.solver)?;
            let rho_gaps: Vec<f64> = un.rho_tail.iter().map(|u| (u - fr.value).abs()).collect();
            Ok(FrozenSample {
                x: x.clone(),
                v: v.clone(),
                xi: xi.as_slice().to_vec(),
                unfrozen: un.value,
                frozen: fr.value,
                gap: rho_gaps.iter().copied().fold(0.0, f64::max),
                rho_gaps,
            })
        })
        .collect::<Result<_>>()?;
    let max_gap = samples.iter().map(|s| s.gap).fold(0.0, f64::max);
    Ok(FrozenReport { samples, max_gap })
}

/// Tensor quadrature over a cube: `cells` subcubes per axis, `rule` in each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleQuadrature {
    pub cells: usize,
    pub rule: QuadratureRule,
}

impl SampleQuadrature {
    pub fn points(&self, o: &Cube) -> Vec<(Vec<f64>, f64)> {
        let d = o.dim();
        let k = self.cells.max(1);
        let h = o.side / k as f64;
        let reference = self.rule.tensor(d);
        let vol = h.powi(d as i32);
        let mut out = Vec::new();
        for mut c in 0..k.pow(d as u32) {
            let mut corner = vec![0.0; d];
            for (j, cj) in corner.iter_mut().enumerate() {
                *cj = o.lower[j] + (c % k) as f64 * h;
                c /= k;
            }
            for (s, w) in &reference {
                let x = corner.iter().zip(s).map(|(a, b)| a + b * h).collect();
                out.push((x, w * vol));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxedFunctional {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub estimates: Vec<DensityEstimate>,
    /// `Σ wᵢ · density(xᵢ, u(xᵢ), ∇u(xᵢ))`.
    pub total: f64,
    /// `F(u; O)` for the family member at the smallest ε.
    pub direct_energy: f64,
    /// `direct_energy − total`.
    pub relaxation_gap: f64,
}

/// Integrates the estimated density along `u` over its domain.
pub fn relaxed_functional(family: &IntegrandFamily, u: &DiscreteField, quad: &SampleQuadrature, cfg: &DensityConfig) -> Result<RelaxedFunctional> {
    let o = u.domain().cube();
    let pts = quad.points(&o);
    let results: Vec<Result<DensityEstimate>> = pts
        .par_iter()
        .map(|(x, _)| {
            let (v, xi) = u.tangent_at(x)?;
            let est = density(family, x, &v, &xi, cfg)?;
            if !est.value.is_finite() {
                return Err(Error::NonFiniteEnergy { x: x.clone() });
            }
            Ok(est)
        })
        .collect();
    let mut estimates = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => estimates.push(e),
            Err(source) => {
                return Err(Error::DensityFailure {
                    index,
                    source: Box::new(source),
                    partial: estimates,
                })
            }
        }
    }
    let total = pts.iter().zip(&estimates).map(|((_, w), e)| w * e.value).sum();
    let eps_min = cfg.eps_schedule.last().copied().unwrap_or(1.0);
    let member = family.member(eps_min)?;
    let rule = cfg.solver.quadrature.resolve(&member, u.domain());
    let direct_energy = energy(&member, u, rule)?;
    Ok(RelaxedFunctional {
        points: pts.iter().map(|(x, _)| x.clone()).collect(),
        weights: pts.iter().map(|(_, w)| *w).collect(),
        estimates,
        total,
        direct_energy,
        relaxation_gap: direct_energy - total,
    })
}
