//! Cell averages `S_ξ(tQ_ρ(x))/λ(tQ_ρ(x))`, periodic homogenized densities
//! and the H-integrand diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{solve_cell, CellProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::CubeDomain;
use crate::integrand::Integrand;
use crate::matrix::Matrix;
use crate::schedule::{check_decreasing, check_increasing, TailEstimate, DEFAULT_TAIL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizationConfig {
    pub solver: SolverConfig,
    /// Run cell problems for integrands with `alpha = 0`.
    pub allow_noncoercive: bool,
    pub tail: usize,
    /// Also report a `1/n` Richardson extrapolation of the periodic tail.
    pub richardson: bool,
}

impl Default for HomogenizationConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            allow_noncoercive: false,
            tail: DEFAULT_TAIL,
            richardson: false,
        }
    }
}

/// One row of the homogenization CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAverage {
    /// Row-major entries of ξ joined by `;`.
    pub xi: String,
    pub rho: f64,
    pub t: f64,
    pub resolution: usize,
    pub value: f64,
    pub converged: bool,
}

pub fn format_xi(xi: &Matrix) -> String {
    xi.as_slice().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

fn require_coercive(l: &Integrand, cfg: &HomogenizationConfig) -> Result<()> {
    if !cfg.allow_noncoercive && !l.bounds().is_coercive() {
        return Err(Error::NotCoercive(l.name().to_string()));
    }
    Ok(())
}

fn solve_average(l: &Integrand, xi: &Matrix, domain: CubeDomain, rho: f64, t: f64, solver: &SolverConfig) -> Result<CellAverage> {
    let resolution = domain.resolution();
    let anchor = domain.center().to_vec();
    let problem = CellProblem::affine(l.clone(), domain, vec![0.0; xi.rows()], xi.clone(), anchor, solver.clone());
    let sol = solve_cell(&problem)?;
    Ok(CellAverage {
        xi: format_xi(xi),
        rho,
        t,
        resolution,
        value: sol.normalized_value,
        converged: sol.converged,
    })
}

/// `S_ξ(tQ_ρ(x))/λ(tQ_ρ(x))` with `resolution` nodes per edge of `tQ_ρ(x)`.
pub fn cell_average(l: &Integrand, xi: &Matrix, x: &[f64], rho: f64, t: f64, resolution: usize, cfg: &HomogenizationConfig) -> Result<CellAverage> {
    require_coercive(l, cfg)?;
    if !(t > 0.0 && rho > 0.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: "scale and cube size must be positive".into(),
        });
    }
    let domain = CubeDomain::centered(x, t * rho, resolution)?;
    solve_average(l, xi, domain, rho, t, &cfg.solver)
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogenizedEntry {
    pub xi: Matrix,
    /// `min_n S_ξ(nY)/n^d` over the computed `n`.
    pub value: f64,
    pub tail: Vec<CellAverage>,
    pub richardson: Option<f64>,
}

fn is_one_periodic(l: &Integrand) -> bool {
    !l.is_x_dependent() || l.period() == Some(1.0)
}

/// `inf_{n ≤ n_max} S_ξ(nY)/n^d` on the cells `(0,n)^d`.
///
/// `resolutions` gives nodes per edge of one period cell, either a single
/// value or one per `n`; the cell `nY` uses `n(r−1)+1` nodes per edge so
/// that breakpoints of periodic coefficients stay on mesh lines.
pub fn estimate_lhom_periodic(l: &Integrand, xi: &Matrix, n_max: usize, resolutions: &[usize], cfg: &HomogenizationConfig) -> Result<HomogenizedEntry> {
    if !is_one_periodic(l) {
        return Err(Error::NotPeriodic(l.name().to_string()));
    }
    require_coercive(l, cfg)?;
    if n_max == 0 {
        return Err(Error::InvalidParameter {
            name: "n_max",
            reason: "must be at least 1".into(),
        });
    }
    if resolutions.is_empty() || (resolutions.len() != 1 && resolutions.len() != n_max) {
        return Err(Error::Schedule {
            name: "resolution",
            expected: "a single value or one value per n",
        });
    }
    let tail: Vec<CellAverage> = (1..=n_max)
        .into_par_iter()
        .map(|n| {
            let r = if resolutions.len() == 1 { resolutions[0] } else { resolutions[n - 1] };
            let domain = CubeDomain::cell(l.dim(), n as f64, n * (r.max(2) - 1) + 1)?;
            solve_average(l, xi, domain, 1.0, n as f64, &cfg.solver)
        })
        .collect::<Result<_>>()?;
    let value = tail.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let richardson = if cfg.richardson && tail.len() >= 2 {
        let a = &tail[tail.len() - 2];
        let b = &tail[tail.len() - 1];
        Some((b.t * b.value - a.t * a.value) / (b.t - a.t))
    } else {
        None
    };
    Ok(HomogenizedEntry {
        xi: xi.clone(),
        value,
        tail,
        richardson,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogenizedDensity {
    pub entries: Vec<HomogenizedEntry>,
}

impl HomogenizedDensity {
    pub fn rows(&self) -> Vec<CellAverage> {
        self.entries.iter().flat_map(|e| e.tail.iter().cloned()).collect()
    }
}

/// Tensor grid over all entries of an `m × d` matrix on `[lo, hi]`.
pub fn xi_grid(m: usize, d: usize, lo: f64, hi: f64, points: usize) -> Result<Vec<Matrix>> {
    if !(1..=5).contains(&points) {
        return Err(Error::InvalidParameter {
            name: "points",
            reason: format!("between 1 and 5 points per entry, got {points}"),
        });
    }
    let axis: Vec<f64> = if points == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
    };
    let k = m * d;
    Ok((0..points.pow(k as u32))
        .map(|mut idx| {
            let data = (0..k)
                .map(|_| {
                    let v = axis[idx % points];
                    idx /= points;
                    v
                })
                .collect();
            Matrix::from_row_major(m, d, data)
        })
        .collect())
}

/// Periodic estimates on a list of gradients, evaluated concurrently.
pub fn homogenized_density(l: &Integrand, xis: &[Matrix], n_max: usize, resolutions: &[usize], cfg: &HomogenizationConfig) -> Result<HomogenizedDensity> {
    let entries = xis
        .par_iter()
        .map(|xi| estimate_lhom_periodic(l, xi, n_max, resolutions, cfg))
        .collect::<Result<_>>()?;
    Ok(HomogenizedDensity { entries })
}

#[derive(Debug, Clone, Serialize)]
pub struct HPoint {
    pub x: Vec<f64>,
    /// `values[i][j]` at `ρ_i`, `t_j`.
    pub values: Vec<Vec<f64>>,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HReport {
    pub points: Vec<HPoint>,
    pub rows: Vec<CellAverage>,
    pub max_gap: f64,
    pub tolerance: f64,
    pub numerically_h: bool,
}

/// Compares iterated limsup and liminf proxies of cell averages at each `x`.
///
/// The cube `tQ_ρ(x)` is meshed with `cells_per_unit` cells per unit length.
#[allow(clippy::too_many_arguments)]
pub fn h_diagnostic(l: &Integrand, xi: &Matrix, xs: &[Vec<f64>], rho_schedule: &[f64], t_schedule: &[f64], cells_per_unit: usize, tolerance: f64, cfg: &HomogenizationConfig) -> Result<HReport> {
    check_decreasing("rho", rho_schedule)?;
    check_increasing("t", t_schedule)?;
    if xs.is_empty() {
        return Err(Error::InvalidParameter {
            name: "x",
            reason: "need at least one sample point".into(),
        });
    }
    require_coercive(l, cfg)?;
    let jobs: Vec<(usize, usize, usize)> = (0..xs.len())
        .flat_map(|p| (0..rho_schedule.len()).flat_map(move |i| (0..t_schedule.len()).map(move |j| (p, i, j))))
        .collect();
    let rows: Vec<CellAverage> = jobs
        .par_iter()
        .map(|&(p, i, j)| {
            let (rho, t) = (rho_schedule[i], t_schedule[j]);
            let side = rho * t;
            let nodes = ((side * cells_per_unit as f64).round() as usize).max(1) + 1;
            cell_average(l, xi, &xs[p], rho, t, nodes, cfg)
        })
        .collect::<Result<_>>()?;
    let (nr, nt) = (rho_schedule.len(), t_schedule.len());
    let points: Vec<HPoint> = xs
        .iter()
        .enumerate()
        .map(|(p, x)| {
            let values: Vec<Vec<f64>> = (0..nr)
                .map(|i| (0..nt).map(|j| rows[(p * nr + i) * nt + j].value).collect())
                .collect();
            let per_rho: Vec<TailEstimate> = values.iter().map(|v| TailEstimate::new(v.clone(), cfg.tail)).collect();
            let upper = TailEstimate::new(per_rho.iter().map(|e| e.upper).collect(), cfg.tail).upper;
            let lower = TailEstimate::new(per_rho.iter().map(|e| e.lower).collect(), cfg.tail).lower;
            HPoint {
                x: x.clone(),
                values,
                upper,
                lower,
                gap: upper - lower,
            }
        })
        .collect();
    let max_gap = points.iter().map(|p| p.gap).fold(0.0, f64::max);
    Ok(HReport {
        points,
        rows,
        max_gap,
        tolerance,
        numerically_h: max_gap <= tolerance,
    })
}
