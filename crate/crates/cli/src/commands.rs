//! One function per operation. Each writes its artifacts and returns the
//! one-line summary printed by `main`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gammalim::dirichlet::{solve_cell, CellProblem};
use gammalim::gammadiag::{dirichlet_free_gap, sandwich_report, SandwichConfig};
use gammalim::grid::{BoundaryData, CubeDomain, DiscreteField};
use gammalim::homogenize::{format_xi, h_diagnostic, homogenized_density, HomogenizationConfig};
use gammalim::relax::{density, relaxed_functional, DensityConfig, SampleQuadrature};
use gammalim::setfn::{lower_derivative, vitali_envelope, vitali_envelope_signed, CubeSetFunction, DerivativeOptions, VitaliOptions};
use gammalim::verify::{run_suite, Suite, VerifyOptions};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, Operation, SetFunctionSpec, ValidationError};

/// A computation finished but produced nothing usable.
#[derive(Debug)]
pub struct SolverFailure(pub String);

impl fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SolverFailure {}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SolverFailure(format!("{what} is not finite ({v})")).into())
    }
}

/// Output directory with write-then-rename file creation.
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let target = self.dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(data)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&target).with_context(|| format!("writing {}", target.display()))?;
        Ok(())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let data = w.into_inner().map_err(|e| e.into_error())?;
        self.bytes(name, &data)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, &data)
    }
}

pub fn execute(op: Operation, cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String> {
    cfg.validate(op)?;
    let prefix = cfg.prefix(op);
    match op {
        Operation::Cell => cell(cfg, out, &prefix),
        Operation::Homogenize => homogenize(cfg, out, &prefix),
        Operation::Envelope => envelope(cfg, out, &prefix),
        Operation::Derivative => derivative(cfg, out, &prefix),
        Operation::Density => density_op(cfg, out, &prefix),
        Operation::Relax => relax(cfg, out, &prefix),
        Operation::GammaGap => gamma_gap(cfg, out, &prefix),
    }
}

fn zeros_or(v: &Option<Vec<f64>>, m: usize) -> Vec<f64> {
    v.clone().unwrap_or_else(|| vec![0.0; m])
}

fn eps_or_one(cfg: &ExperimentConfig) -> Vec<f64> {
    if cfg.schedules.eps.is_empty() {
        vec![1.0]
    } else {
        cfg.schedules.eps.clone()
    }
}

fn cell(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let family = cfg.integrand.as_ref().expect("validated").family()?;
    let eps = *eps_or_one(cfg).last().expect("nonempty");
    let l = family.member(eps)?;
    let x = cfg.geometry.x.clone().expect("validated");
    let xi = cfg.xi(l.components(), l.dim())?;
    let v = zeros_or(&cfg.geometry.v, l.components());
    let dom = CubeDomain::centered(&x, cfg.geometry.rho.expect("validated"), cfg.schedules.resolution[0])?;
    let sol = solve_cell(&CellProblem::affine(l, dom, v, xi, x, cfg.solver()).with_eps(eps))?;
    finite("cell value", sol.value)?;
    out.csv(&format!("{prefix}.csv"), &sol.rows())?;
    let mut field = Vec::new();
    sol.minimizer.write_csv(&mut field)?;
    out.bytes(&format!("{prefix}_field.csv"), &field)?;
    out.json(
        &format!("{prefix}.json"),
        &json!({
            "value": sol.value,
            "normalized_value": sol.normalized_value,
            "grad_norm": sol.grad_norm,
            "converged": sol.converged,
            "level_values": sol.level_values,
            "resolutions": sol.resolutions,
            "best_start": sol.best_start,
        }),
    )?;
    Ok(format!(
        "cell: m = {:.10e}, normalized {:.10e}, converged {}",
        sol.value, sol.normalized_value, sol.converged
    ))
}

#[derive(Serialize)]
struct HomogRow {
    xi: String,
    kind: &'static str,
    n: Option<f64>,
    resolution: Option<usize>,
    value: f64,
}

fn homogenize(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let l = cfg.integrand.as_ref().expect("validated").build()?;
    let xis = cfg.xis(l.components(), l.dim())?;
    let hcfg = HomogenizationConfig {
        solver: cfg.solver(),
        allow_noncoercive: cfg.estimator.allow_noncoercive,
        tail: cfg.estimator.tail,
        richardson: cfg.estimator.richardson,
    };
    let dens = homogenized_density(&l, &xis, cfg.geometry.n_max.expect("validated"), &cfg.schedules.resolution, &hcfg)?;
    let mut rows = Vec::new();
    for e in &dens.entries {
        let xi = format_xi(&e.xi);
        for c in &e.tail {
            rows.push(HomogRow {
                xi: xi.clone(),
                kind: "cell",
                n: Some(c.t),
                resolution: Some(c.resolution),
                value: c.value,
            });
        }
        if let Some(r) = e.richardson {
            rows.push(HomogRow {
                xi: xi.clone(),
                kind: "richardson",
                n: None,
                resolution: None,
                value: r,
            });
        }
        rows.push(HomogRow {
            xi,
            kind: "estimate",
            n: None,
            resolution: None,
            value: finite("homogenized value", e.value)?,
        });
    }
    out.csv(&format!("{prefix}.csv"), &rows)?;
    let mut summary = json!({
        "entries": dens.entries.iter().map(|e| json!({"xi": format_xi(&e.xi), "value": e.value, "richardson": e.richardson})).collect::<Vec<_>>(),
    });
    if !cfg.geometry.points.is_empty() {
        let rep = h_diagnostic(
            &l,
            &xis[0],
            &cfg.geometry.points,
            &cfg.schedules.rho,
            &cfg.schedules.t,
            cfg.estimator.cells_per_unit,
            cfg.estimator.tolerance,
            &hcfg,
        )?;
        out.csv(&format!("{prefix}_h_diagnostic.csv"), &rep.rows)?;
        summary["h_diagnostic"] = json!({"max_gap": rep.max_gap, "tolerance": rep.tolerance, "numerically_h": rep.numerically_h});
    }
    out.json(&format!("{prefix}.json"), &summary)?;
    let last = dens.entries.last().expect("at least one gradient");
    Ok(format!("homogenize: L_hom({}) = {:.10e} over {} gradient(s)", format_xi(&last.xi), last.value, dens.entries.len()))
}

fn set_function(cfg: &ExperimentConfig) -> Result<CubeSetFunction> {
    let o = cfg.domain()?;
    Ok(match cfg.set_function.expect("validated") {
        SetFunctionSpec::ScaledMeasure { c } => CubeSetFunction::scaled_measure(o, c),
        SetFunctionSpec::AffineDensity { c0, g } => CubeSetFunction::from_density("affine density", o, move |y: &[f64]| c0 + y.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>(), 1),
        SetFunctionSpec::Dirichlet => {
            let l = cfg.integrand.as_ref().expect("validated").build()?;
            let xi = cfg.xi(l.components(), l.dim())?;
            let v = zeros_or(&cfg.geometry.v, l.components());
            let res = *cfg.schedules.resolution.first().ok_or_else(|| ValidationError("a dirichlet set function needs schedules.resolution".into()))?;
            let boundary = BoundaryData::affine(v, xi, o.center());
            CubeSetFunction::dirichlet(l, boundary, cfg.solver(), o, res)
        }
    })
}

fn envelope(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let g = set_function(cfg)?;
    let o = cfg.domain()?;
    let opts = VitaliOptions::at_depth(&o, cfg.envelope.depth, cfg.envelope.slack);
    let r = if cfg.envelope.signed {
        vitali_envelope_signed(&g, &o, &opts)?
    } else {
        vitali_envelope(&g, &o, &opts)?
    };
    let mut packing = Vec::new();
    r.packing.write_csv(&mut packing)?;
    out.bytes(&format!("{prefix}.csv"), &packing)?;
    out.json(
        &format!("{prefix}.json"),
        &json!({
            "value": r.value,
            "depth": cfg.envelope.depth,
            "cubes": r.packing.len(),
            "covered_volume": r.packing.covered_volume(),
            "uncovered_volume": r.packing.uncovered_volume,
            "slack_exceeded": r.slack_exceeded,
        }),
    )?;
    Ok(format!("envelope: V = {:.10e} with {} cubes at depth {}", r.value, r.packing.len(), cfg.envelope.depth))
}

#[derive(Serialize)]
struct DerivativeRow {
    x: String,
    rho: f64,
    inf: f64,
    sup: f64,
    inf_corrected: f64,
    sup_corrected: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";")
}

fn derivative(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let g = set_function(cfg)?;
    let opts = DerivativeOptions {
        samples: cfg.estimator.samples,
        seed: cfg.seed.unwrap_or(0),
        centered_only: cfg.estimator.centered_only,
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for x in &cfg.geometry.points {
        let est = lower_derivative(&g, x, &cfg.schedules.rho, &opts)?;
        for (i, rho) in est.rho_schedule.iter().enumerate() {
            rows.push(DerivativeRow {
                x: join(x),
                rho: *rho,
                inf: est.inf_values[i],
                sup: est.sup_values[i],
                inf_corrected: est.inf_corrected[i],
                sup_corrected: est.sup_corrected[i],
            });
        }
        summary.push(json!({"x": x, "lower": est.lower, "upper": est.upper}));
    }
    out.csv(&format!("{prefix}.csv"), &rows)?;
    out.json(&format!("{prefix}.json"), &summary)?;
    Ok(format!("derivative: {} point(s), {} radii each", cfg.geometry.points.len(), cfg.schedules.rho.len()))
}

fn density_config(cfg: &ExperimentConfig) -> DensityConfig {
    DensityConfig {
        method: cfg.estimator.method,
        rho_schedule: cfg.schedules.rho.clone(),
        eps_schedule: eps_or_one(cfg),
        resolution: cfg.schedules.resolution[0],
        qdac_resolutions: cfg.schedules.resolution.clone(),
        tail: cfg.estimator.tail,
        solver: cfg.solver(),
    }
}

fn density_op(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let family = cfg.integrand.as_ref().expect("validated").family()?;
    let l = family.base();
    let xi = cfg.xi(l.components(), l.dim())?;
    let x = cfg.geometry.x.clone().expect("validated");
    let v = cfg.geometry.v.clone().expect("validated");
    let est = density(&family, &x, &v, &xi, &density_config(cfg))?;
    finite("density", est.value)?;
    out.csv(&format!("{prefix}.csv"), &est.rows())?;
    out.json(&format!("{prefix}.json"), &est)?;
    Ok(format!("density: L0 = {:.10e} (lower proxy {:.10e})", est.value, est.lower_value))
}

fn affine_field(cfg: &ExperimentConfig, m: usize, d: usize) -> Result<DiscreteField> {
    let o = cfg.domain()?;
    if o.dim() != d {
        return Err(ValidationError(format!("geometry.lower has {} entries but the integrand has d = {d}", o.dim())).into());
    }
    let xi = cfg.xi(m, d)?;
    let v = zeros_or(&cfg.geometry.v, m);
    Ok(DiscreteField::affine(CubeDomain::from_cube(&o, 2)?, v, xi, o.lower.clone())?)
}

#[derive(Serialize)]
struct RelaxRow {
    x: String,
    weight: f64,
    density: f64,
}

fn relax(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let family = cfg.integrand.as_ref().expect("validated").family()?;
    let u = affine_field(cfg, family.base().components(), family.base().dim())?;
    let quad = SampleQuadrature {
        cells: cfg.estimator.quadrature_cells,
        rule: cfg.estimator.quadrature_rule,
    };
    let rf = relaxed_functional(&family, &u, &quad, &density_config(cfg))?;
    finite("relaxed functional", rf.total)?;
    let rows: Vec<RelaxRow> = rf
        .points
        .iter()
        .zip(&rf.weights)
        .zip(&rf.estimates)
        .map(|((x, w), e)| RelaxRow {
            x: join(x),
            weight: *w,
            density: e.value,
        })
        .collect();
    out.csv(&format!("{prefix}.csv"), &rows)?;
    out.json(
        &format!("{prefix}.json"),
        &json!({"total": rf.total, "direct_energy": rf.direct_energy, "relaxation_gap": rf.relaxation_gap}),
    )?;
    Ok(format!("relax: F0 = {:.10e}, F = {:.10e}", rf.total, rf.direct_energy))
}

#[derive(Serialize)]
struct RecoveryRow {
    center: String,
    side: f64,
    value: f64,
    normalized_value: f64,
    trace_gap: f64,
    converged: bool,
}

fn gamma_gap(cfg: &ExperimentConfig, out: &mut Artifacts, prefix: &str) -> Result<String> {
    let family = cfg.integrand.as_ref().expect("validated").family()?;
    let u = affine_field(cfg, family.base().components(), family.base().dim())?;
    let quad = SampleQuadrature {
        cells: cfg.estimator.quadrature_cells,
        rule: cfg.estimator.quadrature_rule,
    };
    let dcfg = density_config(cfg);
    let eps = *eps_or_one(cfg).last().expect("nonempty");
    let k = cfg.geometry.k.expect("validated");
    let res = *cfg.schedules.resolution.last().expect("validated");
    let gap = dirichlet_free_gap(&family, &u, k, eps, res, &quad, &dcfg)?;
    finite("recovery value", gap.recovery.value)?;
    finite("density integral", gap.density_integral)?;
    let rows: Vec<RecoveryRow> = gap
        .recovery
        .cells
        .iter()
        .map(|c| RecoveryRow {
            center: join(&c.center),
            side: c.side,
            value: c.value,
            normalized_value: c.normalized_value,
            trace_gap: c.trace_gap,
            converged: c.converged,
        })
        .collect();
    out.csv(&format!("{prefix}.csv"), &rows)?;
    let mut summary = json!({
        "recovery": gap.recovery.value,
        "density_integral": gap.density_integral,
        "direct_energy": gap.relaxed.direct_energy,
        "rel_gap": gap.rel_gap,
        "k": k,
        "eps": eps,
    });
    if !cfg.geometry.points.is_empty() {
        let scfg = SandwichConfig {
            rho_schedule: cfg.schedules.rho.clone(),
            eps_schedule: eps_or_one(cfg),
            resolution: cfg.schedules.resolution[0],
            derivative: DerivativeOptions {
                samples: cfg.estimator.samples,
                seed: cfg.seed.unwrap_or(0),
                centered_only: cfg.estimator.centered_only,
            },
            solver: cfg.solver(),
            tail: cfg.estimator.tail,
            tolerance: cfg.estimator.tolerance,
        };
        let rep = sandwich_report(&family, &u, &cfg.geometry.points, &scfg)?;
        out.csv(&format!("{prefix}_chain.csv"), &rep.rows())?;
        summary["chain"] = json!({"max_violation": rep.max_violation, "tolerance": rep.tolerance, "holds": rep.holds});
    }
    out.json(&format!("{prefix}.json"), &summary)?;
    Ok(format!(
        "gamma-gap: recovery {:.10e}, density integral {:.10e}, relative gap {:.3e}",
        gap.recovery.value, gap.density_integral, gap.rel_gap
    ))
}

/// Runs a named suite; returns the printed lines and whether all passed.
pub fn verify(suite: &str, seed: Option<u64>, out: &mut Artifacts) -> Result<(Vec<String>, bool)> {
    let suite: Suite = suite.parse()?;
    let opts = VerifyOptions {
        seed: seed.unwrap_or(VerifyOptions::default().seed),
    };
    let report = run_suite(suite, &opts)?;
    for t in report.tables()? {
        out.bytes(&t.name, &t.csv)?;
    }
    let lines = report.runs.iter().map(|r| r.verdict.line()).collect();
    Ok((lines, report.passed()))
}
