//! Named verification suites. Each criterion is a self-contained run that
//! returns a pass/fail verdict and deterministic CSV tables.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dirichlet::{solve_cell, subadditivity_check, CellProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::gammadiag::{dirichlet_free_gap, sandwich_report, SandwichConfig};
use crate::grid::{BoundaryData, Cube, CubeDomain, DiscreteField, QuadratureRule};
use crate::homogenize::{estimate_lhom_periodic, format_xi, h_diagnostic, HomogenizationConfig};
use crate::integrand::{make_builtin, BuiltinName, BuiltinParams, Integrand, IntegrandFamily};
use crate::matrix::Matrix;
use crate::oracle::{convex_envelope_brute, harmonic_mean, uniform_grid};
use crate::relax::{qdac_envelope, DensityConfig, DensityMethod, SampleQuadrature};
use crate::setfn::{lower_derivative, vitali_envelope, vitali_envelope_signed, vitali_stages, CubeSetFunction, DerivativeOptions, VitaliOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Convex,
    Homog1d,
    Laminate2d,
    Doublewell,
    Vitali,
    Sandwich,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Convex, Suite::Homog1d, Suite::Laminate2d, Suite::Doublewell, Suite::Vitali, Suite::Sandwich];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Convex => "convex",
            Suite::Homog1d => "homog1d",
            Suite::Laminate2d => "laminate2d",
            Suite::Doublewell => "doublewell",
            Suite::Vitali => "vitali",
            Suite::Sandwich => "sandwich",
        }
    }

    /// Criteria run by the suite, in order.
    pub fn criteria(self) -> &'static [CriterionId] {
        use CriterionId::*;
        match self {
            Suite::Convex => &[Jensen],
            Suite::Homog1d => &[Periodic1d, HDiagnostic],
            Suite::Laminate2d => &[Laminate],
            Suite::Doublewell => &[ScalarEnvelope],
            Suite::Vitali => &[VitaliIdentity, SignChecks],
            Suite::Sandwich => &[Subadditivity, DirichletFreeGap, Chain],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownSuite(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionId {
    Jensen,
    Periodic1d,
    Laminate,
    ScalarEnvelope,
    VitaliIdentity,
    SignChecks,
    Subadditivity,
    DirichletFreeGap,
    HDiagnostic,
    Chain,
}

impl CriterionId {
    /// Acceptance number, or `None` for supplementary checks.
    pub fn number(self) -> Option<u8> {
        use CriterionId::*;
        Some(match self {
            Jensen => 1,
            Periodic1d => 2,
            Laminate => 3,
            ScalarEnvelope => 4,
            VitaliIdentity => 5,
            SignChecks => 6,
            Subadditivity => 7,
            DirichletFreeGap => 8,
            HDiagnostic => 9,
            Chain => return None,
        })
    }

    pub fn label(self) -> &'static str {
        use CriterionId::*;
        match self {
            Jensen => "jensen identity",
            Periodic1d => "1d periodic homogenization",
            Laminate => "2d laminate",
            ScalarEnvelope => "scalar quasiconvexification",
            VitaliIdentity => "vitali identity",
            SignChecks => "envelope sign checks",
            Subadditivity => "subadditivity",
            DirichletFreeGap => "dirichlet-free gap",
            HDiagnostic => "h-diagnostic coherence",
            Chain => "pointwise bound chain",
        }
    }

    pub fn runtime_limit(self) -> Duration {
        use CriterionId::*;
        Duration::from_secs(match self {
            Jensen => 10,
            Periodic1d | SignChecks => 30,
            Laminate | DirichletFreeGap => 300,
            ScalarEnvelope | VitaliIdentity => 60,
            Subadditivity | HDiagnostic | Chain => 120,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 7 }
    }
}

/// Outcome of one criterion: `measured ≤ threshold` passes.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub id: CriterionId,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(id: CriterionId, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            id,
            measured,
            threshold,
            passed: measured <= threshold,
            detail,
        }
    }

    /// One line, e.g. `criterion 2 (1d periodic homogenization): PASS ...`.
    pub fn line(&self) -> String {
        let tag = match self.id.number() {
            Some(n) => format!("criterion {n}"),
            None => "check".to_string(),
        };
        format!(
            "{tag} ({}): {} measured {:.3e} threshold {:.1e} | {}",
            self.id.label(),
            if self.passed { "PASS" } else { "FAIL" },
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    /// File name, e.g. `homog1d_tail.csv`.
    pub name: String,
    pub csv: Vec<u8>,
}

fn table<T: Serialize>(name: &str, rows: &[T]) -> Result<Table> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(Table { name: name.to_string(), csv })
}

#[derive(Debug, Clone)]
pub struct CriterionRun {
    pub verdict: Verdict,
    pub tables: Vec<Table>,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub runs: Vec<CriterionRun>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    criterion: String,
    label: &'a str,
    measured: f64,
    threshold: f64,
    passed: bool,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.verdict.passed)
    }

    /// Every table of the suite, the summary first.
    pub fn tables(&self) -> Result<Vec<Table>> {
        let rows: Vec<SummaryRow> = self
            .runs
            .iter()
            .map(|r| SummaryRow {
                criterion: r.verdict.id.number().map_or_else(|| "-".to_string(), |n| n.to_string()),
                label: r.verdict.id.label(),
                measured: r.verdict.measured,
                threshold: r.verdict.threshold,
                passed: r.verdict.passed,
            })
            .collect();
        let mut out = vec![table(&format!("{}_summary.csv", self.suite), &rows)?];
        out.extend(self.runs.iter().flat_map(|r| r.tables.iter().cloned()));
        Ok(out)
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let runs = suite.criteria().iter().map(|&id| run_criterion(id, opts)).collect::<Result<_>>()?;
    Ok(SuiteReport { suite, runs })
}

pub fn run_criterion(id: CriterionId, opts: &VerifyOptions) -> Result<CriterionRun> {
    use CriterionId::*;
    match id {
        Jensen => jensen(opts),
        Periodic1d => periodic_1d(),
        Laminate => laminate(),
        ScalarEnvelope => scalar_envelope(opts),
        VitaliIdentity => vitali_identity(opts),
        SignChecks => sign_checks(opts),
        Subadditivity => subadditivity(opts),
        DirichletFreeGap => dirichlet_free(opts),
        HDiagnostic => h_coherence(),
        Chain => chain(opts),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn two_phase(name: BuiltinName) -> Result<Integrand> {
    make_builtin(
        name,
        &BuiltinParams {
            a: Some(vec![1.0, 4.0]),
            ..Default::default()
        },
    )
}

fn double_well() -> Result<Integrand> {
    make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default())
}

fn nonconvex_solver(seed: u64) -> SolverConfig {
    SolverConfig {
        multistart_count: 8,
        rng_seed: seed,
        ..Default::default()
    }
}

#[derive(Serialize)]
struct JensenRow {
    p: f64,
    d: usize,
    m: usize,
    xi: String,
    value: f64,
    oracle: f64,
    rel_err: f64,
}

fn jensen(opts: &VerifyOptions) -> Result<CriterionRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jobs = Vec::new();
    for p in [2.0, 4.0] {
        for d in [1, 2] {
            for m in [1, 2] {
                for _ in 0..5 {
                    let xi: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    jobs.push((p, d, m, Matrix::from_row_major(m, d, xi)));
                }
            }
        }
    }
    let rows: Vec<JensenRow> = jobs
        .par_iter()
        .map(|(p, d, m, xi)| {
            let l = make_builtin(
                BuiltinName::PPower,
                &BuiltinParams {
                    p: Some(*p),
                    d: Some(*d),
                    m: Some(*m),
                    ..Default::default()
                },
            )?;
            let dom = CubeDomain::cell(*d, 1.0, if *d == 1 { 17 } else { 9 })?;
            let sol = solve_cell(&CellProblem::linear(l, dom, xi.clone(), SolverConfig::default()))?;
            let oracle = xi.as_slice().iter().map(|a| a * a).sum::<f64>().powf(p / 2.0);
            Ok(JensenRow {
                p: *p,
                d: *d,
                m: *m,
                xi: format_xi(xi),
                value: sol.normalized_value,
                oracle,
                rel_err: rel(sol.normalized_value, oracle),
            })
        })
        .collect::<Result<_>>()?;
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::Jensen, worst, 1e-8, format!("{} cell problems, max relative error", rows.len())),
        tables: vec![table("convex_jensen.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct TailRow {
    xi: String,
    n: f64,
    resolution: usize,
    value: f64,
    oracle: f64,
    rel_err: f64,
}

fn periodic_1d() -> Result<CriterionRun> {
    let l = two_phase(BuiltinName::QuadraticCoeff1d)?;
    let oracle = harmonic_mean(&[1.0, 4.0]);
    let cfg = HomogenizationConfig::default();
    let e = estimate_lhom_periodic(&l, &Matrix::scalar(1.0), 4, &[129], &cfg)?;
    let rows: Vec<TailRow> = e
        .tail
        .iter()
        .map(|c| TailRow {
            xi: c.xi.clone(),
            n: c.t,
            resolution: c.resolution,
            value: c.value,
            oracle,
            rel_err: rel(c.value, oracle),
        })
        .collect();
    let err = rel(e.value, oracle);
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::Periodic1d, err, 1e-3, format!("L_hom(1) = {:.8} vs harmonic mean {oracle}", e.value)),
        tables: vec![table("homog1d_tail.csv", &rows)?],
    })
}

fn laminate() -> Result<CriterionRun> {
    let l = two_phase(BuiltinName::Laminate2d)?;
    let cfg = HomogenizationConfig {
        richardson: true,
        ..Default::default()
    };
    let cases = [
        (Matrix::from_row_major(1, 2, vec![1.0, 0.0]), harmonic_mean(&[1.0, 4.0])),
        (Matrix::from_row_major(1, 2, vec![0.0, 1.0]), 0.5 * (1.0 + 4.0)),
    ];
    let entries = cases
        .par_iter()
        .map(|(xi, _)| estimate_lhom_periodic(&l, xi, 2, &[65], &cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (e, (_, oracle)) in entries.iter().zip(&cases) {
        for c in &e.tail {
            rows.push(TailRow {
                xi: c.xi.clone(),
                n: c.t,
                resolution: c.resolution,
                value: c.value,
                oracle: *oracle,
                rel_err: rel(c.value, *oracle),
            });
        }
        worst = worst.max(rel(e.value, *oracle));
        detail.push(format!(
            "{}: {:.5} vs {oracle} (extrapolated {})",
            format_xi(&e.xi),
            e.value,
            e.richardson.map_or_else(|| "-".to_string(), |r| format!("{r:.5}"))
        ));
    }
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::Laminate, worst, 0.02, detail.join("; ")),
        tables: vec![table("laminate2d_tail.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct EnvelopeRow {
    xi: f64,
    value: f64,
    oracle: f64,
    abs_err: f64,
}

fn scalar_envelope(opts: &VerifyOptions) -> Result<CriterionRun> {
    let l = double_well()?;
    let grid = uniform_grid(-3.0, 3.0, 400);
    let solver = nonconvex_solver(opts.seed);
    let rows: Vec<EnvelopeRow> = [0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0]
        .par_iter()
        .map(|&s| {
            let est = qdac_envelope(&l, &[0.0], &[0.0], &Matrix::scalar(s), &[33, 65], &solver)?;
            let oracle = convex_envelope_brute(|t| (t * t - 1.0).powi(2), &grid, s);
            Ok(EnvelopeRow {
                xi: s,
                value: est.value,
                oracle,
                abs_err: (est.value - oracle).abs(),
            })
        })
        .collect::<Result<_>>()?;
    let worst = rows.iter().map(|r| r.abs_err).fold(0.0, f64::max);
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::ScalarEnvelope, worst, 0.02, "max absolute error against grid convexification".into()),
        tables: vec![table("doublewell_envelope.csv", &rows)?],
    })
}

/// Cell midpoints of a `k × k` grid on the unit square.
fn midpoints(k: usize) -> Vec<Vec<f64>> {
    (0..k * k)
        .map(|i| vec![((i % k) as f64 + 0.5) / k as f64, ((i / k) as f64 + 0.5) / k as f64])
        .collect()
}

#[derive(Serialize)]
struct DerivativeRow {
    function: String,
    x: String,
    lower: f64,
}

#[derive(Serialize)]
struct StageRow {
    function: String,
    depth: u32,
    value: f64,
}

fn vitali_identity(opts: &VerifyOptions) -> Result<CriterionRun> {
    let o = Cube::unit(2);
    let h = CubeSetFunction::from_density("y1", o.clone(), |y: &[f64]| y[0], 1);
    let env = vitali_envelope(&h, &o, &VitaliOptions::at_depth(&o, 10, 0.0))?;
    let stages: Vec<StageRow> = vitali_stages(&h, &o, &[2, 4, 6, 8], 0.0)?
        .into_iter()
        .zip([2, 4, 6, 8])
        .map(|((_, value), depth)| StageRow {
            function: "y1".into(),
            depth,
            value,
        })
        .chain(std::iter::once(StageRow {
            function: "y1".into(),
            depth: 10,
            value: env.value,
        }))
        .collect();
    let k = 16;
    let schedule: Vec<f64> = (5..=10).map(|j| 0.5f64.powi(j)).collect();
    let dopts = DerivativeOptions {
        samples: 16,
        seed: opts.seed,
        centered_only: false,
    };
    let pts = midpoints(k);
    let lowers = pts
        .par_iter()
        .map(|x| Ok(lower_derivative(&h, x, &schedule, &dopts)?.lower))
        .collect::<Result<Vec<f64>>>()?;
    let integral = lowers.iter().sum::<f64>() / (k * k) as f64;
    let rows: Vec<DerivativeRow> = pts
        .iter()
        .zip(&lowers)
        .map(|(x, v)| DerivativeRow {
            function: "y1".into(),
            x: format!("{};{}", x[0], x[1]),
            lower: *v,
        })
        .collect();
    let e1 = rel(env.value, 0.5);
    let e2 = rel(integral, env.value);
    Ok(CriterionRun {
        verdict: Verdict::new(
            CriterionId::VitaliIdentity,
            e1.max(e2),
            5e-3,
            format!("envelope {:.6}, derivative integral {:.6}", env.value, integral),
        ),
        tables: vec![table("vitali_stages.csv", &stages)?, table("vitali_derivative.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct SignRow {
    function: &'static str,
    envelope: f64,
    min_derivative: f64,
    max_derivative: f64,
    /// Amount by which the envelope has the wrong sign, over `sup|G/λ|`.
    violation: f64,
}

fn sign_checks(opts: &VerifyOptions) -> Result<CriterionRun> {
    let o = Cube::unit(2);
    let vopts = VitaliOptions::at_depth(&o, 8, 1e-3);
    let slack = 1e-3;
    let schedule = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let dopts = DerivativeOptions {
        samples: 8,
        seed: opts.seed,
        centered_only: false,
    };
    let pts = midpoints(8);
    type Density = fn(&[f64]) -> f64;
    let cases: [(&'static str, Density, f64, i8); 3] = [
        ("plus_one", |_| 1.0, 1.0, 1),
        ("minus_one", |_| -1.0, 1.0, -1),
        ("y1_minus_half", |y| y[0] - 0.5, 0.5, 0),
    ];
    let mut rows = Vec::new();
    for (name, f, sup, sign) in cases {
        let g = CubeSetFunction::from_density(name, o.clone(), f, 1);
        let env = if sign > 0 {
            vitali_envelope(&g, &o, &vopts)?
        } else {
            vitali_envelope_signed(&g, &o, &vopts)?
        };
        let lowers = pts
            .iter()
            .map(|x| Ok(lower_derivative(&g, x, &schedule, &dopts)?.lower))
            .collect::<Result<Vec<f64>>>()?;
        let bound = slack * sup;
        let wrong = match sign {
            1 => (-env.value - bound).max(0.0),
            -1 => (env.value - bound).max(0.0),
            _ => (env.value.abs() - bound).max(0.0),
        };
        rows.push(SignRow {
            function: name,
            envelope: env.value,
            min_derivative: lowers.iter().copied().fold(f64::INFINITY, f64::min),
            max_derivative: lowers.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            violation: wrong / sup,
        });
    }
    let hypotheses = rows[0].min_derivative >= 0.0 && rows[1].max_derivative <= 0.0;
    let worst = rows.iter().map(|r| r.violation).fold(0.0, f64::max);
    let measured = if hypotheses { worst } else { f64::INFINITY };
    let detail = rows.iter().map(|r| format!("{} -> {:.3e}", r.function, r.envelope)).collect::<Vec<_>>().join(", ");
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::SignChecks, measured, 0.0, detail),
        tables: vec![table("vitali_signs.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct SubadditivityRow {
    instance: usize,
    integrand: &'static str,
    dim: usize,
    eps: f64,
    cubes: usize,
    whole: f64,
    parts_plus_remainder: f64,
    margin: f64,
    tolerance: f64,
    holds: bool,
}

struct SplitInstance {
    name: BuiltinName,
    l: Integrand,
    eps: f64,
    domain: CubeDomain,
    boundary: BoundaryData,
    cubes: Vec<Cube>,
}

fn split_instance(rng: &mut ChaCha8Rng) -> Result<SplitInstance> {
    let names = [
        BuiltinName::PPower,
        BuiltinName::QuadraticCoeff1d,
        BuiltinName::Laminate2d,
        BuiltinName::DoubleWell1d,
        BuiltinName::PeriodicPlusPerturbation,
    ];
    let name = names[rng.gen_range(0..names.len())];
    let params = match name {
        BuiltinName::PPower => BuiltinParams {
            p: Some(if rng.gen_bool(0.5) { 2.0 } else { 4.0 }),
            d: Some(rng.gen_range(1..=2)),
            ..Default::default()
        },
        BuiltinName::QuadraticCoeff1d | BuiltinName::Laminate2d | BuiltinName::PeriodicPlusPerturbation => BuiltinParams {
            a: Some(vec![1.0, 4.0]),
            ..Default::default()
        },
        _ => BuiltinParams::default(),
    };
    let l = make_builtin(name, &params)?;
    let d = l.dim();
    let res = if d == 1 { 33 } else { 17 };
    let domain = CubeDomain::cell(d, 1.0, res)?;
    let h = domain.spacing();
    let cells = res - 1;
    let xi: Vec<f64> = (0..l.components() * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let boundary = BoundaryData::affine(vec![rng.gen_range(-0.5..0.5); l.components()], Matrix::from_row_major(l.components(), d, xi), vec![0.5; d]);
    let count = rng.gen_range(1..=3);
    let mut cubes: Vec<Cube> = Vec::new();
    let mut attempts = 0;
    while cubes.len() < count && attempts < 100 {
        attempts += 1;
        let side_cells = rng.gen_range(2..=cells / 2);
        let lower = (0..d).map(|_| rng.gen_range(0..=cells - side_cells) as f64 * h).collect();
        let q = Cube::new(lower, side_cells as f64 * h);
        if cubes.iter().all(|c| c.is_disjoint(&q)) {
            cubes.push(q);
        }
    }
    let eps = [1.0, 0.5, 0.25][rng.gen_range(0..3)];
    Ok(SplitInstance {
        name,
        l,
        eps,
        domain,
        boundary,
        cubes,
    })
}

fn subadditivity(opts: &VerifyOptions) -> Result<CriterionRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let instances = (0..20).map(|_| split_instance(&mut rng)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<SubadditivityRow> = instances
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SolverConfig {
                multistart_count: if s.name == BuiltinName::DoubleWell1d { 4 } else { 1 },
                rng_seed: opts.seed.wrapping_add(i as u64),
                ..Default::default()
            };
            let rep = subadditivity_check(&s.boundary, &s.cubes, &s.domain, &s.l, s.eps, &cfg)?;
            Ok(SubadditivityRow {
                instance: i,
                integrand: s.name.as_str(),
                dim: s.l.dim(),
                eps: s.eps,
                cubes: s.cubes.len(),
                whole: rep.whole,
                parts_plus_remainder: rep.parts.iter().sum::<f64>() + rep.remainder,
                margin: rep.margin,
                tolerance: rep.tolerance,
                holds: rep.holds,
            })
        })
        .collect::<Result<_>>()?;
    let worst = rows.iter().map(|r| (-r.margin - r.tolerance).max(0.0)).fold(0.0, f64::max);
    let held = rows.iter().filter(|r| r.holds).count();
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::Subadditivity, worst, 0.0, format!("{held}/{} instances within tolerance", rows.len())),
        tables: vec![table("sandwich_subadditivity.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct GapRow {
    instance: &'static str,
    recovery: f64,
    density_integral: f64,
    direct_energy: f64,
    rel_gap: f64,
    threshold: f64,
}

fn dirichlet_free(opts: &VerifyOptions) -> Result<CriterionRun> {
    let line = |d: usize, res: usize, xi: Matrix| -> Result<DiscreteField> { DiscreteField::affine(CubeDomain::cell(d, 1.0, res)?, vec![0.0], xi, vec![0.0; d]) };

    let convex = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(4.0), d: Some(2), ..Default::default() })?;
    let convex_run = dirichlet_free_gap(
        &IntegrandFamily::Constant(convex),
        &line(2, 9, Matrix::from_row_major(1, 2, vec![0.6, -0.3]))?,
        2,
        1.0,
        9,
        &SampleQuadrature { cells: 2, rule: QuadratureRule::Gauss2 },
        &DensityConfig {
            rho_schedule: vec![0.2, 0.1],
            resolution: 9,
            ..Default::default()
        },
    )?;

    let homog_run = dirichlet_free_gap(
        &IntegrandFamily::Rescaled(two_phase(BuiltinName::QuadraticCoeff1d)?),
        &line(1, 17, Matrix::scalar(1.0))?,
        4,
        1.0 / 16.0,
        65,
        &SampleQuadrature { cells: 4, rule: QuadratureRule::Midpoint },
        &DensityConfig {
            method: DensityMethod::EpsFamily,
            rho_schedule: vec![0.25, 0.125],
            eps_schedule: vec![1.0 / 8.0, 1.0 / 16.0],
            resolution: 65,
            ..Default::default()
        },
    )?;

    let dw_run = dirichlet_free_gap(
        &IntegrandFamily::Constant(double_well()?),
        &line(1, 17, Matrix::scalar(0.0))?,
        4,
        1.0,
        65,
        &SampleQuadrature { cells: 4, rule: QuadratureRule::Midpoint },
        &DensityConfig {
            method: DensityMethod::FrozenDac,
            qdac_resolutions: vec![65],
            solver: nonconvex_solver(opts.seed),
            ..Default::default()
        },
    )?;

    let rows = vec![
        ("convex", convex_run, 1e-2),
        ("periodic_quadratic", homog_run, 1e-2),
        ("double_well", dw_run, 5e-2),
    ]
    .into_iter()
    .map(|(instance, g, threshold)| GapRow {
        instance,
        recovery: g.recovery.value,
        density_integral: g.density_integral,
        direct_energy: g.relaxed.direct_energy,
        rel_gap: g.rel_gap,
        threshold,
    })
    .collect::<Vec<_>>();
    let ratio = rows.iter().map(|r| r.rel_gap / r.threshold).fold(0.0, f64::max);
    let detail = rows.iter().map(|r| format!("{} {:.2e}", r.instance, r.rel_gap)).collect::<Vec<_>>().join(", ");
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::DirichletFreeGap, ratio, 1.0, format!("gap / threshold; {detail}")),
        tables: vec![table("sandwich_gap.csv", &rows)?],
    })
}

#[derive(Serialize)]
struct HRow {
    x: f64,
    rho: f64,
    t: f64,
    value: f64,
}

fn h_coherence() -> Result<CriterionRun> {
    let l = two_phase(BuiltinName::QuadraticCoeff1d)?;
    let xs: Vec<Vec<f64>> = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|x| vec![*x]).collect();
    let rep = h_diagnostic(&l, &Matrix::scalar(1.0), &xs, &[1.0, 0.5, 0.25], &[4.0, 8.0, 16.0], 16, 1e-3, &HomogenizationConfig::default())?;
    let rows: Vec<HRow> = rep
        .points
        .iter()
        .flat_map(|p| {
            let x = p.x[0];
            [1.0, 0.5, 0.25].into_iter().zip(&p.values).flat_map(move |(rho, vals)| {
                [4.0, 8.0, 16.0].into_iter().zip(vals).map(move |(t, v)| HRow { x, rho, t, value: *v })
            })
        })
        .collect();
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::HDiagnostic, rep.max_gap, 1e-3, format!("{} points, max limsup - liminf", rep.points.len())),
        tables: vec![table("homog1d_h_diagnostic.csv", &rows)?],
    })
}

fn chain(opts: &VerifyOptions) -> Result<CriterionRun> {
    let u = DiscreteField::affine(CubeDomain::cell(1, 1.0, 17)?, vec![0.1], Matrix::scalar(0.8), vec![0.0])?;
    let cfg = SandwichConfig {
        rho_schedule: vec![0.25, 0.125, 0.0625],
        resolution: 33,
        derivative: DerivativeOptions {
            samples: 4,
            seed: opts.seed,
            centered_only: false,
        },
        tolerance: 1e-6,
        ..Default::default()
    };
    let xs: Vec<Vec<f64>> = [0.3, 0.5, 0.7].iter().map(|x| vec![*x]).collect();
    let convex = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(4.0), ..Default::default() })?;
    let rep = sandwich_report(&IntegrandFamily::Constant(convex), &u, &xs, &cfg)?;
    Ok(CriterionRun {
        verdict: Verdict::new(CriterionId::Chain, rep.max_violation, rep.tolerance, format!("{} points", rep.samples.len())),
        tables: vec![table("sandwich_chain.csv", &rep.rows())?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn every_numbered_criterion_belongs_to_one_suite() {
        let mut seen: Vec<u8> = Suite::ALL.iter().flat_map(|s| s.criteria()).filter_map(|c| c.number()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (1..=9).collect::<Vec<_>>());
    }

    #[test]
    fn verdict_line_marks_failure() {
        let v = Verdict::new(CriterionId::Laminate, 0.1, 0.02, "x".into());
        assert!(!v.passed);
        assert!(v.line().starts_with("criterion 3 (2d laminate): FAIL"));
    }
}
