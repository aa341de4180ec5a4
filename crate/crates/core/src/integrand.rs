//! Integrands `L(x, v, ξ)` with declared growth constants, the built-in
//! library, ε-rescaling and ε-indexed families.
//!
//! Gradients `ξ` are `m × d` matrices passed as row-major slices. All
//! densities are pure and shareable across threads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{frobenius, Matrix};

/// Pointwise-evaluable density. Discontinuities in `x` are allowed.
pub trait Density: Send + Sync {
    fn eval(&self, x: &[f64], v: &[f64], xi: &[f64]) -> f64;

    /// Writes `∂L/∂v` and `∂L/∂ξ`. Returns `false` when no analytic gradient
    /// is available, in which case callers fall back to central differences.
    fn gradient(&self, _x: &[f64], _v: &[f64], _xi: &[f64], _dv: &mut [f64], _dxi: &mut [f64]) -> bool {
        false
    }
}

struct FnDensity<F>(F);

impl<F> Density for FnDensity<F>
where
    F: Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64], v: &[f64], xi: &[f64]) -> f64 {
        (self.0)(x, v, xi)
    }
}

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Constants of `α|ξ|^p ≤ L(x,v,ξ) ≤ β(a(x) + |v|^p + |ξ|^p)`.
///
/// `alpha == 0` marks a non-coercive integrand; solvers accept it but
/// coercivity-dependent diagnostics refuse it.
#[derive(Clone)]
pub struct GrowthBounds {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
    pub a: ScalarField,
}

impl GrowthBounds {
    pub fn new(alpha: f64, beta: f64, p: f64, a: ScalarField) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be finite and >= 0, got {alpha}"),
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must be finite and > 0, got {beta}"),
            });
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "p",
                reason: format!("growth exponent must exceed 1, got {p}"),
            });
        }
        Ok(Self { alpha, beta, p, a })
    }

    pub fn constant_weight(alpha: f64, beta: f64, p: f64, a: f64) -> Result<Self> {
        Self::new(alpha, beta, p, Arc::new(move |_: &[f64]| a))
    }

    pub fn is_coercive(&self) -> bool {
        self.alpha > 0.0
    }

    fn rescaled(&self, eps: f64) -> Self {
        let a = self.a.clone();
        Self {
            alpha: self.alpha,
            beta: self.beta,
            p: self.p,
            a: Arc::new(move |x: &[f64]| {
                let y: Vec<f64> = x.iter().map(|xi| xi / eps).collect();
                a(&y)
            }),
        }
    }
}

impl fmt::Debug for GrowthBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthBounds")
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("p", &self.p)
            .finish_non_exhaustive()
    }
}

/// Breakpoints of a piecewise-constant coefficient along one axis:
/// `offset + k·period` for every integer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakLattice {
    pub axis: usize,
    pub period: f64,
    pub offsets: Vec<f64>,
}

impl BreakLattice {
    /// Breakpoints lying strictly inside `(lo, hi)`.
    pub fn points_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let k0 = (lo / self.period).floor() as i64 - 1;
        let k1 = (hi / self.period).ceil() as i64 + 1;
        for k in k0..=k1 {
            for off in &self.offsets {
                let b = off + k as f64 * self.period;
                if b > lo && b < hi {
                    out.push(b);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }
}

#[derive(Clone)]
pub struct Integrand {
    name: String,
    dim: usize,
    components: usize,
    density: Arc<dyn Density>,
    bounds: GrowthBounds,
    caratheodory: bool,
    x_dependent: bool,
    v_dependent: bool,
    period: Option<f64>,
    breaks: Vec<BreakLattice>,
    x_scale: f64,
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Integrand")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("components", &self.components)
            .field("bounds", &self.bounds)
            .field("x_scale", &self.x_scale)
            .finish_non_exhaustive()
    }
}

impl Integrand {
    /// Wraps a user density. Flags default to the most general case
    /// (x- and v-dependent, Caratheodory, non-periodic); adjust with the
    /// `with_*` setters.
    pub fn new(name: impl Into<String>, dim: usize, components: usize, density: impl Density + 'static, bounds: GrowthBounds) -> Result<Self> {
        check_dims(dim, components)?;
        Ok(Self {
            name: name.into(),
            dim,
            components,
            density: Arc::new(density),
            bounds,
            caratheodory: true,
            x_dependent: true,
            v_dependent: true,
            period: None,
            breaks: Vec::new(),
            x_scale: 1.0,
        })
    }

    pub fn from_fn<F>(name: impl Into<String>, dim: usize, components: usize, f: F, bounds: GrowthBounds) -> Result<Self>
    where
        F: Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(name, dim, components, FnDensity(f), bounds)
    }

    pub fn with_caratheodory(mut self, flag: bool) -> Self {
        self.caratheodory = flag;
        self
    }

    pub fn with_x_dependence(mut self, flag: bool) -> Self {
        self.x_dependent = flag;
        self
    }

    pub fn with_v_dependence(mut self, flag: bool) -> Self {
        self.v_dependent = flag;
        self
    }

    /// Declares the integrand `period`-periodic in every coordinate of `x`.
    pub fn with_period(mut self, period: Option<f64>) -> Self {
        self.period = period;
        self
    }

    pub fn with_breaks(mut self, breaks: Vec<BreakLattice>) -> Self {
        self.breaks = breaks;
        self
    }

    /// Replaces the declared growth constants, e.g. to test a wrong declaration.
    pub fn with_bounds(mut self, bounds: GrowthBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn bounds(&self) -> &GrowthBounds {
        &self.bounds
    }

    pub fn is_caratheodory(&self) -> bool {
        self.caratheodory
    }

    pub fn is_x_dependent(&self) -> bool {
        self.x_dependent
    }

    pub fn is_v_dependent(&self) -> bool {
        self.v_dependent
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn breaks(&self) -> &[BreakLattice] {
        &self.breaks
    }

    pub fn eval(&self, x: &[f64], v: &[f64], xi: &[f64]) -> f64 {
        if self.x_scale == 1.0 {
            self.density.eval(x, v, xi)
        } else {
            let mut buf = [0.0; 3];
            let y = self.scaled(x, &mut buf);
            self.density.eval(y, v, xi)
        }
    }

    pub fn eval_matrix(&self, x: &[f64], v: &[f64], xi: &Matrix) -> f64 {
        self.eval(x, v, xi.as_slice())
    }

    pub fn has_analytic_gradient(&self) -> bool {
        let x = vec![0.0; self.dim];
        let v = vec![0.0; self.components];
        let xi = vec![0.0; self.dim * self.components];
        let mut dv = vec![0.0; self.components];
        let mut dxi = vec![0.0; xi.len()];
        self.density.gradient(&x, &v, &xi, &mut dv, &mut dxi)
    }

    /// `∂L/∂v` and `∂L/∂ξ`, analytic when available, central differences otherwise.
    pub fn gradient(&self, x: &[f64], v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) {
        let mut buf = [0.0; 3];
        let y: &[f64] = if self.x_scale == 1.0 { x } else { self.scaled(x, &mut buf) };
        if self.density.gradient(y, v, xi, dv, dxi) {
            return;
        }
        let mut vv = v.to_vec();
        for k in 0..v.len() {
            let h = fd_step(v[k]);
            vv[k] = v[k] + h;
            let fp = self.density.eval(y, &vv, xi);
            vv[k] = v[k] - h;
            let fm = self.density.eval(y, &vv, xi);
            vv[k] = v[k];
            dv[k] = (fp - fm) / (2.0 * h);
        }
        let mut zz = xi.to_vec();
        for k in 0..xi.len() {
            let h = fd_step(xi[k]);
            zz[k] = xi[k] + h;
            let fp = self.density.eval(y, v, &zz);
            zz[k] = xi[k] - h;
            let fm = self.density.eval(y, v, &zz);
            zz[k] = xi[k];
            dxi[k] = (fp - fm) / (2.0 * h);
        }
    }

    fn scaled<'a>(&self, x: &[f64], buf: &'a mut [f64; 3]) -> &'a [f64] {
        let n = x.len().min(3);
        for (b, xi) in buf.iter_mut().zip(x) {
            *b = xi / self.x_scale;
        }
        &buf[..n]
    }

    /// `(x, v, ξ) ↦ L(x/ε, v, ξ)`.
    pub fn rescale(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "eps",
                reason: format!("must be positive and finite, got {eps}"),
            });
        }
        let mut out = self.clone();
        if !self.x_dependent {
            return Ok(out);
        }
        out.x_scale = self.x_scale * eps;
        out.bounds = self.bounds.rescaled(eps);
        out.period = self.period.map(|p| p * eps);
        out.breaks = self
            .breaks
            .iter()
            .map(|b| BreakLattice {
                axis: b.axis,
                period: b.period * eps,
                offsets: b.offsets.iter().map(|o| o * eps).collect(),
            })
            .collect();
        Ok(out)
    }

    /// `ζ ↦ L(x, v, ζ)` with `(x, v)` held fixed.
    pub fn frozen_at(&self, x: &[f64], v: &[f64]) -> Result<Self> {
        if x.len() != self.dim || v.len() != self.components {
            return Err(Error::DimensionMismatch(format!(
                "frozen point has |x| = {}, |v| = {}; integrand expects d = {}, m = {}",
                x.len(),
                v.len(),
                self.dim,
                self.components
            )));
        }
        let frozen = Frozen {
            inner: self.clone(),
            x: x.to_vec(),
            v: v.to_vec(),
        };
        let a_at = (self.bounds.a)(x);
        let vp: f64 = frobenius(v).powf(self.bounds.p);
        let bounds = GrowthBounds::constant_weight(self.bounds.alpha, self.bounds.beta, self.bounds.p, a_at + vp)?;
        Ok(Self {
            name: format!("{}@frozen", self.name),
            dim: self.dim,
            components: self.components,
            density: Arc::new(frozen),
            bounds,
            caratheodory: true,
            x_dependent: false,
            v_dependent: false,
            period: Some(1.0),
            breaks: Vec::new(),
            x_scale: 1.0,
        })
    }
}

struct Frozen {
    inner: Integrand,
    x: Vec<f64>,
    v: Vec<f64>,
}

impl Density for Frozen {
    fn eval(&self, _x: &[f64], _v: &[f64], xi: &[f64]) -> f64 {
        self.inner.eval(&self.x, &self.v, xi)
    }

    fn gradient(&self, _x: &[f64], _v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        self.inner.gradient(&self.x, &self.v, xi, dv, dxi);
        dv.iter_mut().for_each(|d| *d = 0.0);
        true
    }
}

fn fd_step(z: f64) -> f64 {
    1e-6 * z.abs().max(1.0)
}

fn check_dims(dim: usize, components: usize) -> Result<()> {
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidParameter {
            name: "d",
            reason: format!("space dimension must be 1, 2 or 3, got {dim}"),
        });
    }
    if !(1..=3).contains(&components) {
        return Err(Error::InvalidParameter {
            name: "m",
            reason: format!("number of components must be 1, 2 or 3, got {components}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Built-in library

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinName {
    PPower,
    QuadraticCoeff1d,
    Laminate2d,
    DoubleWell1d,
    PeriodicPlusPerturbation,
}

impl BuiltinName {
    pub const ALL: [BuiltinName; 5] = [
        BuiltinName::PPower,
        BuiltinName::QuadraticCoeff1d,
        BuiltinName::Laminate2d,
        BuiltinName::DoubleWell1d,
        BuiltinName::PeriodicPlusPerturbation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinName::PPower => "p_power",
            BuiltinName::QuadraticCoeff1d => "quadratic_coeff_1d",
            BuiltinName::Laminate2d => "laminate_2d",
            BuiltinName::DoubleWell1d => "double_well_1d",
            BuiltinName::PeriodicPlusPerturbation => "periodic_plus_perturbation",
        }
    }
}

impl FromStr for BuiltinName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnknownIntegrand(s.to_string()))
    }
}

impl fmt::Display for BuiltinName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameter record for [`make_builtin`]. Unused fields are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuiltinParams {
    /// Exponent of `p_power`.
    pub p: Option<f64>,
    /// Space dimension (`p_power`, `periodic_plus_perturbation`).
    pub d: Option<usize>,
    /// Number of field components (`p_power`, `laminate_2d`).
    pub m: Option<usize>,
    /// Periodic coefficient table on a uniform partition of `[0, 1)`.
    pub a: Option<Vec<f64>>,
    /// Constant offset of the double well.
    pub c0: Option<f64>,
    /// Coefficient of an added `κ|ξ|²` floor on the double well.
    pub quadratic_floor: Option<f64>,
    pub bump_height: Option<f64>,
    pub bump_radius: Option<f64>,
    /// Periodic table for the `h` part of the perturbation.
    pub h: Option<Vec<f64>>,
    /// Overrides of the declared growth constants.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub growth_p: Option<f64>,
}

/// Piecewise-constant 1-periodic table; a breakpoint takes the value of the
/// cell to its left.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicTable {
    values: Vec<f64>,
}

impl PeriodicTable {
    pub fn new(values: Vec<f64>, what: &str) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidCoefficientTable(format!("{what}: table is empty")));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidCoefficientTable(format!("{what}: entry {bad} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn lookup(&self, y: f64) -> f64 {
        let n = self.values.len() as i64;
        let s = y * n as f64;
        let k = (s.ceil() as i64 - 1).rem_euclid(n);
        self.values[k as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn lattice(&self, axis: usize) -> BreakLattice {
        let n = self.values.len();
        BreakLattice {
            axis,
            period: 1.0,
            offsets: (0..n)
                .filter(|&k| self.values[k] != self.values[(k + n - 1) % n])
                .map(|k| k as f64 / n as f64)
                .collect(),
        }
    }
}

struct PPowerDensity {
    p: f64,
}

impl Density for PPowerDensity {
    fn eval(&self, _x: &[f64], _v: &[f64], xi: &[f64]) -> f64 {
        let n2: f64 = xi.iter().map(|z| z * z).sum();
        if self.p == 2.0 {
            n2
        } else {
            n2.powf(0.5 * self.p)
        }
    }

    fn gradient(&self, _x: &[f64], v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        dv[..v.len()].iter_mut().for_each(|d| *d = 0.0);
        let n2: f64 = xi.iter().map(|z| z * z).sum();
        let c = if n2 == 0.0 {
            0.0
        } else {
            self.p * n2.powf(0.5 * self.p - 1.0)
        };
        for (d, z) in dxi.iter_mut().zip(xi) {
            *d = c * z;
        }
        true
    }
}

/// `a(y₁)|ξ|²` with a periodic table along the first coordinate.
struct LayeredQuadratic {
    table: PeriodicTable,
}

impl Density for LayeredQuadratic {
    fn eval(&self, x: &[f64], _v: &[f64], xi: &[f64]) -> f64 {
        self.table.lookup(x[0]) * xi.iter().map(|z| z * z).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], _v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        dv.iter_mut().for_each(|d| *d = 0.0);
        let a = self.table.lookup(x[0]);
        for (d, z) in dxi.iter_mut().zip(xi) {
            *d = 2.0 * a * z;
        }
        true
    }
}

struct DoubleWell {
    c0: f64,
    floor: f64,
}

impl Density for DoubleWell {
    fn eval(&self, _x: &[f64], _v: &[f64], xi: &[f64]) -> f64 {
        let s = xi[0] * xi[0];
        (s - 1.0) * (s - 1.0) + self.c0 + self.floor * s
    }

    fn gradient(&self, _x: &[f64], _v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        dv[0] = 0.0;
        let z = xi[0];
        dxi[0] = 4.0 * z * (z * z - 1.0) + 2.0 * self.floor * z;
        true
    }
}

/// `a(y₁)|ξ|² + Φ(y)` with `Φ(y) = b·1[|y| < r] + h(y₁)`.
struct PerturbedLayered {
    a: PeriodicTable,
    h: PeriodicTable,
    bump_height: f64,
    bump_radius: f64,
}

impl PerturbedLayered {
    fn phi(&self, x: &[f64]) -> f64 {
        let r = frobenius(x);
        let bump = if r < self.bump_radius { self.bump_height } else { 0.0 };
        bump + self.h.lookup(x[0])
    }
}

impl Density for PerturbedLayered {
    fn eval(&self, x: &[f64], _v: &[f64], xi: &[f64]) -> f64 {
        self.a.lookup(x[0]) * xi.iter().map(|z| z * z).sum::<f64>() + self.phi(x)
    }

    fn gradient(&self, x: &[f64], _v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        dv.iter_mut().for_each(|d| *d = 0.0);
        let a = self.a.lookup(x[0]);
        for (d, z) in dxi.iter_mut().zip(xi) {
            *d = 2.0 * a * z;
        }
        true
    }
}

fn positive_table(values: Option<&Vec<f64>>, what: &str) -> Result<PeriodicTable> {
    let values = values.ok_or_else(|| Error::InvalidCoefficientTable(format!("{what}: missing coefficient table `a`")))?;
    let table = PeriodicTable::new(values.clone(), what)?;
    if table.min() <= 0.0 {
        return Err(Error::InvalidCoefficientTable(format!(
            "{what}: coefficients must be positive, got minimum {}",
            table.min()
        )));
    }
    Ok(table)
}

fn declared(params: &BuiltinParams, alpha: f64, beta: f64, p: f64, a: ScalarField) -> Result<GrowthBounds> {
    GrowthBounds::new(
        params.alpha.unwrap_or(alpha),
        params.beta.unwrap_or(beta),
        params.growth_p.unwrap_or(p),
        a,
    )
}

/// Builds one of the built-in integrands.
pub fn make_builtin(name: BuiltinName, params: &BuiltinParams) -> Result<Integrand> {
    match name {
        BuiltinName::PPower => {
            let p = params.p.unwrap_or(2.0);
            if !(p > 1.0 && p.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "p",
                    reason: format!("exponent must exceed 1, got {p}"),
                });
            }
            let d = params.d.unwrap_or(1);
            let m = params.m.unwrap_or(1);
            let bounds = declared(params, 1.0, 1.0, p, Arc::new(|_: &[f64]| 0.0))?;
            Ok(Integrand::new(name.as_str(), d, m, PPowerDensity { p }, bounds)?
                .with_x_dependence(false)
                .with_v_dependence(false)
                .with_period(Some(1.0)))
        }
        BuiltinName::QuadraticCoeff1d | BuiltinName::Laminate2d => {
            let (d, m) = if name == BuiltinName::QuadraticCoeff1d {
                (1, 1)
            } else {
                (2, params.m.unwrap_or(1))
            };
            let table = positive_table(params.a.as_ref(), name.as_str())?;
            let bounds = declared(params, table.min(), table.max(), 2.0, Arc::new(|_: &[f64]| 0.0))?;
            let lattice = table.lattice(0);
            Ok(Integrand::new(name.as_str(), d, m, LayeredQuadratic { table }, bounds)?
                .with_v_dependence(false)
                .with_period(Some(1.0))
                .with_breaks(vec![lattice]))
        }
        BuiltinName::DoubleWell1d => {
            let c0 = params.c0.unwrap_or(0.0);
            let floor = params.quadratic_floor.unwrap_or(0.0);
            if c0 < 0.0 || floor < 0.0 || !c0.is_finite() || !floor.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "c0",
                    reason: "offset and quadratic floor must be finite and nonnegative".into(),
                });
            }
            // Coercive only when both the offset and the quadratic floor are
            // requested. The constant is the exact infimum of L/ξ⁴ over ξ ≠ 0.
            let alpha = if c0 > 0.0 && floor > 0.0 {
                if floor >= 2.0 {
                    1.0
                } else {
                    1.0 - (2.0 - floor).powi(2) / (4.0 * (1.0 + c0))
                }
            } else {
                0.0
            };
            let weight = 1.0 + c0 + floor;
            let bounds = declared(params, alpha, 1.0 + floor, 4.0, Arc::new(move |_: &[f64]| weight))?;
            Ok(Integrand::new(name.as_str(), 1, 1, DoubleWell { c0, floor }, bounds)?
                .with_x_dependence(false)
                .with_v_dependence(false)
                .with_period(Some(1.0)))
        }
        BuiltinName::PeriodicPlusPerturbation => {
            let d = params.d.unwrap_or(1);
            let a = positive_table(params.a.as_ref(), name.as_str())?;
            let h = PeriodicTable::new(params.h.clone().unwrap_or_else(|| vec![0.0]), "h")?;
            if h.min() < 0.0 {
                return Err(Error::InvalidCoefficientTable("h: perturbation must be nonnegative".into()));
            }
            let bump_height = params.bump_height.unwrap_or(1.0);
            let bump_radius = params.bump_radius.unwrap_or(0.25);
            if !(bump_height >= 0.0 && bump_radius >= 0.0 && bump_height.is_finite() && bump_radius.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "bump_height",
                    reason: "bump height and radius must be finite and nonnegative".into(),
                });
            }
            let density = PerturbedLayered {
                a: a.clone(),
                h: h.clone(),
                bump_height,
                bump_radius,
            };
            let h_for_weight = h.clone();
            let weight: ScalarField = Arc::new(move |x: &[f64]| {
                let bump = if frobenius(x) < bump_radius { bump_height } else { 0.0 };
                bump + h_for_weight.lookup(x[0])
            });
            let bounds = declared(params, a.min(), a.max().max(1.0), 2.0, weight)?;
            let mut offsets = a.lattice(0).offsets;
            offsets.extend(h.lattice(0).offsets);
            offsets.sort_by(f64::total_cmp);
            offsets.dedup();
            Ok(Integrand::new(name.as_str(), d, 1, density, bounds)?
                .with_v_dependence(false)
                .with_period(None)
                .with_breaks(vec![BreakLattice {
                    axis: 0,
                    period: 1.0,
                    offsets,
                }]))
        }
    }
}

/// Convenience wrapper taking the name as a string.
pub fn builtin(name: &str, params: &BuiltinParams) -> Result<Integrand> {
    make_builtin(name.parse()?, params)
}

// ---------------------------------------------------------------------------
// Growth check

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub samples: usize,
    /// Largest `α|ξ|^p − L` over the samples (0 when never violated).
    pub lower_violation: f64,
    /// Largest `L − β(a + |v|^p + |ξ|^p)` over the samples (0 when never violated).
    pub upper_violation: f64,
    /// Smallest `L − α|ξ|^p` seen.
    pub min_lower_slack: f64,
    /// Smallest `β(a + |v|^p + |ξ|^p) − L` seen.
    pub min_upper_slack: f64,
    /// Gradient at which the lower bound was violated worst, if ever.
    pub worst_lower_xi: Option<Vec<f64>>,
    pub passed: bool,
}

/// Samples both growth inequalities and reports worst-case margins.
pub fn check_growth(l: &Integrand, samples: usize, rng_seed: u64) -> GrowthReport {
    let samples = samples.max(1);
    let (d, m) = (l.dim(), l.components());
    let b = l.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut probes: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    // Deterministic probes: zero gradient, unit entries of both signs.
    probes.push((vec![0.25; d], vec![0.0; m], vec![0.0; m * d]));
    for k in 0..m * d {
        for s in [1.0, -1.0] {
            let mut xi = vec![0.0; m * d];
            xi[k] = s;
            probes.push((vec![0.25; d], vec![0.0; m], xi));
        }
    }
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xi: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        probes.push((x, v, xi));
    }

    let mut rep = GrowthReport {
        samples: probes.len(),
        lower_violation: 0.0,
        upper_violation: 0.0,
        min_lower_slack: f64::INFINITY,
        min_upper_slack: f64::INFINITY,
        worst_lower_xi: None,
        passed: true,
    };
    for (x, v, xi) in &probes {
        let val = l.eval(x, v, xi);
        let xin = frobenius(xi).powf(b.p);
        let vn = frobenius(v).powf(b.p);
        let lower = b.alpha * xin;
        let upper = b.beta * ((b.a)(x) + vn + xin);
        let tol = 1e-12 * (1.0 + val.abs());
        let lower_slack = val - lower;
        let upper_slack = upper - val;
        rep.min_lower_slack = rep.min_lower_slack.min(lower_slack);
        rep.min_upper_slack = rep.min_upper_slack.min(upper_slack);
        if -lower_slack > tol && -lower_slack > rep.lower_violation {
            rep.lower_violation = -lower_slack;
            rep.worst_lower_xi = Some(xi.clone());
        }
        if -upper_slack > tol {
            rep.upper_violation = rep.upper_violation.max(-upper_slack);
        }
    }
    rep.passed = rep.lower_violation == 0.0 && rep.upper_violation == 0.0;
    rep
}

// ---------------------------------------------------------------------------
// Perturbations and ε-families

pub type PerturbationFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// `Φ_ε(x) ≥ 0` dominated by an integrable `g` uniformly in ε.
#[derive(Clone)]
pub struct PerturbationFamily {
    pub name: String,
    pub phi: PerturbationFn,
    pub dominating_g: ScalarField,
}

impl fmt::Debug for PerturbationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationFamily").field("name", &self.name).finish_non_exhaustive()
    }
}

impl PerturbationFamily {
    /// `Φ_ε = ε^{-1/2}·1[|x| < ε] + h` with `g(x) = 2/√|x|`; requires `0 ≤ h ≤ 1`
    /// so that `h ≤ g/2` on the unit ball.
    pub fn sqrt_bump(h: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::InvalidParameter {
                name: "h",
                reason: format!("background level must lie in [0, 1], got {h}"),
            });
        }
        Ok(Self {
            name: format!("sqrt_bump(h={h})"),
            phi: Arc::new(move |eps: f64, x: &[f64]| {
                let bump = if frobenius(x) < eps { 1.0 / eps.sqrt() } else { 0.0 };
                bump + h
            }),
            dominating_g: Arc::new(|x: &[f64]| {
                let r = frobenius(x);
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    2.0 / r.sqrt()
                }
            }),
        })
    }

    /// Largest `Φ_ε(x) − g(x)` over random `(ε, x)` with `x` in the unit ball
    /// of `R^d`; nonpositive when the domination holds on the samples.
    pub fn domination_violation(&self, d: usize, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..samples {
            let eps = 10f64.powf(rng.gen_range(-4.0..0.0));
            let x: Vec<f64> = loop {
                let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if frobenius(&c) < 1.0 {
                    break c;
                }
            };
            worst = worst.max((self.phi)(eps, &x) - (self.dominating_g)(&x));
        }
        worst
    }
}

/// An ε-indexed family of integrands `L_ε`.
#[derive(Debug, Clone)]
pub enum IntegrandFamily {
    /// `L_ε = L` for every ε.
    Constant(Integrand),
    /// `L_ε(x, v, ξ) = L(x/ε, v, ξ)`.
    Rescaled(Integrand),
    /// `L_ε(x, v, ξ) = W(x, v, ξ) + Φ_ε(x)`.
    Perturbed {
        base: Integrand,
        perturbation: PerturbationFamily,
    },
}

impl IntegrandFamily {
    pub fn is_constant(&self) -> bool {
        matches!(self, IntegrandFamily::Constant(_))
    }

    pub fn base(&self) -> &Integrand {
        match self {
            IntegrandFamily::Constant(l) | IntegrandFamily::Rescaled(l) => l,
            IntegrandFamily::Perturbed { base, .. } => base,
        }
    }

    pub fn member(&self, eps: f64) -> Result<Integrand> {
        match self {
            IntegrandFamily::Constant(l) => Ok(l.clone()),
            IntegrandFamily::Rescaled(l) => l.rescale(eps),
            IntegrandFamily::Perturbed { base, perturbation } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "eps",
                        reason: format!("must be positive and finite, got {eps}"),
                    });
                }
                let w = base.clone();
                let phi = perturbation.phi.clone();
                let inner_w = w.clone();
                let density = PerturbedMember { w: inner_w, phi, eps };
                let phi_w = perturbation.phi.clone();
                let a_w = w.bounds().a.clone();
                let weight: ScalarField = Arc::new(move |x: &[f64]| a_w(x) + phi_w(eps, x));
                let bounds = GrowthBounds::new(w.bounds().alpha, w.bounds().beta.max(1.0), w.bounds().p, weight)?;
                Ok(Integrand::new(
                    format!("{}+{}@eps={eps}", w.name(), perturbation.name),
                    w.dim(),
                    w.components(),
                    density,
                    bounds,
                )?
                .with_caratheodory(w.is_caratheodory())
                .with_v_dependence(w.is_v_dependent())
                .with_period(None)
                .with_breaks(w.breaks().to_vec()))
            }
        }
    }
}

struct PerturbedMember {
    w: Integrand,
    phi: PerturbationFn,
    eps: f64,
}

impl Density for PerturbedMember {
    fn eval(&self, x: &[f64], v: &[f64], xi: &[f64]) -> f64 {
        self.w.eval(x, v, xi) + (self.phi)(self.eps, x)
    }

    fn gradient(&self, x: &[f64], v: &[f64], xi: &[f64], dv: &mut [f64], dxi: &mut [f64]) -> bool {
        self.w.gradient(x, v, xi, dv, dxi);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: &[f64]) -> BuiltinParams {
        BuiltinParams {
            a: Some(a.to_vec()),
            ..Default::default()
        }
    }

    #[test]
    fn p_power_vanishes_at_zero_gradient() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(2.0), ..Default::default() }).unwrap();
        assert_eq!(l.eval(&[0.3], &[5.0], &[0.0]), 0.0);
    }

    #[test]
    fn quadratic_coeff_piecewise_values() {
        let l = make_builtin(BuiltinName::QuadraticCoeff1d, &p(&[1.0, 4.0])).unwrap();
        assert_eq!(l.eval(&[0.1], &[0.0], &[1.0]), 1.0);
        assert_eq!(l.eval(&[0.6], &[0.0], &[1.0]), 4.0);
        // breakpoints take the left cell value
        assert_eq!(l.eval(&[0.5], &[0.0], &[1.0]), 1.0);
        assert_eq!(l.eval(&[1.0], &[0.0], &[1.0]), 4.0);
        assert_eq!(l.eval(&[0.0], &[0.0], &[1.0]), 4.0);
    }

    #[test]
    fn double_well_values() {
        let l = make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap();
        assert_eq!(l.eval(&[0.0], &[0.0], &[1.0]), 0.0);
        assert_eq!(l.eval(&[0.0], &[0.0], &[-1.0]), 0.0);
        assert_eq!(l.eval(&[0.0], &[0.0], &[0.0]), 1.0);
        assert!(!l.bounds().is_coercive());
        let repaired = make_builtin(
            BuiltinName::DoubleWell1d,
            &BuiltinParams {
                c0: Some(0.1),
                quadratic_floor: Some(0.5),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(repaired.bounds().is_coercive());
        assert!(check_growth(&repaired, 2000, 3).passed);
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(builtin("nope", &BuiltinParams::default()), Err(Error::UnknownIntegrand(_))));
        assert!(matches!(
            make_builtin(BuiltinName::QuadraticCoeff1d, &BuiltinParams::default()),
            Err(Error::InvalidCoefficientTable(_))
        ));
        assert!(matches!(
            make_builtin(BuiltinName::QuadraticCoeff1d, &p(&[1.0, -4.0])),
            Err(Error::InvalidCoefficientTable(_))
        ));
        assert!(matches!(
            make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(1.0), ..Default::default() }),
            Err(Error::InvalidParameter { name: "p", .. })
        ));
    }

    #[test]
    fn rescale_substitutes_x_over_eps() {
        let l = make_builtin(BuiltinName::QuadraticCoeff1d, &p(&[1.0, 4.0])).unwrap();
        let r = l.rescale(0.5).unwrap();
        assert_eq!(r.eval(&[0.3], &[0.0], &[1.0]), 4.0);
        let id = l.rescale(1.0).unwrap();
        for x in [0.01, 0.3, 0.77, 2.4] {
            assert_eq!(id.eval(&[x], &[0.0], &[1.3]), l.eval(&[x], &[0.0], &[1.3]));
        }
        assert!(l.rescale(0.0).is_err());
        assert!(l.rescale(-1.0).is_err());
        assert_eq!(r.breaks()[0].period, 0.5);
    }

    #[test]
    fn rescale_of_x_independent_is_identity() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(3.0), d: Some(2), ..Default::default() }).unwrap();
        let r = l.rescale(0.013).unwrap();
        let xi = [0.4, -1.2];
        assert_eq!(r.eval(&[0.7, 0.1], &[0.0], &xi), l.eval(&[0.7, 0.1], &[0.0], &xi));
    }

    #[test]
    fn growth_checks() {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(2.0), ..Default::default() }).unwrap();
        let rep = check_growth(&l, 500, 1);
        assert!(rep.passed);
        assert_eq!(rep.lower_violation, 0.0);
        assert_eq!(rep.upper_violation, 0.0);
        assert!(rep.min_lower_slack.abs() < 1e-12);

        let q = make_builtin(BuiltinName::QuadraticCoeff1d, &p(&[1.0, 4.0])).unwrap();
        assert_eq!(q.bounds().alpha, 1.0);
        assert_eq!(q.bounds().beta, 4.0);
        assert!(check_growth(&q, 500, 2).passed);

        let dw = make_builtin(
            BuiltinName::DoubleWell1d,
            &BuiltinParams {
                alpha: Some(1.0),
                growth_p: Some(2.0),
                ..Default::default()
            },
        )
        .unwrap();
        let rep = check_growth(&dw, 500, 3);
        assert!(!rep.passed);
        // L(1) = 0 < α·1
        assert!(rep.lower_violation >= 1.0 - 1e-12);
        let worst = rep.worst_lower_xi.unwrap();
        // worst point of (ξ²−1)² − ξ² sits at |ξ| = √1.5
        assert!((worst[0].abs() - 1.5f64.sqrt()).abs() < 0.1);
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let ls = [
            make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(3.0), d: Some(2), m: Some(2), ..Default::default() }).unwrap(),
            make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap(),
            make_builtin(BuiltinName::Laminate2d, &p(&[1.0, 4.0])).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &ls {
            let n = l.dim() * l.components();
            for _ in 0..20 {
                let x: Vec<f64> = (0..l.dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
                let v = vec![0.0; l.components()];
                let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut dv = vec![0.0; l.components()];
                let mut dxi = vec![0.0; n];
                l.gradient(&x, &v, &xi, &mut dv, &mut dxi);
                for k in 0..n {
                    let h = 1e-6;
                    let mut zp = xi.clone();
                    zp[k] += h;
                    let mut zm = xi.clone();
                    zm[k] -= h;
                    let fd = (l.eval(&x, &v, &zp) - l.eval(&x, &v, &zm)) / (2.0 * h);
                    assert!((fd - dxi[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "{}: {fd} vs {}", l.name(), dxi[k]);
                }
            }
        }
    }

    #[test]
    fn sqrt_bump_is_dominated() {
        let fam = PerturbationFamily::sqrt_bump(0.5).unwrap();
        assert!(fam.domination_violation(2, 20_000, 4) <= 0.0);
        assert!(PerturbationFamily::sqrt_bump(2.0).is_err());
    }

    #[test]
    fn perturbed_family_member_adds_phi() {
        let w = make_builtin(BuiltinName::PPower, &BuiltinParams::default()).unwrap();
        let fam = IntegrandFamily::Perturbed {
            base: w,
            perturbation: PerturbationFamily::sqrt_bump(0.25).unwrap(),
        };
        let l = fam.member(0.01).unwrap();
        assert!((l.eval(&[0.005], &[0.0], &[1.0]) - (1.0 + 10.0 + 0.25)).abs() < 1e-12);
        assert!((l.eval(&[0.5], &[0.0], &[1.0]) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn frozen_ignores_position() {
        let l = Integrand::from_fn(
            "xv",
            1,
            1,
            |x: &[f64], v: &[f64], xi: &[f64]| (1.0 + x[0] * x[0]) * xi[0] * xi[0] + v[0] * v[0],
            GrowthBounds::constant_weight(1.0, 2.0, 2.0, 1.0).unwrap(),
        )
        .unwrap();
        let f = l.frozen_at(&[0.5], &[0.2]).unwrap();
        assert_eq!(f.eval(&[9.0], &[7.0], &[1.0]), 1.25 + 0.04);
        assert!(!f.is_x_dependent());
    }
}
