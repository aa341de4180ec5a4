//! Cubes, uniform tensor meshes and conforming Q1 fields with prescribed
//! boundary values.
//!
//! Nodes are numbered lexicographically with axis 0 running fastest:
//! `index = i₀ + n·i₁ + n²·i₂`. Each node carries `m` consecutive
//! components in every flat nodal buffer.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrand::Integrand;
use crate::matrix::Matrix;

/// Default cap on nodes per edge accepted by [`DiscreteField::refine`].
pub const DEFAULT_RESOLUTION_CAP: usize = 4097;

/// Open axis-aligned cube given by its lower corner and side length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub lower: Vec<f64>,
    pub side: f64,
}

impl Cube {
    pub fn new(lower: Vec<f64>, side: f64) -> Self {
        Self { lower, side }
    }

    pub fn centered(center: &[f64], side: f64) -> Self {
        Self {
            lower: center.iter().map(|c| c - 0.5 * side).collect(),
            side,
        }
    }

    /// The unit cell `(0,1)^d`.
    pub fn unit(dim: usize) -> Self {
        Self::new(vec![0.0; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().map(|l| l + 0.5 * self.side).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lower.iter().map(|l| l + self.side).collect()
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim() as i32)
    }

    pub fn diam(&self) -> f64 {
        self.side * (self.dim() as f64).sqrt()
    }

    /// Strict containment in the open cube.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        self.lower.iter().zip(x).all(|(l, xi)| *xi > *l && *xi < l + self.side)
    }

    /// `closure(other) ⊂ closure(self)` up to a relative tolerance.
    pub fn contains_cube(&self, other: &Cube) -> bool {
        let tol = 1e-12 * self.side.max(1.0);
        self.lower
            .iter()
            .zip(&other.lower)
            .all(|(a, b)| *b >= a - tol && b + other.side <= a + self.side + tol)
    }

    /// Open cubes are disjoint iff their projections on some axis are.
    pub fn is_disjoint(&self, other: &Cube) -> bool {
        let tol = 1e-12 * self.side.max(other.side).max(1.0);
        self.lower
            .iter()
            .zip(&other.lower)
            .any(|(a, b)| a + self.side <= b + tol || b + other.side <= a + tol)
    }

    /// The `2^d` dyadic children.
    pub fn children(&self) -> Vec<Cube> {
        let d = self.dim();
        let half = 0.5 * self.side;
        (0..1usize << d)
            .map(|mask| {
                let lower = (0..d)
                    .map(|j| self.lower[j] + if mask >> j & 1 == 1 { half } else { 0.0 })
                    .collect();
                Cube::new(lower, half)
            })
            .collect()
    }

    /// `t·Q` scaled about the center.
    pub fn dilate(&self, t: f64) -> Cube {
        Cube::centered(&self.center(), self.side * t)
    }
}

/// A cube together with a uniform tensor mesh of `resolution` nodes per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeDomain {
    center: Vec<f64>,
    half_side: f64,
    resolution: usize,
}

impl CubeDomain {
    pub fn new(center: Vec<f64>, half_side: f64, resolution: usize) -> Result<Self> {
        if center.is_empty() || center.len() > 3 {
            return Err(Error::InvalidParameter {
                name: "center",
                reason: format!("dimension must be 1, 2 or 3, got {}", center.len()),
            });
        }
        if !(half_side > 0.0 && half_side.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "half_side",
                reason: format!("must be positive and finite, got {half_side}"),
            });
        }
        if resolution < 2 {
            return Err(Error::InvalidParameter {
                name: "resolution",
                reason: format!("need at least 2 nodes per edge, got {resolution}"),
            });
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "center",
                reason: "coordinates must be finite".into(),
            });
        }
        Ok(Self {
            center,
            half_side,
            resolution,
        })
    }

    pub fn from_cube(cube: &Cube, resolution: usize) -> Result<Self> {
        Self::new(cube.center(), 0.5 * cube.side, resolution)
    }

    /// `Q_ρ(x)`: side `ρ`, centered at `x`.
    pub fn centered(x: &[f64], rho: f64, resolution: usize) -> Result<Self> {
        Self::new(x.to_vec(), 0.5 * rho, resolution)
    }

    /// The periodic cell `(0, n)^d`.
    pub fn cell(dim: usize, n: f64, resolution: usize) -> Result<Self> {
        Self::new(vec![0.5 * n; dim], 0.5 * n, resolution)
    }

    pub fn with_resolution(&self, resolution: usize) -> Result<Self> {
        Self::new(self.center.clone(), self.half_side, resolution)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn half_side(&self) -> f64 {
        self.half_side
    }

    pub fn side(&self) -> f64 {
        2.0 * self.half_side
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    pub fn diam(&self) -> f64 {
        self.side() * (self.dim() as f64).sqrt()
    }

    pub fn spacing(&self) -> f64 {
        self.side() / (self.resolution - 1) as f64
    }

    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().map(|c| c - self.half_side).collect()
    }

    pub fn cube(&self) -> Cube {
        Cube::new(self.lower(), self.side())
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn cell_count(&self) -> usize {
        (self.resolution - 1).pow(self.dim() as u32)
    }

    /// Multi-index of node `k`.
    pub fn node_index(&self, mut k: usize) -> [usize; 3] {
        let n = self.resolution;
        let mut idx = [0; 3];
        for slot in idx.iter_mut().take(self.dim()) {
            *slot = k % n;
            k /= n;
        }
        idx
    }

    pub fn node_coords(&self, k: usize) -> Vec<f64> {
        let idx = self.node_index(k);
        let h = self.spacing();
        let lo = self.lower();
        (0..self.dim()).map(|j| lo[j] + idx[j] as f64 * h).collect()
    }

    pub fn is_boundary_node(&self, k: usize) -> bool {
        let idx = self.node_index(k);
        idx[..self.dim()].iter().any(|&i| i == 0 || i == self.resolution - 1)
    }

    /// Do all coefficient breakpoints of `l` inside the cube fall on mesh lines?
    pub fn aligned_with(&self, l: &Integrand) -> bool {
        let h = self.spacing();
        let lo = self.lower();
        l.breaks().iter().all(|b| {
            if b.axis >= self.dim() {
                return true;
            }
            let a = lo[b.axis];
            b.points_in(a, a + self.side()).iter().all(|p| {
                let s = (p - a) / h;
                (s - s.round()).abs() <= 1e-9 * s.abs().max(1.0)
            })
        })
    }
}

/// Per-cell quadrature: tensor midpoint or tensor 2-point Gauss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    Midpoint,
    #[default]
    Gauss2,
}

impl QuadratureRule {
    fn points_1d(self) -> Vec<(f64, f64)> {
        match self {
            QuadratureRule::Midpoint => vec![(0.5, 1.0)],
            QuadratureRule::Gauss2 => {
                let g = 0.5 / 3f64.sqrt();
                vec![(0.5 - g, 0.5), (0.5 + g, 0.5)]
            }
        }
    }

    /// Reference points in `[0,1]^d` with weights summing to 1.
    pub fn tensor(self, dim: usize) -> Vec<(Vec<f64>, f64)> {
        let pts = self.points_1d();
        let q = pts.len();
        (0..q.pow(dim as u32))
            .map(|mut k| {
                let mut pos = Vec::with_capacity(dim);
                let mut w = 1.0;
                for _ in 0..dim {
                    let (p, pw) = pts[k % q];
                    pos.push(p);
                    w *= pw;
                    k /= q;
                }
                (pos, w)
            })
            .collect()
    }
}

/// Quadrature selection; `Auto` picks Gauss when coefficient breakpoints
/// sit on mesh lines and midpoint otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureChoice {
    #[default]
    Auto,
    Gauss2,
    Midpoint,
}

impl QuadratureChoice {
    pub fn resolve(self, l: &Integrand, domain: &CubeDomain) -> QuadratureRule {
        match self {
            QuadratureChoice::Gauss2 => QuadratureRule::Gauss2,
            QuadratureChoice::Midpoint => QuadratureRule::Midpoint,
            QuadratureChoice::Auto => {
                if domain.aligned_with(l) {
                    QuadratureRule::Gauss2
                } else {
                    QuadratureRule::Midpoint
                }
            }
        }
    }
}

/// Boundary field `u_bd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundaryData {
    /// `y ↦ v₀ + ξ(y − anchor)`.
    Affine { v0: Vec<f64>, xi: Matrix, anchor: Vec<f64> },
    /// Full nodal field on the domain's mesh; only its trace matters.
    Nodal(Vec<f64>),
}

impl BoundaryData {
    pub fn affine(v0: Vec<f64>, xi: Matrix, anchor: Vec<f64>) -> Self {
        BoundaryData::Affine { v0, xi, anchor }
    }

    /// Linear data `y ↦ ξ·y` anchored at the origin.
    pub fn linear(xi: Matrix) -> Self {
        let (m, d) = (xi.rows(), xi.cols());
        BoundaryData::Affine {
            v0: vec![0.0; m],
            xi,
            anchor: vec![0.0; d],
        }
    }

    pub fn eval_affine(v0: &[f64], xi: &Matrix, anchor: &[f64], y: &[f64]) -> Vec<f64> {
        let dy: Vec<f64> = y.iter().zip(anchor).map(|(a, b)| a - b).collect();
        xi.apply(&dy).iter().zip(v0).map(|(a, b)| a + b).collect()
    }
}

/// Cells that take part in the energy; nodes touching an inactive cell are
/// held fixed at the boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    active: Vec<bool>,
}

impl CellMask {
    pub fn all(domain: &CubeDomain) -> Self {
        Self {
            active: vec![true; domain.cell_count()],
        }
    }

    /// Deactivates every cell whose center lies in one of `holes`.
    pub fn excluding(domain: &CubeDomain, holes: &[Cube]) -> Self {
        let topo = Topology::new(domain);
        let active = (0..domain.cell_count())
            .map(|c| {
                let center = topo.cell_center(domain, c);
                !holes.iter().any(|q| q.contains_point(&center))
            })
            .collect();
        Self { active }
    }

    pub fn is_active(&self, cell: usize) -> bool {
        self.active[cell]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Mesh bookkeeping shared by all fields on the same domain and mask.
#[derive(Debug, Clone)]
struct Topology {
    dim: usize,
    n: usize,
    strides: [usize; 3],
    corner_offsets: Vec<usize>,
}

impl Topology {
    fn new(domain: &CubeDomain) -> Self {
        let d = domain.dim();
        let n = domain.resolution();
        let strides = [1, n, n * n];
        let corner_offsets = (0..1usize << d)
            .map(|k| (0..d).filter(|j| k >> j & 1 == 1).map(|j| strides[j]).sum())
            .collect();
        Self {
            dim: d,
            n,
            strides,
            corner_offsets,
        }
    }

    fn cell_multi(&self, mut c: usize) -> [usize; 3] {
        let nc = self.n - 1;
        let mut idx = [0; 3];
        for slot in idx.iter_mut().take(self.dim) {
            *slot = c % nc;
            c /= nc;
        }
        idx
    }

    fn cell_origin(&self, c: usize) -> usize {
        let idx = self.cell_multi(c);
        (0..self.dim).map(|j| idx[j] * self.strides[j]).sum()
    }

    fn cell_center(&self, domain: &CubeDomain, c: usize) -> Vec<f64> {
        let idx = self.cell_multi(c);
        let h = domain.spacing();
        let lo = domain.lower();
        (0..self.dim).map(|j| lo[j] + (idx[j] as f64 + 0.5) * h).collect()
    }

    fn cells_of_node(&self, k: usize) -> Vec<usize> {
        let nc = self.n - 1;
        let mut idx = [0usize; 3];
        let mut r = k;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = r % self.n;
            r /= self.n;
        }
        let mut out = Vec::new();
        for mask in 0..1usize << self.dim {
            let mut c = 0;
            let mut mult = 1;
            let mut ok = true;
            for j in 0..self.dim {
                let shift = mask >> j & 1;
                if idx[j] < shift || idx[j] - shift >= nc {
                    ok = false;
                    break;
                }
                c += (idx[j] - shift) * mult;
                mult *= nc;
            }
            if ok {
                out.push(c);
            }
        }
        out
    }
}

/// Continuous Q1 field `u_bd + φ` where `φ` vanishes on every fixed node.
#[derive(Debug, Clone)]
pub struct DiscreteField {
    domain: CubeDomain,
    components: usize,
    boundary: BoundaryData,
    base: Vec<f64>,
    perturbation: Vec<f64>,
    mask: Option<Arc<CellMask>>,
    free: Arc<Vec<usize>>,
}

impl PartialEq for DiscreteField {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain
            && self.components == other.components
            && self.base == other.base
            && self.perturbation == other.perturbation
            && self.mask == other.mask
    }
}

impl DiscreteField {
    pub fn new(domain: CubeDomain, components: usize, boundary: BoundaryData) -> Result<Self> {
        let base = match &boundary {
            BoundaryData::Affine { v0, xi, anchor } => {
                if v0.len() != components || xi.rows() != components || xi.cols() != domain.dim() || anchor.len() != domain.dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "affine data (|v0| = {}, ξ {}×{}, |anchor| = {}) incompatible with d = {}, m = {}",
                        v0.len(),
                        xi.rows(),
                        xi.cols(),
                        anchor.len(),
                        domain.dim(),
                        components
                    )));
                }
                let mut base = Vec::with_capacity(domain.node_count() * components);
                for k in 0..domain.node_count() {
                    base.extend(BoundaryData::eval_affine(v0, xi, anchor, &domain.node_coords(k)));
                }
                base
            }
            BoundaryData::Nodal(values) => {
                if values.len() != domain.node_count() * components {
                    return Err(Error::DimensionMismatch(format!(
                        "nodal data has {} entries, expected {}",
                        values.len(),
                        domain.node_count() * components
                    )));
                }
                values.clone()
            }
        };
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "boundary",
                reason: "boundary data must be finite".into(),
            });
        }
        let free = Arc::new(free_nodes(&domain, None));
        Ok(Self {
            perturbation: vec![0.0; base.len()],
            domain,
            components,
            boundary,
            base,
            mask: None,
            free,
        })
    }

    /// Affine field `v₀ + ξ(y − anchor)` with zero perturbation.
    pub fn affine(domain: CubeDomain, v0: Vec<f64>, xi: Matrix, anchor: Vec<f64>) -> Result<Self> {
        let m = v0.len();
        Self::new(domain, m, BoundaryData::affine(v0, xi, anchor))
    }

    /// Restricts the energy to active cells of `mask`.
    pub fn with_mask(mut self, mask: CellMask) -> Result<Self> {
        if mask.active.len() != self.domain.cell_count() {
            return Err(Error::DimensionMismatch("cell mask does not match the mesh".into()));
        }
        self.free = Arc::new(free_nodes(&self.domain, Some(&mask)));
        self.mask = Some(Arc::new(mask));
        let m = self.components;
        let mut kept = vec![0.0; self.perturbation.len()];
        for &k in self.free.iter() {
            kept[k * m..(k + 1) * m].copy_from_slice(&self.perturbation[k * m..(k + 1) * m]);
        }
        self.perturbation = kept;
        Ok(self)
    }

    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.boundary
    }

    pub fn mask(&self) -> Option<&CellMask> {
        self.mask.as_deref()
    }

    /// Indices of free (non-fixed) nodes in increasing order.
    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Number of optimization unknowns: free nodes times components.
    pub fn free_len(&self) -> usize {
        self.free.len() * self.components
    }

    /// Total nodal values `u_bd + φ`.
    pub fn values(&self) -> Vec<f64> {
        self.base.iter().zip(&self.perturbation).map(|(a, b)| a + b).collect()
    }

    pub fn base_values(&self) -> &[f64] {
        &self.base
    }

    pub fn perturbation_values(&self) -> &[f64] {
        &self.perturbation
    }

    pub fn is_unperturbed(&self) -> bool {
        self.perturbation.iter().all(|p| *p == 0.0)
    }

    /// Perturbation restricted to free nodes.
    pub fn free_values(&self) -> Vec<f64> {
        let m = self.components;
        let mut out = Vec::with_capacity(self.free_len());
        for &k in self.free.iter() {
            out.extend_from_slice(&self.perturbation[k * m..(k + 1) * m]);
        }
        out
    }

    pub fn set_free_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.free_len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} free values, got {}",
                self.free_len(),
                values.len()
            )));
        }
        let m = self.components;
        for (i, &k) in self.free.iter().enumerate() {
            self.perturbation[k * m..(k + 1) * m].copy_from_slice(&values[i * m..(i + 1) * m]);
        }
        Ok(())
    }

    pub fn with_free_values(mut self, values: &[f64]) -> Result<Self> {
        self.set_free_values(values)?;
        Ok(self)
    }

    /// Field value and gradient at `x ∈ closure(domain)`. For unperturbed
    /// affine fields the affine data is returned exactly.
    pub fn tangent_at(&self, x: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        if x.len() != self.domain.dim() {
            return Err(Error::DimensionMismatch(format!("point has dimension {}, domain {}", x.len(), self.domain.dim())));
        }
        if let (BoundaryData::Affine { v0, xi, anchor }, true) = (&self.boundary, self.is_unperturbed()) {
            return Ok((BoundaryData::eval_affine(v0, xi, anchor, x), xi.clone()));
        }
        let d = self.domain.dim();
        let m = self.components;
        let h = self.domain.spacing();
        let lo = self.domain.lower();
        let n = self.domain.resolution();
        let topo = Topology::new(&self.domain);
        let mut cell = 0;
        let mut mult = 1;
        let mut local = vec![0.0; d];
        for j in 0..d {
            let s = ((x[j] - lo[j]) / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            local[j] = s - i as f64;
            cell += i * mult;
            mult *= n - 1;
        }
        let origin = topo.cell_origin(cell);
        let vals = self.values();
        let mut v = vec![0.0; m];
        let mut g = Matrix::zeros(m, d);
        for (k, off) in topo.corner_offsets.iter().enumerate() {
            let node = origin + off;
            let (phi, dphi) = shape(k, &local, h);
            for i in 0..m {
                let u = vals[node * m + i];
                v[i] += phi * u;
                for (j, dp) in dphi.iter().enumerate().take(d) {
                    g.as_mut_slice()[i * d + j] += dp * u;
                }
            }
        }
        Ok((v, g))
    }

    /// Boundary data reproducing this field on `target` (a subcube of the
    /// domain). Unperturbed affine fields keep their affine description.
    pub fn trace_on(&self, target: &CubeDomain) -> Result<BoundaryData> {
        if !self.domain.cube().contains_cube(&target.cube()) {
            return Err(Error::DimensionMismatch("trace target leaves the field's domain".into()));
        }
        if let (BoundaryData::Affine { .. }, true) = (&self.boundary, self.is_unperturbed()) {
            return Ok(self.boundary.clone());
        }
        let mut values = Vec::with_capacity(target.node_count() * self.components);
        for k in 0..target.node_count() {
            values.extend(self.tangent_at(&target.node_coords(k))?.0);
        }
        Ok(BoundaryData::Nodal(values))
    }

    /// Doubles the mesh (`2r − 1` nodes per edge) by exact Q1 interpolation.
    pub fn refine(&self, cap: usize) -> Result<Self> {
        let r = self.domain.resolution();
        let nr = 2 * r - 1;
        if nr > cap {
            return Err(Error::ResolutionOverflow { requested: nr, cap });
        }
        let fine = self.domain.with_resolution(nr)?;
        let base = prolong(&self.domain, &fine, &self.base, self.components);
        let perturbation = prolong(&self.domain, &fine, &self.perturbation, self.components);
        let boundary = match &self.boundary {
            BoundaryData::Affine { .. } => self.boundary.clone(),
            BoundaryData::Nodal(_) => BoundaryData::Nodal(base.clone()),
        };
        let base = match &boundary {
            BoundaryData::Affine { v0, xi, anchor } => {
                let mut b = Vec::with_capacity(base.len());
                for k in 0..fine.node_count() {
                    b.extend(BoundaryData::eval_affine(v0, xi, anchor, &fine.node_coords(k)));
                }
                b
            }
            BoundaryData::Nodal(_) => base,
        };
        let mask = self.mask.as_ref().map(|mask| {
            let coarse = Topology::new(&self.domain);
            let ft = Topology::new(&fine);
            let active = (0..fine.cell_count())
                .map(|c| {
                    let idx = ft.cell_multi(c);
                    let mut cc = 0;
                    let mut mult = 1;
                    for &i in idx.iter().take(self.domain.dim()) {
                        cc += (i / 2) * mult;
                        mult *= coarse.n - 1;
                    }
                    mask.active[cc]
                })
                .collect();
            Arc::new(CellMask { active })
        });
        let free = Arc::new(free_nodes(&fine, mask.as_deref()));
        Ok(Self {
            domain: fine,
            components: self.components,
            boundary,
            base,
            perturbation,
            mask,
            free,
        })
    }

    /// `(∫|φ|^p, ∫|∇φ|^p)` for the perturbation alone.
    pub fn perturbation_norms(&self, p: f64, rule: QuadratureRule) -> (f64, f64) {
        let mut zero = self.clone();
        zero.base = vec![0.0; self.base.len()];
        let d = self.domain.dim();
        let m = self.components;
        let elem = Element::new(d, self.domain.spacing(), rule);
        let topo = Topology::new(&self.domain);
        let vals = zero.values();
        let (mut a, mut b) = (0.0, 0.0);
        let mut u = vec![0.0; m];
        let mut g = vec![0.0; m * d];
        for c in 0..self.domain.cell_count() {
            if !self.cell_active(c) {
                continue;
            }
            let origin = topo.cell_origin(c);
            for q in &elem.points {
                interpolate(&vals, origin, &topo.corner_offsets, q, m, d, &mut u, &mut g);
                a += q.weight * crate::matrix::frobenius(&u).powf(p);
                b += q.weight * crate::matrix::frobenius(&g).powf(p);
            }
        }
        (a, b)
    }

    fn cell_active(&self, c: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.active[c])
    }

    /// CSV dump: node index, coordinates, components of `u_bd + φ`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.domain.dim();
        let m = self.components;
        let mut header = vec!["node".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        let vals = self.values();
        for k in 0..self.domain.node_count() {
            let mut row = vec![k.to_string()];
            row.extend(self.domain.node_coords(k).iter().map(|x| format!("{x:e}")));
            row.extend(vals[k * m..(k + 1) * m].iter().map(|x| format!("{x:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Flat little-endian `f64` dump of `u_bd + φ`, `m` values per node.
    pub fn write_binary<W: Write>(&self, mut writer: W) -> Result<()> {
        for v in self.values() {
            writer.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn free_nodes(domain: &CubeDomain, mask: Option<&CellMask>) -> Vec<usize> {
    let topo = Topology::new(domain);
    (0..domain.node_count())
        .filter(|&k| !domain.is_boundary_node(k))
        .filter(|&k| match mask {
            None => true,
            Some(mask) => topo.cells_of_node(k).iter().all(|&c| mask.active[c]),
        })
        .collect()
}

fn prolong(coarse: &CubeDomain, fine: &CubeDomain, values: &[f64], m: usize) -> Vec<f64> {
    let d = coarse.dim();
    let n = coarse.resolution();
    let mut out = Vec::with_capacity(fine.node_count() * m);
    for k in 0..fine.node_count() {
        let idx = fine.node_index(k);
        // average over the coarse corners of the (possibly degenerate) parent box
        let mut parents = vec![0usize];
        for j in 0..d {
            let lo = idx[j] / 2;
            let stride = n.pow(j as u32);
            if idx[j] % 2 == 0 {
                parents.iter_mut().for_each(|p| *p += lo * stride);
            } else {
                let mut next = Vec::with_capacity(parents.len() * 2);
                for p in &parents {
                    next.push(p + lo * stride);
                    next.push(p + (lo + 1) * stride);
                }
                parents = next;
            }
        }
        let w = 1.0 / parents.len() as f64;
        for i in 0..m {
            out.push(parents.iter().map(|p| values[p * m + i]).sum::<f64>() * w);
        }
    }
    out
}

/// Value and gradient of the Q1 shape function for corner `k` at local
/// coordinates `s ∈ [0,1]^d` on a cell of width `h`.
fn shape(k: usize, s: &[f64], h: f64) -> (f64, [f64; 3]) {
    let d = s.len();
    let mut phi = 1.0;
    let mut grad = [1.0; 3];
    for j in 0..d {
        let (f, df) = if k >> j & 1 == 1 { (s[j], 1.0) } else { (1.0 - s[j], -1.0) };
        phi *= f;
        for (l, g) in grad.iter_mut().enumerate().take(d) {
            *g *= if l == j { df / h } else { f };
        }
    }
    (phi, grad)
}

#[derive(Debug, Clone)]
struct QuadPoint {
    /// Offset from the cell's lower corner in physical units.
    offset: [f64; 3],
    /// Weight including the cell volume.
    weight: f64,
    phi: Vec<f64>,
    dphi: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
struct Element {
    points: Vec<QuadPoint>,
}

impl Element {
    fn new(dim: usize, h: f64, rule: QuadratureRule) -> Self {
        let vol = h.powi(dim as i32);
        let points = rule
            .tensor(dim)
            .into_iter()
            .map(|(s, w)| {
                let mut offset = [0.0; 3];
                for j in 0..dim {
                    offset[j] = s[j] * h;
                }
                let (phi, dphi) = (0..1usize << dim).map(|k| shape(k, &s, h)).unzip();
                QuadPoint {
                    offset,
                    weight: w * vol,
                    phi,
                    dphi,
                }
            })
            .collect();
        Self { points }
    }
}

#[allow(clippy::too_many_arguments)]
fn interpolate(vals: &[f64], origin: usize, corners: &[usize], q: &QuadPoint, m: usize, d: usize, u: &mut [f64], g: &mut [f64]) {
    u.iter_mut().for_each(|x| *x = 0.0);
    g.iter_mut().for_each(|x| *x = 0.0);
    for (k, off) in corners.iter().enumerate() {
        let node = origin + off;
        let phi = q.phi[k];
        let dphi = &q.dphi[k];
        for i in 0..m {
            let val = vals[node * m + i];
            u[i] += phi * val;
            for j in 0..d {
                g[i * d + j] += dphi[j] * val;
            }
        }
    }
}

/// Energy evaluator over the free values of a field template.
#[derive(Clone)]
pub struct Assembler<'a> {
    l: &'a Integrand,
    template: &'a DiscreteField,
    elem: Element,
    topo: Topology,
    lower: Vec<f64>,
    h: f64,
}

impl<'a> Assembler<'a> {
    pub fn new(l: &'a Integrand, template: &'a DiscreteField, rule: QuadratureRule) -> Result<Self> {
        let dom = template.domain();
        if l.dim() != dom.dim() || l.components() != template.components() {
            return Err(Error::DimensionMismatch(format!(
                "integrand is d = {}, m = {}; field is d = {}, m = {}",
                l.dim(),
                l.components(),
                dom.dim(),
                template.components()
            )));
        }
        Ok(Self {
            l,
            template,
            elem: Element::new(dom.dim(), dom.spacing(), rule),
            topo: Topology::new(dom),
            lower: dom.lower(),
            h: dom.spacing(),
        })
    }

    fn nodal(&self, free: &[f64]) -> Vec<f64> {
        let m = self.template.components;
        let mut vals = self.template.values();
        for (i, &k) in self.template.free.iter().enumerate() {
            for c in 0..m {
                vals[k * m + c] = self.template.base[k * m + c] + free[i * m + c];
            }
        }
        vals
    }

    fn qp_position(&self, cell: usize, q: &QuadPoint, x: &mut [f64]) {
        let idx = self.topo.cell_multi(cell);
        for j in 0..self.topo.dim {
            x[j] = self.lower[j] + idx[j] as f64 * self.h + q.offset[j];
        }
    }

    /// Energy of `u_bd + φ` where `φ` has the given free values.
    pub fn energy(&self, free: &[f64]) -> Result<f64> {
        let vals = self.nodal(free);
        self.energy_of_nodal(&vals)
    }

    fn energy_of_nodal(&self, vals: &[f64]) -> Result<f64> {
        let d = self.topo.dim;
        let m = self.template.components;
        let mut u = vec![0.0; m];
        let mut g = vec![0.0; m * d];
        let mut x = vec![0.0; d];
        let mut total = 0.0;
        for c in 0..self.template.domain.cell_count() {
            if !self.template.cell_active(c) {
                continue;
            }
            let origin = self.topo.cell_origin(c);
            for q in &self.elem.points {
                interpolate(vals, origin, &self.topo.corner_offsets, q, m, d, &mut u, &mut g);
                self.qp_position(c, q, &mut x);
                let val = self.l.eval(&x, &u, &g);
                if !val.is_finite() {
                    return Err(Error::NonFiniteEnergy { x: x.clone() });
                }
                total += q.weight * val;
            }
        }
        Ok(total)
    }

    /// Energy and its gradient with respect to the free values.
    pub fn energy_and_gradient(&self, free: &[f64], grad: &mut [f64]) -> Result<f64> {
        let vals = self.nodal(free);
        let d = self.topo.dim;
        let m = self.template.components;
        let n_nodes = self.template.domain.node_count();
        let mut full = vec![0.0; n_nodes * m];
        let mut u = vec![0.0; m];
        let mut g = vec![0.0; m * d];
        let mut dv = vec![0.0; m];
        let mut dxi = vec![0.0; m * d];
        let mut x = vec![0.0; d];
        let mut total = 0.0;
        for c in 0..self.template.domain.cell_count() {
            if !self.template.cell_active(c) {
                continue;
            }
            let origin = self.topo.cell_origin(c);
            for q in &self.elem.points {
                interpolate(&vals, origin, &self.topo.corner_offsets, q, m, d, &mut u, &mut g);
                self.qp_position(c, q, &mut x);
                let val = self.l.eval(&x, &u, &g);
                if !val.is_finite() {
                    return Err(Error::NonFiniteEnergy { x: x.clone() });
                }
                total += q.weight * val;
                self.l.gradient(&x, &u, &g, &mut dv, &mut dxi);
                for (k, off) in self.topo.corner_offsets.iter().enumerate() {
                    let node = origin + off;
                    let phi = q.phi[k];
                    let dphi = &q.dphi[k];
                    for i in 0..m {
                        let mut s = dv[i] * phi;
                        for j in 0..d {
                            s += dxi[i * d + j] * dphi[j];
                        }
                        full[node * m + i] += q.weight * s;
                    }
                }
            }
        }
        for (i, &k) in self.template.free.iter().enumerate() {
            grad[i * m..(i + 1) * m].copy_from_slice(&full[k * m..(k + 1) * m]);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(total)
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn integrand(&self) -> &Integrand {
        self.l
    }
}

/// `Σ_cells Σ_qp w·L(x_qp, u(x_qp), ∇u)`.
pub fn energy(l: &Integrand, f: &DiscreteField, rule: QuadratureRule) -> Result<f64> {
    let asm = Assembler::new(l, f, rule)?;
    asm.energy_of_nodal(&f.values())
}

/// Gradient of [`energy`] with respect to the free nodal values.
pub fn energy_gradient(l: &Integrand, f: &DiscreteField, rule: QuadratureRule) -> Result<Vec<f64>> {
    let asm = Assembler::new(l, f, rule)?;
    let mut g = vec![0.0; f.free_len()];
    asm.energy_and_gradient(&f.free_values(), &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrand::{make_builtin, BuiltinName, BuiltinParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p_power(p: f64, d: usize, m: usize) -> Integrand {
        make_builtin(
            BuiltinName::PPower,
            &BuiltinParams {
                p: Some(p),
                d: Some(d),
                m: Some(m),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn cube_domain_geometry() {
        let q = CubeDomain::centered(&[0.5, 0.5], 0.2, 5).unwrap();
        assert!((q.volume() - 0.04).abs() < 1e-15);
        assert!((q.diam() - 0.2 * 2f64.sqrt()).abs() < 1e-15);
        assert!((q.spacing() - 0.05).abs() < 1e-15);
        assert!(CubeDomain::centered(&[0.0], 1.0, 1).is_err());
        assert!(CubeDomain::centered(&[0.0], 0.0, 3).is_err());
    }

    #[test]
    fn quadrature_weights_partition_cell() {
        for rule in [QuadratureRule::Midpoint, QuadratureRule::Gauss2] {
            for d in 1..=3 {
                let pts = rule.tensor(d);
                assert!(pts.iter().all(|(_, w)| *w > 0.0));
                assert!((pts.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn affine_energy_on_unit_cube() {
        for d in 1..=3 {
            let l = p_power(2.0, d, 1);
            let dom = CubeDomain::cell(d, 1.0, 4).unwrap();
            let f = DiscreteField::affine(dom.clone(), vec![0.0], Matrix::unit(1, d, 0, 0), vec![0.0; d]).unwrap();
            assert!((energy(&l, &f, QuadratureRule::Gauss2).unwrap() - 1.0).abs() < 1e-12);
            let z = DiscreteField::affine(dom, vec![0.0], Matrix::zeros(1, d), vec![0.0; d]).unwrap();
            assert_eq!(energy(&l, &z, QuadratureRule::Gauss2).unwrap(), 0.0);
        }
    }

    #[test]
    fn piecewise_coefficient_integral_on_aligned_mesh() {
        let l = make_builtin(
            BuiltinName::QuadraticCoeff1d,
            &BuiltinParams {
                a: Some(vec![1.0, 4.0]),
                ..Default::default()
            },
        )
        .unwrap();
        let dom = CubeDomain::cell(1, 1.0, 9).unwrap();
        assert!(dom.aligned_with(&l));
        assert_eq!(QuadratureChoice::Auto.resolve(&l, &dom), QuadratureRule::Gauss2);
        let f = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(1.0), vec![0.0]).unwrap();
        assert!((energy(&l, &f, QuadratureRule::Gauss2).unwrap() - 2.5).abs() < 1e-13);
        let off = CubeDomain::cell(1, 1.0, 8).unwrap();
        assert!(!off.aligned_with(&l));
        assert_eq!(QuadratureChoice::Auto.resolve(&l, &off), QuadratureRule::Midpoint);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (p_power(4.0, 2, 2), 6usize),
            (
                make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap(),
                12,
            ),
            (
                make_builtin(
                    BuiltinName::Laminate2d,
                    &BuiltinParams {
                        a: Some(vec![1.0, 4.0]),
                        ..Default::default()
                    },
                )
                .unwrap(),
                5,
            ),
        ];
        for (l, r) in cases {
            let d = l.dim();
            let m = l.components();
            let dom = CubeDomain::cell(d, 1.0, r).unwrap();
            let xi = Matrix::from_row_major(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut f = DiscreteField::affine(dom, vec![0.1; m], xi, vec![0.0; d]).unwrap();
            let pert: Vec<f64> = (0..f.free_len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            f.set_free_values(&pert).unwrap();
            let asm = Assembler::new(&l, &f, QuadratureRule::Gauss2).unwrap();
            let mut g = vec![0.0; f.free_len()];
            asm.energy_and_gradient(&pert, &mut g).unwrap();
            for _ in 0..10 {
                let k = rng.gen_range(0..pert.len());
                let h = 1e-6;
                let mut p = pert.clone();
                p[k] += h;
                let ep = asm.energy(&p).unwrap();
                p[k] -= 2.0 * h;
                let em = asm.energy(&p).unwrap();
                let fd = (ep - em) / (2.0 * h);
                let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                assert!((fd - g[k]).abs() <= 1e-5 * scale.max(fd.abs()), "{}: fd {fd} vs {}", l.name(), g[k]);
            }
        }
    }

    #[test]
    fn affine_is_stationary_for_quadratic() {
        let l = p_power(2.0, 2, 1);
        let dom = CubeDomain::cell(2, 1.0, 7).unwrap();
        let f = DiscreteField::affine(dom, vec![0.3], Matrix::from_row_major(1, 2, vec![0.7, -1.1]), vec![0.0; 2]).unwrap();
        let g = energy_gradient(&l, &f, QuadratureRule::Gauss2).unwrap();
        assert!(g.iter().all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn gradient_is_local() {
        let l = p_power(2.0, 2, 1);
        let dom = CubeDomain::cell(2, 1.0, 9).unwrap();
        let mut f = DiscreteField::affine(dom.clone(), vec![0.0], Matrix::zeros(1, 2), vec![0.0; 2]).unwrap();
        let mut pert = vec![0.0; f.free_len()];
        let target = 3 + 9 * 4;
        let pos = f.free_nodes().iter().position(|&k| k == target).unwrap();
        pert[pos] = 1.0;
        f.set_free_values(&pert).unwrap();
        let g = energy_gradient(&l, &f, QuadratureRule::Gauss2).unwrap();
        for (i, &k) in f.free_nodes().iter().enumerate() {
            let a = dom.node_index(k);
            let near = (a[0] as i64 - 3).abs() <= 1 && (a[1] as i64 - 4).abs() <= 1;
            if !near {
                assert_eq!(g[i], 0.0);
            }
        }
        assert!(g[pos] > 0.0);
    }

    #[test]
    fn refine_preserves_affine_and_energy() {
        let l = p_power(2.0, 2, 1);
        let dom = CubeDomain::cell(2, 1.0, 5).unwrap();
        let f = DiscreteField::affine(dom, vec![0.2], Matrix::from_row_major(1, 2, vec![1.0, 2.0]), vec![0.0; 2]).unwrap();
        let r = f.refine(DEFAULT_RESOLUTION_CAP).unwrap();
        assert_eq!(r.domain().resolution(), 9);
        let e0 = energy(&l, &f, QuadratureRule::Gauss2).unwrap();
        let e1 = energy(&l, &r, QuadratureRule::Gauss2).unwrap();
        assert!((e0 - e1).abs() < 1e-12);
        assert!(f.refine(8).is_err());
    }

    #[test]
    fn refine_twice_nests() {
        let dom = CubeDomain::cell(1, 1.0, 3).unwrap();
        let mut f = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(0.0), vec![0.0]).unwrap();
        f.set_free_values(&[1.0]).unwrap();
        let r2 = f.refine(100).unwrap().refine(100).unwrap();
        assert_eq!(r2.domain().resolution(), 9);
        let v = r2.values();
        let expect = [0.0, 0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn poincare_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rho in [1.0, 0.25] {
            let dom = CubeDomain::centered(&[0.0, 0.0], rho, 9).unwrap();
            let mut f = DiscreteField::affine(dom, vec![0.0], Matrix::zeros(1, 2), vec![0.0; 2]).unwrap();
            let pert: Vec<f64> = (0..f.free_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            f.set_free_values(&pert).unwrap();
            let (a, b) = f.perturbation_norms(2.0, QuadratureRule::Gauss2);
            // Friedrichs constant for the square is 1/(2π²)
            assert!(a <= rho * rho / (2.0 * std::f64::consts::PI.powi(2)) * b * 1.0001);
        }
    }

    #[test]
    fn mask_fixes_nodes_around_holes() {
        let dom = CubeDomain::cell(1, 1.0, 9).unwrap();
        let f = DiscreteField::affine(dom.clone(), vec![0.0], Matrix::scalar(1.0), vec![0.0]).unwrap();
        let mask = CellMask::excluding(&dom, &[Cube::new(vec![0.25], 0.5)]);
        assert_eq!(mask.active_count(), 4);
        let f = f.with_mask(mask).unwrap();
        assert_eq!(f.free_nodes(), &[1, 7]);
    }

    #[test]
    fn tangent_of_perturbed_field() {
        let dom = CubeDomain::cell(1, 1.0, 3).unwrap();
        let mut f = DiscreteField::affine(dom, vec![0.0], Matrix::scalar(1.0), vec![0.0]).unwrap();
        f.set_free_values(&[0.5]).unwrap();
        let (v, g) = f.tangent_at(&[0.25]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((g.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dumps_have_expected_layout() {
        let dom = CubeDomain::cell(2, 1.0, 3).unwrap();
        let f = DiscreteField::affine(dom, vec![0.0, 1.0], Matrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        let mut bin = Vec::new();
        f.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 9 * 2 * 8);
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("node,x0,x1,u0,u1"));
    }
}
