//! Set functions on open cubes: sampled λ-derivatives, dyadic Vitali
//! envelopes and sublevel covers.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{solve_cell, CellProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{BoundaryData, Cube, CubeDomain};
use crate::integrand::Integrand;
use crate::schedule::check_decreasing;

type Evaluator = Arc<dyn Fn(&Cube) -> Result<f64> + Send + Sync>;
type CacheKey = (u64, [u64; 3]);

/// `G: open cubes of O → (−∞, +∞]`.
#[derive(Clone)]
pub struct CubeSetFunction {
    name: String,
    ambient: Cube,
    eval: Evaluator,
    cache: Option<Arc<RwLock<HashMap<CacheKey, f64>>>>,
}

impl fmt::Debug for CubeSetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CubeSetFunction")
            .field("name", &self.name)
            .field("ambient", &self.ambient)
            .field("memoized", &self.cache.is_some())
            .finish()
    }
}

fn key(q: &Cube) -> CacheKey {
    let mut c = [0u64; 3];
    for (slot, l) in c.iter_mut().zip(&q.lower) {
        *slot = l.to_bits();
    }
    (q.side.to_bits(), c)
}

impl CubeSetFunction {
    pub fn try_from_fn<F>(name: impl Into<String>, ambient: Cube, f: F) -> Self
    where
        F: Fn(&Cube) -> Result<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            ambient,
            eval: Arc::new(f),
            cache: None,
        }
    }

    pub fn from_fn<F>(name: impl Into<String>, ambient: Cube, f: F) -> Self
    where
        F: Fn(&Cube) -> f64 + Send + Sync + 'static,
    {
        Self::try_from_fn(name, ambient, move |q| Ok(f(q)))
    }

    /// `G(Q) = c·λ(Q)`.
    pub fn scaled_measure(ambient: Cube, c: f64) -> Self {
        Self::from_fn(format!("{c}*lambda"), ambient, move |q| c * q.volume())
    }

    /// `G(Q) = ∫_Q f` by composite tensor Gauss–Legendre quadrature
    /// (`pieces` subintervals per axis, 3 points each).
    pub fn from_density<F>(name: impl Into<String>, ambient: Cube, f: F, pieces: usize) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let pieces = pieces.max(1);
        Self::from_fn(name, ambient, move |q| integrate_box(&f, q, pieces))
    }

    /// `G(Q) = m̂(u; Q)` for the Dirichlet problem of `l` with data `boundary`
    /// on a mesh of `resolution` nodes per edge.
    pub fn dirichlet(l: Integrand, boundary: BoundaryData, config: SolverConfig, ambient: Cube, resolution: usize) -> Self {
        let name = format!("m({})", l.name());
        Self::try_from_fn(name, ambient, move |q| {
            let dom = CubeDomain::from_cube(q, resolution)?;
            Ok(solve_cell(&CellProblem::new(l.clone(), dom, boundary.clone(), config.clone()))?.value)
        })
        .memoized()
    }

    /// Caches values per cube; concurrent readers, exclusive inserts.
    pub fn memoized(mut self) -> Self {
        self.cache = Some(Arc::new(RwLock::new(HashMap::new())));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ambient(&self) -> &Cube {
        &self.ambient
    }

    /// `G(Q)`; `NaN` and `−∞` are rejected.
    pub fn eval(&self, q: &Cube) -> Result<f64> {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.read().get(&key(q)) {
                return Ok(*v);
            }
        }
        let v = (self.eval)(q)?;
        if v.is_nan() || v == f64::NEG_INFINITY {
            return Err(Error::InvalidSetValue {
                value: v,
                center: q.center(),
                side: q.side,
            });
        }
        if let Some(cache) = &self.cache {
            cache.write().insert(key(q), v);
        }
        Ok(v)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.read().len())
    }
}

fn integrate_box<F: Fn(&[f64]) -> f64>(f: &F, q: &Cube, pieces: usize) -> f64 {
    const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
    const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let d = q.dim();
    let h = q.side / pieces as f64;
    let per_axis = 3 * pieces;
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    for mut k in 0..per_axis.pow(d as u32) {
        let mut w = 1.0;
        for (j, xj) in x.iter_mut().enumerate() {
            let i = k % per_axis;
            k /= per_axis;
            let (piece, node) = (i / 3, i % 3);
            *xj = q.lower[j] + (piece as f64 + 0.5 + 0.5 * NODES[node]) * h;
            w *= 0.5 * WEIGHTS[node] * h;
        }
        total += w * f(&x);
    }
    total
}

// ---------------------------------------------------------------------------
// Derivatives

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivativeOptions {
    /// Random cubes per ρ in addition to the centered one.
    pub samples: usize,
    pub seed: u64,
    /// Only use centered cubes (the symmetric derivative).
    pub centered_only: bool,
}

impl Default for DerivativeOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            seed: 0,
            centered_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeEstimate {
    pub x: Vec<f64>,
    /// Lower derivative estimate: the monotone-corrected inf at the last ρ.
    pub lower: f64,
    /// Upper derivative estimate: the monotone-corrected sup at the last ρ.
    pub upper: f64,
    pub rho_schedule: Vec<f64>,
    /// Raw sampled `inf G/λ` per ρ.
    pub inf_values: Vec<f64>,
    pub sup_values: Vec<f64>,
    /// `inf_corrected[k] = min_{j ≥ k} inf_values[j]`, and likewise for sups.
    pub inf_corrected: Vec<f64>,
    pub sup_corrected: Vec<f64>,
    pub cube_samples_per_rho: usize,
}

fn boundary_distance(ambient: &Cube, x: &[f64]) -> f64 {
    ambient
        .lower
        .iter()
        .zip(x)
        .map(|(l, xi)| (xi - l).min(l + ambient.side - xi))
        .fold(f64::INFINITY, f64::min)
}

/// Samples `inf` and `sup` of `G(Q)/λ(Q)` over cubes `Q ∋ x` with `diam Q ≤ ρ`.
pub fn lower_derivative(g: &CubeSetFunction, x: &[f64], schedule: &[f64], opts: &DerivativeOptions) -> Result<DerivativeEstimate> {
    check_decreasing("rho", schedule)?;
    let margin = schedule[0];
    if boundary_distance(g.ambient(), x) < margin {
        return Err(Error::TooCloseToBoundary { x: x.to_vec(), margin });
    }
    let d = x.len();
    let sqrt_d = (d as f64).sqrt();
    // seed depends on the point so that different x get independent samples
    let mut seed = opts.seed;
    for xi in x {
        seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(xi.to_bits());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inf_values = Vec::with_capacity(schedule.len());
    let mut sup_values = Vec::with_capacity(schedule.len());
    for &rho in schedule {
        let max_side = rho / sqrt_d;
        let mut cubes = vec![Cube::centered(x, max_side)];
        if !opts.centered_only {
            for _ in 0..opts.samples {
                let side = max_side * (1.0 - rng.gen::<f64>());
                let lower = x.iter().map(|xi| xi - side * (1.0 - rng.gen::<f64>())).collect();
                cubes.push(Cube::new(lower, side));
            }
        } else {
            for k in 1..=opts.samples {
                cubes.push(Cube::centered(x, max_side * k as f64 / (opts.samples + 1) as f64));
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for q in &cubes {
            let r = g.eval(q)? / q.volume();
            lo = lo.min(r);
            hi = hi.max(r);
        }
        inf_values.push(lo);
        sup_values.push(hi);
    }
    let n = schedule.len();
    let mut inf_corrected = inf_values.clone();
    let mut sup_corrected = sup_values.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        inf_corrected[k] = inf_corrected[k].min(inf_corrected[k + 1]);
        sup_corrected[k] = sup_corrected[k].max(sup_corrected[k + 1]);
    }
    Ok(DerivativeEstimate {
        x: x.to_vec(),
        lower: inf_corrected[n - 1],
        upper: sup_corrected[n - 1],
        rho_schedule: schedule.to_vec(),
        inf_values,
        sup_values,
        inf_corrected,
        sup_corrected,
        cube_samples_per_rho: opts.samples + 1,
    })
}

// ---------------------------------------------------------------------------
// Dyadic packings

/// A dyadic subcube of the root: level `k`, integer position in `[0, 2^k)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PackedCube {
    pub level: u32,
    pub coords: [u32; 3],
    pub value: f64,
    /// `h·λ(Q)` for certified sublevel cubes.
    pub certificate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DyadicPacking {
    pub root: Cube,
    pub fineness: f64,
    pub cubes: Vec<PackedCube>,
    pub uncovered_volume: f64,
    pub slack: f64,
}

impl DyadicPacking {
    pub fn cube(&self, i: usize) -> Cube {
        dyadic_cube(&self.root, self.cubes[i].level, &self.cubes[i].coords)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.cubes.iter().map(|c| c.value).sum()
    }

    pub fn covered_volume(&self) -> f64 {
        let d = self.root.dim() as i32;
        self.cubes
            .iter()
            .map(|c| self.root.volume() * 0.5f64.powi(d * c.level as i32))
            .sum()
    }

    /// Disjointness, fineness and containment, checked on the dyadic indices.
    pub fn check_structure(&self) -> Result<()> {
        let d = self.root.dim();
        let mut seen: HashMap<(u32, [u32; 3]), usize> = HashMap::with_capacity(self.cubes.len());
        for (i, c) in self.cubes.iter().enumerate() {
            if c.coords[..d].iter().any(|&k| (k as u64) >= 1u64 << c.level) {
                return Err(Error::CubeOutsideDomain(i));
            }
            if let Some(&j) = seen.get(&(c.level, c.coords)) {
                return Err(Error::OverlappingCubes(j, i));
            }
            seen.insert((c.level, c.coords), i);
        }
        for (i, c) in self.cubes.iter().enumerate() {
            let mut coords = c.coords;
            for level in (0..c.level).rev() {
                for k in coords.iter_mut().take(d) {
                    *k /= 2;
                }
                if let Some(&j) = seen.get(&(level, coords)) {
                    return Err(Error::OverlappingCubes(j, i));
                }
            }
            let diam = self.root.diam() * 0.5f64.powi(c.level as i32);
            if diam >= self.fineness {
                return Err(Error::InvalidParameter {
                    name: "fineness",
                    reason: format!("cube {i} has diameter {diam} ≥ {}", self.fineness),
                });
            }
        }
        Ok(())
    }

    /// CSV: level, lower corner, side, value, certificate bound.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.root.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["level".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        header.extend(["side".into(), "value".into(), "certificate".into()]);
        w.write_record(&header)?;
        for i in 0..self.cubes.len() {
            let q = self.cube(i);
            let c = &self.cubes[i];
            let mut row = vec![c.level.to_string()];
            row.extend(q.lower.iter().map(|x| format!("{x:e}")));
            row.push(format!("{:e}", q.side));
            row.push(format!("{:e}", c.value));
            row.push(c.certificate.map_or(String::new(), |b| format!("{b:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn dyadic_cube(root: &Cube, level: u32, coords: &[u32; 3]) -> Cube {
    let side = root.side * 0.5f64.powi(level as i32);
    let lower = root.lower.iter().zip(coords).map(|(l, k)| l + *k as f64 * side).collect();
    Cube::new(lower, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VitaliOptions {
    /// Only cubes with `diam < fineness` may be kept.
    pub fineness: f64,
    pub max_depth: u32,
    /// Admissible uncovered volume as a fraction of `λ(O)`.
    pub slack: f64,
}

impl VitaliOptions {
    /// Exactly the cubes of level `depth` are admissible.
    pub fn at_depth(root: &Cube, depth: u32, slack: f64) -> Self {
        Self {
            fineness: root.diam() * 0.5f64.powi(depth as i32) * (1.0 + 1e-9),
            max_depth: depth,
            slack,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VitaliResult {
    pub value: f64,
    pub packing: DyadicPacking,
    /// True when uncovered volume exceeds the slack, in which case the value is `+∞`.
    pub slack_exceeded: bool,
}

struct Node {
    value: f64,
    uncovered: f64,
    cubes: Vec<PackedCube>,
}

fn vitali_node(h: &CubeSetFunction, root: &Cube, level: u32, coords: [u32; 3], opts: &VitaliOptions, signed: bool) -> Result<Node> {
    let q = dyadic_cube(root, level, &coords);
    let keep = if q.diam() < opts.fineness {
        let v = h.eval(&q)?;
        if !signed && v < 0.0 {
            return Err(Error::InvalidSetValue {
                value: v,
                center: q.center(),
                side: q.side,
            });
        }
        Some(v)
    } else {
        None
    };
    let split = if level < opts.max_depth {
        let d = root.dim();
        let children: Vec<[u32; 3]> = (0..1u32 << d)
            .map(|mask| {
                let mut c = [0u32; 3];
                for j in 0..d {
                    c[j] = 2 * coords[j] + (mask >> j & 1);
                }
                c
            })
            .collect();
        let nodes: Vec<Node> = if level < 4 {
            children
                .into_par_iter()
                .map(|c| vitali_node(h, root, level + 1, c, opts, signed))
                .collect::<Result<_>>()?
        } else {
            children
                .into_iter()
                .map(|c| vitali_node(h, root, level + 1, c, opts, signed))
                .collect::<Result<_>>()?
        };
        Some(nodes)
    } else {
        None
    };
    let split_value = split.as_ref().map(|ns| ns.iter().map(|n| n.value).sum::<f64>());
    match (keep, split_value) {
        (Some(k), sv) if sv.is_none_or(|s| k <= s) && k < f64::INFINITY => Ok(Node {
            value: k,
            uncovered: 0.0,
            cubes: vec![PackedCube {
                level,
                coords,
                value: k,
                certificate: None,
            }],
        }),
        (_, Some(_)) => {
            let nodes = split.expect("split present");
            let mut out = Node {
                value: 0.0,
                uncovered: 0.0,
                cubes: Vec::new(),
            };
            for n in nodes {
                out.value += n.value;
                out.uncovered += n.uncovered;
                out.cubes.extend(n.cubes);
            }
            Ok(out)
        }
        // an unsplittable cube with infinite or inadmissible value stays uncovered
        _ => Ok(Node {
            value: 0.0,
            uncovered: q.volume(),
            cubes: Vec::new(),
        }),
    }
}

fn run_vitali(h: &CubeSetFunction, o: &Cube, opts: &VitaliOptions, signed: bool) -> Result<VitaliResult> {
    if !(opts.fineness > 0.0) {
        return Err(Error::InvalidParameter {
            name: "fineness",
            reason: "must be positive".into(),
        });
    }
    let node = vitali_node(h, o, 0, [0; 3], opts, signed)?;
    let slack_exceeded = node.uncovered > opts.slack * o.volume() * (1.0 + 1e-12);
    let packing = DyadicPacking {
        root: o.clone(),
        fineness: opts.fineness,
        cubes: node.cubes,
        uncovered_volume: node.uncovered,
        slack: opts.slack,
    };
    Ok(VitaliResult {
        value: if slack_exceeded { f64::INFINITY } else { node.value },
        packing,
        slack_exceeded,
    })
}

/// Best dyadic keep-or-split packing of `O` for a nonnegative `H`.
///
/// The result is an upper bound on the infimum over all fine packings.
pub fn vitali_envelope(h: &CubeSetFunction, o: &Cube, opts: &VitaliOptions) -> Result<VitaliResult> {
    run_vitali(h, o, opts, false)
}

/// Same construction for set functions of any sign.
pub fn vitali_envelope_signed(g: &CubeSetFunction, o: &Cube, opts: &VitaliOptions) -> Result<VitaliResult> {
    run_vitali(g, o, opts, true)
}

/// Envelope values for increasing depths `(fineness, value)`; no convergence is claimed.
pub fn vitali_stages(h: &CubeSetFunction, o: &Cube, depths: &[u32], slack: f64) -> Result<Vec<(f64, f64)>> {
    depths
        .iter()
        .map(|&k| {
            let opts = VitaliOptions::at_depth(o, k, slack);
            Ok((opts.fineness, vitali_envelope(h, o, &opts)?.value))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sublevel covers

#[derive(Debug, Clone, Serialize)]
pub struct SublevelOptions {
    /// Cubes must have `diam < fineness`.
    pub fineness: f64,
    pub max_depth: u32,
    /// Diameter schedule for the derivative estimate at each sample.
    pub rho_schedule: Vec<f64>,
    pub derivative: DerivativeOptions,
}

#[derive(Debug, Clone, Serialize)]
pub struct SublevelCover {
    pub packing: DyadicPacking,
    /// Samples whose derivative estimate fell below the level.
    pub candidates: usize,
    pub covered: usize,
    /// `covered / candidates`; 1 when there are no candidates.
    pub covered_fraction: f64,
}

/// Disjoint dyadic cubes with `G(Q) < h·λ(Q)` around the samples where the
/// sampled lower derivative is below `h`.
pub fn sublevel_cover(g: &CubeSetFunction, level: f64, samples: &[Vec<f64>], opts: &SublevelOptions) -> Result<SublevelCover> {
    if !(opts.fineness > 0.0) {
        return Err(Error::InvalidParameter {
            name: "fineness",
            reason: "must be positive".into(),
        });
    }
    let root = g.ambient().clone();
    let d = root.dim();
    let mut selected: Vec<PackedCube> = Vec::new();
    let mut taken: HashSet<(u32, [u32; 3])> = HashSet::new();
    let (mut candidates, mut covered) = (0, 0);

    'samples: for x in samples {
        if !root.contains_point(x) {
            continue;
        }
        let margin = boundary_distance(&root, x);
        let sched: Vec<f64> = opts.rho_schedule.iter().copied().filter(|r| *r <= margin).collect();
        if sched.is_empty() {
            continue;
        }
        let est = lower_derivative(g, x, &sched, &opts.derivative)?;
        if !(est.lower < level) {
            continue;
        }
        candidates += 1;
        // dyadic ancestors of x, coarsest first
        let path: Vec<(u32, [u32; 3])> = (0..=opts.max_depth)
            .map(|lvl| {
                let n = (1u64 << lvl) as f64;
                let mut c = [0u32; 3];
                for j in 0..d {
                    let s = (x[j] - root.lower[j]) / root.side * n;
                    c[j] = (s.floor() as u64).min((1u64 << lvl) - 1) as u32;
                }
                (lvl, c)
            })
            .collect();
        if path.iter().any(|p| taken.contains(p)) {
            covered += 1;
            continue;
        }
        for &(lvl, c) in &path {
            let q = dyadic_cube(&root, lvl, &c);
            if q.diam() >= opts.fineness {
                continue;
            }
            let val = g.eval(&q)?;
            let bound = level * q.volume();
            if val < bound {
                // a descendant already selected would overlap
                let nested = selected.iter().any(|s| {
                    s.level > lvl && (0..d).all(|j| s.coords[j] >> (s.level - lvl) == c[j])
                });
                if nested {
                    continue;
                }
                selected.push(PackedCube {
                    level: lvl,
                    coords: c,
                    value: val,
                    certificate: Some(bound),
                });
                taken.insert((lvl, c));
                covered += 1;
                continue 'samples;
            }
        }
    }
    let packing = DyadicPacking {
        root: root.clone(),
        fineness: opts.fineness,
        cubes: selected,
        uncovered_volume: 0.0,
        slack: 0.0,
    };
    let uncovered = root.volume() - packing.covered_volume();
    Ok(SublevelCover {
        packing: DyadicPacking {
            uncovered_volume: uncovered,
            ..packing
        },
        candidates,
        covered,
        covered_fraction: if candidates == 0 { 1.0 } else { covered as f64 / candidates as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::linear_box_integral;

    fn unit2() -> Cube {
        Cube::unit(2)
    }

    #[test]
    fn constant_density_derivative() {
        let g = CubeSetFunction::scaled_measure(unit2(), 2.5);
        let est = lower_derivative(&g, &[0.4, 0.6], &[0.1, 0.05, 0.01], &DerivativeOptions::default()).unwrap();
        assert!((est.lower - 2.5).abs() < 1e-12);
        assert!((est.upper - 2.5).abs() < 1e-12);
    }

    #[test]
    fn linear_density_derivative_is_exact_infimum() {
        let g = CubeSetFunction::from_fn("y1", Cube::unit(1), |q| linear_box_integral(q, 0));
        let sched = [0.1, 0.01, 1e-3];
        let est = lower_derivative(&g, &[0.37], &sched, &DerivativeOptions { samples: 2000, ..Default::default() }).unwrap();
        // inf over cubes of side ≤ ρ containing x is x − ρ/2
        for (k, rho) in sched.iter().enumerate() {
            assert!(est.inf_corrected[k] >= 0.37 - rho / 2.0 - 1e-12);
            assert!(est.inf_corrected[k] <= 0.37 - rho / 2.0 + 0.05 * rho);
        }
        assert!((est.lower - 0.37).abs() < 1e-3);
        assert!(est.upper >= est.lower);
    }

    #[test]
    fn derivative_rejects_bad_input() {
        let g = CubeSetFunction::scaled_measure(unit2(), 1.0);
        assert!(matches!(
            lower_derivative(&g, &[0.5, 0.5], &[0.01, 0.1], &DerivativeOptions::default()),
            Err(Error::Schedule { .. })
        ));
        assert!(matches!(
            lower_derivative(&g, &[0.01, 0.5], &[0.1], &DerivativeOptions::default()),
            Err(Error::TooCloseToBoundary { .. })
        ));
    }

    #[test]
    fn half_space_indicator_derivative() {
        let g = CubeSetFunction::from_fn("upper", unit2(), |q| if q.lower[1] >= 0.5 { q.volume() } else { 0.0 });
        let est = lower_derivative(&g, &[0.5, 0.3], &[0.1, 0.05], &DerivativeOptions::default()).unwrap();
        assert_eq!(est.lower, 0.0);
    }

    #[test]
    fn measure_envelope_is_exact() {
        let g = CubeSetFunction::scaled_measure(unit2(), 3.0);
        for depth in [0, 2, 5] {
            let r = vitali_envelope(&g, &unit2(), &VitaliOptions::at_depth(&unit2(), depth, 0.0)).unwrap();
            assert!((r.value - 3.0).abs() < 1e-12);
            r.packing.check_structure().unwrap();
        }
    }

    #[test]
    fn sqrt_envelope_grows() {
        let o = Cube::unit(1);
        let g = CubeSetFunction::from_fn("sqrt", o.clone(), |q| q.volume().sqrt());
        let stages = vitali_stages(&g, &o, &[2, 4, 6], 0.0).unwrap();
        for (k, (_, v)) in stages.iter().enumerate() {
            let n = 4f64.powi(k as i32 + 1);
            assert!((v - n.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_values_rejected_unless_signed() {
        let g = CubeSetFunction::scaled_measure(unit2(), -1.0);
        let opts = VitaliOptions::at_depth(&unit2(), 2, 0.0);
        assert!(matches!(vitali_envelope(&g, &unit2(), &opts), Err(Error::InvalidSetValue { .. })));
        assert!((vitali_envelope_signed(&g, &unit2(), &opts).unwrap().value + 1.0).abs() < 1e-12);
        let nan = CubeSetFunction::from_fn("nan", unit2(), |_| f64::NAN);
        assert!(vitali_envelope(&nan, &unit2(), &opts).is_err());
    }

    #[test]
    fn infinite_cubes_are_left_uncovered() {
        let o = Cube::unit(1);
        let g = CubeSetFunction::from_fn("inf near 0", o.clone(), |q| if q.lower[0] == 0.0 { f64::INFINITY } else { q.volume() });
        let r = vitali_envelope(&g, &o, &VitaliOptions::at_depth(&o, 6, 0.05)).unwrap();
        assert!(!r.slack_exceeded);
        assert!((r.packing.uncovered_volume - 1.0 / 64.0).abs() < 1e-15);
        assert!((r.value - 63.0 / 64.0).abs() < 1e-12);
        let r = vitali_envelope(&g, &o, &VitaliOptions::at_depth(&o, 2, 0.05)).unwrap();
        assert!(r.slack_exceeded);
        assert_eq!(r.value, f64::INFINITY);
    }

    #[test]
    fn sublevel_cover_cases() {
        let pts: Vec<Vec<f64>> = (0..20)
            .flat_map(|i| (0..20).map(move |j| vec![(i as f64 + 0.5) / 20.0, (j as f64 + 0.5) / 20.0]))
            .collect();
        let opts = SublevelOptions {
            fineness: 0.3,
            max_depth: 8,
            rho_schedule: vec![0.02, 0.01],
            derivative: DerivativeOptions {
                samples: 8,
                ..Default::default()
            },
        };
        let g = CubeSetFunction::scaled_measure(unit2(), 1.0);
        let all = sublevel_cover(&g, 2.0, &pts, &opts).unwrap();
        assert!(all.packing.uncovered_volume < 1e-12);
        all.packing.check_structure().unwrap();
        let none = sublevel_cover(&g, 0.5, &pts, &opts).unwrap();
        assert!(none.packing.is_empty());

        let step = CubeSetFunction::from_fn("step", unit2(), |q| {
            let a = q.lower[0].max(0.5);
            let b = (q.lower[0] + q.side).max(0.5);
            (b - a) * q.side
        });
        let cover = sublevel_cover(&step, 0.5, &pts, &opts).unwrap();
        assert!(cover.covered_fraction >= 0.95);
        for i in 0..cover.packing.len() {
            let q = cover.packing.cube(i);
            assert!(q.lower[0] + q.side <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn memo_cache_is_used() {
        let g = CubeSetFunction::scaled_measure(unit2(), 1.0).memoized();
        let q = Cube::new(vec![0.1, 0.1], 0.2);
        g.eval(&q).unwrap();
        g.eval(&q).unwrap();
        assert_eq!(g.cached_len(), 1);
    }

    #[test]
    fn gauss_density_integral() {
        let g = CubeSetFunction::from_density("y1", unit2(), |y| y[0], 1);
        let q = Cube::new(vec![0.2, 0.3], 0.4);
        assert!((g.eval(&q).unwrap() - linear_box_integral(&q, 0)).abs() < 1e-14);
    }
}
