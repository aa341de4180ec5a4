//! Closed forms and brute-force references used to validate the solvers.

use crate::grid::Cube;

/// `(mean of 1/a)⁻¹` over equally weighted phases.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|a| 1.0 / a).sum::<f64>()
}

pub fn arithmetic_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Lower convex envelope of the samples `(grid[i], f(grid[i]))` at `t`,
/// by brute force over all chords whose endpoints bracket `t`.
///
/// Returns `+∞` outside the grid's hull.
pub fn convex_envelope_brute<F: Fn(f64) -> f64>(f: F, grid: &[f64], t: f64) -> f64 {
    let vals: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let mut best = f64::INFINITY;
    for (i, (&a, &fa)) in grid.iter().zip(&vals).enumerate() {
        if a > t {
            continue;
        }
        if a == t {
            best = best.min(fa);
        }
        for (&b, &fb) in grid.iter().zip(&vals).skip(i + 1) {
            if b < t || b == a {
                continue;
            }
            let lam = (t - a) / (b - a);
            best = best.min((1.0 - lam) * fa + lam * fb);
        }
    }
    best
}

/// `∫_Q y_axis dy`.
pub fn linear_box_integral(q: &Cube, axis: usize) -> f64 {
    q.volume() * (q.lower[axis] + 0.5 * q.side)
}

/// `∫_Q 1[y_axis > cut] dy`.
pub fn half_space_box_integral(q: &Cube, axis: usize, cut: f64) -> f64 {
    let a = q.lower[axis].max(cut);
    let b = (q.lower[axis] + q.side).max(cut);
    q.volume() / q.side * (b - a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means() {
        assert!((harmonic_mean(&[1.0, 4.0]) - 1.6).abs() < 1e-15);
        assert_eq!(arithmetic_mean(&[1.0, 4.0]), 2.5);
    }

    #[test]
    fn envelope_of_double_well() {
        let f = |x: f64| (x * x - 1.0).powi(2);
        let grid = uniform_grid(-3.0, 3.0, 400);
        assert!(convex_envelope_brute(f, &grid, 0.0).abs() < 1e-3);
        assert!(convex_envelope_brute(f, &grid, 0.5).abs() < 1e-3);
        assert!((convex_envelope_brute(f, &grid, 2.0) - 9.0).abs() < 1e-2);
        assert_eq!(convex_envelope_brute(f, &grid, 5.0), f64::INFINITY);
    }

    #[test]
    fn box_integrals() {
        let q = Cube::new(vec![0.25, 0.0], 0.5);
        assert!((linear_box_integral(&q, 0) - 0.125).abs() < 1e-15);
        assert!((half_space_box_integral(&q, 0, 0.5) - 0.125).abs() < 1e-15);
    }
}
