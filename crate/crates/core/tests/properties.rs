use gammalim::dirichlet::{solve_cell, CellProblem, SolverConfig};
use gammalim::grid::{energy, BoundaryData, Cube, CubeDomain, DiscreteField, QuadratureRule, DEFAULT_RESOLUTION_CAP};
use gammalim::integrand::{make_builtin, BuiltinName, BuiltinParams, GrowthBounds, Integrand};
use gammalim::matrix::Matrix;
use gammalim::schedule::TailEstimate;
use gammalim::setfn::{vitali_envelope, CubeSetFunction, VitaliOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_phase(name: BuiltinName, table: Vec<f64>) -> Integrand {
    make_builtin(name, &BuiltinParams { a: Some(table), ..Default::default() }).unwrap()
}

fn wavy() -> Integrand {
    Integrand::from_fn(
        "wavy",
        1,
        1,
        |x: &[f64], _v: &[f64], xi: &[f64]| (2.0 + (std::f64::consts::TAU * x[0]).sin()) * xi[0] * xi[0],
        GrowthBounds::constant_weight(1.0, 3.0, 2.0, 0.0).unwrap(),
    )
    .unwrap()
}

#[test]
fn builtins_are_nonnegative_on_a_million_samples() {
    let builtins: Vec<Integrand> = vec![
        make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(3.0), d: Some(2), m: Some(2), ..Default::default() }).unwrap(),
        two_phase(BuiltinName::QuadraticCoeff1d, vec![1.0, 4.0]),
        two_phase(BuiltinName::Laminate2d, vec![2.0, 0.5, 3.0]),
        make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap(),
        make_builtin(
            BuiltinName::PeriodicPlusPerturbation,
            &BuiltinParams {
                a: Some(vec![1.0, 4.0]),
                h: Some(vec![0.0, 0.5]),
                ..Default::default()
            },
        )
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let per = 1_000_000 / builtins.len();
    for l in &builtins {
        let (d, m) = (l.dim(), l.components());
        for _ in 0..per {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let xi: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let val = l.eval(&x, &v, &xi);
            assert!(val >= 0.0 && val.is_finite(), "{} at {x:?} {v:?} {xi:?}: {val}", l.name());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn layered_coefficients_are_one_periodic(y in -10.0f64..10.0, z in -10.0f64..10.0, s in -3.0f64..3.0, shift in -4i32..4) {
        let l = two_phase(BuiltinName::Laminate2d, vec![1.0, 4.0, 2.5]);
        let a = l.eval(&[y, z], &[0.0], &[s, 0.5]);
        let b = l.eval(&[y + shift as f64, z + 0.37], &[0.0], &[s, 0.5]);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn rescaling_composes(x in -2.0f64..2.0, a in 0.05f64..1.0, b in 0.05f64..1.0, s in -2.0f64..2.0) {
        let l = wavy();
        let twice = l.rescale(a).unwrap().rescale(b).unwrap().eval(&[x], &[0.0], &[s]);
        let once = l.rescale(a * b).unwrap().eval(&[x], &[0.0], &[s]);
        prop_assert!((twice - once).abs() <= 1e-9 * once.abs().max(1.0));
    }

    #[test]
    fn refinement_preserves_quadratic_energy(seed in 0u64..1000, r in prop::sample::select(vec![3usize, 5, 9])) {
        let l = make_builtin(BuiltinName::PPower, &BuiltinParams { p: Some(2.0), d: Some(2), ..Default::default() }).unwrap();
        let dom = CubeDomain::cell(2, 1.0, r).unwrap();
        let f = DiscreteField::new(dom, 1, BoundaryData::linear(Matrix::from_row_major(1, 2, vec![0.4, -1.1]))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: Vec<f64> = (0..f.free_len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let f = f.with_free_values(&free).unwrap();
        let coarse = energy(&l, &f, QuadratureRule::Gauss2).unwrap();
        let fine = energy(&l, &f.refine(DEFAULT_RESOLUTION_CAP).unwrap(), QuadratureRule::Gauss2).unwrap();
        prop_assert!((coarse - fine).abs() <= 1e-12 * coarse.max(1.0));
    }

    #[test]
    fn cell_value_never_exceeds_zero_competitor(s in -2.0f64..2.0, seed in 0u64..50) {
        let l = make_builtin(BuiltinName::DoubleWell1d, &BuiltinParams::default()).unwrap();
        let dom = CubeDomain::cell(1, 1.0, 9).unwrap();
        let cfg = SolverConfig { multistart_count: 3, rng_seed: seed, ..Default::default() };
        let sol = solve_cell(&CellProblem::linear(l.clone(), dom, Matrix::scalar(s), cfg)).unwrap();
        prop_assert!(sol.value <= sol.boundary_energy + 1e-12);
        prop_assert!(sol.value >= 0.0);
    }

    #[test]
    fn tail_proxies_bracket_the_tail(values in prop::collection::vec(-1e3f64..1e3, 1..12), tail in 1usize..6) {
        let t = TailEstimate::new(values.clone(), tail);
        let k = tail.min(values.len());
        let last = &values[values.len() - k..];
        prop_assert!(t.lower <= t.upper);
        prop_assert!(last.contains(&t.lower) && last.contains(&t.upper));
    }

    #[test]
    fn dyadic_envelope_of_a_measure_is_exact(c in 0.0f64..5.0, depth in 0u32..6, side in 0.5f64..3.0) {
        let o = Cube::new(vec![-0.3, 0.2], side);
        let g = CubeSetFunction::scaled_measure(o.clone(), c);
        let r = vitali_envelope(&g, &o, &VitaliOptions::at_depth(&o, depth, 0.0)).unwrap();
        prop_assert!(r.packing.check_structure().is_ok());
        prop_assert!((r.value - c * o.volume()).abs() <= 1e-10 * (1.0 + c * o.volume()));
        prop_assert!((r.packing.covered_volume() - o.volume()).abs() <= 1e-10 * o.volume());
    }

    #[test]
    fn children_tile_the_parent(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0, side in 0.01f64..4.0, d in 1usize..=3) {
        let q = Cube::new(vec![x, y, z][..d].to_vec(), side);
        let kids = q.children();
        prop_assert_eq!(kids.len(), 1 << d);
        let vol: f64 = kids.iter().map(Cube::volume).sum();
        prop_assert!((vol - q.volume()).abs() <= 1e-12 * q.volume());
        for (i, a) in kids.iter().enumerate() {
            prop_assert!(q.contains_cube(a));
            for b in &kids[i + 1..] {
                prop_assert!(a.is_disjoint(b));
            }
        }
    }
}
