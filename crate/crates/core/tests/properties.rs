use std::sync::Arc;

use kan_ntk::gradcheck::rel_err;
use kan_ntk::ntk::{
    assemble_d, assemble_d_objective, estimate_g_infinity, gram, gram_blocked, DerivMatrix, GramReport, LazyRadii,
};
use kan_ntk::optim::{train, TrainConfig};
use kan_ntk::pinn::{
    apply_operator, make_manufactured_problem, AnalyticFunction, LinearPde, ProblemKind, TwiceDifferentiable,
};
use kan_ntk::rng::Stream;
use kan_ntk::{init_params, BasisSpec, Dataset, KanParams, KanShape, TransformSpec};
use proptest::prelude::*;

fn shape(n: usize, m: usize, n_d: usize) -> KanShape {
    KanShape::uniform(n, m, BasisSpec::chebyshev(n_d), TransformSpec::Tanh).unwrap()
}

fn dataset(n: usize, samples: usize, seed: u64) -> Dataset {
    let mut rng = Stream::new(seed);
    let x: Vec<f64> = (0..n * samples).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let y: Vec<f64> = (0..samples).map(|_| rng.normal()).collect();
    Dataset::new(n, x, y).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn assert_psd(g: &GramReport) {
    for i in 0..g.n {
        for j in 0..g.n {
            assert!((g.get(i, j) - g.get(j, i)).abs() <= 1e-12);
        }
    }
    assert!(g.eigenvalues[0] >= -1e-9, "smallest eigenvalue {}", g.eigenvalues[0]);
}

fn as_analytic(p: KanParams) -> AnalyticFunction {
    let n = p.shape().n;
    AnalyticFunction::new(n, Arc::new(move |x| p.jet(x).unwrap()))
}

fn random_pde(seed: u64) -> LinearPde {
    let mut rng = Stream::new(seed);
    let (b, d, g2, l0, l1) = (rng.normal(), rng.normal().abs(), rng.normal(), rng.normal(), rng.normal());
    LinearPde::new(
        2,
        Arc::new(move |x| vec![0.0, 0.0, 0.0, d * (1.0 + x[0] * x[0])]),
        Arc::new(move |x| vec![0.0, g2 + b * x[1]]),
        Arc::new(move |x| l0 + l1 * x[0] * x[1]),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn regression_gram_is_psd(seed in 0u64..10_000, m in 1usize..24, n_d in 1usize..6, samples in 1usize..10) {
        let params = init_params(&shape(2, m, n_d), seed).unwrap();
        let g = gram(&assemble_d(&params, &dataset(2, samples, seed ^ 0xff)).unwrap()).unwrap();
        assert_psd(&g);
    }

    #[test]
    fn pinn_gram_is_psd_and_routes_agree(seed in 0u64..10_000, m in 1usize..12, n_d in 2usize..5) {
        let problem = make_manufactured_problem(ProblemKind::Advection1d, 5, 3, seed).unwrap();
        let objective = problem.objective().unwrap();
        let params = init_params(&shape(2, m, n_d), seed).unwrap();
        let explicit = gram(&assemble_d_objective(&params, &objective).unwrap()).unwrap();
        let blocked = gram_blocked(&params, &objective).unwrap();
        assert_psd(&explicit);
        for (a, b) in explicit.matrix.iter().zip(&blocked.matrix) {
            prop_assert!(rel_err(*a, *b) <= 1e-10);
        }
    }

    #[test]
    fn operator_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, t in 0.0f64..1.0, xi in 0.0f64..1.0) {
        let pde = random_pde(seed);
        let u = as_analytic(init_params(&shape(2, 4, 3), seed).unwrap());
        let w = as_analytic(init_params(&shape(2, 5, 4), seed + 1).unwrap());
        let x = [t, xi];
        let lhs = apply_operator(&pde, &u.combine(alpha, &w, beta), &x).unwrap();
        let rhs = alpha * apply_operator(&pde, &u, &x).unwrap() + beta * apply_operator(&pde, &w, &x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn evaluation_is_deterministic(seed in 0u64..10_000, x0 in -1.0f64..1.0, x1 in -1.0f64..1.0) {
        let s = shape(2, 7, 4);
        let a = init_params(&s, seed).unwrap().jet(&[x0, x1]).unwrap();
        let b = init_params(&s, seed).unwrap().jet(&[x0, x1]).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.2, b.2);
    }
}

fn median_sigma_max(basis: impl Fn(usize) -> BasisSpec, n_d: usize, c_block_only: bool) -> f64 {
    let data = dataset(2, 12, 5);
    let shape = KanShape::uniform(2, 128, basis(n_d), TransformSpec::Tanh).unwrap();
    let skip = if c_block_only { shape.num_a() } else { 0 };
    median(
        (0..20)
            .map(|seed| {
                let d = assemble_d(&init_params(&shape, seed).unwrap(), &data).unwrap();
                let cols = (0..d.cols()).map(|i| d.column(i)[skip..].to_vec()).collect();
                gram(&DerivMatrix::from_columns(cols).unwrap()).unwrap().sigma_max
            })
            .collect(),
    )
}

fn grows_at_most_linearly(basis: impl Fn(usize) -> BasisSpec + Copy, c_block_only: bool) {
    let s = [2, 4, 8].map(|n_d| median_sigma_max(basis, n_d, c_block_only));
    assert!(s[1] / s[0] <= 2.0 && s[2] / s[1] <= 2.0, "{s:?}");
}

#[test]
fn sigma_max_grows_at_most_linearly_in_basis_size() {
    let rbf = |k| BasisSpec::gaussian_rbf_uniform(k, -1.0, 1.0);
    grows_at_most_linearly(rbf, false);
    grows_at_most_linearly(BasisSpec::monomial, false);
    // Chebyshev derivatives reach k^2 at the ends of the interval, so only the
    // outer-coefficient block keeps the linear bound.
    for family in [BasisSpec::chebyshev, BasisSpec::monomial, rbf] {
        grows_at_most_linearly(family, true);
    }
}

#[test]
fn standard_error_shrinks_as_inverse_root_of_seed_count() {
    let s = shape(2, 32, 3);
    let data = dataset(2, 4, 9);
    let counts = [25usize, 100, 400];
    let errors: Vec<Vec<f64>> = counts
        .iter()
        .enumerate()
        .map(|(i, &k)| estimate_g_infinity(&s, &data, k, 10_000 * i as u64).unwrap().std_error)
        .collect();
    let lx: Vec<f64> = counts.iter().map(|&k| (k as f64).ln()).collect();
    let mx = lx.iter().sum::<f64>() / 3.0;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    for entry in 0..errors[0].len() {
        let ly: Vec<f64> = errors.iter().map(|e| e[entry].ln()).collect();
        let my = ly.iter().sum::<f64>() / 3.0;
        let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
        assert!((slope + 0.5).abs() <= 0.15, "entry {entry}: slope {slope}");
    }
}

#[test]
fn full_batch_pinn_sgd_matches_gd() {
    let problem = make_manufactured_problem(ProblemKind::Heat1d, 6, 3, 4).unwrap();
    let objective = problem.objective().unwrap();
    let p0 = init_params(&shape(2, 8, 3), 4).unwrap();
    let gd = train(&p0, &objective, &TrainConfig::gd(1e-3, 50), &LazyRadii::unbounded()).unwrap();
    let sgd = train(&p0, &objective, &TrainConfig::sgd(1e-3, 50, vec![6, 3], 11), &LazyRadii::unbounded()).unwrap();
    assert_eq!(gd.params.to_flat(), sgd.params.to_flat());
    assert_eq!(gd.losses(), sgd.losses());
}
