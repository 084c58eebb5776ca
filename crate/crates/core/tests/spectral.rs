//! Eigen solver, Lanczos quadrature and the stochastic penalty estimators.

mod common;

use common::random_symmetric;
use frameflow::autodiff::Dual;
use frameflow::geometry::lie_derivative_matrix;
use frameflow::models::{Activation, Head, Init, Mlp, MlpSpec};
use frameflow::seeding;
use frameflow::spectral::{
    hutchinson_trace, probe_quadrature, psd_penalty, rademacher, symmetric_eigen, DenseOperator,
    Estimator, LinearOperator, LinearOperatorHandle, Penalty, ScalarFn, SpectralPenaltySpec,
};
use frameflow::tensor::Tensor;
use proptest::prelude::*;

fn exact_trace(a: &[f64], n: usize, f: ScalarFn) -> f64 {
    symmetric_eigen(a, n)
        .unwrap()
        .values
        .iter()
        .map(|&l| f.value(l))
        .sum()
}

/// `z^T f(A) z` through the eigendecomposition.
fn exact_form(a: &[f64], n: usize, z: &[f64], f: ScalarFn) -> f64 {
    let eig = symmetric_eigen(a, n).unwrap();
    let fa = eig.reassemble(&eig.values.iter().map(|&l| f.value(l)).collect::<Vec<_>>());
    (0..n)
        .map(|i| (0..n).map(|j| z[i] * fa[i * n + j] * z[j]).sum::<f64>())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigen_reassembles_the_matrix(n in 1usize..9, seed in 0u64..10_000) {
        let a = random_symmetric(n, seed);
        let eig = symmetric_eigen(&a, n).unwrap();
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        let back = eig.reassemble(&eig.values);
        for (x, y) in back.iter().zip(&a) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        prop_assert!((eig.values.iter().sum::<f64>() - trace).abs() <= 1e-12);
    }

    #[test]
    fn lanczos_is_exact_with_n_steps(n in 1usize..9, seed in 0u64..10_000) {
        let a = random_symmetric(n, seed);
        let op = DenseOperator { n, entries: a.clone() };
        let z = rademacher(&mut seeding::rng(seed + 1), n);
        for f in [ScalarFn::NegExp, ScalarFn::LambdaNegExp, ScalarFn::NegReluSquared] {
            let got = probe_quadrature(&op, &z, n, f).unwrap();
            let want = exact_form(&a, n, &z, f);
            prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{f:?}: {got} vs {want}");
        }
    }
}

#[test]
fn hutchinson_is_unbiased_over_two_hundred_seeds() {
    let n = 6;
    for (k, f) in [
        ScalarFn::NegExp,
        ScalarFn::NegReluSquared,
        ScalarFn::Identity,
    ]
    .into_iter()
    .enumerate()
    {
        let a = random_symmetric(n, 40 + k as u64);
        let op = DenseOperator {
            n,
            entries: a.clone(),
        };
        let samples: Vec<f64> = (0..200)
            .map(|seed| hutchinson_trace(&op, f, 1, n, seed).unwrap().mean)
            .collect();
        let mean = samples.iter().sum::<f64>() / 200.0;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 199.0;
        let sigma = (var / 200.0).sqrt();
        let want = exact_trace(&a, n, f);
        assert!(
            (mean - want).abs() <= 3.0 * sigma + 1e-12,
            "{f:?}: mean {mean} vs trace {want} (sigma {sigma})"
        );
    }
}

fn tanh_field(seed: u64) -> Mlp {
    let spec = MlpSpec {
        widths: vec![4, 8, 4],
        activation: Activation::Tanh,
        head: Head::Identity,
        init: Init::GlorotNormal,
    };
    Mlp::new(spec, &mut seeding::rng(seed)).unwrap()
}

/// A contracting linear part plus a random network.
fn field_of(mlp: &Mlp, k: f64) -> impl Fn(&Dual) -> Dual + '_ {
    move |x: &Dual| {
        mlp.bind_frozen(x.primal.tape())
            .forward(x)
            .add(&x.scale(-k))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_symmetric_and_matches_the_matrix(
        x in prop::collection::vec(-1.0f64..1.0, 4),
        u in prop::collection::vec(-1.0f64..1.0, 4),
        v in prop::collection::vec(-1.0f64..1.0, 4),
        seed in 0u64..1000,
    ) {
        let mlp = tanh_field(seed);
        let f = field_of(&mlp, 0.3);
        let sigma = |d: &Dual| d.slice_cols(0, 1).mul(&d.slice_cols(1, 1));
        let p = Tensor::row(&x);
        let op = LinearOperatorHandle::lie_derivative(&f, Some(&sigma), 1.0, &p).unwrap();
        let (au, av) = (op.apply(&u), op.apply(&v));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        prop_assert!((dot(&u, &av) - dot(&au, &v)).abs() <= 1e-10);
        let a = lie_derivative_matrix(&f, Some(&sigma), 1.0, &p).unwrap();
        let dense = a.matmul(&Tensor::column(&v)).unwrap();
        for k in 0..4 {
            prop_assert!((dense.data()[k] - av[k]).abs() <= 1e-10);
        }
    }
}

#[test]
fn matrix_free_penalty_is_within_five_percent_of_exact() {
    let exact = |penalty| SpectralPenaltySpec {
        penalty,
        estimator: Estimator::ExactEigen,
    };
    let free = |penalty| SpectralPenaltySpec {
        penalty,
        estimator: Estimator::Lanczos {
            steps: 4,
            probes: 2000,
        },
    };
    let mut checked = 0;
    for seed in 0..6 {
        let mlp = tanh_field(seed);
        let f = field_of(&mlp, 0.8);
        let p = Tensor::row(&[0.2, -0.5, 0.7, 0.1]);
        for penalty in [Penalty::ReluSquared, Penalty::SoftMin] {
            let a = psd_penalty(&f, None, 1.3, &p, &exact(penalty), 0).unwrap();
            let b = psd_penalty(&f, None, 1.3, &p, &free(penalty), seed).unwrap();
            if a > 1e-3 {
                checked += 1;
                assert!(
                    (a - b).abs() <= 0.05 * a,
                    "{penalty:?} seed {seed}: {a} vs {b}"
                );
            }
        }
    }
    assert!(checked >= 6, "too few fields with a non-trivial penalty");
}
