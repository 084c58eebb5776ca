//! Reverse- and forward-mode derivatives against central finite differences.

mod common;

use common::{perturb, random_direction, random_points, random_symmetric, small_model};
use frameflow::autodiff::{grad, jacobian, jvp, vjp, Dual, Tape, Var};
use frameflow::losses::{
    batch_loss, batch_loss_and_grad, LossConfig, LossWeights, Objective, TapeIntegration,
};
use frameflow::models::{Activation, Head, Init, Mlp, MlpSpec};
use frameflow::seeding;
use frameflow::spectral::{
    lanczos_rows, rademacher, Estimator, Penalty, ScalarFn, SpectralFn, SpectralPenaltySpec,
};
use frameflow::tensor::Tensor;
use proptest::prelude::*;

const REL_TOL: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn directional_check(config: &LossConfig, h: f64, directions: u64) {
    let mut model = small_model(3, 2, 11);
    let x = random_points(4, 3, 12);
    let seeds = seeding::sample_seeds(13, 4);
    let (_, g) = batch_loss_and_grad(&model, &x, &seeds, config).unwrap();
    for k in 0..directions {
        let dir = random_direction(&model, 100 + k);
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a.dot(b)).sum();
        perturb(&mut model, &dir, h);
        let up = batch_loss(&model, &x, &seeds, config).unwrap().total;
        perturb(&mut model, &dir, -2.0 * h);
        let down = batch_loss(&model, &x, &seeds, config).unwrap().total;
        perturb(&mut model, &dir, h);
        let fd = (up - down) / (2.0 * h);
        assert!(
            rel_err(analytic, fd) <= REL_TOL,
            "direction {k}: analytic {analytic} vs fd {fd}"
        );
    }
}

#[test]
fn flow_matching_loss_gradient_in_twenty_directions() {
    directional_check(&LossConfig::default(), 1e-5, 20);
}

#[test]
fn relu_squared_exact_penalty_gradient_in_twenty_directions() {
    let config = LossConfig {
        penalty: SpectralPenaltySpec {
            penalty: Penalty::ReluSquared,
            estimator: Estimator::ExactEigen,
        },
        ..LossConfig::default()
    };
    directional_check(&config, 1e-5, 20);
}

#[test]
fn matrix_free_penalty_gradient_in_twenty_directions() {
    let config = LossConfig {
        penalty: SpectralPenaltySpec {
            penalty: Penalty::SoftMin,
            estimator: Estimator::Lanczos {
                steps: 3,
                probes: 4,
            },
        },
        ..LossConfig::default()
    };
    directional_check(&config, 1e-5, 20);
}

#[test]
fn integrated_objective_gradient_in_twenty_directions() {
    let config = LossConfig {
        weights: LossWeights {
            alpha: 1.0,
            ..LossWeights::default()
        },
        penalty: SpectralPenaltySpec {
            penalty: Penalty::ReluSquared,
            estimator: Estimator::ExactEigen,
        },
        objective: Objective::Integrated(TapeIntegration {
            rtol: 1e-9,
            atol: 1e-11,
            ..TapeIntegration::default()
        }),
        ..LossConfig::default()
    };
    directional_check(&config, 1e-6, 20);
}

fn tanh_mlp(seed: u64) -> Mlp {
    let spec = MlpSpec {
        widths: vec![3, 5, 4, 3],
        activation: Activation::Tanh,
        head: Head::Identity,
        init: Init::GlorotNormal,
    };
    Mlp::new(spec, &mut seeding::rng(seed)).unwrap()
}

fn through(mlp: &Mlp) -> impl Fn(&Dual) -> Dual + '_ {
    move |x: &Dual| {
        let tape = x.primal.tape().clone();
        mlp.bind_frozen(&tape).forward(x)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_input_gradient_matches_differences(
        x in prop::collection::vec(-1.5f64..1.5, 3),
        seed in 0u64..1000,
    ) {
        let mlp = tanh_mlp(seed);
        let f = |d: &Dual| through(&mlp)(d).sum_cols();
        let p = Tensor::row(&x);
        let g = grad(f, &p).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (mlp.forward(&Tensor::row(&a)).sum() - mlp.forward(&Tensor::row(&b)).sum())
                / (2.0 * h);
            prop_assert!(rel_err(g.data()[j], fd) <= REL_TOL, "{} vs {fd}", g.data()[j]);
        }
    }

    #[test]
    fn jvp_and_vjp_are_adjoint(
        x in prop::collection::vec(-1.5f64..1.5, 3),
        v in prop::collection::vec(-1.0f64..1.0, 3),
        u in prop::collection::vec(-1.0f64..1.0, 3),
        seed in 0u64..1000,
    ) {
        let mlp = tanh_mlp(seed);
        let f = through(&mlp);
        let p = Tensor::row(&x);
        let jv = jvp(&f, &p, &Tensor::row(&v)).unwrap();
        let jtu = vjp(&f, &p, &Tensor::row(&u)).unwrap();
        let lhs = jv.dot(&Tensor::row(&u));
        let rhs = jtu.dot(&Tensor::row(&v));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        let j = jacobian(&f, &p).unwrap();
        let jv_full = j.matmul(&Tensor::column(&v)).unwrap();
        for k in 0..3 {
            prop_assert!((jv_full.data()[k] - jv.data()[k]).abs() <= 1e-12);
        }
    }
}

fn spectral_value(a: &[f64], n: usize, f: SpectralFn) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(1, n * n, a.to_vec()).unwrap());
    v.spectral(n, f).unwrap().value().item().unwrap()
}

#[test]
fn spectral_gradient_matches_differences() {
    let n = 4;
    for (seed, f) in [
        (1, SpectralFn::SoftMin),
        (2, SpectralFn::Trace(ScalarFn::NegExp)),
        (3, SpectralFn::Trace(ScalarFn::LambdaNegExp)),
    ] {
        let a = random_symmetric(n, seed);
        let tape = Tape::new();
        let v = tape.var(Tensor::from_vec(1, n * n, a.clone()).unwrap());
        let g = v.spectral(n, f).unwrap().sum().backward().unwrap().get(&v);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                // symmetric perturbation of the (i, j) and (j, i) entries
                let mut up = a.clone();
                let mut down = a.clone();
                up[i * n + j] += h;
                down[i * n + j] -= h;
                if i != j {
                    up[j * n + i] += h;
                    down[j * n + i] -= h;
                }
                let fd = (spectral_value(&up, n, f) - spectral_value(&down, n, f)) / (2.0 * h);
                let mut an = g.data()[i * n + j];
                if i != j {
                    an += g.data()[j * n + i];
                }
                assert!(rel_err(an, fd) <= REL_TOL, "{f:?} ({i},{j}): {an} vs {fd}");
            }
        }
    }
}

fn taped_quadrature(a: &[f64], z: &[f64], n: usize, steps: usize) -> (Tape, Var, Var) {
    let tape = Tape::new();
    let m = tape.var(Tensor::from_vec(n, n, a.to_vec()).unwrap());
    let start = tape.constant(Tensor::row(z));
    let (alpha, beta, sizes) = lanczos_rows(&|q: &Var| q.matmul_t(&m), &start, steps);
    let q = Var::lanczos_quadrature(&alpha, &beta, &sizes, ScalarFn::NegExp).unwrap();
    (tape, m, q)
}

#[test]
fn lanczos_quadrature_gradient_matches_differences() {
    let n = 5;
    let a = random_symmetric(n, 7);
    let z = rademacher(&mut seeding::rng(8), n);
    for steps in [2, 3, n] {
        let (_tape, m, q) = taped_quadrature(&a, &z, n, steps);
        let g = q.sum().backward().unwrap().get(&m);
        let h = 1e-6;
        for k in [0, 3, 7, 12, 24] {
            let mut up = a.clone();
            let mut down = a.clone();
            up[k] += h;
            down[k] -= h;
            let f = |b: &[f64]| taped_quadrature(b, &z, n, steps).2.value().item().unwrap();
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!(
                rel_err(g.data()[k], fd) <= REL_TOL,
                "steps {steps}, entry {k}: {} vs {fd}",
                g.data()[k]
            );
        }
    }
}
