//! Loss terms against finite-difference oracles, plus batch-level properties.

mod common;

use common::{random_points, small_model};
use frameflow::losses::{
    batch_loss, commute_regularizer, flow_matching_loss, lambda_regularizer, time_regularizer,
    LossConfig, TimeScaling,
};
use frameflow::models::FrameModel;
use frameflow::seeding;
use frameflow::spectral::{symmetric_eigen, Estimator, Penalty, ScalarFn, SpectralPenaltySpec};
use frameflow::tensor::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn fields_at(model: &FrameModel, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let fv = model.eval_fields(&Tensor::row(x)).unwrap();
    let f = (0..model.m).map(|j| fv.field(0, j).to_vec()).collect();
    (f, fv.t.row_slice(0).to_vec())
}

/// Central-difference Jacobian of `g` at `x`, as `jac[out][in]`.
fn fd_jacobian(g: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..x.len())
        .map(|k| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[k] += H;
            down[k] -= H;
            g(&up)
                .iter()
                .zip(g(&down))
                .map(|(a, b)| (a - b) / (2.0 * H))
                .collect()
        })
        .collect();
    (0..cols[0].len())
        .map(|r| cols.iter().map(|c| c[r]).collect())
        .collect()
}

fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(p, q)| p * q).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn field_jacobian(model: &FrameModel, j: usize, x: &[f64]) -> Vec<Vec<f64>> {
    fd_jacobian(|p| fields_at(model, p).0[j].clone(), x)
}

fn oracle_flow_matching(model: &FrameModel, x: &[f64], t: f64) -> f64 {
    let p = Tensor::row(x);
    let u = |s: f64| model.eval_interpolant(s, &p).unwrap().0.into_vec();
    let du: Vec<f64> = u(t + H)
        .iter()
        .zip(u(t - H))
        .map(|(a, b)| (a - b) / (2.0 * H))
        .collect();
    let (f, tt) = fields_at(model, &u(t));
    (0..model.n)
        .map(|k| {
            let v: f64 = (0..model.m).map(|j| tt[j] * f[j][k]).sum();
            (v - du[k]).powi(2)
        })
        .sum()
}

fn oracle_commute(model: &FrameModel, x: &[f64]) -> f64 {
    let (f, t) = fields_at(model, x);
    let jac: Vec<_> = (0..model.m).map(|j| field_jacobian(model, j, x)).collect();
    let mut total = 0.0;
    for i in 0..model.m {
        for j in 0..model.m {
            if i == j {
                continue;
            }
            let a = matvec(&jac[j], &f[i]);
            let b = matvec(&jac[i], &f[j]);
            let sq: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum();
            total += sq * t[i] * t[j];
        }
    }
    total
}

fn oracle_time_entrywise(model: &FrameModel, x: &[f64]) -> f64 {
    let (f, _) = fields_at(model, x);
    let grad_t = fd_jacobian(|p| fields_at(model, p).1, x);
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let mut total = 0.0;
    for i in 0..model.m {
        for j in 0..model.m {
            let e = dot(&grad_t[i], &f[j]);
            let entry = if i == j {
                e + 1.0
            } else {
                e / (norm(&f[j]) * norm(&grad_t[i]))
            };
            total += entry * entry;
        }
    }
    total
}

fn oracle_relu_penalty(model: &FrameModel, x: &[f64], i: usize) -> f64 {
    let n = model.n;
    let j = field_jacobian(model, i, x);
    let mut a = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            a[r * n + c] = j[r][c] + j[c][r];
        }
    }
    let t = fields_at(model, x).1[i];
    let eig = symmetric_eigen(&a, n).unwrap();
    t * t
        * eig
            .values
            .iter()
            .map(|&l| ScalarFn::NegReluSquared.value(l))
            .sum::<f64>()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_match_finite_difference_oracles(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        t in 0.05f64..0.95,
        seed in 0u64..1000,
    ) {
        let model = small_model(3, 2, seed);
        let fm = flow_matching_loss(&model, &x, t).unwrap();
        prop_assert!(close(fm, oracle_flow_matching(&model, &x, t), 1e-7), "flow matching");
        let rc = commute_regularizer(&model, &x).unwrap();
        prop_assert!(close(rc, oracle_commute(&model, &x), 1e-7), "commute {rc}");
        let rt = time_regularizer(&model, &x, TimeScaling::Entrywise).unwrap();
        prop_assert!(close(rt, oracle_time_entrywise(&model, &x), 1e-6), "time {rt}");
        let spec = SpectralPenaltySpec { penalty: Penalty::ReluSquared, estimator: Estimator::ExactEigen };
        for i in 0..2 {
            let rl = lambda_regularizer(&model, &x, i, &spec, 0).unwrap();
            prop_assert!(close(rl, oracle_relu_penalty(&model, &x, i), 1e-7), "lambda {rl}");
        }
    }

    #[test]
    fn batch_terms_are_non_negative(
        seed in 0u64..1000,
        rows in 1usize..6,
        relu in any::<bool>(),
    ) {
        let model = small_model(3, 2, seed);
        let x = random_points(rows, 3, seed + 1);
        let mut config = LossConfig::default();
        if relu {
            config.penalty.penalty = Penalty::ReluSquared;
        }
        let b = batch_loss(&model, &x, &seeding::sample_seeds(seed, rows), &config).unwrap();
        for v in [b.l_c, b.r_lambda, b.r_commute, b.r_time, b.r_metric, b.total] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn batch_loss_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..5) {
        let rows = 5;
        let model = small_model(3, 2, seed);
        let x = random_points(rows, 3, seed + 7);
        let seeds = seeding::sample_seeds(seed, rows);
        let perm: Vec<usize> = (0..rows).map(|r| (r + shift) % rows).collect();
        let mut xp = Tensor::zeros(rows, 3);
        for (k, &r) in perm.iter().enumerate() {
            xp.row_slice_mut(k).copy_from_slice(x.row_slice(r));
        }
        let sp: Vec<u64> = perm.iter().map(|&r| seeds[r]).collect();
        let config = LossConfig::default();
        let a = batch_loss(&model, &x, &seeds, &config).unwrap();
        let b = batch_loss(&model, &xp, &sp, &config).unwrap();
        prop_assert!(close(a.total, b.total, 1e-12), "{} vs {}", a.total, b.total);
    }
}

#[test]
fn batch_flow_matching_term_is_the_mean_of_pointwise_losses() {
    let model = small_model(3, 2, 3);
    let x = random_points(6, 3, 4);
    let seeds = seeding::sample_seeds(5, 6);
    let b = batch_loss(&model, &x, &seeds, &LossConfig::default()).unwrap();
    let mean = (0..6)
        .map(|r| flow_matching_loss(&model, x.row_slice(r), b.times[r]).unwrap())
        .sum::<f64>()
        / 6.0;
    assert!(close(b.l_c, mean, 1e-12), "{} vs {mean}", b.l_c);
    assert!(close(b.total, b.weighted_sum(), 1e-15));
}
