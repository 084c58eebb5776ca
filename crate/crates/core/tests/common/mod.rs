#![allow(dead_code)]

use frameflow::autodiff::Dual;
use frameflow::models::{FrameConfig, FrameModel};
use frameflow::seeding;
use frameflow::tensor::Tensor;
use rand::Rng;

pub fn small_model(n: usize, m: usize, seed: u64) -> FrameModel {
    let config = FrameConfig {
        hidden: vec![6, 6],
        ..FrameConfig::default()
    };
    FrameModel::new(&config, n, m, seed).unwrap()
}

pub fn random_points(rows: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = seeding::rng(seed);
    let data = (0..rows * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, n, data).unwrap()
}

pub fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeding::rng(seed);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.gen_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

pub fn col(x: &Dual, j: usize) -> Dual {
    x.slice_cols(j, 1)
}

/// `x -> -x`
pub fn contraction(x: &Dual) -> Dual {
    x.scale(-1.0)
}

/// `x -> x`
pub fn expansion(x: &Dual) -> Dual {
    x.clone()
}

/// `(x0, x1) -> (-x1, x0)`
pub fn rotation(x: &Dual) -> Dual {
    Dual::concat(&[col(x, 1).scale(-1.0), col(x, 0)])
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn perturb(model: &mut FrameModel, dir: &[Tensor], h: f64) {
    for (p, d) in model.params_mut().into_iter().zip(dir) {
        for (a, b) in p.data_mut().iter_mut().zip(d.data()) {
            *a += h * b;
        }
    }
}

/// Unit direction in parameter space.
pub fn random_direction(model: &FrameModel, seed: u64) -> Vec<Tensor> {
    let mut rng = seeding::rng(seed);
    let mut dir: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            let data = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(p.rows(), p.cols(), data).unwrap()
        })
        .collect();
    let norm = dir.iter().map(|d| d.dot(d)).sum::<f64>().sqrt();
    for d in &mut dir {
        *d = d.scaled(1.0 / norm);
    }
    dir
}
