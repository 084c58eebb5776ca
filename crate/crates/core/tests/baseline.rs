//! Isometric autoencoder baseline.

use frameflow::baseline::{isoae_loss, isoae_tangent_error, train_isoae, IsoAeConfig, IsoAeModel};
use frameflow::datasets::{make_dataset, DatasetCounts, Manifold};
use frameflow::models::{Activation, Head, Init, Mlp, MlpSpec};
use frameflow::tensor::Tensor;

fn linear(input: usize, output: usize, w: Tensor) -> Mlp {
    let spec = MlpSpec {
        widths: vec![input, output],
        activation: Activation::LipSwish,
        head: Head::Identity,
        init: Init::GlorotNormal,
    };
    let mut mlp = Mlp::new(spec, &mut frameflow::seeding::rng(0)).unwrap();
    mlp.weights[0] = w;
    mlp
}

fn plane() -> (frameflow::datasets::ManifoldDataset, Tensor) {
    let d = make_dataset(
        "plane4d",
        DatasetCounts {
            train: 200,
            test: 100,
        },
        2,
    )
    .unwrap();
    let Manifold::Plane4d { basis } = &d.manifold else {
        unreachable!()
    };
    // first three columns span the plane
    let mut b = Tensor::zeros(4, 3);
    for r in 0..4 {
        for k in 0..3 {
            b.set(r, k, basis.get(r, k));
        }
    }
    (d, b)
}

#[test]
fn orthonormal_linear_autoencoder_is_exact() {
    let (d, b) = plane();
    let model = IsoAeModel {
        n: 4,
        m: 3,
        encoder: linear(4, 3, b.transpose()),
        decoder: linear(3, 4, b),
        eta: 1.0,
    };
    let loss = isoae_loss(&model, &d.train);
    assert!(loss.isotropy < 1e-24, "{}", loss.isotropy);
    assert!(loss.reconstruction < 1e-24, "{}", loss.reconstruction);
    let err = isoae_tangent_error(&model, &d.manifold, &d.test).unwrap();
    assert!(err.mean_deg < 1e-6);
}

#[test]
fn scaled_encoder_pays_the_isotropy_price() {
    let (d, b) = plane();
    let s = 2.0;
    let model = IsoAeModel {
        n: 4,
        m: 3,
        encoder: linear(4, 3, b.transpose().scaled(s)),
        decoder: linear(3, 4, b.scaled(1.0 / s)),
        eta: 0.5,
    };
    // J_e J_e^T = s^2 I, so |J_e J_e^T - I|_F^2 = 3 (s^2 - 1)^2
    let loss = isoae_loss(&model, &d.train);
    assert!(
        (loss.isotropy - 0.5 * 3.0 * 9.0).abs() < 1e-10,
        "{}",
        loss.isotropy
    );
    assert!(loss.reconstruction < 1e-24);
}

#[test]
fn random_decoder_is_far_from_tangent() {
    let d = make_dataset(
        "sphere",
        DatasetCounts {
            train: 10,
            test: 200,
        },
        3,
    )
    .unwrap();
    let model = IsoAeModel::new(3, &IsoAeConfig::default()).unwrap();
    let err = isoae_tangent_error(&model, &d.manifold, &d.test).unwrap();
    assert!(err.mean_deg > 10.0, "{}", err.mean_deg);
}

#[test]
fn training_lowers_the_objective() {
    let d = make_dataset(
        "sphere",
        DatasetCounts {
            train: 200,
            test: 10,
        },
        4,
    )
    .unwrap();
    let config = IsoAeConfig {
        hidden: vec![16, 16],
        epochs: 20,
        batch_size: 50,
        ..IsoAeConfig::default()
    };
    let (_, history) = train_isoae(&d.train, &config).unwrap();
    assert_eq!(history.len(), 80);
    let head: f64 = history[..4].iter().map(|l| l.total).sum();
    let tail: f64 = history[history.len() - 4..].iter().map(|l| l.total).sum();
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn invalid_baseline_config_is_rejected() {
    let data = Tensor::zeros(10, 3);
    let bad = IsoAeConfig {
        m: 4,
        ..IsoAeConfig::default()
    };
    assert!(matches!(
        train_isoae(&data, &bad),
        Err(frameflow::Error::Config { .. })
    ));
}
