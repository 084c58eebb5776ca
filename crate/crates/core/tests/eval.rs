//! Evaluation measures on models whose flows have closed forms.

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::{
    angular_error, collapse_residual, commuting_residual, composed_flow, detect_from_curve,
    eval_flow_options, extract_coordinates, frame_loss, tangency_deviation_deg, Stats,
};
use frameflow::models::{FrameConfig, FrameModel, Head};
use frameflow::tensor::Tensor;
use proptest::prelude::*;

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Single-layer networks, so `F(x) = W x + b` and `T` is the softplus of an
/// affine map. The field head is swapped for the identity so small fields are
/// not lifted to the minimum radius.
fn affine_model(n: usize, m: usize) -> FrameModel {
    let config = FrameConfig {
        hidden: vec![],
        ..FrameConfig::default()
    };
    let mut model = FrameModel::new(&config, n, m, 0).unwrap();
    model.f_net.spec.head = Head::Identity;
    for w in model
        .f_net
        .weights
        .iter_mut()
        .chain(&mut model.t_net.weights)
    {
        *w = Tensor::zeros(w.rows(), w.cols());
    }
    model
}

/// Constant fields `fields[j]` run for constant times `times[j]`.
fn constant_model(fields: &[Vec<f64>], times: &[f64], c: &[f64]) -> FrameModel {
    let (n, m) = (c.len(), fields.len());
    let mut model = affine_model(n, m);
    model.f_net.biases[0] = Tensor::row(&fields.concat());
    let tb: Vec<f64> = times.iter().map(|&t| softplus_inv(t)).collect();
    model.t_net.biases[0] = Tensor::row(&tb);
    model.c = Tensor::row(c);
    model
}

/// `F(x) = C - x` for `T = tau`.
fn contraction_model(c: &[f64], tau: f64) -> FrameModel {
    let n = c.len();
    let mut model = affine_model(n, 1);
    model.f_net.weights[0] = Tensor::identity(n).scaled(-1.0);
    model.f_net.biases[0] = Tensor::row(c);
    model.t_net.biases[0] = Tensor::row(&[softplus_inv(tau)]);
    model.c = Tensor::row(c);
    model
}

#[test]
fn tangency_deviation_of_known_directions() {
    let normal = Tensor::from_vec(3, 1, vec![0.0, 0.0, 1.0]).unwrap();
    assert_eq!(tangency_deviation_deg(&[1.0, 2.0, 0.0], &normal), 0.0);
    assert!((tangency_deviation_deg(&[0.0, 0.0, -3.0], &normal) - 90.0).abs() < 1e-12);
    assert!((tangency_deviation_deg(&[1.0, 0.0, 1.0], &normal) - 45.0).abs() < 1e-12);
    assert!((tangency_deviation_deg(&[3f64.sqrt(), 0.0, 1.0], &normal) - 30.0).abs() < 1e-12);
}

#[test]
fn plane_basis_fields_are_exactly_tangent() {
    let d = make_dataset("plane4d", DatasetCounts { train: 1, test: 50 }, 6).unwrap();
    let frameflow::datasets::Manifold::Plane4d { basis } = &d.manifold else {
        unreachable!()
    };
    let col = |k: usize| (0..4).map(|r| basis.get(r, k)).collect::<Vec<_>>();
    let tangent = constant_model(&[col(0), col(1), col(2)], &[1.0; 3], &[0.0; 4]);
    let err = angular_error(&tangent, &d.manifold, &d.test).unwrap();
    assert!(err.mean_deg < 1e-6, "{}", err.mean_deg);
    let normal = constant_model(&[col(3)], &[1.0], &[0.0; 4]);
    let err = angular_error(&normal, &d.manifold, &d.test).unwrap();
    assert!((err.mean_deg - 90.0).abs() < 1e-6);
}

#[test]
fn constant_fields_translate_points() {
    let fields = [vec![1.0, 0.0, 0.5], vec![0.0, -2.0, 0.0]];
    let times = [0.4, 1.5];
    let c = [0.3, -0.1, 0.2];
    let model = constant_model(&fields, &times, &c);
    let pts = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, -1.0, 2.0]]).unwrap();
    let shift: Vec<f64> = (0..3)
        .map(|k| times[0] * fields[0][k] + times[1] * fields[1][k])
        .collect();
    let mut want = 0.0;
    for r in 0..2 {
        let x = pts.row_slice(r);
        let end = composed_flow(&model, x, &eval_flow_options()).unwrap();
        for k in 0..3 {
            assert!((end[k] - (x[k] + shift[k])).abs() < 1e-9);
            want += (end[k] - c[k]).powi(2) / 2.0;
        }
    }
    let got = frame_loss(&model, &pts, &eval_flow_options()).unwrap();
    assert!((got - want).abs() < 1e-9);
    let coords = extract_coordinates(&model, &pts, true, &eval_flow_options()).unwrap();
    let arcs = coords.arc_length.unwrap();
    for r in 0..2 {
        assert!((arcs.get(r, 0) - 0.4 * 1.25f64.sqrt()).abs() < 1e-9);
        assert!((arcs.get(r, 1) - 3.0).abs() < 1e-9);
        assert!((coords.time.get(r, 1) - 1.5).abs() < 1e-12);
    }
    let comm = commuting_residual(&model, &pts).unwrap();
    assert!(comm.max < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn contraction_decays_exponentially(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        tau in 0.2f64..3.0,
    ) {
        let c = [0.1, 0.2, -0.3];
        let model = contraction_model(&c, tau);
        let pts = Tensor::row(&x);
        let d0: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
        let loss = frame_loss(&model, &pts, &eval_flow_options()).unwrap();
        let want = d0 * (-2.0 * tau).exp();
        prop_assert!((loss - want).abs() <= 1e-7 * (1.0 + want));
        let coords = extract_coordinates(&model, &pts, true, &eval_flow_options()).unwrap();
        let arc = coords.arc_length.unwrap().get(0, 0);
        prop_assert!((arc - d0.sqrt() * (1.0 - (-tau).exp())).abs() <= 1e-7);
        let collapse = collapse_residual(&model, &pts, &eval_flow_options()).unwrap();
        prop_assert!(collapse.failures.is_empty());
        prop_assert!(collapse.distances[0] <= 1e-5, "{}", collapse.distances[0]);
    }
}

#[test]
fn stats_and_dimension_detection() {
    let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert_eq!((s.median, s.max, s.count), (2.5, 4.0, 4));
    assert_eq!(
        detect_from_curve(&[(1, 0.2), (2, 0.05), (3, 3e-5), (4, 1e-6)]),
        Some(3)
    );
    assert_eq!(detect_from_curve(&[(1, 0.2), (2, 0.05)]), None);
}
