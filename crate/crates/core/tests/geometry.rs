//! Lie brackets, Lie-derivative matrices, adaptive flows and the flow checks.

mod common;

use common::{col, contraction, dist, expansion, rotation};
use frameflow::autodiff::{jacobian, jvp, Dual};
use frameflow::geometry::{
    composed_vs_combined_flow_check, equal_time_noncontraction_check, integrate_flow, lie_bracket,
    lie_derivative_matrix, FlowOptions,
};
use frameflow::models::{Activation, Head, Init, Mlp, MlpSpec};
use frameflow::seeding;
use frameflow::tensor::Tensor;
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_2, LN_2};

fn mlp_field(n: usize, seed: u64) -> Mlp {
    let spec = MlpSpec {
        widths: vec![n, 8, 8, n],
        activation: Activation::Tanh,
        head: Head::Identity,
        init: Init::GlorotNormal,
    };
    Mlp::new(spec, &mut seeding::rng(seed)).unwrap()
}

fn as_field(mlp: &Mlp) -> impl Fn(&Dual) -> Dual + '_ {
    move |x: &Dual| mlp.bind_frozen(x.primal.tape()).forward(x)
}

/// `(x0 x1, x0^2)`
fn poly_x(x: &Dual) -> Dual {
    Dual::concat(&[col(x, 0).mul(&col(x, 1)), col(x, 0).mul(&col(x, 0))])
}

/// `(x1, x0 x1^2)`
fn poly_y(x: &Dual) -> Dual {
    let x1 = col(x, 1);
    Dual::concat(&[x1.clone(), col(x, 0).mul(&x1).mul(&x1)])
}

#[test]
fn bracket_of_constant_fields_vanishes() {
    let a = |x: &Dual| Dual::concat(&[col(x, 0).scale(0.0).add_scalar(1.0), col(x, 1).scale(0.0)]);
    let b = |x: &Dual| Dual::concat(&[col(x, 0).scale(0.0), col(x, 1).scale(0.0).add_scalar(-2.0)]);
    let v = lie_bracket(a, b, &Tensor::row(&[0.3, -0.7])).unwrap();
    assert_eq!(v.data(), &[0.0, 0.0]);
}

#[test]
fn bracket_of_identity_and_constant() {
    let c = [0.5, -1.5];
    let konst = |x: &Dual| {
        Dual::concat(&[
            col(x, 0).scale(0.0).add_scalar(c[0]),
            col(x, 1).scale(0.0).add_scalar(c[1]),
        ])
    };
    let v = lie_bracket(expansion, konst, &Tensor::row(&[2.0, 1.0])).unwrap();
    assert!((v.data()[0] + c[0]).abs() < 1e-14 && (v.data()[1] + c[1]).abs() < 1e-14);
}

#[test]
fn rotation_commutes_with_the_radial_field() {
    let v = lie_bracket(rotation, expansion, &Tensor::row(&[1.0, 0.0])).unwrap();
    assert!(v.max_abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bracket_matches_symbolic_expansion(x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let v = lie_bracket(poly_x, poly_y, &Tensor::row(&[x0, x1])).unwrap();
        // J_Y X - J_X Y expanded by hand
        let want = [
            x0 * x0 - x1 * x1 - x0 * x0 * x1 * x1,
            x0 * x1.powi(3) + 2.0 * x0.powi(3) * x1 - 2.0 * x0 * x1,
        ];
        for k in 0..2 {
            prop_assert!((v.data()[k] - want[k]).abs() <= 1e-12 * (1.0 + want[k].abs()));
        }
    }

    #[test]
    fn bracket_is_antisymmetric(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        s1 in 0u64..500,
        s2 in 500u64..1000,
    ) {
        let (a, b) = (mlp_field(3, s1), mlp_field(3, s2));
        let p = Tensor::row(&x);
        let ab = lie_bracket(as_field(&a), as_field(&b), &p).unwrap();
        let ba = lie_bracket(as_field(&b), as_field(&a), &p).unwrap();
        for k in 0..3 {
            prop_assert!((ab.data()[k] + ba.data()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn lie_derivative_is_twice_the_symmetric_jacobian(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        seed in 0u64..1000,
        negative in any::<bool>(),
    ) {
        let mlp = mlp_field(3, seed);
        let f = as_field(&mlp);
        let p = Tensor::row(&x);
        let sign = if negative { -1.0 } else { 1.0 };
        let a = lie_derivative_matrix(&f, None, sign, &p).unwrap();
        let j = jacobian(&f, &p).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let want = sign * (j.get(r, c) + j.get(c, r));
                prop_assert!((a.get(r, c) - want).abs() <= 1e-10);
                prop_assert_eq!(a.get(r, c), a.get(c, r));
                // independent check of the Jacobian entry by central differences
                let mut up = x.clone();
                let mut down = x.clone();
                up[c] += h;
                down[c] -= h;
                let fd = (mlp.forward(&Tensor::row(&up)).get(0, r)
                    - mlp.forward(&Tensor::row(&down)).get(0, r))
                    / (2.0 * h);
                prop_assert!((j.get(r, c) - fd).abs() <= 1e-7);
            }
        }
    }
}

/// Three polynomial fields on R^3.
fn jacobi_fields() -> [fn(&Dual) -> Dual; 3] {
    fn a(x: &Dual) -> Dual {
        Dual::concat(&[
            col(x, 1).mul(&col(x, 2)),
            col(x, 0).mul(&col(x, 0)),
            col(x, 1),
        ])
    }
    fn b(x: &Dual) -> Dual {
        Dual::concat(&[
            col(x, 2),
            col(x, 0).mul(&col(x, 2)),
            col(x, 1).mul(&col(x, 1)).scale(0.5),
        ])
    }
    fn c(x: &Dual) -> Dual {
        Dual::concat(&[
            col(x, 0).mul(&col(x, 1)),
            col(x, 2).scale(-1.0),
            col(x, 0).add_scalar(1.0),
        ])
    }
    [a, b, c]
}

fn value(f: fn(&Dual) -> Dual, x: &[f64]) -> Vec<f64> {
    let p = Tensor::row(x);
    frameflow::autodiff::jvp_with_value(f, &p, &Tensor::zeros(1, x.len()))
        .unwrap()
        .0
        .into_vec()
}

/// `[X, [Y, Z]](x)` with the inner bracket differentiated by central differences.
fn nested(
    x_f: fn(&Dual) -> Dual,
    y_f: fn(&Dual) -> Dual,
    z_f: fn(&Dual) -> Dual,
    x: &[f64],
) -> Vec<f64> {
    let inner = |p: &[f64]| lie_bracket(y_f, z_f, &Tensor::row(p)).unwrap().into_vec();
    let xv = value(x_f, x);
    let h = 1e-5;
    let shifted = |s: f64| {
        let p: Vec<f64> = x.iter().zip(&xv).map(|(a, b)| a + s * b).collect();
        inner(&p)
    };
    let (up, down) = (shifted(h), shifted(-h));
    let jb_x: Vec<f64> = up
        .iter()
        .zip(&down)
        .map(|(u, d)| (u - d) / (2.0 * h))
        .collect();
    let jx_b = jvp(x_f, &Tensor::row(x), &Tensor::row(&inner(x))).unwrap();
    jb_x.iter().zip(jx_b.data()).map(|(a, b)| a - b).collect()
}

#[test]
fn jacobi_identity_holds_for_polynomial_fields() {
    let [a, b, c] = jacobi_fields();
    let mut rng = seeding::rng(5);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let s1 = nested(a, b, c, &x);
        let s2 = nested(b, c, a, &x);
        let s3 = nested(c, a, b, &x);
        for k in 0..3 {
            let cyc = s1[k] + s2[k] + s3[k];
            assert!(cyc.abs() <= 1e-6, "cyclic sum {cyc} at {x:?}");
        }
    }
}

#[test]
fn lie_derivative_examples() {
    let p = Tensor::row(&[0.4, -1.1]);
    assert!(
        lie_derivative_matrix(rotation, None, 1.0, &p)
            .unwrap()
            .max_abs()
            < 1e-15
    );
    let q = Tensor::row(&[0.4, -1.1, 2.0]);
    let a = lie_derivative_matrix(contraction, None, 1.0, &q).unwrap();
    let eig = frameflow::spectral::eigenvalues_exact(&a).unwrap();
    assert!(eig.iter().all(|l| (l + 2.0).abs() < 1e-12));
    // F(x) = x with sigma(x) = <w, x>, w = (1, 0), at (2, 0): 2I + 2I
    let sigma = |x: &Dual| col(x, 0);
    let a = lie_derivative_matrix(expansion, Some(&sigma), 1.0, &Tensor::row(&[2.0, 0.0])).unwrap();
    assert_eq!(a.data(), &[4.0, 0.0, 0.0, 4.0]);
}

fn neg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

fn circle(x: &[f64]) -> Vec<f64> {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    vec![-x[1] / r, x[0] / r]
}

#[test]
fn exponential_decay_halves_at_ln_two() {
    let x0 = [1.3, -0.4, 2.5];
    let trace = integrate_flow(&neg, &x0, LN_2, &FlowOptions::default()).unwrap();
    for (a, b) in trace.final_state().iter().zip(&x0) {
        assert!((a - b / 2.0).abs() <= 1e-8);
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    let v = [0.25, -1.5];
    let field = |_: &[f64]| v.to_vec();
    let x0 = [1.0, 2.0];
    let tau = 3.7;
    let trace = integrate_flow(&field, &x0, tau, &FlowOptions::default()).unwrap();
    for k in 0..2 {
        assert!((trace.final_state()[k] - (x0[k] + tau * v[k])).abs() <= 1e-12);
    }
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    assert!((trace.total_arc_length() - tau * speed).abs() <= 1e-12);
}

#[test]
fn quarter_turn_has_arc_length_half_pi() {
    let trace = integrate_flow(&circle, &[1.0, 0.0], FRAC_PI_2, &FlowOptions::default()).unwrap();
    assert!((trace.total_arc_length() - FRAC_PI_2).abs() <= 1e-6);
    assert!(dist(trace.final_state(), &[0.0, 1.0]) <= 1e-6);
}

#[test]
fn error_decays_with_the_order_of_the_method() {
    let x0 = [1.0, -2.0];
    let t_end: f64 = 4.0;
    let exact: Vec<f64> = x0.iter().map(|v| v * (-t_end).exp()).collect();
    let mut pts = Vec::new();
    for k in 0..6 {
        let tol = 1e-4 / 8f64.powi(k);
        let trace =
            integrate_flow(&neg, &x0, t_end, &FlowOptions::with_tolerances(tol, tol)).unwrap();
        let steps = trace.steps.iter().filter(|s| s.accepted).count() as f64;
        pts.push((steps.ln(), dist(trace.final_state(), &exact).ln()));
    }
    // least-squares slope of log error against log step count
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(-slope >= 4.0, "observed order {}", -slope);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trace_invariants(
        x0 in prop::collection::vec(-2.0f64..2.0, 2),
        t_end in 0.0f64..5.0,
        spiral in -1.0f64..1.0,
    ) {
        let field = |x: &[f64]| vec![spiral * x[0] - x[1], x[0] + spiral * x[1]];
        let trace = integrate_flow(&field, &x0, t_end, &FlowOptions::default()).unwrap();
        prop_assert_eq!(&trace.states[0], &x0);
        prop_assert!(trace.times.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(trace.arc_length.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!((trace.final_time() - t_end).abs() <= 1e-12);
    }
}

#[test]
fn commuting_constant_fields_compose_to_the_combined_flow() {
    let f1 = |_: &[f64]| vec![1.0, 0.0, 0.5];
    let f2 = |_: &[f64]| vec![0.0, -2.0, 1.0];
    let times = |_: &[f64]| vec![0.7, 1.3];
    let fields: [&dyn Fn(&[f64]) -> Vec<f64>; 2] = [&f1, &f2];
    let r = composed_vs_combined_flow_check(
        &fields,
        &times,
        &[0.1, 0.2, 0.3],
        1.0,
        &FlowOptions::default(),
    )
    .unwrap();
    assert!(r.residual <= 1e-8, "residual {}", r.residual);
}

#[test]
fn non_commuting_fields_leave_a_residual() {
    let f1 = |_: &[f64]| vec![1.0, 0.0];
    let f2 = |x: &[f64]| vec![-x[1], x[0]];
    let times = |_: &[f64]| vec![1.0, 1.0];
    let fields: [&dyn Fn(&[f64]) -> Vec<f64>; 2] = [&f1, &f2];
    let r =
        composed_vs_combined_flow_check(&fields, &times, &[0.5, 0.5], 1.0, &FlowOptions::default())
            .unwrap();
    assert!(r.residual > 1e-2, "residual {}", r.residual);
}

#[test]
fn noncontraction_check_with_controls() {
    let opts = FlowOptions::default();
    let (x, y) = ([0.3, -0.2], [-1.0, 0.8]);
    let grow = |p: &[f64]| p.to_vec();
    let r = equal_time_noncontraction_check(&grow, &x, &y, 1.0, &opts).unwrap();
    assert!(r.holds && (r.ratio - std::f64::consts::E).abs() < 1e-7);
    let rot = |p: &[f64]| vec![-p[1], p[0]];
    let r = equal_time_noncontraction_check(&rot, &x, &y, 2.0, &opts).unwrap();
    assert!(r.holds && (r.ratio - 1.0).abs() < 1e-7);
    let r = equal_time_noncontraction_check(&neg, &x, &y, 1.0, &opts).unwrap();
    assert!(!r.holds, "contraction must fail the check");
}
