//! Lie brackets, Lie-derivative spectra and adaptive flows of simple fields.
//!
//! `cargo run --release --example flows_and_brackets`

use frameflow::autodiff::Dual;
use frameflow::geometry::{
    composed_vs_combined_flow_check, equal_time_noncontraction_check, integrate_flow, lie_bracket,
    lie_derivative_matrix, FlowOptions,
};
use frameflow::spectral::eigenvalues_exact;
use frameflow::tensor::Tensor;

fn rotation(x: &Dual) -> Dual {
    Dual::concat(&[x.slice_cols(1, 1).scale(-1.0), x.slice_cols(0, 1)])
}

fn radial(x: &Dual) -> Dual {
    x.clone()
}

fn main() -> frameflow::Result<()> {
    let p = Tensor::row(&[1.0, 0.5]);
    println!(
        "[rotation, radial] = {:?}",
        lie_bracket(rotation, radial, &p)?.data()
    );
    for (name, f) in [
        ("rotation", rotation as fn(&Dual) -> Dual),
        ("radial", radial),
    ] {
        let a = lie_derivative_matrix(f, None, 1.0, &p)?;
        println!(
            "{name:<9} Lie-derivative eigenvalues {:?}",
            eigenvalues_exact(&a)?
        );
    }

    let opts = FlowOptions::default();
    let circle = |x: &[f64]| {
        let r = x[0].hypot(x[1]);
        vec![-x[1] / r, x[0] / r]
    };
    let trace = integrate_flow(&circle, &[1.0, 0.0], std::f64::consts::PI, &opts)?;
    println!(
        "half turn: end {:?}, arc length {:.10}, {} steps",
        trace.final_state(),
        trace.total_arc_length(),
        trace.steps.len()
    );

    let shear = |x: &[f64]| vec![x[1], 0.0];
    let up = |_: &[f64]| vec![0.0, 1.0];
    let times = |_: &[f64]| vec![1.0, 1.0];
    let fields: [&dyn Fn(&[f64]) -> Vec<f64>; 2] = [&shear, &up];
    let c = composed_vs_combined_flow_check(&fields, &times, &[0.0, 0.0], 1.0, &opts)?;
    println!(
        "non-commuting pair: composed {:?} vs combined {:?}",
        c.composed, c.combined
    );

    let contract = |x: &[f64]| x.iter().map(|v| -v).collect::<Vec<_>>();
    let nc = equal_time_noncontraction_check(&contract, &[1.0, 0.0], &[0.0, 1.0], 1.0, &opts)?;
    println!(
        "F(x) = -x: distance ratio {:.4}, non-contracting: {}",
        nc.ratio, nc.holds
    );
    Ok(())
}
