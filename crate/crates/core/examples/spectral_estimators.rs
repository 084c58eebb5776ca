//! Exact against matrix-free estimates of the PSD penalty.
//!
//! `cargo run --release --example spectral_estimators`

use frameflow::autodiff::Dual;
use frameflow::models::{Activation, Head, Init, Mlp, MlpSpec};
use frameflow::seeding;
use frameflow::spectral::{psd_penalty, Estimator, Penalty, SpectralPenaltySpec};
use frameflow::tensor::Tensor;

fn main() -> frameflow::Result<()> {
    let spec = MlpSpec {
        widths: vec![4, 16, 4],
        activation: Activation::Tanh,
        head: Head::Identity,
        init: Init::GlorotNormal,
    };
    let mlp = Mlp::new(spec, &mut seeding::rng(1))?;
    let field = |x: &Dual| {
        mlp.bind_frozen(x.primal.tape())
            .forward(x)
            .add(&x.scale(-0.5))
    };
    let x = Tensor::row(&[0.1, -0.4, 0.3, 0.8]);
    for penalty in [Penalty::SoftMin, Penalty::ReluSquared] {
        let exact = SpectralPenaltySpec {
            penalty,
            estimator: Estimator::ExactEigen,
        };
        println!(
            "{:<13} exact          {:.6}",
            penalty.name(),
            psd_penalty(&field, None, 1.0, &x, &exact, 0)?
        );
        for (steps, probes) in [(3, 8), (4, 64), (4, 2048)] {
            let spec = SpectralPenaltySpec {
                penalty,
                estimator: Estimator::Lanczos { steps, probes },
            };
            let v = psd_penalty(&field, None, 1.0, &x, &spec, 7)?;
            println!("{:<13} k={steps} p={probes:<5} {v:.6}", "");
        }
    }
    Ok(())
}
