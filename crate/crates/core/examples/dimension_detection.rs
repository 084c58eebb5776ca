//! Frame loss against the number of fields on a 3-plane in R^4.
//!
//! The integrated objective trains the composed flows directly; the loss
//! drops by orders of magnitude once `m` reaches the intrinsic dimension.
//!
//! `cargo run --release --example dimension_detection -- [epochs]`

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::dimension_detect;
use frameflow::losses::{Objective, TapeIntegration};
use frameflow::spectral::Penalty;
use frameflow::trainer::{LrSchedule, TrainConfig};

fn main() -> frameflow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let mut config = TrainConfig {
        dataset: "plane4d".into(),
        counts: DatasetCounts {
            train: 2000,
            test: 200,
        },
        epochs,
        ..TrainConfig::default()
    };
    config.loss.objective = Objective::Integrated(TapeIntegration::default());
    config.loss.penalty.penalty = Penalty::ReluSquared;
    config.optimizer.schedule = LrSchedule::Linear {
        start: 1e-2,
        end: 1e-4,
    };
    let data = make_dataset(&config.dataset, config.counts, config.seed)?;
    let curve = dimension_detect(&data, &[1, 2, 3, 4], &config, 100)?;
    for (m, loss) in &curve.losses {
        println!("m = {m}  frame loss {loss:.3e}");
    }
    println!("detected m = {:?}", curve.detected);
    Ok(())
}
