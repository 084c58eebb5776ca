//! Retrains on the sphere for several spectral-penalty weights.
//!
//! `cargo run --release --example sensitivity_sweep -- [epochs]`

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::{sensitivity_sweep, Coefficient};
use frameflow::trainer::TrainConfig;

fn main() -> frameflow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let config = TrainConfig {
        dataset: "sphere".into(),
        counts: DatasetCounts {
            train: 1000,
            test: 300,
        },
        epochs,
        ..TrainConfig::default()
    };
    let data = make_dataset(&config.dataset, config.counts, config.seed)?;
    let points = sensitivity_sweep(&data, Coefficient::Alpha, &[1e-4, 1e-2, 1.0], &config)?;
    for p in &points {
        match (&p.angular, &p.error) {
            (Some(a), _) => println!("alpha = {:<8} angular err {:.2} deg", p.value, a.mean_deg),
            (None, Some(e)) => println!("alpha = {:<8} failed: {e}", p.value),
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}
