//! Trains two fields on the unit sphere and reports their tangency error.
//!
//! `cargo run --release --example train_sphere -- [epochs]`

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::angular_error;
use frameflow::trainer::{train, TrainConfig};

fn main() -> frameflow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let config = TrainConfig {
        dataset: "sphere".into(),
        counts: DatasetCounts {
            train: 2000,
            test: 500,
        },
        m: 2,
        epochs,
        ..TrainConfig::default()
    };
    let data = make_dataset(&config.dataset, config.counts, config.seed)?;
    let run = train(&config, &data.train)?;
    let last = &run.history.last().expect("at least one step").loss;
    let err = angular_error(&run.model, &data.manifold, &data.test)?;
    println!("steps        {}", run.history.len());
    println!(
        "final loss   {:.4e} (flow matching {:.4e})",
        last.total, last.l_c
    );
    println!("angular err  {:.2} deg +- {:.2}", err.mean_deg, err.std_deg);
    println!("per field    {:?}", err.per_field_deg);
    Ok(())
}
