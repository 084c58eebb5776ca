//! Trains briefly, saves a checkpoint, reloads it and prints the full report.
//!
//! `cargo run --release --example evaluate_checkpoint`

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::evaluate;
use frameflow::models::checkpoint;
use frameflow::trainer::{train, TrainConfig};

fn main() -> frameflow::Result<()> {
    let config = TrainConfig {
        dataset: "paraboloid".into(),
        counts: DatasetCounts {
            train: 1000,
            test: 200,
        },
        epochs: 10,
        ..TrainConfig::default()
    };
    let data = make_dataset(&config.dataset, config.counts, config.seed)?;
    let run = train(&config, &data.train)?;
    let dir = std::env::temp_dir().join("frameflow-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("paraboloid.ckpt");
    checkpoint::save(&run.model, &path)?;
    let model = checkpoint::load(&path)?;
    let report = evaluate(&model, &data, 20)?;
    println!("checkpoint   {}", path.display());
    println!("angular err  {:.2} deg", report.angular.mean_deg);
    println!("frame loss   {:.4e}", report.frame_loss);
    println!(
        "collapse     median {:.3e}, {} failures",
        report.collapse.stats.median,
        report.collapse.failures.len()
    );
    println!("commutator   mean {:.3e}", report.commuting.mean);
    Ok(())
}
