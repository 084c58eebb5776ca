//! Time functions and arc lengths as coordinates on the paraboloid.
//!
//! `cargo run --release --example intrinsic_coordinates`

use frameflow::datasets::{make_dataset, DatasetCounts};
use frameflow::eval::{eval_flow_options, extract_coordinates, head_rows};
use frameflow::trainer::{train, TrainConfig};

fn main() -> frameflow::Result<()> {
    let config = TrainConfig {
        dataset: "paraboloid".into(),
        counts: DatasetCounts {
            train: 1000,
            test: 100,
        },
        epochs: 20,
        ..TrainConfig::default()
    };
    let data = make_dataset(&config.dataset, config.counts, config.seed)?;
    let model = train(&config, &data.train)?.model;
    let pts = head_rows(&data.test, 8);
    let coords = extract_coordinates(&model, &pts, true, &eval_flow_options())?;
    let arcs = coords.arc_length.expect("requested");
    println!(
        "{:>8} {:>8} {:>8} | {:>8} {:>8} | {:>8} {:>8}",
        "x", "y", "z", "T1", "T2", "l1", "l2"
    );
    for r in 0..pts.rows() {
        let p = pts.row_slice(r);
        println!(
            "{:>8.3} {:>8.3} {:>8.3} | {:>8.3} {:>8.3} | {:>8.3} {:>8.3}",
            p[0],
            p[1],
            p[2],
            coords.time.get(r, 0),
            coords.time.get(r, 1),
            arcs.get(r, 0),
            arcs.get(r, 1)
        );
    }
    Ok(())
}
