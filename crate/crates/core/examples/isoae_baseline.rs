//! Isometric autoencoder on the torus; the decoder Jacobian is its frame.
//!
//! `cargo run --release --example isoae_baseline -- [epochs]`

use frameflow::baseline::{isoae_tangent_error, train_isoae, IsoAeConfig};
use frameflow::datasets::{make_dataset, DatasetCounts};

fn main() -> frameflow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let data = make_dataset(
        "torus",
        DatasetCounts {
            train: 2000,
            test: 500,
        },
        0,
    )?;
    let config = IsoAeConfig {
        epochs,
        ..IsoAeConfig::default()
    };
    let (model, history) = train_isoae(&data.train, &config)?;
    let last = history.last().expect("at least one step");
    println!(
        "reconstruction {:.3e}  isotropy {:.3e}",
        last.reconstruction, last.isotropy
    );
    let err = isoae_tangent_error(&model, &data.manifold, &data.test)?;
    println!(
        "angular err    {:.2} deg +- {:.2}",
        err.mean_deg, err.std_deg
    );
    Ok(())
}
