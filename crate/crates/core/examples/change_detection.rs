//! Paired-source change detection: synthetic 13-band pixel pairs are
//! written to CSV, reduced to four principal components per source and
//! classified by one extractor feeding an 8-qubit `Amplitude > BEL(1)`
//! circuit.
//!
//! ```text
//! cargo run --release --example change_detection -- [solo|linear]
//! ```

use qfuse::data::{load_paired_csv, synthetic_change_pairs, write_paired_csv, PairedPca};
use qfuse::fusion::{cross_validate, HeadTopology, ModelTopology, TrainConfig};
use qfuse::qnn::CircuitSpec;

fn main() -> qfuse::Result<()> {
    let head = std::env::args().nth(1).unwrap_or_else(|| "solo".into());
    let dir = std::env::temp_dir().join("qfuse-change-detection");
    let csv = dir.join("pairs.csv");
    write_paired_csv(&synthetic_change_pairs(400, 13, 7)?, &csv)?;

    let raw = load_paired_csv(&csv)?;
    let pca = PairedPca::fit(&raw, 4)?;
    println!(
        "explained variance: source 0 {:.4}, source 1 {:.4}",
        pca.source0.explained_variance_ratio(),
        pca.source1.explained_variance_ratio()
    );
    let set = pca.transform(&raw)?;

    let circuit = CircuitSpec::parse(8, "Amplitude > BEL(1)")?;
    let topology = ModelTopology {
        extractors: vec![vec![8, 8]],
        head: if head != "linear" {
            HeadTopology::PqcSolo { circuit }
        } else {
            HeadTopology::PqcLinear { circuit }
        },
    };
    let config = TrainConfig {
        lr: 1e-2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let report = cross_validate(&topology, &set, &config, true)?;
    println!("{} rows, classifier parameters {}", set.len(), topology.param_counts(2)?.1);
    println!("accuracy {}  f1_macro {}", report.accuracy(), report.f1_macro());
    Ok(())
}
