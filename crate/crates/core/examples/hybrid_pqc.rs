//! Hybrid classical-quantum model on the two-source MNIST task (digits
//! 5, 6, 7): two small extractors feed a 6-qubit `AngleX > BEL(3)` head.
//!
//! ```text
//! QFUSE_DATA_DIR=data cargo run --release --example hybrid_pqc -- [solo|linear] [fraction] [epochs]
//! ```

use std::time::Instant;

use qfuse::data::{data_root, mnist_multisource, MnistSplit, MultisourceOptions};
use qfuse::fusion::{cross_validate, HeadTopology, ModelTopology, TrainConfig};
use qfuse::qnn::CircuitSpec;

fn main() -> qfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let head = args.first().map(String::as_str).unwrap_or("solo");
    let fraction: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);

    let dir = data_root().join("mnist");
    let full = mnist_multisource(&dir, MnistSplit::Train, &[5, 6, 7], &MultisourceOptions::default())?;
    let set = full.subsample(fraction, 42)?;
    println!("{} samples, class counts {:?}", set.len(), set.class_counts());

    let circuit = CircuitSpec::parse(6, "AngleX > BEL(3)")?;
    let head = match head {
        "linear" => HeadTopology::PqcLinear { circuit },
        _ => HeadTopology::PqcSolo { circuit },
    };
    let topology = ModelTopology {
        extractors: vec![vec![14, 64, 3], vec![14, 64, 3]],
        head,
    };
    let config = TrainConfig {
        lr: 1e-2,
        batch_size: 32,
        epochs,
        ..TrainConfig::default()
    };
    let (ext, cls) = topology.param_counts(set.n_classes())?;
    println!("extractor parameters {ext}, classifier parameters {cls}");

    let start = Instant::now();
    let report = cross_validate(&topology, &set, &config, true)?;
    for (i, f) in report.folds.iter().enumerate() {
        println!(
            "fold {i}: accuracy {:.3}  f1_macro {:.3}  final loss {:.4}",
            f.metrics.accuracy,
            f.metrics.f1_macro,
            f.loss_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("accuracy {}  f1_macro {}", report.accuracy(), report.f1_macro());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
