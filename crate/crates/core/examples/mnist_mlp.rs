//! Classical baseline on the two-source MNIST task: two 14→90→196
//! extractors and a 392→95→3 classifier (75 995 parameters), 5-fold
//! cross-validated.
//!
//! ```text
//! cargo run --release --example mnist_mlp -- [fraction] [epochs]
//! ```

use std::time::Instant;

use qfuse::data::{data_root, mnist_multisource, MnistSplit, MultisourceOptions};
use qfuse::fusion::{cross_validate, HeadTopology, ModelTopology, TrainConfig};

fn main() -> qfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fraction: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);

    let dir = data_root().join("mnist");
    let set = mnist_multisource(&dir, MnistSplit::Train, &[5, 6, 7], &MultisourceOptions::default())?
        .subsample(fraction, 42)?;
    let topology = ModelTopology {
        extractors: vec![vec![14, 90, 196], vec![14, 90, 196]],
        head: HeadTopology::Mlp { hidden: vec![95] },
    };
    let (ext, cls) = topology.param_counts(set.n_classes())?;
    println!("{} samples; parameters: extractors {ext}, classifier {cls}, total {}", set.len(), ext + cls);

    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = cross_validate(&topology, &set, &config, true)?;
    for (i, f) in report.folds.iter().enumerate() {
        println!("fold {i}: accuracy {:.4}  f1_macro {:.4}", f.metrics.accuracy, f.metrics.f1_macro);
    }
    println!("accuracy {}  f1_macro {}", report.accuracy(), report.f1_macro());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
