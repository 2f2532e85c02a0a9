//! Repeats one PQC configuration under the bare and the linear readout
//! with different seeds and compares average and worst-case accuracy.
//!
//! ```text
//! cargo run --release --example head_stability -- [runs per head]
//! ```

use qfuse::aqml::{head_aggregates, stability_runs, Hyperparams, TrialSettings};
use qfuse::data::{data_root, mnist_multisource, MnistSplit, MultisourceOptions};
use qfuse::fusion::HeadKind;
use qfuse::qnn::CircuitSpec;

fn main() -> qfuse::Result<()> {
    let runs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let set = mnist_multisource(&data_root().join("mnist"), MnistSplit::Train, &[5, 6, 7], &MultisourceOptions::default())?
        .subsample(0.1, 42)?;
    let spec = CircuitSpec::parse(6, "AngleX > BEL(3)")?;
    let base = Hyperparams {
        lr: 1e-2,
        batch_size: 32,
        extractor_hidden: 64,
        extractor_output: 3,
        head: HeadKind::PqcSolo,
    };
    let settings = TrialSettings {
        parallel: true,
        ..TrialSettings::default()
    };
    let records = stability_runs(
        &spec,
        &base,
        &[HeadKind::PqcSolo, HeadKind::PqcLinear],
        runs,
        &set,
        &settings,
        42,
        None,
        |r| println!("run {:>2} [{}] seed {}: {:.3}", r.trial_id, r.head(), r.seed, r.mean_accuracy),
    )?;
    println!("{:<12} {:>14} {:>14}", "head", "accuracy^avg", "accuracy^min");
    for (head, agg) in head_aggregates(&records) {
        println!("{:<12} {:>14.3} {:>14.3}", head.name(), agg.avg, agg.min);
    }
    Ok(())
}
