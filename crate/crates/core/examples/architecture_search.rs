//! Random ansatz search on a 10% subsample of the two-source MNIST task,
//! logging every trial to a resumable JSONL file.
//!
//! ```text
//! cargo run --release --example architecture_search -- [n_trials] [log path]
//! ```

use std::path::PathBuf;

use qfuse::aqml::{head_aggregates, search, SearchSpace, TrialSettings};
use qfuse::data::{data_root, mnist_multisource, MnistSplit, MultisourceOptions};

fn main() -> qfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_trials: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let log: PathBuf = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qfuse-search.jsonl"));

    let set = mnist_multisource(&data_root().join("mnist"), MnistSplit::Train, &[5, 6, 7], &MultisourceOptions::default())?
        .subsample(0.1, 42)?;
    let space = SearchSpace::default();
    let settings = TrialSettings {
        parallel: true,
        ..TrialSettings::default()
    };
    println!("logging to {}", log.display());
    let outcome = search(&space, &set, n_trials, 42, &settings, Some(&log), |r| {
        println!("trial {:>2}: {:.3}  {} [{}]", r.trial_id, r.mean_accuracy, r.spec, r.head());
    })?;
    println!(
        "best: {} | params: {} | acc: {:.3}",
        outcome.best.spec, outcome.best.classifier_params, outcome.best.mean_accuracy
    );
    for (head, agg) in head_aggregates(&outcome.all) {
        println!("{head}: accuracy^avg {:.3}, accuracy^min {:.3} over {} trials", agg.avg, agg.min, agg.runs);
    }
    Ok(())
}
