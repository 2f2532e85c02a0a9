//! Random architecture search over PQC heads.
//!
//! Every trial samples an ansatz and training hyperparameters, evaluates
//! them by k-fold cross-validation and is appended to a JSONL log before
//! the next trial starts. The log is the source of truth for resuming and
//! for reports.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::fusion::{cross_validate, HeadKind, HeadTopology, Metrics, MeanStd, ModelTopology, TrainConfig};
use crate::layers::{Architecture, Block, LoadKind, VarKind, VarOpSpec};
use crate::qnn::{CircuitSpec, MAX_BLOCKS};
use crate::sim::MAX_QUBITS;

/// Resampling attempts after the first draw.
pub const MAX_RETRIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub fn new(min: usize, max: usize) -> Self {
        IntRange { min, max }
    }

    pub fn fixed(v: usize) -> Self {
        IntRange { min: v, max: v }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatRange {
    pub min: f64,
    pub max: f64,
}

impl FloatRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    Solo,
    Linear,
    Both,
}

impl HeadChoice {
    fn options(self) -> &'static [HeadKind] {
        match self {
            HeadChoice::Solo => &[HeadKind::PqcSolo],
            HeadChoice::Linear => &[HeadKind::PqcLinear],
            HeadChoice::Both => &[HeadKind::PqcSolo, HeadKind::PqcLinear],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub n_qubits: usize,
    pub block_count: IntRange,
    pub load_vocab: Vec<LoadKind>,
    pub var_vocab: Vec<VarKind>,
    pub var_layers: IntRange,
    pub head: HeadChoice,
    pub lr: FloatRange,
    pub batch_size: IntRange,
    pub extractor_hidden: IntRange,
    pub extractor_output: IntRange,
    /// One extractor on concatenated sources, or one per source.
    pub n_extractors: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_qubits: 6,
            block_count: IntRange::new(1, MAX_BLOCKS),
            load_vocab: vec![LoadKind::AngleX, LoadKind::AngleY, LoadKind::AngleZ, LoadKind::Amplitude],
            var_vocab: vec![VarKind::BEL, VarKind::SEL, VarKind::SIMPLIFIED_TWO_DESIGN],
            var_layers: IntRange::new(1, 3),
            head: HeadChoice::Both,
            lr: FloatRange { min: 1e-3, max: 1e-2 },
            batch_size: IntRange::new(16, 64),
            extractor_hidden: IntRange::new(16, 128),
            extractor_output: IntRange::new(1, 8),
            n_extractors: 2,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("block_count", self.block_count),
            ("var_layers", self.var_layers),
            ("batch_size", self.batch_size),
            ("extractor_hidden", self.extractor_hidden),
            ("extractor_output", self.extractor_output),
        ];
        for (name, r) in ranges {
            if r.min > r.max {
                return Err(Error::validation(format!("{name}: empty range [{}, {}]", r.min, r.max)));
            }
        }
        if self.block_count.min == 0 || self.block_count.max > MAX_BLOCKS {
            return Err(Error::validation(format!("block_count must lie within [1, {MAX_BLOCKS}]")));
        }
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return Err(Error::validation(format!("n_qubits must lie within [1, {MAX_QUBITS}]")));
        }
        if self.batch_size.min == 0 || self.extractor_hidden.min == 0 || self.extractor_output.min == 0 {
            return Err(Error::validation("batch and extractor sizes must be positive"));
        }
        if !(self.lr.min >= 0.0 && self.lr.min <= self.lr.max && self.lr.max.is_finite()) {
            return Err(Error::validation(format!("lr: invalid range [{}, {}]", self.lr.min, self.lr.max)));
        }
        if self.load_vocab.is_empty() || self.var_vocab.is_empty() {
            return Err(Error::validation("load and var vocabularies must be non-empty"));
        }
        if self.load_vocab.iter().all(|l| *l == LoadKind::IdentityLoad) {
            return Err(Error::validation("load vocabulary has no data-loading operation"));
        }
        if !(1..=2).contains(&self.n_extractors) {
            return Err(Error::validation("n_extractors must be 1 or 2"));
        }
        for v in &self.var_vocab {
            crate::layers::template(v.name())?;
        }
        Ok(())
    }
}

/// Sampled training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub extractor_hidden: usize,
    pub extractor_output: usize,
    pub head: HeadKind,
}

/// Draws one trial. The extractor output is capped so the fused vector
/// fits the circuit's input capacity; invalid draws are resampled up to
/// `MAX_RETRIES` times.
pub fn sample_trial(space: &SearchSpace, seed: u64) -> Result<(CircuitSpec, Hyperparams)> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..=MAX_RETRIES {
        let blocks = space.block_count.sample(&mut rng);
        let arch: Vec<Block> = (0..blocks)
            .map(|b| {
                let eligible: Vec<LoadKind> = space
                    .load_vocab
                    .iter()
                    .copied()
                    .filter(|l| b == 0 || *l != LoadKind::Amplitude)
                    .collect();
                let load = eligible.choose(&mut rng).copied().unwrap_or(LoadKind::IdentityLoad);
                let kind = space.var_vocab.choose(&mut rng).expect("non-empty vocab").clone();
                let var = if kind.is_identity() {
                    VarOpSpec::identity()
                } else {
                    VarOpSpec::new(kind, space.var_layers.sample(&mut rng))
                };
                Block::new(load, var)
            })
            .collect();
        let spec = CircuitSpec::new(space.n_qubits, Architecture(arch));
        let head = *space.head.options().choose(&mut rng).expect("non-empty");
        let lr = space.lr.sample(&mut rng);
        let batch_size = space.batch_size.sample(&mut rng);
        let extractor_hidden = space.extractor_hidden.sample(&mut rng);
        if let Err(e) = spec.validate() {
            last_err = Some(e);
            continue;
        }
        let cap = (spec.input_capacity() / space.n_extractors).min(space.extractor_output.max);
        if cap < space.extractor_output.min {
            last_err = Some(Error::validation(format!(
                "`{}` cannot take {} extractor outputs of size ≥ {}",
                spec.architecture, space.n_extractors, space.extractor_output.min
            )));
            continue;
        }
        let extractor_output = IntRange::new(space.extractor_output.min, cap).sample(&mut rng);
        return Ok((
            spec,
            Hyperparams {
                lr,
                batch_size,
                extractor_hidden,
                extractor_output,
                head,
            },
        ));
    }
    Err(Error::validation(format!(
        "search space produced no valid circuit in {} attempts: {}",
        MAX_RETRIES + 1,
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Fixed settings shared by every trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub epochs: usize,
    pub folds: usize,
    /// Train folds concurrently.
    pub parallel: bool,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            epochs: 30,
            folds: 5,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    /// Canonical architecture notation.
    pub spec: String,
    pub n_qubits: usize,
    pub hyperparams: Hyperparams,
    pub per_fold_metrics: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1_macro: f64,
    pub classifier_params: usize,
    pub n_params: usize,
    pub seed: u64,
    pub failed: bool,
    pub error: Option<String>,
    /// Kept out of the log so that reruns are byte-identical; see
    /// [`timings_path`].
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrialRecord {
    pub fn head(&self) -> HeadKind {
        self.hyperparams.head
    }

    pub fn circuit(&self) -> Result<CircuitSpec> {
        CircuitSpec::parse(self.n_qubits, &self.spec)
    }

    /// Recomputes the aggregates from the per-fold metrics.
    pub fn check_aggregates(&self) -> Result<()> {
        if self.failed {
            return Ok(());
        }
        let acc = MeanStd::of(&self.per_fold_metrics.iter().map(|m| m.accuracy).collect::<Vec<_>>());
        let f1 = MeanStd::of(&self.per_fold_metrics.iter().map(|m| m.f1_macro).collect::<Vec<_>>());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if !(close(acc.mean, self.mean_accuracy) && close(acc.std, self.std_accuracy) && close(f1.mean, self.mean_f1_macro)) {
            return Err(Error::Search(format!(
                "trial {}: stored aggregates do not match its per-fold metrics",
                self.trial_id
            )));
        }
        Ok(())
    }
}

/// Builds the model topology for a trial on a dataset.
pub fn trial_topology(spec: &CircuitSpec, hyper: &Hyperparams, dataset: &SampleSet) -> Result<ModelTopology> {
    let mut extractors = vec![vec![dataset.d_top(), hyper.extractor_hidden, hyper.extractor_output]];
    if let Some(d) = dataset.d_bottom() {
        extractors.push(vec![d, hyper.extractor_hidden, hyper.extractor_output]);
    }
    let head = match hyper.head {
        HeadKind::PqcSolo => HeadTopology::PqcSolo { circuit: spec.clone() },
        HeadKind::PqcLinear => HeadTopology::PqcLinear { circuit: spec.clone() },
        HeadKind::Mlp => return Err(Error::validation("architecture search covers PQC heads only")),
    };
    Ok(ModelTopology { extractors, head })
}

/// Cross-validates one sampled configuration. Divergence or an input
/// that cannot be encoded marks the record failed instead of erroring.
pub fn run_trial(
    trial_id: usize,
    spec: &CircuitSpec,
    hyper: &Hyperparams,
    dataset: &SampleSet,
    settings: &TrialSettings,
    seed: u64,
) -> Result<TrialRecord> {
    let start = Instant::now();
    let topology = trial_topology(spec, hyper, dataset)?;
    let (ext_params, classifier_params) = topology.param_counts(dataset.n_classes())?;
    let config = TrainConfig {
        lr: hyper.lr,
        batch_size: hyper.batch_size,
        epochs: settings.epochs,
        seed,
        folds: settings.folds,
    };
    let mut record = TrialRecord {
        trial_id,
        spec: spec.architecture.to_string(),
        n_qubits: spec.n_qubits,
        hyperparams: hyper.clone(),
        per_fold_metrics: Vec::new(),
        mean_accuracy: 0.0,
        std_accuracy: 0.0,
        mean_f1_macro: 0.0,
        classifier_params,
        n_params: ext_params + classifier_params,
        seed,
        failed: false,
        error: None,
        wall_time: 0.0,
    };
    match cross_validate(&topology, dataset, &config, settings.parallel) {
        Ok(report) => {
            let acc = report.accuracy();
            record.mean_accuracy = acc.mean;
            record.std_accuracy = acc.std;
            record.mean_f1_macro = report.f1_macro().mean;
            record.per_fold_metrics = report.per_fold();
        }
        Err(e @ (Error::Diverged(_) | Error::Encoding(_))) => {
            record.failed = true;
            record.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Path of the wall-time sidecar for a trial log.
pub fn timings_path(log: &Path) -> PathBuf {
    let mut name = log.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timings");
    log.with_file_name(name)
}

/// Reads a JSONL trial log, checking numbering and aggregates.
pub fn read_log(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line).map_err(|e| Error::ingestion(path, Some(i + 1), e.to_string()))?;
        if rec.trial_id != records.len() {
            return Err(Error::ingestion(
                path,
                Some(i + 1),
                format!("trial_id {} out of sequence (expected {})", rec.trial_id, records.len()),
            ));
        }
        rec.check_aggregates()
            .map_err(|e| Error::ingestion(path, Some(i + 1), e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

/// Appends one record and syncs it to disk.
pub fn append_record(path: &Path, record: &TrialRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))?;

    let tp = timings_path(path);
    let mut t = OpenOptions::new().create(true).append(true).open(&tp).map_err(|e| Error::io(&tp, e))?;
    writeln!(t, "{}\t{:.3}", record.trial_id, record.wall_time).map_err(|e| Error::io(&tp, e))
}

/// Highest mean accuracy, then fewer parameters, then lower trial id.
pub fn best_trial(records: &[TrialRecord]) -> Option<&TrialRecord> {
    records.iter().filter(|r| !r.failed).min_by(|a, b| {
        b.mean_accuracy
            .total_cmp(&a.mean_accuracy)
            .then(a.n_params.cmp(&b.n_params))
            .then(a.trial_id.cmp(&b.trial_id))
    })
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub all: Vec<TrialRecord>,
}

/// Random search; trial `i` uses seed `master_seed + i`. With a log path,
/// existing records are kept and the search continues at index
/// `len(log)`.
pub fn search(
    space: &SearchSpace,
    dataset: &SampleSet,
    n_trials: usize,
    master_seed: u64,
    settings: &TrialSettings,
    log: Option<&Path>,
    mut on_trial: impl FnMut(&TrialRecord),
) -> Result<SearchOutcome> {
    if n_trials == 0 {
        return Err(Error::validation("n_trials must be at least 1"));
    }
    space.validate()?;
    let mut all = match log {
        Some(p) if p.exists() => read_log(p)?,
        _ => Vec::new(),
    };
    if all.len() > n_trials {
        return Err(Error::Search(format!(
            "log already holds {} trials, more than the requested {n_trials}",
            all.len()
        )));
    }
    for i in all.len()..n_trials {
        let seed = master_seed.wrapping_add(i as u64);
        let (spec, hyper) = sample_trial(space, seed)?;
        let record = run_trial(i, &spec, &hyper, dataset, settings, seed)?;
        if let Some(p) = log {
            append_record(p, &record)?;
        }
        on_trial(&record);
        all.push(record);
    }
    let best = best_trial(&all)
        .cloned()
        .ok_or_else(|| Error::Search(format!("all {} trials failed", all.len())))?;
    Ok(SearchOutcome { best, all })
}

/// Average and minimum accuracy over one group of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAggregate {
    pub runs: usize,
    pub avg: f64,
    pub min: f64,
}

/// Per-head average and minimum of `mean_accuracy` over successful runs.
pub fn head_aggregates(records: &[TrialRecord]) -> BTreeMap<HeadKind, HeadAggregate> {
    let mut groups: BTreeMap<HeadKind, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.failed) {
        groups.entry(r.head()).or_default().push(r.mean_accuracy);
    }
    groups
        .into_iter()
        .map(|(head, accs)| {
            let agg = HeadAggregate {
                runs: accs.len(),
                avg: accs.iter().sum::<f64>() / accs.len() as f64,
                min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            };
            (head, agg)
        })
        .collect()
}

/// Repeats a fixed configuration under each head with seeds
/// `master_seed + i`, appending to `log` like a search does.
#[allow(clippy::too_many_arguments)]
pub fn stability_runs(
    spec: &CircuitSpec,
    base: &Hyperparams,
    heads: &[HeadKind],
    runs_per_head: usize,
    dataset: &SampleSet,
    settings: &TrialSettings,
    master_seed: u64,
    log: Option<&Path>,
    mut on_trial: impl FnMut(&TrialRecord),
) -> Result<Vec<TrialRecord>> {
    let mut all = match log {
        Some(p) if p.exists() => read_log(p)?,
        _ => Vec::new(),
    };
    let total = heads.len() * runs_per_head;
    for i in all.len()..total {
        let hyper = Hyperparams {
            head: heads[i / runs_per_head],
            ..base.clone()
        };
        let record = run_trial(i, spec, &hyper, dataset, settings, master_seed.wrapping_add(i as u64))?;
        if let Some(p) = log {
            append_record(p, &record)?;
        }
        on_trial(&record);
        all.push(record);
    }
    Ok(all)
}
