//! Experiment harness behind the `qfuse` binary: JSON experiment configs
//! and the `prepare`, `train`, `search`, `eval` and `report` commands.
//!
//! Commands write progress and reports to the supplied writer and all
//! files atomically, so the library can drive them directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aqml::{
    self, head_aggregates, read_log, HeadAggregate, HeadChoice, Hyperparams, SearchSpace, TrialRecord, TrialSettings,
};
use crate::data::{
    self, load_paired_csv, load_sample_set, read_sidecar, save_sample_set, MnistSplit, MultisourceOptions, PairedPca,
    Pooling, SampleSet,
};
use crate::error::{Error, Result};
use crate::fusion::{
    cross_validate, evaluate, CvReport, HeadKind, HeadTopology, Metrics, MeanStd, ModelFile, ModelTopology,
    TrainConfig,
};
use crate::qnn::CircuitSpec;

pub const DEFAULT_SEED: u64 = 42;
const PIPELINE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// MNIST digits 5, 6, 7 split into two synthetic sources.
    Mnist3,
    /// Paired-source pixels from a CSV, reduced by PCA.
    PairedCsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    PqcManual,
    PqcSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hidden: vec![90],
            output: 196,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Digits kept for `mnist3`.
    pub classes: Vec<u8>,
    pub threshold: f64,
    pub pooling: Pooling,
    /// Fraction of the prepared training rows used by `train`/`search`.
    pub subsample: f64,
    /// Input file for `paired_csv`.
    pub csv: Option<PathBuf>,
    pub pca_components: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: vec![5, 6, 7],
            threshold: 0.5,
            pooling: Pooling::Average,
            subsample: 1.0,
            csv: None,
            pca_components: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Data root; falls back to `$QFUSE_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
    /// Prepared sets; defaults to `<data_dir>/prepared`.
    pub prepared_dir: Option<PathBuf>,
    /// Run outputs; defaults to `runs`.
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_trials: 20,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    /// Fixed ansatz for `pqc_manual`.
    #[serde(default)]
    pub architecture: Option<String>,
    #[serde(default = "default_qubits")]
    pub n_qubits: usize,
    /// Readout of a manual PQC: `solo` or `linear`.
    #[serde(default = "default_head")]
    pub head: HeadChoice,
    #[serde(default)]
    pub search: Option<SearchConfig>,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_qubits() -> usize {
    6
}

fn default_head() -> HeadChoice {
    HeadChoice::Solo
}

fn default_classifier_hidden() -> Vec<usize> {
    vec![95]
}

fn at(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            at(if path.is_empty() { "." } else { &path }, e.into_inner())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn n_extractors(&self) -> usize {
        match self.task {
            Task::Mnist3 => 2,
            Task::PairedCsv => 1,
        }
    }

    fn extractor_input(&self) -> usize {
        match self.task {
            Task::Mnist3 => 14,
            Task::PairedCsv => 2 * self.data.pca_components,
        }
    }

    pub fn circuit(&self) -> Result<Option<CircuitSpec>> {
        match (&self.architecture, self.model) {
            (Some(a), ModelKind::PqcManual) => Ok(Some(
                CircuitSpec::parse(self.n_qubits, a).map_err(|e| at("architecture", e))?,
            )),
            _ => Ok(None),
        }
    }

    /// Semantic checks; every message starts with the offending field path.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(at("train.lr", format!("must be positive and finite, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(at("train.batch_size", "must be at least 1"));
        }
        if t.epochs == 0 {
            return Err(at("train.epochs", "must be at least 1"));
        }
        if t.folds < 2 {
            return Err(at("train.folds", "must be at least 2"));
        }
        if !(self.data.subsample > 0.0 && self.data.subsample <= 1.0) {
            return Err(at("data.subsample", format!("must lie in (0, 1], got {}", self.data.subsample)));
        }
        if !(0.0..1.0).contains(&self.data.threshold) {
            return Err(at("data.threshold", "must lie in [0, 1)"));
        }
        if self.extractor.output == 0 || self.extractor.hidden.contains(&0) {
            return Err(at("extractor", "layer sizes must be positive"));
        }
        match self.task {
            Task::Mnist3 => {
                if self.data.classes.len() < 2 || self.data.classes.iter().any(|&c| c > 9) {
                    return Err(at("data.classes", "need at least two digits in 0..=9"));
                }
            }
            Task::PairedCsv => {
                if self.data.csv.is_none() {
                    return Err(at("data.csv", "required for task paired_csv"));
                }
                if self.data.pca_components == 0 {
                    return Err(at("data.pca_components", "must be at least 1"));
                }
            }
        }
        match self.model {
            ModelKind::Mlp => {
                if self.architecture.is_some() || self.search.is_some() {
                    return Err(at("model", "mlp takes neither `architecture` nor `search`"));
                }
            }
            ModelKind::PqcManual => {
                if self.search.is_some() {
                    return Err(at("search", "pqc_manual uses a fixed `architecture`, not `search`"));
                }
                let Some(spec) = self.circuit()? else {
                    return Err(at("architecture", "required for pqc_manual"));
                };
                let fused = self.n_extractors() * self.extractor.output;
                if fused > spec.input_capacity() {
                    return Err(at(
                        "extractor.output",
                        format!(
                            "fused width {fused} exceeds the {}-feature capacity of `{}` on {} qubits",
                            spec.input_capacity(),
                            spec.architecture,
                            spec.n_qubits
                        ),
                    ));
                }
            }
            ModelKind::PqcSearch => {
                if self.architecture.is_some() {
                    return Err(at("architecture", "pqc_search samples architectures; use `search`"));
                }
                let Some(search) = &self.search else {
                    return Err(at("search", "required for pqc_search"));
                };
                if search.n_trials == 0 {
                    return Err(at("search.n_trials", "must be at least 1"));
                }
                search.space.validate().map_err(|e| at("search.space", e))?;
                if search.space.n_extractors != self.n_extractors() {
                    return Err(at(
                        "search.space.n_extractors",
                        format!("task uses {} extractor(s)", self.n_extractors()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(data::data_root)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.paths
            .prepared_dir
            .clone()
            .unwrap_or_else(|| self.data_dir().join("prepared"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| "runs".into())
    }

    /// Prepared training set (and held-out test set for `mnist3`).
    pub fn prepared_paths(&self) -> (PathBuf, Option<PathBuf>) {
        let dir = self.prepared_dir();
        match self.task {
            Task::Mnist3 => (dir.join("mnist3_train.csv"), Some(dir.join("mnist3_test.csv"))),
            Task::PairedCsv => {
                let stem = self
                    .data
                    .csv
                    .as_ref()
                    .and_then(|p| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "paired".into());
                (dir.join(format!("{stem}_pca{}.csv", self.data.pca_components)), None)
            }
        }
    }

    fn extractor_sizes(&self, hidden: &[usize], output: usize) -> Vec<Vec<usize>> {
        let mut sizes = vec![self.extractor_input()];
        sizes.extend(hidden);
        sizes.push(output);
        vec![sizes; self.n_extractors()]
    }

    /// Topology of a `mlp` or `pqc_manual` model.
    pub fn topology(&self) -> Result<ModelTopology> {
        let extractors = self.extractor_sizes(&self.extractor.hidden, self.extractor.output);
        let head = match self.model {
            ModelKind::Mlp => HeadTopology::Mlp {
                hidden: self.classifier_hidden.clone(),
            },
            ModelKind::PqcManual => {
                let circuit = self.circuit()?.ok_or_else(|| at("architecture", "required for pqc_manual"))?;
                match self.head {
                    HeadChoice::Linear => HeadTopology::PqcLinear { circuit },
                    _ => HeadTopology::PqcSolo { circuit },
                }
            }
            ModelKind::PqcSearch => {
                return Err(Error::config("pqc_search models come from the trial log"));
            }
        };
        Ok(ModelTopology { extractors, head })
    }

    fn trial_settings(&self, jobs: usize) -> TrialSettings {
        TrialSettings {
            epochs: self.train.epochs,
            folds: self.train.folds,
            parallel: jobs != 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qfuse", version, about = "Hybrid quantum-classical multisource classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the prepared sample sets for a config.
    Prepare(CommonArgs),
    /// Cross-validate one model and save it with its metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Repeat the PQC configuration this many times per head instead.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Random architecture search; resumes from an existing trial log.
    Search {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Evaluate a saved model on a prepared set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Render a report from a trial log or metrics CSV without retraining.
    Report {
        #[arg(long, required_unless_present = "metrics")]
        log: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub subsample: Option<f64>,
}

impl CommonArgs {
    /// Loads the config and applies flag overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.train.seed = self.seed;
        if let Some(d) = &self.data_dir {
            cfg.paths.data_dir = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.paths.output_dir = Some(o.clone());
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.subsample {
            cfg.data.subsample = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Cli {
    /// Thread count requested on the command line (0 = every core).
    pub fn jobs(&self) -> usize {
        match &self.command {
            Command::Prepare(c) | Command::Train { common: c, .. } | Command::Search { common: c, .. } => c.jobs,
            Command::Eval { jobs, .. } => *jobs,
            Command::Report { .. } => 1,
        }
    }
}

/// Sizes the global worker pool; only the first call takes effect.
pub fn init_threads(jobs: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

/// Runs a parsed command line.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => cmd_prepare(&c.resolve()?, out).map(|_| ()),
        Command::Train { common, repeat } => {
            let cfg = common.resolve()?;
            match repeat {
                Some(n) => cmd_repeat(&cfg, n, common.jobs, out).map(|_| ()),
                None => cmd_train(&cfg, common.jobs, out).map(|_| ()),
            }
        }
        Command::Search { common, trials } => {
            let mut cfg = common.resolve()?;
            if let (Some(n), Some(s)) = (trials, cfg.search.as_mut()) {
                s.n_trials = n;
            }
            cfg.validate()?;
            cmd_search(&cfg, common.jobs, out).map(|_| ())
        }
        Command::Eval { model, data, out: csv, .. } => cmd_eval(&model, &data, csv.as_deref(), out).map(|_| ()),
        Command::Report { log, metrics } => {
            if let Some(l) = log {
                cmd_report_log(&l, out)?;
            }
            if let Some(m) = metrics {
                cmd_report_metrics(&m, out)?;
            }
            Ok(())
        }
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of the pipeline parameters and the bytes of every input file.
fn pipeline_hash(pipeline: &serde_json::Value, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(pipeline)?.as_bytes());
    for p in inputs {
        h.update(b"\n");
        h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(sha256_file(p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn is_up_to_date(csv: &Path, hash: &str) -> bool {
    csv.exists() && read_sidecar(csv).is_ok_and(|s| s.pipeline_hash == hash)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareOutcome {
    /// Prepared files with whether each was (re)written.
    pub files: Vec<(PathBuf, bool)>,
}

pub fn cmd_prepare(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<PrepareOutcome> {
    let mut files = Vec::new();
    match cfg.task {
        Task::Mnist3 => {
            let dir = cfg.data_dir().join("mnist");
            let opts = MultisourceOptions {
                threshold: cfg.data.threshold,
                pooling: cfg.data.pooling,
            };
            let (train_csv, test_csv) = cfg.prepared_paths();
            let targets = [(MnistSplit::Train, train_csv), (MnistSplit::Test, test_csv.expect("mnist has a test split"))];
            for (split, csv) in targets {
                let (img, lab) = split.file_names();
                let inputs = vec![dir.join(img), dir.join(lab)];
                for p in &inputs {
                    require_file(p)?;
                }
                let pipeline = serde_json::json!({
                    "version": PIPELINE_VERSION,
                    "task": "mnist3",
                    "split": split,
                    "classes": cfg.data.classes,
                    "threshold": opts.threshold,
                    "pooling": opts.pooling,
                });
                let hash = pipeline_hash(&pipeline, &inputs)?;
                if is_up_to_date(&csv, &hash) {
                    say(out, format!("{}: up to date", csv.display()))?;
                    files.push((csv, false));
                    continue;
                }
                let set = data::mnist_multisource(&dir, split, &cfg.data.classes, &opts)?;
                let provenance = inputs.iter().map(|p| p.display().to_string()).collect();
                save_sample_set(&set, &csv, provenance, pipeline, hash)?;
                say(
                    out,
                    format!("{}: {} rows, class counts {:?}", csv.display(), set.len(), set.class_counts()),
                )?;
                files.push((csv, true));
            }
        }
        Task::PairedCsv => {
            let input = cfg.data.csv.clone().expect("validated");
            require_file(&input)?;
            let (csv, _) = cfg.prepared_paths();
            let pipeline = serde_json::json!({
                "version": PIPELINE_VERSION,
                "task": "paired_csv",
                "pca_components": cfg.data.pca_components,
            });
            let hash = pipeline_hash(&pipeline, std::slice::from_ref(&input))?;
            if is_up_to_date(&csv, &hash) {
                say(out, format!("{}: up to date", csv.display()))?;
                files.push((csv, false));
            } else {
                let raw = load_paired_csv(&input)?;
                let pca = PairedPca::fit(&raw, cfg.data.pca_components)?;
                let set = pca.transform(&raw)?;
                save_sample_set(&set, &csv, vec![input.display().to_string()], pipeline, hash)?;
                say(
                    out,
                    format!(
                        "{}: {} rows, explained variance {:.4} / {:.4}",
                        csv.display(),
                        set.len(),
                        pca.source0.explained_variance_ratio(),
                        pca.source1.explained_variance_ratio()
                    ),
                )?;
                files.push((csv, true));
            }
        }
    }
    Ok(PrepareOutcome { files })
}

fn load_training_set(cfg: &ExperimentConfig) -> Result<SampleSet> {
    let (csv, _) = cfg.prepared_paths();
    if !csv.exists() {
        return Err(Error::config(format!(
            "prepared data not found at {}; run `qfuse prepare` first",
            csv.display()
        )));
    }
    let set = load_sample_set(&csv)?;
    if cfg.data.subsample < 1.0 {
        set.subsample(cfg.data.subsample, cfg.train.seed)
    } else {
        Ok(set)
    }
}

pub const METRICS_HEADER: [&str; 5] = ["fold", "accuracy", "precision_macro", "recall_macro", "f1_macro"];

fn metrics_fields(label: String, m: [f64; 4]) -> Vec<String> {
    std::iter::once(label).chain(m.iter().map(|v| v.to_string())).collect()
}

fn metric_values(m: &Metrics) -> [f64; 4] {
    [m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro]
}

/// Per-fold rows followed by `mean` and `std` rows.
pub fn write_metrics_csv(path: &Path, folds: &[Metrics]) -> Result<()> {
    let mut rows: Vec<Vec<String>> = folds
        .iter()
        .enumerate()
        .map(|(i, m)| metrics_fields(i.to_string(), metric_values(m)))
        .collect();
    if folds.len() > 1 {
        let stats: Vec<MeanStd> = (0..4)
            .map(|k| MeanStd::of(&folds.iter().map(|m| metric_values(m)[k]).collect::<Vec<_>>()))
            .collect();
        rows.push(metrics_fields("mean".into(), [0, 1, 2, 3].map(|k| stats[k].mean)));
        rows.push(metrics_fields("std".into(), [0, 1, 2, 3].map(|k| stats[k].std)));
    }
    let header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    data::write_csv_atomic(path, &header, &rows)
}

fn render_cv(label: &str, ext: usize, cls: usize, report: &CvReport) -> String {
    let mut s = String::new();
    for (i, f) in report.folds.iter().enumerate() {
        let _ = writeln!(
            s,
            "fold {i}: accuracy {:.3}  precision {:.3}  recall {:.3}  f1_macro {:.3}",
            f.metrics.accuracy, f.metrics.precision_macro, f.metrics.recall_macro, f.metrics.f1_macro
        );
    }
    let _ = writeln!(
        s,
        "{:<28} {:>10} {:>10} {:>8}  {:<15}  {:<15}",
        "model", "extractors", "classifier", "total", "accuracy", "f1_macro"
    );
    let _ = write!(
        s,
        "{:<28} {:>10} {:>10} {:>8}  {:<15}  {:<15}",
        label,
        ext,
        cls,
        ext + cls,
        report.accuracy().to_string(),
        report.f1_macro().to_string()
    );
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: CvReport,
    pub metrics_csv: PathBuf,
    pub model_json: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize, out: &mut dyn Write) -> Result<TrainOutcome> {
    let set = load_training_set(cfg)?;
    let mut train = cfg.train.clone();
    let (topology, label) = match cfg.model {
        ModelKind::PqcSearch => {
            let log = cfg.output_dir().join("trials.jsonl");
            let records = if log.exists() { read_log(&log)? } else { Vec::new() };
            let best = aqml::best_trial(&records).ok_or_else(|| {
                Error::config(format!("no successful trials in {}; run `qfuse search` first", log.display()))
            })?;
            train.lr = best.hyperparams.lr;
            train.batch_size = best.hyperparams.batch_size;
            let topo = aqml::trial_topology(&best.circuit()?, &best.hyperparams, &set)?;
            (topo, format!("{} [{}]", best.spec, best.head()))
        }
        _ => {
            let topo = cfg.topology()?;
            let label = match &topo.head {
                HeadTopology::Mlp { .. } => "mlp".to_string(),
                h => format!("{} [{}]", cfg.architecture.as_deref().unwrap_or_default(), h.kind()),
            };
            (topo, label)
        }
    };
    let (ext, cls) = topology.param_counts(set.n_classes())?;
    say(out, format!("training on {} rows, {} folds, seed {}", set.len(), train.folds, train.seed))?;
    let report = cross_validate(&topology, &set, &train, jobs != 1)?;
    say(out, render_cv(&label, ext, cls, &report))?;

    let dir = cfg.output_dir();
    let metrics_csv = dir.join("metrics.csv");
    let model_json = dir.join("model.json");
    write_metrics_csv(&metrics_csv, &report.per_fold())?;
    let best = &report.folds[report.best_fold()];
    ModelFile::new(&best.model, set.class_map.clone(), &train).save(&model_json)?;
    say(out, format!("wrote {} and {}", metrics_csv.display(), model_json.display()))?;
    Ok(TrainOutcome {
        report,
        metrics_csv,
        model_json,
    })
}

/// Repeated runs of the manual PQC under both heads.
pub fn cmd_repeat(cfg: &ExperimentConfig, runs: usize, jobs: usize, out: &mut dyn Write) -> Result<Vec<TrialRecord>> {
    if cfg.model != ModelKind::PqcManual {
        return Err(at("model", "--repeat needs a pqc_manual config"));
    }
    if runs == 0 {
        return Err(Error::config("--repeat: must be at least 1"));
    }
    let set = load_training_set(cfg)?;
    let spec = cfg.circuit()?.expect("validated");
    let base = Hyperparams {
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        extractor_hidden: *cfg
            .extractor
            .hidden
            .first()
            .ok_or_else(|| at("extractor.hidden", "repeated PQC runs need one hidden layer"))?,
        extractor_output: cfg.extractor.output,
        head: HeadKind::PqcSolo,
    };
    if cfg.extractor.hidden.len() != 1 {
        return Err(at("extractor.hidden", "repeated PQC runs need exactly one hidden layer"));
    }
    let log = cfg.output_dir().join("runs.jsonl");
    let records = aqml::stability_runs(
        &spec,
        &base,
        &[HeadKind::PqcSolo, HeadKind::PqcLinear],
        runs,
        &set,
        &cfg.trial_settings(jobs),
        cfg.train.seed,
        Some(&log),
        |r| {
            let _ = say(out, trial_line(r));
        },
    )?;
    say(out, render_aggregates(&head_aggregates(&records)))?;
    Ok(records)
}

fn trial_line(r: &TrialRecord) -> String {
    if r.failed {
        format!("trial {:>3} FAILED {} [{}]: {}", r.trial_id, r.spec, r.head(), r.error.as_deref().unwrap_or(""))
    } else {
        format!(
            "trial {:>3} {:.3} ± {:.3}  {} [{}]  params {}  {:.1}s",
            r.trial_id,
            r.mean_accuracy,
            r.std_accuracy,
            r.spec,
            r.head(),
            r.classifier_params,
            r.wall_time
        )
    }
}

pub fn cmd_search(cfg: &ExperimentConfig, jobs: usize, out: &mut dyn Write) -> Result<aqml::SearchOutcome> {
    let search = cfg.search.as_ref().ok_or_else(|| at("search", "required for the search command"))?;
    let set = load_training_set(cfg)?;
    let log = cfg.output_dir().join("trials.jsonl");
    let outcome = aqml::search(
        &search.space,
        &set,
        search.n_trials,
        cfg.train.seed,
        &cfg.trial_settings(jobs),
        Some(&log),
        |r| {
            let _ = say(out, trial_line(r));
        },
    )?;
    say(out, render_search_report(&outcome.all))?;
    Ok(outcome)
}

/// `<notation> | params: <classifier params> | acc: <mean accuracy>`.
pub fn best_line(r: &TrialRecord) -> String {
    format!("{} | params: {} | acc: {:.3}", r.spec, r.classifier_params, r.mean_accuracy)
}

pub fn render_aggregates(aggs: &BTreeMap<HeadKind, HeadAggregate>) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<14}", "metric");
    for h in aggs.keys() {
        let _ = write!(s, " {:>12}", h.name());
    }
    for (label, f) in [
        ("accuracy^avg", (|a: &HeadAggregate| format!("{:.3}", a.avg)) as fn(&HeadAggregate) -> String),
        ("accuracy^min", |a| format!("{:.3}", a.min)),
        ("runs", |a| a.runs.to_string()),
    ] {
        let _ = write!(s, "\n{label:<14}");
        for a in aggs.values() {
            let _ = write!(s, " {:>12}", f(a));
        }
    }
    s
}

pub fn render_search_report(records: &[TrialRecord]) -> String {
    let failed = records.iter().filter(|r| r.failed).count();
    let mut s = String::new();
    match aqml::best_trial(records) {
        Some(best) => {
            let _ = writeln!(s, "best: {}", best_line(best));
        }
        None => {
            let _ = writeln!(s, "best: none (every trial failed)");
        }
    }
    let _ = writeln!(s, "trials: {} ({failed} failed)", records.len());
    s.push_str(&render_aggregates(&head_aggregates(records)));
    s
}

pub fn cmd_report_log(log: &Path, out: &mut dyn Write) -> Result<String> {
    let records = read_log(log)?;
    let text = render_search_report(&records);
    say(out, &text)?;
    Ok(text)
}

pub fn cmd_report_metrics(path: &Path, out: &mut dyn Write) -> Result<String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::ingestion(path, None, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::ingestion(path, Some(1), e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::ingestion(path, Some(1), format!("expected columns {}", METRICS_HEADER.join(","))));
    }
    let mut folds: Vec<[f64; 4]> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::ingestion(path, Some(i + 2), e.to_string()))?;
        if rec[0].parse::<usize>().is_err() {
            continue;
        }
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1]
                .parse()
                .map_err(|_| Error::ingestion(path, Some(i + 2), format!("bad number `{}`", &rec[k + 1])))?;
        }
        folds.push(v);
    }
    let mut s = String::new();
    for (i, v) in folds.iter().enumerate() {
        let _ = writeln!(s, "fold {i}: accuracy {:.3}  f1_macro {:.3}", v[0], v[3]);
    }
    let col = |k: usize| MeanStd::of(&folds.iter().map(|v| v[k]).collect::<Vec<_>>());
    let _ = write!(
        s,
        "accuracy {}  precision_macro {}  recall_macro {}  f1_macro {}",
        col(0),
        col(1),
        col(2),
        col(3)
    );
    say(out, &s)?;
    Ok(s)
}

pub fn cmd_eval(model: &Path, data: &Path, csv_out: Option<&Path>, out: &mut dyn Write) -> Result<Metrics> {
    let file = ModelFile::load(model)?;
    let net = file.build()?;
    let set = load_sample_set(data)?;
    let dims_model: Vec<usize> = net.extractors().iter().map(|e| e.input_dim()).collect();
    let dims_data: Vec<usize> = std::iter::once(set.d_top()).chain(set.d_bottom()).collect();
    if dims_model != dims_data {
        return Err(Error::validation(format!(
            "model {} expects input widths {dims_model:?}, data {} has {dims_data:?}",
            model.display(),
            data.display()
        )));
    }
    if net.n_classes() != set.n_classes() {
        return Err(Error::validation(format!(
            "model has {} classes, data has {}",
            net.n_classes(),
            set.n_classes()
        )));
    }
    let m = evaluate(&net, &set)?;
    say(
        out,
        format!(
            "accuracy {:.4}  precision_macro {:.4}  recall_macro {:.4}  f1_macro {:.4}\nconfusion {:?}",
            m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro, m.confusion
        ),
    )?;
    if let Some(p) = csv_out {
        write_metrics_csv(p, std::slice::from_ref(&m))?;
    }
    Ok(m)
}
