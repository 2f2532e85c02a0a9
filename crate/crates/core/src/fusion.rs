//! Feature-level fusion models: one or two dense extractors whose outputs
//! are concatenated and fed to a classifier head, trained jointly with
//! ADAM on softmax cross-entropy.
//!
//! Flat parameter order is extractor 0, extractor 1, then the head. A
//! `PqcLinear` head stores its circuit parameters before the linear layer.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, ClassMap, SampleSet};
use crate::error::{Error, Result};
use crate::neural::{softmax_cross_entropy_batch, AdamState, DenseNet, DenseNetRecord};
use crate::qnn::{bind, CircuitSpec, PqcBinding};
use crate::sim::State;

/// Rows evaluated per forward call in `evaluate`.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    PqcSolo,
    PqcLinear,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::PqcSolo => "pqc_solo",
            HeadKind::PqcLinear => "pqc_linear",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Mlp(DenseNet),
    /// The first `n_classes` qubit expectations are the logits.
    PqcSolo { binding: PqcBinding, params: Vec<f64> },
    /// All qubit expectations pass through a single linear layer.
    PqcLinear {
        binding: PqcBinding,
        params: Vec<f64>,
        linear: DenseNet,
    },
}

impl Classifier {
    pub fn kind(&self) -> HeadKind {
        match self {
            Classifier::Mlp(_) => HeadKind::Mlp,
            Classifier::PqcSolo { .. } => HeadKind::PqcSolo,
            Classifier::PqcLinear { .. } => HeadKind::PqcLinear,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Classifier::Mlp(net) => Some(net.input_dim()),
            _ => None,
        }
    }

    pub fn binding(&self) -> Option<&PqcBinding> {
        match self {
            Classifier::Mlp(_) => None,
            Classifier::PqcSolo { binding, .. } | Classifier::PqcLinear { binding, .. } => Some(binding),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Classifier::Mlp(net) => net.param_count(),
            Classifier::PqcSolo { params, .. } => params.len(),
            Classifier::PqcLinear { params, linear, .. } => params.len() + linear.param_count(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            Classifier::Mlp(net) => net.params(),
            Classifier::PqcSolo { params, .. } => params.clone(),
            Classifier::PqcLinear { params, linear, .. } => {
                let mut v = params.clone();
                v.extend(linear.params());
                v
            }
        }
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Classifier::Mlp(net) => net.set_params(flat),
            Classifier::PqcSolo { params, .. } => {
                params.copy_from_slice(flat);
                Ok(())
            }
            Classifier::PqcLinear { params, linear, .. } => {
                let p = params.len();
                params.copy_from_slice(&flat[..p]);
                linear.set_params(&flat[p..])
            }
        }
    }
}

/// How to build a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTopology {
    /// Layer sizes per extractor (one or two entries).
    pub extractors: Vec<Vec<usize>>,
    pub head: HeadTopology,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadTopology {
    /// Hidden layer sizes between the fused vector and the logits.
    Mlp { hidden: Vec<usize> },
    PqcSolo { circuit: CircuitSpec },
    PqcLinear { circuit: CircuitSpec },
}

impl HeadTopology {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadTopology::Mlp { .. } => HeadKind::Mlp,
            HeadTopology::PqcSolo { .. } => HeadKind::PqcSolo,
            HeadTopology::PqcLinear { .. } => HeadKind::PqcLinear,
        }
    }
}

impl ModelTopology {
    pub fn fused_dim(&self) -> usize {
        self.extractors.iter().filter_map(|s| s.last()).sum()
    }

    /// Parameter counts `(extractors, classifier)` without building the model.
    pub fn param_counts(&self, n_classes: usize) -> Result<(usize, usize)> {
        let ext = self.extractors.iter().map(|s| crate::neural::dense_param_count(s)).sum();
        let head = match &self.head {
            HeadTopology::Mlp { hidden } => {
                let mut sizes = vec![self.fused_dim()];
                sizes.extend(hidden);
                sizes.push(n_classes);
                crate::neural::dense_param_count(&sizes)
            }
            HeadTopology::PqcSolo { circuit } => circuit.param_count()?,
            HeadTopology::PqcLinear { circuit } => {
                circuit.param_count()? + crate::neural::dense_param_count(&[circuit.n_qubits, n_classes])
            }
        };
        Ok((ext, head))
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    extractors: Vec<DenseNet>,
    classifier: Classifier,
    n_classes: usize,
}

struct Forward {
    ext_caches: Vec<crate::neural::DenseCache>,
    fused: Array2<f64>,
    head: HeadForward,
    logits: Array2<f64>,
}

enum HeadForward {
    Mlp(crate::neural::DenseCache),
    Solo(Vec<State>),
    Linear(Vec<State>, crate::neural::DenseCache),
}

impl FusionModel {
    pub fn new(extractors: Vec<DenseNet>, classifier: Classifier, n_classes: usize) -> Result<Self> {
        if extractors.is_empty() || extractors.len() > 2 {
            return Err(Error::validation(format!(
                "a fusion model has one or two extractors, got {}",
                extractors.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::validation("a classifier needs at least two classes"));
        }
        let fused: usize = extractors.iter().map(|e| e.output_dim()).sum();
        match &classifier {
            Classifier::Mlp(net) => {
                if net.input_dim() != fused || net.output_dim() != n_classes {
                    return Err(Error::validation(format!(
                        "MLP head maps {} → {}, model needs {fused} → {n_classes}",
                        net.input_dim(),
                        net.output_dim()
                    )));
                }
            }
            Classifier::PqcSolo { binding, params } | Classifier::PqcLinear { binding, params, .. } => {
                binding.check_input_len(fused)?;
                if params.len() != binding.total_params() {
                    return Err(Error::validation(format!(
                        "circuit takes {} parameters, got {}",
                        binding.total_params(),
                        params.len()
                    )));
                }
                if let Classifier::PqcLinear { linear, .. } = &classifier {
                    if linear.sizes() != [binding.n_qubits(), n_classes] {
                        return Err(Error::validation(format!(
                            "linear readout has sizes {:?}, expected [{}, {n_classes}]",
                            linear.sizes(),
                            binding.n_qubits()
                        )));
                    }
                } else if binding.n_qubits() < n_classes {
                    return Err(Error::validation(format!(
                        "a bare PQC head reads one qubit per class: {} qubits < {n_classes} classes",
                        binding.n_qubits()
                    )));
                }
            }
        }
        Ok(FusionModel {
            extractors,
            classifier,
            n_classes,
        })
    }

    /// Random initialisation: dense layers uniform in ±1/√d_in, circuit
    /// angles uniform in [0, 2π).
    pub fn init<R: Rng + ?Sized>(topology: &ModelTopology, n_classes: usize, rng: &mut R) -> Result<Self> {
        let extractors = topology
            .extractors
            .iter()
            .map(|s| DenseNet::random(s, rng))
            .collect::<Result<Vec<_>>>()?;
        let fused = topology.fused_dim();
        fn angles<R: Rng + ?Sized>(binding: &PqcBinding, rng: &mut R) -> Vec<f64> {
            (0..binding.total_params()).map(|_| rng.gen_range(0.0..TAU)).collect()
        }
        let classifier = match &topology.head {
            HeadTopology::Mlp { hidden } => {
                let mut sizes = vec![fused];
                sizes.extend(hidden);
                sizes.push(n_classes);
                Classifier::Mlp(DenseNet::random(&sizes, rng)?)
            }
            HeadTopology::PqcSolo { circuit } => {
                let binding = bind(circuit)?;
                let params = angles(&binding, rng);
                Classifier::PqcSolo { binding, params }
            }
            HeadTopology::PqcLinear { circuit } => {
                let binding = bind(circuit)?;
                let params = angles(&binding, rng);
                let linear = DenseNet::random(&[circuit.n_qubits, n_classes], rng)?;
                Classifier::PqcLinear { binding, params, linear }
            }
        };
        FusionModel::new(extractors, classifier, n_classes)
    }

    pub fn extractors(&self) -> &[DenseNet] {
        &self.extractors
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_dual(&self) -> bool {
        self.extractors.len() == 2
    }

    pub fn head_kind(&self) -> HeadKind {
        self.classifier.kind()
    }

    pub fn extractor_param_count(&self) -> usize {
        self.extractors.iter().map(DenseNet::param_count).sum()
    }

    pub fn classifier_param_count(&self) -> usize {
        self.classifier.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.extractor_param_count() + self.classifier_param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.extractors.iter().flat_map(|e| e.params()).collect();
        v.extend(self.classifier.params());
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::validation(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for e in &mut self.extractors {
            let n = e.param_count();
            e.set_params(&flat[at..at + n])?;
            at += n;
        }
        self.classifier.set_params(&flat[at..])
    }

    /// Architecture notation of a PQC head.
    pub fn architecture(&self) -> Option<String> {
        self.classifier.binding().map(|b| b.spec().architecture.to_string())
    }

    fn check_inputs(&self, x_top: ArrayView2<f64>, x_bottom: Option<ArrayView2<f64>>) -> Result<()> {
        let inputs: Vec<ArrayView2<f64>> = match (self.is_dual(), x_bottom) {
            (true, Some(b)) => vec![x_top, b],
            (false, None) => vec![x_top],
            (true, None) => return Err(Error::validation("dual-extractor model needs a bottom input")),
            (false, Some(_)) => return Err(Error::validation("single-extractor model got a bottom input")),
        };
        for (i, (x, e)) in inputs.iter().zip(&self.extractors).enumerate() {
            if x.ncols() != e.input_dim() {
                return Err(Error::validation(format!(
                    "extractor {i} expects {} features, got {}",
                    e.input_dim(),
                    x.ncols()
                )));
            }
        }
        if x_bottom.is_some_and(|b| b.nrows() != x_top.nrows()) {
            return Err(Error::validation("top and bottom inputs differ in row count"));
        }
        Ok(())
    }

    fn forward_full(&self, x_top: ArrayView2<f64>, x_bottom: Option<ArrayView2<f64>>) -> Result<Forward> {
        self.check_inputs(x_top, x_bottom)?;
        let mut outs = Vec::with_capacity(2);
        let mut ext_caches = Vec::with_capacity(2);
        for (e, x) in self.extractors.iter().zip(std::iter::once(x_top).chain(x_bottom)) {
            let (o, c) = e.forward_batch(x)?;
            outs.push(o);
            ext_caches.push(c);
        }
        let views: Vec<ArrayView2<f64>> = outs.iter().map(|o| o.view()).collect();
        let fused = concatenate(Axis(1), &views).expect("equal row counts");
        let circuit_states = |binding: &PqcBinding, params: &[f64]| -> Result<Vec<State>> {
            (0..fused.nrows())
                .into_par_iter()
                .map(|i| binding.final_state(params, &fused.row(i).to_vec()))
                .collect()
        };
        let expvals = |states: &[State], width: usize| -> Array2<f64> {
            let mut z = Array2::zeros((states.len(), width));
            for (mut row, st) in z.outer_iter_mut().zip(states) {
                row.assign(&ArrayView1::from(&st.expval_z_all()[..width]));
            }
            z
        };
        let (head, logits) = match &self.classifier {
            Classifier::Mlp(net) => {
                let (logits, cache) = net.forward_batch(fused.view())?;
                (HeadForward::Mlp(cache), logits)
            }
            Classifier::PqcSolo { binding, params } => {
                let states = circuit_states(binding, params)?;
                let logits = expvals(&states, self.n_classes);
                (HeadForward::Solo(states), logits)
            }
            Classifier::PqcLinear { binding, params, linear } => {
                let states = circuit_states(binding, params)?;
                let z = expvals(&states, binding.n_qubits());
                let (logits, cache) = linear.forward_batch(z.view())?;
                (HeadForward::Linear(states, cache), logits)
            }
        };
        Ok(Forward {
            ext_caches,
            fused,
            head,
            logits,
        })
    }

    /// Logits for a batch of rows.
    pub fn forward_batch(&self, x_top: ArrayView2<f64>, x_bottom: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        Ok(self.forward_full(x_top, x_bottom)?.logits)
    }

    /// Mean cross-entropy over the batch and its gradient in flat order.
    pub fn loss_and_grad(&self, x_top: ArrayView2<f64>, x_bottom: Option<ArrayView2<f64>>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_full(x_top, x_bottom)?;
        let (loss, d_logits) = softmax_cross_entropy_batch(fwd.logits.view(), labels)?;

        let circuit_backprop = |binding: &PqcBinding, params: &[f64], states: Vec<State>, upstream: ArrayView2<f64>| {
            let n = binding.n_qubits();
            let per_row: Vec<_> = states
                .into_par_iter()
                .enumerate()
                .map(|(i, st)| {
                    let up = upstream.row(i);
                    let mut u = vec![0.0; n];
                    u[..up.len()].iter_mut().zip(up).for_each(|(a, b)| *a = *b);
                    binding.backprop(st, params, &fwd.fused.row(i).to_vec(), &u)
                })
                .collect();
            let mut d_params = vec![0.0; params.len()];
            let mut d_fused = Array2::zeros(fwd.fused.dim());
            for (i, v) in per_row.into_iter().enumerate() {
                d_params.iter_mut().zip(&v.d_params).for_each(|(a, b)| *a += b);
                d_fused.row_mut(i).assign(&ArrayView1::from(&v.d_input));
            }
            (d_params, d_fused)
        };

        let (head_grad, d_fused) = match (&self.classifier, fwd.head) {
            (Classifier::Mlp(net), HeadForward::Mlp(cache)) => net.backward_batch(&cache, d_logits.view())?,
            (Classifier::PqcSolo { binding, params }, HeadForward::Solo(states)) => {
                circuit_backprop(binding, params, states, d_logits.view())
            }
            (Classifier::PqcLinear { binding, params, linear }, HeadForward::Linear(states, cache)) => {
                let (g_lin, d_z) = linear.backward_batch(&cache, d_logits.view())?;
                let (mut g, d_fused) = circuit_backprop(binding, params, states, d_z.view());
                g.extend(g_lin);
                (g, d_fused)
            }
            _ => unreachable!("forward cache matches the classifier"),
        };

        let mut grad = Vec::with_capacity(self.param_count());
        let mut col = 0;
        for (e, cache) in self.extractors.iter().zip(&fwd.ext_caches) {
            let w = e.output_dim();
            let (g, _) = e.backward_batch(cache, d_fused.slice(s![.., col..col + w]))?;
            grad.extend(g);
            col += w;
        }
        grad.extend(head_grad);
        Ok((loss, grad))
    }

    pub fn to_record(&self) -> ModelRecord {
        let head = match &self.classifier {
            Classifier::Mlp(net) => HeadRecord::Mlp { net: net.to_record() },
            Classifier::PqcSolo { binding, params } => HeadRecord::PqcSolo {
                n_qubits: binding.n_qubits(),
                architecture: binding.spec().architecture.to_string(),
                params: params.clone(),
            },
            Classifier::PqcLinear { binding, params, linear } => HeadRecord::PqcLinear {
                n_qubits: binding.n_qubits(),
                architecture: binding.spec().architecture.to_string(),
                params: params.clone(),
                linear: linear.to_record(),
            },
        };
        ModelRecord {
            n_classes: self.n_classes,
            extractors: self.extractors.iter().map(DenseNet::to_record).collect(),
            head,
        }
    }

    pub fn from_record(record: &ModelRecord) -> Result<Self> {
        let extractors = record
            .extractors
            .iter()
            .map(DenseNet::from_record)
            .collect::<Result<Vec<_>>>()?;
        let classifier = match &record.head {
            HeadRecord::Mlp { net } => Classifier::Mlp(DenseNet::from_record(net)?),
            HeadRecord::PqcSolo {
                n_qubits,
                architecture,
                params,
            } => Classifier::PqcSolo {
                binding: bind(&CircuitSpec::parse(*n_qubits, architecture)?)?,
                params: params.clone(),
            },
            HeadRecord::PqcLinear {
                n_qubits,
                architecture,
                params,
                linear,
            } => Classifier::PqcLinear {
                binding: bind(&CircuitSpec::parse(*n_qubits, architecture)?)?,
                params: params.clone(),
                linear: DenseNet::from_record(linear)?,
            },
        };
        FusionModel::new(extractors, classifier, record.n_classes)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row view")
}

pub fn model_forward(model: &FusionModel, x_top: &[f64], x_bottom: Option<&[f64]>) -> Result<Vec<f64>> {
    Ok(model.forward_batch(row(x_top), x_bottom.map(row))?.row(0).to_vec())
}

pub fn predict(model: &FusionModel, x_top: &[f64], x_bottom: Option<&[f64]>) -> Result<usize> {
    Ok(argmax(&model_forward(model, x_top, x_bottom)?))
}

pub fn predict_batch(model: &FusionModel, x_top: ArrayView2<f64>, x_bottom: Option<ArrayView2<f64>>) -> Result<Vec<usize>> {
    let logits = model.forward_batch(x_top, x_bottom)?;
    Ok(logits.outer_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    /// Macro averages over every class; an undefined precision, recall or
    /// F1 counts as 0.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::validation("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::validation("confusion matrix is empty"));
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for c in 0..k {
            let tp = confusion[c][c];
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            p_sum += p;
            r_sum += r;
            f_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Metrics {
            accuracy: trace as f64 / total as f64,
            precision_macro: p_sum / k as f64,
            recall_macro: r_sum / k as f64,
            f1_macro: f_sum / k as f64,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::validation("truth and prediction lengths differ"));
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::validation(format!("class index out of range for {n_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

pub fn evaluate(model: &FusionModel, set: &SampleSet) -> Result<Metrics> {
    evaluate_indices(model, set, &(0..set.len()).collect::<Vec<_>>())
}

pub fn evaluate_indices(model: &FusionModel, set: &SampleSet, indices: &[usize]) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty set"));
    }
    let mut predicted = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let top = set.x_top.select(Axis(0), chunk);
        let bottom = set.x_bottom.as_ref().map(|b| b.select(Axis(0), chunk));
        predicted.extend(predict_batch(model, top.view(), bottom.as_ref().map(|b| b.view()))?);
    }
    let truth: Vec<usize> = indices.iter().map(|&i| set.labels[i]).collect();
    Metrics::from_predictions(&truth, &predicted, model.n_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 83,
            epochs: 30,
            seed: 42,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        Ok(())
    }
}

/// Generator for a given fold; stream 0 is reserved for fold assignment.
pub fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// Trains in place on `indices`; returns the per-epoch mean loss.
pub fn train_indices<R: Rng + ?Sized>(
    model: &mut FusionModel,
    set: &SampleSet,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::validation("cannot train on an empty set"));
    }
    if set.n_classes() != model.n_classes() {
        return Err(Error::validation(format!(
            "data has {} classes, model has {}",
            set.n_classes(),
            model.n_classes()
        )));
    }
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), config.lr);
    let mut order = indices.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let top = set.x_top.select(Axis(0), batch);
            let bottom = set.x_bottom.as_ref().map(|b| b.select(Axis(0), batch));
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let (loss, grad) = model.loss_and_grad(top.view(), bottom.as_ref().map(|b| b.view()), &labels)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss or gradient in epoch {}", epoch + 1)));
            }
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grad)?;
            model.set_params(&params)?;
        }
        history.push(total / order.len() as f64);
    }
    Ok(history)
}

/// Trains on the whole set, shuffling with a generator seeded from `config.seed`.
pub fn train(mut model: FusionModel, set: &SampleSet, config: &TrainConfig) -> Result<(FusionModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<usize> = (0..set.len()).collect();
    let history = train_indices(&mut model, set, &all, config, &mut rng)?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle, then `k` contiguous folds whose sizes differ by at most
/// one (the first `n mod k` folds are larger). Indices within each part are
/// sorted.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::validation(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if n < k {
        return Err(Error::validation(format!("{n} samples cannot fill {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut val = perm[start..start + size].to_vec();
        let mut train: Vec<usize> = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        val.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, val });
        start += size;
    }
    Ok(folds)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub metrics: Metrics,
    pub loss_history: Vec<f64>,
    pub model: FusionModel,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
}

impl CvReport {
    pub fn accuracy(&self) -> MeanStd {
        MeanStd::of(&self.folds.iter().map(|f| f.metrics.accuracy).collect::<Vec<_>>())
    }

    pub fn f1_macro(&self) -> MeanStd {
        MeanStd::of(&self.folds.iter().map(|f| f.metrics.f1_macro).collect::<Vec<_>>())
    }

    pub fn per_fold(&self) -> Vec<Metrics> {
        self.folds.iter().map(|f| f.metrics.clone()).collect()
    }

    /// Fold with the highest validation accuracy (lowest index on ties).
    pub fn best_fold(&self) -> usize {
        argmax(&self.folds.iter().map(|f| f.metrics.accuracy).collect::<Vec<_>>())
    }
}

fn run_fold(topology: &ModelTopology, set: &SampleSet, config: &TrainConfig, fold_index: usize, fold: &Fold) -> Result<FoldResult> {
    let mut rng = fold_rng(config.seed, fold_index);
    let mut model = FusionModel::init(topology, set.n_classes(), &mut rng)?;
    let loss_history = train_indices(&mut model, set, &fold.train, config, &mut rng)?;
    let metrics = evaluate_indices(&model, set, &fold.val)?;
    Ok(FoldResult {
        metrics,
        loss_history,
        model,
    })
}

/// k-fold cross-validation of freshly initialised models. Fold `f` draws
/// its initial weights and batch order from `fold_rng(seed, f)`, so the
/// result does not depend on `parallel`.
pub fn cross_validate(topology: &ModelTopology, set: &SampleSet, config: &TrainConfig, parallel: bool) -> Result<CvReport> {
    config.validate()?;
    let folds = kfold(set.len(), config.folds, config.seed)?;
    let results: Result<Vec<FoldResult>> = if parallel {
        folds
            .par_iter()
            .enumerate()
            .map(|(i, f)| run_fold(topology, set, config, i, f))
            .collect()
    } else {
        folds
            .iter()
            .enumerate()
            .map(|(i, f)| run_fold(topology, set, config, i, f))
            .collect()
    };
    Ok(CvReport { folds: results? })
}

/// Serializable model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub n_classes: usize,
    pub extractors: Vec<DenseNetRecord>,
    pub head: HeadRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadRecord {
    Mlp {
        net: DenseNetRecord,
    },
    PqcSolo {
        n_qubits: usize,
        architecture: String,
        params: Vec<f64>,
    },
    PqcLinear {
        n_qubits: usize,
        architecture: String,
        params: Vec<f64>,
        linear: DenseNetRecord,
    },
}

pub const MODEL_FORMAT: &str = "qfuse-model";
pub const MODEL_VERSION: u32 = 1;

/// Versioned model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub model: ModelRecord,
    pub class_map: ClassMap,
    pub seed: u64,
    pub config: TrainConfig,
}

impl ModelFile {
    pub fn new(model: &FusionModel, class_map: ClassMap, config: &TrainConfig) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: model.to_record(),
            class_map,
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::ingestion(path, Some(e.line()), e.to_string()))?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(MODEL_FORMAT) || version != Some(MODEL_VERSION as u64) {
            return Err(Error::ingestion(
                path,
                None,
                format!(
                    "unsupported model file (format {format:?}, version {version:?}); this build reads {MODEL_FORMAT} v{MODEL_VERSION}"
                ),
            ));
        }
        serde_json::from_value(value).map_err(|e| Error::ingestion(path, None, e.to_string()))
    }

    pub fn build(&self) -> Result<FusionModel> {
        FusionModel::from_record(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::neural::dense_param_count;

    fn toy_set(n: usize, seed: u64) -> SampleSet {
        // two well separated clusters per source
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut top = Array2::zeros((n, 3));
        let mut bottom = Array2::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.0 } else { 1.0 };
            top.row_mut(i).iter_mut().for_each(|v| *v = c + rng.gen_range(-0.3..0.3));
            bottom.row_mut(i).iter_mut().for_each(|v| *v = -c + rng.gen_range(-0.3..0.3));
            labels.push(y);
        }
        SampleSet::new(top, Some(bottom), labels, [(0, 0), (1, 1)].into_iter().collect()).unwrap()
    }

    fn mlp_topology() -> ModelTopology {
        ModelTopology {
            extractors: vec![vec![3, 6, 2], vec![2, 4, 2]],
            head: HeadTopology::Mlp { hidden: vec![5] },
        }
    }

    #[test]
    fn mlp_reference_counts() {
        let topo = ModelTopology {
            extractors: vec![vec![14, 90, 196], vec![14, 90, 196]],
            head: HeadTopology::Mlp { hidden: vec![95] },
        };
        assert_eq!(topo.param_counts(3).unwrap(), (38372, 37623));
        let model = FusionModel::init(&topo, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.param_count(), 75995);
        assert_eq!(dense_param_count(&[392, 95, 3]), 37623);
    }

    #[test]
    fn manual_pqc_counts() {
        let topo = ModelTopology {
            extractors: vec![vec![14, 16, 3], vec![14, 16, 3]],
            head: HeadTopology::PqcSolo {
                circuit: CircuitSpec::parse(6, "AngleX > BEL(3)").unwrap(),
            },
        };
        let model = FusionModel::init(&topo, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.classifier_param_count(), 18);
        assert_eq!(topo.param_counts(3).unwrap().1, 18);
    }

    #[test]
    fn zero_mlp_gives_zero_logits() {
        let topo = mlp_topology();
        let mut model = FusionModel::init(&topo, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        model.set_params(&vec![0.0; model.param_count()]).unwrap();
        assert_eq!(model_forward(&model, &[1.0, 2.0, 3.0], Some(&[4.0, 5.0])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn invariants_are_enforced() {
        let ext = vec![DenseNet::zeros(&[3, 2]).unwrap()];
        assert!(FusionModel::new(ext.clone(), Classifier::Mlp(DenseNet::zeros(&[3, 2]).unwrap()), 2).is_err());
        let binding = bind(&CircuitSpec::parse(2, "AngleX > BEL(1)").unwrap()).unwrap();
        let solo = Classifier::PqcSolo {
            binding,
            params: vec![0.0; 2],
        };
        assert!(FusionModel::new(ext.clone(), solo.clone(), 3).is_err());
        assert!(FusionModel::new(ext, solo, 2).is_ok());
    }

    #[test]
    fn input_mode_mismatch() {
        let model = FusionModel::init(&mlp_topology(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(model_forward(&model, &[1.0, 2.0, 3.0], None).is_err());
        assert!(model_forward(&model, &[1.0, 2.0], Some(&[4.0, 5.0])).is_err());
    }

    #[test]
    fn concatenation_order() {
        // identity extractors into an identity-like MLP head expose the order
        let mut e0 = DenseNet::zeros(&[2, 2]).unwrap();
        e0.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut e1 = DenseNet::zeros(&[1, 1]).unwrap();
        e1.set_params(&[1.0, 0.0]).unwrap();
        let mut head = DenseNet::zeros(&[3, 3]).unwrap();
        head.set_params(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let model = FusionModel::new(vec![e0, e1], Classifier::Mlp(head), 3).unwrap();
        assert_eq!(model_forward(&model, &[7.0, 8.0], Some(&[9.0])).unwrap(), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    }

    #[test]
    fn solo_reads_first_qubits_only() {
        // qubit 3 would win if it were read; classes are the first 2 qubits
        let binding = bind(&CircuitSpec::parse(4, "AngleX > IdentityVar").unwrap()).unwrap();
        let mut ext = DenseNet::zeros(&[4, 4]).unwrap();
        let mut p = vec![0.0; 20];
        for i in 0..4 {
            p[i * 4 + i] = 1.0;
        }
        ext.set_params(&p).unwrap();
        let model = FusionModel::new(vec![ext], Classifier::PqcSolo { binding, params: vec![] }, 2).unwrap();
        let logits = model_forward(&model, &[3.0, 2.0, 1.5, 0.0], None).unwrap();
        assert_eq!(logits.len(), 2);
        assert_abs_diff_eq!(logits[0], 3.0f64.cos(), epsilon = 1e-12);
        assert_eq!(predict(&model, &[3.0, 2.0, 1.5, 0.0], None).unwrap(), 1);
    }

    #[test]
    fn confusion_fixture() {
        let m = Metrics::from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap();
        assert_abs_diff_eq!(m.accuracy, 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.precision_macro, (1.0 + 0.75) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.recall_macro, (2.0 / 3.0 + 1.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1_macro, (0.8 + 6.0 / 7.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 2, 0, 1, 2];
        let m = Metrics::from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!((m.accuracy, m.f1_macro), (1.0, 1.0));
        let m = Metrics::from_predictions(&truth, &[0; 6], 3).unwrap();
        assert_abs_diff_eq!(m.accuracy, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.accuracy, m.recall_macro, epsilon = 1e-15);
    }

    #[test]
    fn kfold_sizes() {
        let folds = kfold(10, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.val.len() == 2 && f.train.len() == 8));
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.val.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let sizes: Vec<usize> = kfold(12, 5, 0).unwrap().iter().map(|f| f.val.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
        assert!(kfold(4, 5, 0).is_err());
        assert!(kfold(10, 1, 0).is_err());
    }

    #[test]
    fn mean_std_format() {
        let ms = MeanStd::of(&[0.959, 0.960, 0.961]);
        assert_eq!(ms.to_string(), "0.960 ± 0.001");
        assert_eq!(MeanStd::of(&[0.5]).std, 0.0);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let set = toy_set(20, 0);
        let model = FusionModel::init(&mlp_topology(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = model.params();
        let config = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(model, &set, &config).unwrap();
        assert_eq!(trained.params(), before);
        assert_eq!(hist.len(), 1);
    }

    #[test]
    fn toy_loss_decreases_and_is_deterministic() {
        let set = toy_set(50, 4);
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let init = FusionModel::init(&mlp_topology(), 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (a, hist_a) = train(init.clone(), &set, &config).unwrap();
        let (b, hist_b) = train(init, &set, &config).unwrap();
        assert!(hist_a[19] < hist_a[0]);
        assert_eq!(hist_a, hist_b);
        assert_eq!(a.params(), b.params());
        assert_eq!(evaluate(&a, &set).unwrap().accuracy, 1.0);
    }

    #[test]
    fn nan_input_diverges() {
        let mut set = toy_set(10, 0);
        set.x_top[[3, 1]] = f64::NAN;
        let model = FusionModel::init(&mlp_topology(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = train(model, &set, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
    }

    fn finite_difference_check(topo: &ModelTopology, n_classes: usize, set: &SampleSet, seed: u64) {
        let mut model = FusionModel::init(topo, n_classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bottom = set.x_bottom.as_ref().map(|b| b.view());
        let (_, grad) = model.loss_and_grad(set.x_top.view(), bottom, &set.labels).unwrap();
        let params = model.params();
        let h = 1e-6;
        let mut fd = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            model.set_params(&p).unwrap();
            let up = model.loss_and_grad(set.x_top.view(), bottom, &set.labels).unwrap().0;
            p[i] -= 2.0 * h;
            model.set_params(&p).unwrap();
            let down = model.loss_and_grad(set.x_top.view(), bottom, &set.labels).unwrap().0;
            fd[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }

    fn three_class_set() -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let top = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let bottom = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        SampleSet::new(top, Some(bottom), vec![0, 1, 2, 0, 1, 2], [(0, 0), (1, 1), (2, 2)].into_iter().collect()).unwrap()
    }

    #[test]
    fn end_to_end_gradient_solo() {
        let topo = ModelTopology {
            extractors: vec![vec![3, 4, 2], vec![3, 4, 2]],
            head: HeadTopology::PqcSolo {
                circuit: CircuitSpec::parse(4, "AngleX > BEL(1)").unwrap(),
            },
        };
        finite_difference_check(&topo, 3, &three_class_set(), 5);
    }

    #[test]
    fn end_to_end_gradient_linear_and_mlp() {
        let topo = ModelTopology {
            extractors: vec![vec![3, 4, 2], vec![3, 4, 2]],
            head: HeadTopology::PqcLinear {
                circuit: CircuitSpec::parse(4, "Amplitude > SEL(1) > AngleY > BEL(1)").unwrap(),
            },
        };
        finite_difference_check(&topo, 3, &three_class_set(), 6);
        let topo = ModelTopology {
            extractors: vec![vec![3, 4, 2], vec![3, 4, 2]],
            head: HeadTopology::Mlp { hidden: vec![5] },
        };
        finite_difference_check(&topo, 3, &three_class_set(), 7);
    }

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let topo = ModelTopology {
            extractors: vec![vec![3, 4, 2], vec![3, 4, 2]],
            head: HeadTopology::PqcLinear {
                circuit: CircuitSpec::parse(4, "AngleX > BEL(2)").unwrap(),
            },
        };
        let model = FusionModel::init(&topo, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let class_map: ClassMap = [(5, 0), (6, 1), (7, 2)].into_iter().collect();
        let file = ModelFile::new(&model, class_map, &TrainConfig::default());
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path).unwrap();
        assert_eq!(loaded, file);
        assert_eq!(loaded.build().unwrap().params(), model.params());

        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(ModelFile::load(&path).is_err());
    }

    #[test]
    fn cross_validation_parallel_matches_serial() {
        let set = toy_set(30, 1);
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 3,
            batch_size: 5,
            folds: 3,
            seed: 9,
        };
        let a = cross_validate(&mlp_topology(), &set, &config, false).unwrap();
        let b = cross_validate(&mlp_topology(), &set, &config, true).unwrap();
        assert_eq!(a.per_fold(), b.per_fold());
        assert_eq!(a.folds.len(), 3);
    }
}
