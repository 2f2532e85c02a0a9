//! Dataset ingestion and preprocessing.
//!
//! * IDX (MNIST) parsing and byte-exact re-serialisation.
//! * The synthetic two-source construction from a digit image: split into
//!   top and bottom halves, binarise, 2×2 average-pool, then take the mean
//!   of every column, giving 14 features per half for a 28×28 image.
//! * Class filtering, one-hot encoding and PCA.
//! * Paired-source CSV ingestion for change-detection style tasks, and a
//!   CSV + JSON sidecar cache for prepared sample sets.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::ingestion(path, None, "file shorter than the IDX magic number"));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(Error::ingestion(path, None, "bad IDX magic: leading bytes must be zero"));
        }
        if bytes[2] != 0x08 {
            return Err(Error::ingestion(
                path,
                None,
                format!("unsupported IDX element type 0x{:02x} (only unsigned bytes)", bytes[2]),
            ));
        }
        let ndims = bytes[3] as usize;
        let header = 4 + 4 * ndims;
        if bytes.len() < header {
            return Err(Error::ingestion(path, None, "truncated IDX header"));
        }
        let dims: Vec<u32> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let expected = dims.iter().map(|&d| d as usize).product::<usize>();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(Error::ingestion(
                path,
                None,
                format!("IDX payload has {} bytes, dimensions {dims:?} require {expected}", payload.len()),
            ));
        }
        Ok(IdxArray {
            dims,
            data: payload.to_vec(),
        })
    }

    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Raw greyscale images with their digit labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistRaw {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistRaw {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistRaw> {
    let images = IdxArray::parse(&read_file(images_path)?, images_path)?;
    if images.magic() != IDX_IMAGES_MAGIC {
        return Err(Error::ingestion(
            images_path,
            None,
            format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{:08x}", images.magic()),
        ));
    }
    let labels = IdxArray::parse(&read_file(labels_path)?, labels_path)?;
    if labels.magic() != IDX_LABELS_MAGIC {
        return Err(Error::ingestion(
            labels_path,
            None,
            format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{:08x}", labels.magic()),
        ));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::ingestion(
            labels_path,
            None,
            format!("{} labels for {} images", labels.dims[0], images.dims[0]),
        ));
    }
    Ok(MnistRaw {
        rows: images.dims[1] as usize,
        cols: images.dims[2] as usize,
        pixels: images.data,
        labels: labels.data,
    })
}

/// Environment variable naming the data root.
pub const DATA_DIR_ENV: &str = "QFUSE_DATA_DIR";

/// `$QFUSE_DATA_DIR`, or `data` relative to the working directory.
pub fn data_root() -> std::path::PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(Into::into)
        .unwrap_or_else(|| "data".into())
}

/// Standard MNIST file names inside a data directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

pub fn load_mnist_split(dir: &Path, split: MnistSplit) -> Result<MnistRaw> {
    let (images, labels) = split.file_names();
    load_mnist_idx(&dir.join(images), &dir.join(labels))
}

/// Loads a split, keeps `classes` and builds the two-source features.
pub fn mnist_multisource(dir: &Path, split: MnistSplit, classes: &[u8], opts: &MultisourceOptions) -> Result<SampleSet> {
    let raw = load_mnist_split(dir, split)?;
    let (filtered, class_map) = filter_classes(&raw, classes)?;
    multisource_set(&filtered, class_map, opts)
}

/// Original label → contiguous class index.
pub type ClassMap = BTreeMap<i64, usize>;

/// Keeps the listed digits (in original order) and relabels them by
/// ascending digit value.
pub fn filter_classes(raw: &MnistRaw, keep: &[u8]) -> Result<(MnistRaw, ClassMap)> {
    if keep.is_empty() {
        return Err(Error::validation("class filter needs at least one class"));
    }
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let class_map: ClassMap = sorted.iter().enumerate().map(|(i, &d)| (d as i64, i)).collect();
    let mut out = MnistRaw {
        rows: raw.rows,
        cols: raw.cols,
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..raw.len() {
        if let Some(&idx) = class_map.get(&(raw.labels[i] as i64)) {
            out.pixels.extend_from_slice(raw.image(i));
            out.labels.push(idx as u8);
        }
    }
    Ok((out, class_map))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultisourceOptions {
    /// Unit-scaled intensity above which a pixel becomes 1.
    pub threshold: f64,
    pub pooling: Pooling,
}

impl Default for MultisourceOptions {
    fn default() -> Self {
        MultisourceOptions {
            threshold: 0.5,
            pooling: Pooling::default(),
        }
    }
}

/// Builds the (top, bottom) feature pair for one image.
pub fn make_multisource(image: &[u8], rows: usize, cols: usize, opts: &MultisourceOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    if image.len() != rows * cols || !rows.is_multiple_of(4) || !cols.is_multiple_of(2) || rows == 0 || cols == 0 {
        return Err(Error::validation(format!(
            "image of {} pixels with shape {rows}×{cols} cannot be split and pooled \
             (rows must be a multiple of 4, columns even)",
            image.len()
        )));
    }
    let half = rows / 2;
    let pooled_rows = half / 2;
    let pooled_cols = cols / 2;
    let bin = |r: usize, c: usize| -> f64 {
        if image[r * cols + c] as f64 / 255.0 > opts.threshold {
            1.0
        } else {
            0.0
        }
    };
    let view = |row0: usize| -> Vec<f64> {
        (0..pooled_cols)
            .map(|pc| {
                let total: f64 = (0..pooled_rows)
                    .map(|pr| {
                        let (r, c) = (row0 + 2 * pr, 2 * pc);
                        let cell = [bin(r, c), bin(r, c + 1), bin(r + 1, c), bin(r + 1, c + 1)];
                        match opts.pooling {
                            Pooling::Average => cell.iter().sum::<f64>() / 4.0,
                            Pooling::Max => cell.iter().copied().fold(0.0, f64::max),
                        }
                    })
                    .sum();
                total / pooled_rows as f64
            })
            .collect()
    };
    Ok((view(0), view(half)))
}

pub fn one_hot(label: usize, n_classes: usize) -> Result<Vec<f64>> {
    if label >= n_classes {
        return Err(Error::validation(format!("label {label} out of range for {n_classes} classes")));
    }
    let mut v = vec![0.0; n_classes];
    v[label] = 1.0;
    Ok(v)
}

/// Paired multisource features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub x_top: Array2<f64>,
    /// Absent in single-extractor mode.
    pub x_bottom: Option<Array2<f64>>,
    pub labels: Vec<usize>,
    pub class_map: ClassMap,
}

impl SampleSet {
    pub fn new(x_top: Array2<f64>, x_bottom: Option<Array2<f64>>, labels: Vec<usize>, class_map: ClassMap) -> Result<Self> {
        let set = SampleSet {
            x_top,
            x_bottom,
            labels,
            class_map,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.x_top.nrows() != n || self.x_bottom.as_ref().is_some_and(|b| b.nrows() != n) {
            return Err(Error::validation("sample set fields disagree on the number of rows"));
        }
        let k = self.n_classes();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn is_dual(&self) -> bool {
        self.x_bottom.is_some()
    }

    pub fn d_top(&self) -> usize {
        self.x_top.ncols()
    }

    pub fn d_bottom(&self) -> Option<usize> {
        self.x_bottom.as_ref().map(|b| b.ncols())
    }

    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            x_top: self.x_top.select(Axis(0), indices),
            x_bottom: self.x_bottom.as_ref().map(|b| b.select(Axis(0), indices)),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_map: self.class_map.clone(),
        }
    }

    /// Seeded random subset of `round(fraction·len)` rows, kept in original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<SampleSet> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::validation(format!("subsample fraction {fraction} outside (0, 1]")));
        }
        let take = ((self.len() as f64) * fraction).round().max(1.0) as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(take);
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Runs the two-source pipeline over every image.
pub fn multisource_set(raw: &MnistRaw, class_map: ClassMap, opts: &MultisourceOptions) -> Result<SampleSet> {
    let width = raw.cols / 2;
    let mut top = Array2::zeros((raw.len(), width));
    let mut bottom = Array2::zeros((raw.len(), width));
    for i in 0..raw.len() {
        let (t, b) = make_multisource(raw.image(i), raw.rows, raw.cols, opts)?;
        top.row_mut(i).assign(&ArrayView1::from(&t));
        bottom.row_mut(i).assign(&ArrayView1::from(&b));
    }
    SampleSet::new(top, Some(bottom), raw.labels.iter().map(|&l| l as usize).collect(), class_map)
}

/// Principal components of mean-centred data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Rows are principal directions in descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

pub fn pca_fit(data: ArrayView2<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = data.dim();
    if k == 0 || k > d {
        return Err(Error::validation(format!("cannot keep {k} components of {d}-dimensional data")));
    }
    if n < 2 || d > n {
        return Err(Error::validation(format!("PCA needs more samples than dimensions (got {n} × {d})")));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centred = &data - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaModel {
        mean: mean.to_vec(),
        components,
        explained_variance: order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect(),
        total_variance: eig.eigenvalues.iter().map(|v| v.max(0.0)).sum(),
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::validation(format!("PCA fitted on {} dims, got {}", self.dim(), x.len())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn transform_batch(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((data.nrows(), self.n_components()));
        for (i, row) in data.outer_iter().enumerate() {
            let z = self.transform(row.as_slice().unwrap_or(&row.to_vec()))?;
            out.row_mut(i).assign(&Array1::from(z));
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += w * ci;
            }
        }
        x
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }
}

/// Separate PCA per source on a pre-concatenated paired set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedPca {
    pub source0: PcaModel,
    pub source1: PcaModel,
}

impl PairedPca {
    /// Fits on a single-extractor set whose first half of columns is source 0.
    pub fn fit(set: &SampleSet, k: usize) -> Result<Self> {
        let d = paired_width(set)?;
        Ok(PairedPca {
            source0: pca_fit(set.x_top.slice(s![.., ..d]), k)?,
            source1: pca_fit(set.x_top.slice(s![.., d..]), k)?,
        })
    }

    /// Replaces each source by its `k` principal scores, concatenated.
    pub fn transform(&self, set: &SampleSet) -> Result<SampleSet> {
        let d = paired_width(set)?;
        let a = self.source0.transform_batch(set.x_top.slice(s![.., ..d]))?;
        let b = self.source1.transform_batch(set.x_top.slice(s![.., d..]))?;
        let x = concatenate(Axis(1), &[a.view(), b.view()]).expect("same row count");
        SampleSet::new(x, None, set.labels.clone(), set.class_map.clone())
    }
}

fn paired_width(set: &SampleSet) -> Result<usize> {
    if set.is_dual() || !set.d_top().is_multiple_of(2) {
        return Err(Error::validation(
            "paired PCA expects a single-extractor set with two equally wide sources",
        ));
    }
    Ok(set.d_top() / 2)
}

/// Reads `src0_0..src0_{d−1}, src1_0..src1_{d−1}, label` with binary labels.
pub fn load_paired_csv(path: &Path) -> Result<SampleSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::ingestion(path, None, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::ingestion(path, Some(1), e.to_string()))?
        .clone();
    let cols = header.len();
    if cols < 3 || cols % 2 == 0 {
        return Err(Error::ingestion(path, Some(1), format!("expected 2·d + 1 columns, found {cols}")));
    }
    let d = (cols - 1) / 2;
    for (i, name) in header.iter().enumerate() {
        let want = if i < d {
            format!("src0_{i}")
        } else if i < 2 * d {
            format!("src1_{}", i - d)
        } else {
            "label".to_string()
        };
        if name.trim() != want {
            return Err(Error::ingestion(path, Some(1), format!("column {} is `{name}`, expected `{want}`", i + 1)));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::ingestion(path, Some(line), e.to_string()))?;
        if rec.len() != cols {
            return Err(Error::ingestion(path, Some(line), format!("{} fields, expected {cols}", rec.len())));
        }
        for (j, cell) in rec.iter().take(2 * d).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::ingestion(path, Some(line), format!("non-numeric value `{cell}` in column {}", j + 1)))?;
            values.push(v);
        }
        let label = match rec[2 * d].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::ingestion(path, Some(line), format!("label `{other}` is not 0 or 1")));
            }
        };
        labels.push(label);
    }
    let x = Array2::from_shape_vec((labels.len(), 2 * d), values).expect("row-major fill");
    SampleSet::new(x, None, labels, [(0, 0), (1, 1)].into_iter().collect())
}

/// Writes a single-extractor paired set in the `load_paired_csv` layout.
pub fn write_paired_csv(set: &SampleSet, path: &Path) -> Result<()> {
    let d = paired_width(set)?;
    let mut header: Vec<String> = (0..d).map(|i| format!("src0_{i}")).collect();
    header.extend((0..d).map(|i| format!("src1_{i}")));
    header.push("label".into());
    let mut rows = Vec::with_capacity(set.len());
    for (row, &y) in set.x_top.outer_iter().zip(&set.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(y.to_string());
        rows.push(fields);
    }
    write_csv_atomic(path, &header, &rows)
}

/// Writes `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_csv_atomic(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::ingestion(path, None, e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::ingestion(path, None, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Metadata written next to a prepared sample-set CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub rows: usize,
    pub d_top: usize,
    pub d_bottom: Option<usize>,
    pub class_map: ClassMap,
    pub provenance: Vec<String>,
    pub pipeline: serde_json::Value,
    pub pipeline_hash: String,
}

pub const SIDECAR_VERSION: u32 = 1;

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

/// Caches a prepared set as CSV plus JSON sidecar.
pub fn save_sample_set(set: &SampleSet, csv_path: &Path, provenance: Vec<String>, pipeline: serde_json::Value, pipeline_hash: String) -> Result<()> {
    let mut header: Vec<String> = (0..set.d_top()).map(|i| format!("top_{i}")).collect();
    if let Some(db) = set.d_bottom() {
        header.extend((0..db).map(|i| format!("bottom_{i}")));
    }
    header.push("label".into());
    let rows: Vec<Vec<String>> = (0..set.len())
        .map(|i| {
            let mut r: Vec<String> = set.x_top.row(i).iter().map(|v| format!("{v:?}")).collect();
            if let Some(b) = &set.x_bottom {
                r.extend(b.row(i).iter().map(|v| format!("{v:?}")));
            }
            r.push(set.labels[i].to_string());
            r
        })
        .collect();
    write_csv_atomic(csv_path, &header, &rows)?;
    let sidecar = Sidecar {
        format_version: SIDECAR_VERSION,
        rows: set.len(),
        d_top: set.d_top(),
        d_bottom: set.d_bottom(),
        class_map: set.class_map.clone(),
        provenance,
        pipeline,
        pipeline_hash,
    };
    write_atomic(&sidecar_path(csv_path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

pub fn read_sidecar(csv_path: &Path) -> Result<Sidecar> {
    let p = sidecar_path(csv_path);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::ingestion(&p, Some(e.line()), e.to_string()))?;
    if sidecar.format_version != SIDECAR_VERSION {
        return Err(Error::ingestion(
            &p,
            None,
            format!("sidecar version {} (this build reads {SIDECAR_VERSION})", sidecar.format_version),
        ));
    }
    Ok(sidecar)
}

pub fn load_sample_set(csv_path: &Path) -> Result<SampleSet> {
    let sidecar = read_sidecar(csv_path)?;
    let width = sidecar.d_top + sidecar.d_bottom.unwrap_or(0);
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::ingestion(csv_path, None, e.to_string()))?;
    let mut values = Vec::with_capacity(sidecar.rows * width);
    let mut labels = Vec::with_capacity(sidecar.rows);
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::ingestion(csv_path, Some(line), e.to_string()))?;
        if rec.len() != width + 1 {
            return Err(Error::ingestion(csv_path, Some(line), format!("{} fields, expected {}", rec.len(), width + 1)));
        }
        for cell in rec.iter().take(width) {
            values.push(
                cell.parse::<f64>()
                    .map_err(|_| Error::ingestion(csv_path, Some(line), format!("non-numeric value `{cell}`")))?,
            );
        }
        labels.push(
            rec[width]
                .parse::<usize>()
                .map_err(|_| Error::ingestion(csv_path, Some(line), format!("bad label `{}`", &rec[width])))?,
        );
    }
    if labels.len() != sidecar.rows {
        return Err(Error::ingestion(
            csv_path,
            None,
            format!("{} rows, sidecar records {}", labels.len(), sidecar.rows),
        ));
    }
    let all = Array2::from_shape_vec((labels.len(), width), values).expect("row-major fill");
    let x_top = all.slice(s![.., ..sidecar.d_top]).to_owned();
    let x_bottom = sidecar.d_bottom.map(|_| all.slice(s![.., sidecar.d_top..]).to_owned());
    SampleSet::new(x_top, x_bottom, labels, sidecar.class_map)
}

/// Synthetic change-detection pixel pairs with `bands` bands per source.
///
/// Source-0 spectra are mixtures of three random material signatures plus
/// noise. Unchanged pixels repeat that spectrum with small noise; changed
/// pixels add a shift of magnitude 0.5..1 along a fixed signature
/// orthogonal to the materials, so the classes are linearly separable in
/// the concatenated space. Labels are balanced in expectation.
pub fn synthetic_change_pairs(n: usize, bands: usize, seed: u64) -> Result<SampleSet> {
    if bands < 4 || n == 0 {
        return Err(Error::validation("synthetic pairs need at least 4 bands and one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut materials: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..bands).map(|_| rng.gen_range(0.2..1.0)).collect())
        .collect();
    let mut shift: Vec<f64> = (0..bands).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Gram-Schmidt the shift direction against the material span
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for m in materials.iter_mut() {
        let mut v = m.clone();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.iter().map(|x| x / nv).collect());
    }
    for b in &basis {
        let p: f64 = shift.iter().zip(b).map(|(x, y)| x * y).sum();
        shift.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    let ns = shift.iter().map(|x| x * x).sum::<f64>().sqrt();
    shift.iter_mut().for_each(|x| *x /= ns);

    let mut values = Vec::with_capacity(n * 2 * bands);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let before: Vec<f64> = (0..bands)
            .map(|b| (0..3).map(|k| w[k] * materials[k][b]).sum::<f64>() + rng.gen_range(-0.01..0.01))
            .collect();
        let changed = rng.gen_bool(0.5);
        let magnitude = if changed { rng.gen_range(0.5..1.0) } else { 0.0 };
        let after: Vec<f64> = before
            .iter()
            .zip(&shift)
            .map(|(x, s)| x + magnitude * s + rng.gen_range(-0.01..0.01))
            .collect();
        values.extend(before);
        values.extend(after);
        labels.push(changed as usize);
    }
    let x = Array2::from_shape_vec((n, 2 * bands), values).expect("row-major fill");
    SampleSet::new(x, None, labels, [(0, 0), (1, 1)].into_iter().collect())
}
