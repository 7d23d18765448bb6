//! Evaluation harness: manifest parsing, image preprocessing, confusion
//! matrices, balanced accuracy and macro F1 over the full set and the A/B
//! subsets.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rten::load_raw_tensor;
use crate::runtime::Executor;
use crate::tensor::{Tensor, TensorData};

pub const NUM_CLASSES: usize = 7;
pub const DEFAULT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happiness,
    Sadness,
    Surprise,
    Fear,
    Anger,
    Disgust,
    Neutral,
}

impl EmotionLabel {
    /// Canonical class order; the index is the model output index.
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Fear,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Neutral => "neutral",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Self::ALL.into_iter().find(|l| l.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    A,
    B,
    #[serde(rename = "-")]
    Untagged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: EmotionLabel,
    pub subset: Subset,
}

/// Parses a `path,label,subset` CSV. Line numbers in errors count the
/// header as line 1.
pub fn load_manifest<R: Read>(source: R) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "subset"] {
        return Err(Error::Manifest(format!("expected header 'path,label,subset', got '{}'", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Manifest(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let label = &record[1];
        let label = label
            .parse()
            .map_err(|_| Error::Manifest(format!("unknown label '{label}' at line {line}")))?;
        let subset = match &record[2] {
            "A" => Subset::A,
            "B" => Subset::B,
            "-" => Subset::Untagged,
            other => return Err(Error::Manifest(format!("unknown subset '{other}' at line {line}"))),
        };
        entries.push(ManifestEntry { path: PathBuf::from(&record[0]), label, subset });
    }
    Ok(entries)
}

/// Loads a manifest file; relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest_file(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = load_manifest(file).map_err(|e| match e {
        Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
        other => other,
    })?;
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

/// 8-bit raster with one (grayscale) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster must be at least 1x1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid("raster payload does not match its dimensions"));
        }
        Ok(Raster { width, height, channels, data })
    }
}

/// Decodes PPM/PGM (and PNG/JPEG) files.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let err = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raster = if img.color().has_color() {
        Raster::new(w, h, 3, img.to_rgb8().into_raw())
    } else {
        Raster::new(w, h, 1, img.to_luma8().into_raw())
    };
    raster.map_err(|e| err(e.to_string()))
}

/// Source coordinate and blend weight for output index `i` when
/// resampling `n_in` samples to `n_out` (half-pixel centres, edge clamped).
fn sample_coords(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize to `target x target`, grayscale expanded to three
/// channels, values mapped from [0, 255] to [-1, 1].
pub fn preprocess(img: &Raster, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let mut out = Vec::with_capacity(target * target * 3);
    let cols: Vec<_> = (0..target).map(|x| sample_coords(x, img.width, target)).collect();
    for y in 0..target {
        let (y0, y1, fy) = sample_coords(y, img.height, target);
        for &(x0, x1, fx) in &cols {
            for c in 0..3 {
                let ch = if img.channels == 1 { 0 } else { c };
                let px = |yy: usize, xx: usize| img.data[(yy * img.width + xx) * img.channels + ch] as f64;
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v / 127.5 - 1.0) as f32);
            }
        }
    }
    Tensor::from_f32([1, target, target, 3], out)
}

/// Reads one evaluation input: an RTEN tensor of the model input shape is
/// used as-is; other files are decoded as images and preprocessed.
pub fn load_input(path: &Path, dims: &[usize]) -> Result<Tensor> {
    let &[1, h, w, 3] = dims else {
        return Err(Error::shape(format!("model input must be 1xHxWx3, got {dims:?}")));
    };
    if h != w {
        return Err(Error::shape(format!("model input must be square, got {h}x{w}")));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("rten")) {
        let t = load_raw_tensor(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
        if t.dims() != dims || !matches!(t.data(), TensorData::F32(_)) {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("expected an f32 tensor of shape {dims:?}, got {} {}", t.dtype(), t.shape()),
            });
        }
        return Ok(t);
    }
    preprocess(&load_raster(path)?, h)
}

/// Counts indexed by `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts: rows })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.col_sum(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.row_sum(c))
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean recall over the classes that have at least one true sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<usize> = (0..cm.classes()).filter(|&c| cm.row_sum(c) > 0).collect();
    if present.is_empty() {
        return Err(Error::invalid("balanced accuracy of an empty confusion matrix"));
    }
    Ok(present.iter().map(|&c| cm.recall(c)).sum::<f64>() / present.len() as f64)
}

/// Unweighted mean of per-class F1 over all classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::invalid("macro F1 of an empty confusion matrix"));
    }
    Ok((0..cm.classes()).map(|c| cm.f1(c)).sum::<f64>() / cm.classes() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: EmotionLabel,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    /// `full`, `A` or `B`.
    pub subset: String,
    pub count: u64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl SubsetMetrics {
    pub fn from_confusion(subset: &str, cm: ConfusionMatrix) -> Result<Self> {
        if cm.classes() != NUM_CLASSES {
            return Err(Error::invalid(format!("expected {NUM_CLASSES} classes, got {}", cm.classes())));
        }
        let per_class = EmotionLabel::ALL
            .iter()
            .map(|&label| {
                let c = label.index();
                ClassMetrics { label, support: cm.row_sum(c), precision: cm.precision(c), recall: cm.recall(c), f1: cm.f1(c) }
            })
            .collect();
        Ok(SubsetMetrics {
            subset: subset.to_string(),
            count: cm.total(),
            balanced_accuracy: balanced_accuracy(&cm)?,
            macro_f1: macro_f1(&cm)?,
            per_class,
            confusion: cm,
        })
    }
}

/// Metrics for the full manifest and, when present, subsets A and B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub subsets: Vec<SubsetMetrics>,
}

impl MetricsReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetMetrics> {
        self.subsets.iter().find(|s| s.subset == name)
    }
}

/// Predicted class for every entry, in manifest order.
pub fn predict(m: &Model, entries: &[ManifestEntry], threads: usize) -> Result<Vec<usize>> {
    let mut ex = Executor::new(m, threads)?;
    let out_len = ex.node_shapes()[m.graph.nodes.iter().position(|n| n.id == m.graph.output).expect("validated")].numel();
    if out_len != NUM_CLASSES {
        return Err(Error::graph(format!("model has {out_len} outputs, evaluation needs {NUM_CLASSES}")));
    }
    let dims = m.graph.input_shape.dims().to_vec();
    let mut preds = Vec::with_capacity(entries.len());
    for e in entries {
        let x = load_input(&e.path, &dims)?;
        let y = ex.infer(&x)?;
        preds.push(argmax(y.as_f32().expect("executor output is f32")));
    }
    Ok(preds)
}

pub fn evaluate(m: &Model, entries: &[ManifestEntry], threads: usize) -> Result<MetricsReport> {
    if entries.is_empty() {
        return Err(Error::Manifest("manifest has no entries".into()));
    }
    let preds = predict(m, entries, threads)?;
    let mut full = ConfusionMatrix::new(NUM_CLASSES);
    let mut a = ConfusionMatrix::new(NUM_CLASSES);
    let mut b = ConfusionMatrix::new(NUM_CLASSES);
    for (e, &p) in entries.iter().zip(&preds) {
        full.record(e.label.index(), p);
        match e.subset {
            Subset::A => a.record(e.label.index(), p),
            Subset::B => b.record(e.label.index(), p),
            Subset::Untagged => {}
        }
    }
    let mut subsets = vec![SubsetMetrics::from_confusion("full", full)?];
    for (name, cm) in [("A", a), ("B", b)] {
        if cm.total() > 0 {
            subsets.push(SubsetMetrics::from_confusion(name, cm)?);
        }
    }
    Ok(MetricsReport { model: m.name.clone(), subsets })
}

/// Writes the matrix as CSV: a header of the class names, then one row of
/// counts per true class.
pub fn write_confusion_csv<W: Write>(cm: &ConfusionMatrix, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let names: Vec<String> = (0..cm.classes())
        .map(|c| EmotionLabel::from_index(c).map_or_else(|| format!("class{c}"), |l| l.name().to_string()))
        .collect();
    w.write_record(&names).map_err(csv_err)?;
    for row in &cm.counts {
        w.write_record(row.iter().map(u64::to_string)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
