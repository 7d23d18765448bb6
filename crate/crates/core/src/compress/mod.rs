//! Model compression: magnitude pruning, weight clustering and post-training
//! int8 quantization, applied in that fixed order by [`optimize_pipeline`].

mod cluster;
mod prune;
mod quantize;

use std::collections::HashSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::format::{encoded_size, Encoding};
use crate::graph::activation_peak_bytes;
use crate::model::Model;
use crate::tensor::{Tensor, TensorData};

pub use cluster::{cluster_slice, cluster_weights, cluster_weights_traced, kmeans_1d, KMeans, MAX_CLUSTERS, MAX_ITERATIONS};
pub use prune::{prune_magnitude, prune_slice, pruned_count};
pub use quantize::{calibrate, quantize_model, quantize_per_channel, Calibration, EdgeRange};

pub const DEFAULT_SPARSITY: f32 = 0.5;
pub const DEFAULT_CLUSTERS: usize = 16;
pub const DEFAULT_CALIBRATION_INPUTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationSource {
    /// Seeded uniform inputs in [-1, 1].
    Random { count: usize, seed: u64 },
    /// Images listed in an evaluation manifest.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub sparsity: f32,
    pub clusters: Option<usize>,
    pub quantize: bool,
    pub preserve_zeros: bool,
    pub calibration: CalibrationSource,
    pub threads: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            sparsity: DEFAULT_SPARSITY,
            clusters: Some(DEFAULT_CLUSTERS),
            quantize: true,
            preserve_zeros: true,
            calibration: CalibrationSource::Random { count: DEFAULT_CALIBRATION_INPUTS, seed: 0 },
            threads: 1,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        prune::check_sparsity(self.sparsity)?;
        if let Some(k) = self.clusters {
            cluster::check_clusters(k)?;
        }
        if let CalibrationSource::Random { count: 0, .. } = self.calibration {
            return Err(Error::invalid("calibration needs at least one input"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("thread count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub encoding: Encoding,
    pub elements: usize,
    pub original_bytes: u64,
    pub pruned_nonzeros: usize,
    pub unique_values: usize,
    pub encoded_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub sparsity: f32,
    pub clusters: Option<usize>,
    pub quantized: bool,
    pub original_bytes: u64,
    pub encoded_bytes: u64,
    pub ratio: f64,
    /// Bytes of the per-edge activation parameter table, included in
    /// `encoded_bytes`.
    pub activation_param_bytes: u64,
    pub activation_peak_bytes_before: u64,
    pub activation_peak_bytes_after: u64,
    pub per_tensor: Vec<TensorReport>,
}

/// Prune, then cluster (if configured), then calibrate and quantize (if
/// configured).
pub fn optimize_pipeline(m: &Model, cfg: &CompressionConfig) -> Result<(Model, CompressionReport)> {
    cfg.validate()?;
    let mut model = prune_magnitude(m, cfg.sparsity)?;
    let pruned: Vec<(String, usize)> =
        model.graph.weights.iter().map(|(k, t)| (k.clone(), nonzero_count(t))).collect();
    if let Some(k) = cfg.clusters {
        model = cluster_weights(&model, k, cfg.preserve_zeros)?;
    }
    if cfg.quantize {
        let inputs = calibration_inputs(&model, &cfg.calibration)?;
        let cal = calibrate(&model, &inputs, cfg.threads)?;
        model = quantize_model(&model, &cal)?;
    }
    let report = compression_report(m, &model, cfg, &pruned)?;
    Ok((model, report))
}

fn compression_report(
    original: &Model,
    model: &Model,
    cfg: &CompressionConfig,
    pruned: &[(String, usize)],
) -> Result<CompressionReport> {
    let sizes = encoded_size(model)?;
    let mut per_tensor = Vec::with_capacity(sizes.tensors.len());
    for (ts, (name, nonzeros)) in sizes.tensors.iter().zip(pruned) {
        debug_assert_eq!(&ts.name, name);
        let t = model.graph.weight(&ts.name)?;
        per_tensor.push(TensorReport {
            name: ts.name.clone(),
            encoding: ts.encoding,
            elements: ts.elements,
            original_bytes: 4 * ts.elements as u64,
            pruned_nonzeros: *nonzeros,
            unique_values: unique_nonzero_values(t),
            encoded_bytes: ts.bytes,
        });
    }
    let original_bytes: u64 = per_tensor.iter().map(|t| t.original_bytes).sum();
    Ok(CompressionReport {
        sparsity: cfg.sparsity,
        clusters: cfg.clusters,
        quantized: cfg.quantize,
        original_bytes,
        encoded_bytes: sizes.total,
        ratio: original_bytes as f64 / sizes.total as f64,
        activation_param_bytes: sizes.activation_bytes,
        activation_peak_bytes_before: activation_peak_bytes(&original.graph)?,
        activation_peak_bytes_after: activation_peak_bytes(&model.graph)?,
        per_tensor,
    })
}

/// Inputs for calibration from the configured source, shaped like the
/// model input.
pub fn calibration_inputs(m: &Model, source: &CalibrationSource) -> Result<Vec<Tensor>> {
    let dims = m.graph.input_shape.dims().to_vec();
    match source {
        CalibrationSource::Random { count, seed } => Ok(random_inputs(&dims, *count, *seed)),
        CalibrationSource::Manifest(path) => {
            let entries = eval::load_manifest_file(path)?;
            if entries.is_empty() {
                return Err(Error::Manifest(format!("{}: no calibration entries", path.display())));
            }
            entries.iter().map(|e| eval::load_input(&e.path, &dims)).collect()
        }
    }
}

/// `count` tensors of the given shape with values uniform in [-1, 1],
/// reproducible from `seed`.
pub fn random_inputs(dims: &[usize], count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    (0..count)
        .map(|_| {
            let data = (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
            Tensor::from_f32(dims.to_vec(), data).expect("shape matches")
        })
        .collect()
}

/// Conv, depthwise and fully-connected weights, minus the final
/// parameterized (classifier) layer. Biases are never eligible.
pub fn eligible_weights(m: &Model) -> Vec<String> {
    let mut names: Vec<String> = m.graph.nodes.iter().filter_map(|n| n.weight.clone()).collect();
    names.pop();
    names
}

fn float_data_mut<'a>(m: &'a mut Model, name: &str) -> Result<&'a mut [f32]> {
    m.graph
        .weights
        .get_mut(name)
        .ok_or_else(|| Error::graph(format!("missing tensor '{name}'")))?
        .as_f32_mut()
        .ok_or_else(|| Error::invalid(format!("tensor '{name}' is not f32; compress a float model")))
}

pub fn nonzero_count(t: &Tensor) -> usize {
    match t.data() {
        TensorData::F32(v) => v.iter().filter(|&&x| x != 0.0).count(),
        TensorData::I8(v) => v.iter().filter(|&&x| x != 0).count(),
        TensorData::I32(v) => v.iter().filter(|&&x| x != 0).count(),
    }
}

/// Distinct non-zero stored values (by bit pattern for floats).
pub fn unique_nonzero_values(t: &Tensor) -> usize {
    match t.data() {
        TensorData::F32(v) => v.iter().filter(|&&x| x != 0.0).map(|x| x.to_bits()).collect::<HashSet<_>>().len(),
        TensorData::I8(v) => v.iter().filter(|&&x| x != 0).collect::<HashSet<_>>().len(),
        TensorData::I32(v) => v.iter().filter(|&&x| x != 0).collect::<HashSet<_>>().len(),
    }
}
