//! Min/max calibration and post-training int8 quantization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::OpKind;
use crate::model::Model;
use crate::runtime::Executor;
use crate::tensor::{
    expand_channel_scales, quant_params_from_range, quantize_symmetric, round_half_away, symmetric_scale,
    PerChannelQuant, Quant, QuantParams, Tensor, TensorData,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRange {
    pub min: f32,
    pub max: f32,
}

impl EdgeRange {
    fn widen(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }
}

/// Observed activation ranges, keyed by edge name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calibration {
    pub ranges: BTreeMap<String, EdgeRange>,
}

impl Calibration {
    pub fn params(&self, edge: &str) -> Result<QuantParams> {
        let r = self
            .ranges
            .get(edge)
            .ok_or_else(|| Error::Quant(format!("calibration does not cover edge '{edge}'")))?;
        quant_params_from_range(r.min, r.max)
    }
}

/// Runs float inference over `inputs`, tracking the running min/max of
/// every edge.
pub fn calibrate(m: &Model, inputs: &[Tensor], threads: usize) -> Result<Calibration> {
    if inputs.is_empty() {
        return Err(Error::invalid("calibration needs at least one input"));
    }
    let mut ex = Executor::from_graph(&m.graph, threads)?;
    let mut cal = Calibration::default();
    for x in inputs {
        ex.run(x)?;
        for (edge, values) in ex.edge_values()? {
            cal.ranges
                .entry(edge.to_string())
                .or_insert(EdgeRange { min: f32::INFINITY, max: f32::NEG_INFINITY })
                .widen(values);
        }
    }
    Ok(cal)
}

/// Quantizes weights to int8 (per output channel, symmetric), biases to
/// i32 and attaches per-edge activation parameters.
///
/// A clustered tensor shares one scale across its channels, so each
/// centroid maps to a single int8 code and the codebook carries over.
pub fn quantize_model(m: &Model, cal: &Calibration) -> Result<Model> {
    if m.graph.is_quantized() {
        return Err(Error::Quant("model is already quantized".into()));
    }
    let mut activations = BTreeMap::new();
    for edge in m.quantized_edges() {
        activations.insert(edge.to_string(), cal.params(edge)?);
    }
    let mut out = m.clone();
    for node in &m.graph.nodes {
        let Some(wname) = node.weight.as_deref() else { continue };
        let in_scale = activations[node.inputs[0].as_str()].scale;
        let axis = if node.kind == OpKind::DepthwiseConv2D { 3 } else { 0 };
        let w = m.graph.weight(wname)?;
        let data = w.as_f32().ok_or_else(|| Error::Quant(format!("weight '{wname}' is not f32")))?;
        let (q, scales) = match out.codebooks.get_mut(wname) {
            Some(cb) => {
                let s = symmetric_scale(cb.centroids.iter().copied());
                let codes: Vec<i8> = cb.centroids.iter().map(|&c| quantize_symmetric(c, s)).collect();
                cb.centroids = codes.iter().map(|&c| c as f32 * s).collect();
                let q = (0..data.len())
                    .map(|i| if cb.is_exempt(i) { 0 } else { codes[cb.assignment[i] as usize] })
                    .collect();
                (q, vec![s; w.dims()[axis]])
            }
            None => quantize_per_channel(w, axis),
        };
        let qw = Tensor::new(
            w.shape().clone(),
            TensorData::I8(q),
            Some(Quant::PerChannel(PerChannelQuant::new(axis, scales.clone())?)),
        )?;
        if let Some(bname) = node.bias.as_deref() {
            let b = m.graph.weight(bname)?;
            let bv = b.as_f32().ok_or_else(|| Error::Quant(format!("bias '{bname}' is not f32")))?;
            let acc: Vec<f32> = scales.iter().map(|&s| in_scale * s).collect();
            let qb: Vec<i32> = bv.iter().zip(&acc).map(|(&v, &s)| round_half_away(v / s)).collect();
            let t = Tensor::from_i32(b.dims().to_vec(), qb, PerChannelQuant::new(0, acc)?)?;
            out.graph.weights.insert(bname.to_string(), t);
        }
        out.graph.weights.insert(wname.to_string(), qw);
    }
    out.activations = activations;
    out.validate()?;
    Ok(out)
}

/// Symmetric per-channel quantization along `axis`.
pub fn quantize_per_channel(w: &Tensor, axis: usize) -> (Vec<i8>, Vec<f32>) {
    let data = w.as_f32().expect("f32 tensor");
    let channels = w.dims()[axis];
    let inner: usize = w.dims()[axis + 1..].iter().product();
    let channel_of = |i: usize| (i / inner) % channels;
    let mut max_abs = vec![0.0f32; channels];
    for (i, &v) in data.iter().enumerate() {
        let c = channel_of(i);
        max_abs[c] = max_abs[c].max(v.abs());
    }
    let scales: Vec<f32> = max_abs.into_iter().map(|m| symmetric_scale([m])).collect();
    let probe = PerChannelQuant { axis, scales: scales.clone() };
    let q = data
        .iter()
        .zip(expand_channel_scales(w.shape(), &probe))
        .map(|(&v, s)| quantize_symmetric(v, s))
        .collect();
    (q, scales)
}
