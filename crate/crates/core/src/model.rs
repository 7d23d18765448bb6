use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, OpKind, INPUT};
use crate::tensor::QuantParams;

/// Shared-value codebook for a clustered weight tensor.
///
/// Each element either points at a centroid or, when `exempt` is present,
/// may be marked exempt and is then exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCodebook {
    pub centroids: Vec<f32>,
    pub assignment: Vec<u16>,
    pub exempt: Option<Vec<bool>>,
}

impl ClusterCodebook {
    pub fn preserved_zero(&self) -> bool {
        self.exempt.is_some()
    }

    pub fn is_exempt(&self, i: usize) -> bool {
        self.exempt.as_ref().is_some_and(|m| m[i])
    }

    /// Reconstructs the dense float values.
    pub fn decode(&self) -> Vec<f32> {
        (0..self.assignment.len())
            .map(|i| if self.is_exempt(i) { 0.0 } else { self.centroids[self.assignment[i] as usize] })
            .collect()
    }

    pub(crate) fn check(&self, len: usize) -> Result<()> {
        if self.assignment.len() != len {
            return Err(Error::format(format!(
                "codebook covers {} elements, tensor has {len}",
                self.assignment.len()
            )));
        }
        if let Some(m) = &self.exempt {
            if m.len() != len {
                return Err(Error::format("exempt mask length mismatch"));
            }
        }
        if let Some(bad) = self.assignment.iter().find(|&&a| a as usize >= self.centroids.len()) {
            return Err(Error::format(format!(
                "codebook index {bad} out of range for {} centroids",
                self.centroids.len()
            )));
        }
        Ok(())
    }
}

/// A deployable network: graph, weights, class labels and (after
/// post-training quantization) per-edge activation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub labels: Vec<String>,
    pub graph: GraphSpec,
    /// Keyed by edge name: `input` or the producing node id.
    pub activations: BTreeMap<String, QuantParams>,
    pub codebooks: BTreeMap<String, ClusterCodebook>,
}

impl Model {
    pub fn new(name: impl Into<String>, labels: Vec<String>, graph: GraphSpec) -> Self {
        Model {
            name: name.into(),
            labels,
            graph,
            activations: BTreeMap::new(),
            codebooks: BTreeMap::new(),
        }
    }

    /// Edges that need activation parameters in the int8 path: the graph
    /// input and every node output except softmax (which is f32).
    pub fn quantized_edges(&self) -> impl Iterator<Item = &str> {
        std::iter::once(INPUT).chain(
            self.graph
                .nodes
                .iter()
                .filter(|n| n.kind != OpKind::Softmax)
                .map(|n| n.id.as_str()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.graph.validate()?;
        let out = &shapes[self.graph.output_slot() - 1];
        if !self.labels.is_empty() && self.labels.len() != out.numel() {
            return Err(Error::graph(format!(
                "{} labels for an output of {} values",
                self.labels.len(),
                out.numel()
            )));
        }
        for (name, cb) in &self.codebooks {
            let t = self.graph.weight(name)?;
            cb.check(t.numel())?;
        }
        Ok(())
    }

    pub fn is_weight_tensor(&self, name: &str) -> bool {
        self.graph.nodes.iter().any(|n| n.weight.as_deref() == Some(name))
    }
}
