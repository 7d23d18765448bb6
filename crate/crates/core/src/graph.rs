//! Graph description, shape inference and cost accounting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor};

/// Reserved edge name for the graph input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Conv2D,
    DepthwiseConv2D,
    FullyConnected,
    ReLU6,
    Add,
    GlobalAvgPool,
    Softmax,
}

impl OpKind {
    pub fn is_parameterized(self) -> bool {
        matches!(self, OpKind::Conv2D | OpKind::DepthwiseConv2D | OpKind::FullyConnected)
    }

    fn arity(self) -> usize {
        if self == OpKind::Add {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(in / stride)`; odd padding puts the extra cell
    /// on the bottom/right.
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: &[&str]) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            stride: None,
            padding: None,
            weight: None,
            bias: None,
        }
    }

    pub fn conv(
        id: impl Into<String>,
        kind: OpKind,
        input: &str,
        stride: usize,
        padding: Padding,
        weight: impl Into<String>,
        bias: Option<String>,
    ) -> Self {
        NodeSpec {
            stride: Some(stride),
            padding: Some(padding),
            weight: Some(weight.into()),
            bias,
            ..NodeSpec::new(id, kind, &[input])
        }
    }

    pub fn fully_connected(id: impl Into<String>, input: &str, weight: impl Into<String>, bias: Option<String>) -> Self {
        NodeSpec {
            weight: Some(weight.into()),
            bias,
            ..NodeSpec::new(id, OpKind::FullyConnected, &[input])
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(1)
    }

    pub fn padding(&self) -> Padding {
        self.padding.unwrap_or_default()
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.weight.iter().chain(self.bias.iter()).map(String::as_str)
    }
}

/// Spatial geometry of a convolution with NHWC input (N = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &Shape,
        kernel_h: usize,
        kernel_w: usize,
        out_c: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let &[1, in_h, in_w, in_c] = input.dims() else {
            return Err(Error::shape(format!("convolution input must be 1xHxWxC, got {input}")));
        };
        if !(1..=2).contains(&stride) {
            return Err(Error::graph(format!("stride must be 1 or 2, got {stride}")));
        }
        let (out_h, pad_h) = out_extent(in_h, kernel_h, stride, padding)?;
        let (out_w, pad_w) = out_extent(in_w, kernel_w, stride, padding)?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel_h,
            kernel_w,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new([1, self.out_h, self.out_w, self.out_c]).expect("non-zero extents")
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::shape(format!("valid padding: input {input} smaller than kernel {kernel}")));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub input_shape: Shape,
    pub nodes: Vec<NodeSpec>,
    pub output: String,
    pub weights: BTreeMap<String, Tensor>,
}

impl GraphSpec {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| Error::graph(format!("missing tensor '{name}'")))
    }

    /// True when the parameterized layers carry int8 weights.
    pub fn is_quantized(&self) -> bool {
        self.weights.values().any(|t| t.dtype() == DType::I8)
    }

    /// Checks structure and runs shape inference. Returns one output shape
    /// per node, in node order.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let &[1, _, _, _] = self.input_shape.dims() else {
            return Err(Error::graph(format!("graph input must be 1xHxWxC, got {}", self.input_shape)));
        };
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut refs: HashMap<&str, usize> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id == INPUT {
                return Err(Error::graph(format!("node id '{INPUT}' is reserved")));
            }
            if node.inputs.len() != node.kind.arity() {
                return Err(Error::graph(format!(
                    "node '{}' ({}) expects {} inputs, has {}",
                    node.id,
                    node.kind,
                    node.kind.arity(),
                    node.inputs.len()
                )));
            }
            for src in &node.inputs {
                if src != INPUT && !seen.contains_key(src.as_str()) {
                    return Err(Error::graph(format!(
                        "node '{}' input '{src}' is not an earlier node",
                        node.id
                    )));
                }
            }
            if node.kind.is_parameterized() != node.weight.is_some() {
                return Err(Error::graph(format!("node '{}' weight attribute does not match kind", node.id)));
            }
            if !node.kind.is_parameterized() && node.bias.is_some() {
                return Err(Error::graph(format!("node '{}' ({}) cannot have a bias", node.id, node.kind)));
            }
            for name in node.tensor_names() {
                *refs.entry(name).or_default() += 1;
            }
            if seen.insert(&node.id, i).is_some() {
                return Err(Error::graph(format!("duplicate node id '{}'", node.id)));
            }
        }
        if !seen.contains_key(self.output.as_str()) {
            return Err(Error::graph(format!("output '{}' is not a node", self.output)));
        }
        for (name, count) in &refs {
            if !self.weights.contains_key(*name) {
                return Err(Error::graph(format!("missing tensor '{name}'")));
            }
            if *count > 1 {
                return Err(Error::graph(format!("tensor '{name}' referenced by {count} nodes")));
            }
        }
        if let Some(orphan) = self.weights.keys().find(|k| !refs.contains_key(k.as_str())) {
            return Err(Error::graph(format!("tensor '{orphan}' is not referenced by any node")));
        }
        self.infer_shapes()
    }

    fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        let lookup = |shapes: &[Shape], by_id: &HashMap<&str, usize>, src: &str| -> Shape {
            if src == INPUT {
                self.input_shape.clone()
            } else {
                shapes[by_id[src]].clone()
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let input = lookup(&shapes, &by_id, &node.inputs[0]);
            let out = match node.kind {
                OpKind::Conv2D | OpKind::DepthwiseConv2D => {
                    let geom = self.conv_geometry(node, &input)?;
                    geom.output_shape()
                }
                OpKind::FullyConnected => {
                    let w = self.weight(node.weight.as_deref().unwrap())?;
                    let &[out, inp] = w.dims() else {
                        return Err(Error::shape(format!("node '{}': FC weight must be OutxIn", node.id)));
                    };
                    if inp != input.numel() {
                        return Err(Error::shape(format!(
                            "node '{}': FC expects {inp} inputs, got {input}",
                            node.id
                        )));
                    }
                    self.check_bias(node, out)?;
                    Shape::new([1, out])?
                }
                OpKind::ReLU6 | OpKind::Softmax => input,
                OpKind::Add => {
                    let other = lookup(&shapes, &by_id, &node.inputs[1]);
                    if other != input {
                        return Err(Error::shape(format!(
                            "node '{}': Add operands differ ({input} vs {other})",
                            node.id
                        )));
                    }
                    input
                }
                OpKind::GlobalAvgPool => {
                    let &[1, _, _, c] = input.dims() else {
                        return Err(Error::shape(format!("node '{}': pooling input must be NHWC", node.id)));
                    };
                    Shape::new([1, c])?
                }
            };
            by_id.insert(&node.id, i);
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Geometry of a conv node given its input shape; validates weights.
    pub fn conv_geometry(&self, node: &NodeSpec, input: &Shape) -> Result<ConvGeometry> {
        let w = self.weight(node.weight.as_deref().unwrap_or_default())?;
        let &[o, kh, kw, i] = w.dims() else {
            return Err(Error::shape(format!("node '{}': conv weight must be rank 4", node.id)));
        };
        let in_c = input.dims().get(3).copied().unwrap_or(0);
        let out_c = match node.kind {
            OpKind::Conv2D => {
                if i != in_c {
                    return Err(Error::shape(format!(
                        "node '{}': weight expects {i} input channels, got {input}",
                        node.id
                    )));
                }
                o
            }
            OpKind::DepthwiseConv2D => {
                if o != 1 || i != in_c {
                    return Err(Error::shape(format!(
                        "node '{}': depthwise weight must be 1xHxWx{in_c}, got {}",
                        node.id,
                        w.shape()
                    )));
                }
                i
            }
            _ => return Err(Error::graph(format!("node '{}' is not a convolution", node.id))),
        };
        self.check_bias(node, out_c)?;
        ConvGeometry::new(input, kh, kw, out_c, node.stride(), node.padding())
    }

    fn check_bias(&self, node: &NodeSpec, channels: usize) -> Result<()> {
        if let Some(b) = &node.bias {
            let b = self.weight(b)?;
            if b.dims() != [channels] {
                return Err(Error::shape(format!(
                    "node '{}': bias shape {} does not match {channels} channels",
                    node.id,
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Index of each node's inputs in buffer space (0 = graph input,
    /// `i + 1` = node `i`).
    pub(crate) fn input_slots(&self) -> Vec<Vec<usize>> {
        let by_id: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i + 1)).collect();
        self.nodes
            .iter()
            .map(|n| n.inputs.iter().map(|s| if s == INPUT { 0 } else { by_id[s.as_str()] }).collect())
            .collect()
    }

    pub(crate) fn output_slot(&self) -> usize {
        self.nodes.iter().position(|n| n.id == self.output).expect("validated output") + 1
    }
}

/// Total element count of all weight and bias tensors.
pub fn count_params(g: &GraphSpec) -> usize {
    g.weights.values().map(Tensor::numel).sum()
}

/// Multiply-accumulate count of the convolution and fully-connected layers.
pub fn count_madds(g: &GraphSpec) -> Result<u64> {
    Ok(layer_madds(g)?.iter().sum())
}

/// Multiply-accumulates of each node, in node order.
pub fn layer_madds(g: &GraphSpec) -> Result<Vec<u64>> {
    let shapes = g.validate()?;
    let slots = g.input_slots();
    let mut out = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let input = if slots[i][0] == 0 { &g.input_shape } else { &shapes[slots[i][0] - 1] };
        out.push(match node.kind {
            OpKind::Conv2D => {
                let geo = g.conv_geometry(node, input)?;
                (geo.out_h * geo.out_w * geo.out_c * geo.kernel_h * geo.kernel_w * geo.in_c) as u64
            }
            OpKind::DepthwiseConv2D => {
                let geo = g.conv_geometry(node, input)?;
                (geo.out_h * geo.out_w * geo.out_c * geo.kernel_h * geo.kernel_w) as u64
            }
            OpKind::FullyConnected => g.weight(node.weight.as_deref().unwrap())?.numel() as u64,
            _ => 0,
        });
    }
    Ok(out)
}

/// Peak bytes of simultaneously live activation buffers over the
/// topological schedule. A buffer lives from its producer to its last
/// consumer; the graph output lives to the end. Quantized graphs use one
/// byte per element except for softmax outputs, which stay f32.
pub fn activation_peak_bytes(g: &GraphSpec) -> Result<u64> {
    let shapes = g.validate()?;
    let slots = g.input_slots();
    let n = g.nodes.len();
    let quantized = g.is_quantized();
    let elem_bytes = |slot: usize| -> u64 {
        if !quantized || (slot > 0 && g.nodes[slot - 1].kind == OpKind::Softmax) {
            4
        } else {
            1
        }
    };
    let mut bytes = Vec::with_capacity(n + 1);
    bytes.push(g.input_shape.numel() as u64 * elem_bytes(0));
    for (i, s) in shapes.iter().enumerate() {
        bytes.push(s.numel() as u64 * elem_bytes(i + 1));
    }
    // step at which each buffer is last needed; producers of buffer s >= 1 run at step s - 1
    let mut last_use: Vec<usize> = (0..=n).map(|s| s.saturating_sub(1)).collect();
    for (step, ins) in slots.iter().enumerate() {
        for &s in ins {
            last_use[s] = last_use[s].max(step);
        }
    }
    last_use[g.output_slot()] = n;
    let mut peak = 0;
    for step in 0..n {
        let live: u64 = (0..=n)
            .filter(|&s| s.saturating_sub(1) <= step && step <= last_use[s])
            .map(|s| bytes[s])
            .sum();
        peak = peak.max(live);
    }
    Ok(peak)
}
