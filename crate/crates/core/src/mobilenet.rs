//! Built-in MobileNetV2 topology and a configurable inverted-residual
//! network builder it is expressed with.
//!
//! Batch norm is folded into the preceding convolution while the graph is
//! built, so the resulting graph only contains runtime node kinds.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, NodeSpec, OpKind, Padding, INPUT};
use crate::tensor::{Shape, Tensor};

const BN_EPS: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Seeded random weights with randomly drawn batch-norm statistics
    /// folded in.
    Random(u64),
    Zeros,
}

/// One row of the inverted-residual schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSetting {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

/// (expansion, output channels, repeats, first stride) for MobileNetV2.
pub const MOBILENET_V2_SCHEDULE: [BlockSetting; 7] = [
    BlockSetting { expansion: 1, channels: 16, repeats: 1, stride: 1 },
    BlockSetting { expansion: 6, channels: 24, repeats: 2, stride: 2 },
    BlockSetting { expansion: 6, channels: 32, repeats: 3, stride: 2 },
    BlockSetting { expansion: 6, channels: 64, repeats: 4, stride: 2 },
    BlockSetting { expansion: 6, channels: 96, repeats: 3, stride: 1 },
    BlockSetting { expansion: 6, channels: 160, repeats: 3, stride: 2 },
    BlockSetting { expansion: 6, channels: 320, repeats: 1, stride: 1 },
];

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedResidualConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSetting>,
    /// Width of the final 1x1 conv before pooling; `None` pools the last
    /// block directly.
    pub head_channels: Option<usize>,
    pub num_classes: usize,
}

/// Rounds `v` to a multiple of `divisor`, never dropping more than 10%.
pub fn make_divisible(v: f32, divisor: usize) -> usize {
    let d = divisor as f32;
    let mut out = (((v + d / 2.0) / d).floor() as usize * divisor).max(divisor);
    if (out as f32) < 0.9 * v {
        out += divisor;
    }
    out
}

pub fn build_mobilenet_v2(width_multiplier: f32, num_classes: usize, input_size: usize, init: Init) -> Result<GraphSpec> {
    if !(width_multiplier.is_finite() && width_multiplier > 0.0) {
        return Err(Error::invalid(format!("width multiplier must be positive, got {width_multiplier}")));
    }
    let blocks = MOBILENET_V2_SCHEDULE
        .iter()
        .map(|b| BlockSetting { channels: make_divisible(b.channels as f32 * width_multiplier, 8), ..*b })
        .collect();
    let cfg = InvertedResidualConfig {
        input_size,
        stem_channels: make_divisible(32.0 * width_multiplier, 8),
        blocks,
        head_channels: Some(make_divisible(1280.0 * width_multiplier.max(1.0), 8)),
        num_classes,
    };
    build_inverted_residual_net(&cfg, init)
}

pub fn build_inverted_residual_net(cfg: &InvertedResidualConfig, init: Init) -> Result<GraphSpec> {
    if cfg.input_size == 0 || !cfg.input_size.is_multiple_of(32) {
        return Err(Error::invalid(format!("input size must be a positive multiple of 32, got {}", cfg.input_size)));
    }
    if cfg.num_classes == 0 {
        return Err(Error::invalid("class count must be at least 1"));
    }
    let mut b = Builder::new(init);
    let mut x = b.conv("stem", INPUT, 3, cfg.stem_channels, 3, 2, Layer::Activated);
    let mut channels = cfg.stem_channels;
    let mut index = 0;
    for setting in &cfg.blocks {
        for r in 0..setting.repeats {
            let stride = if r == 0 { setting.stride } else { 1 };
            x = b.inverted_residual(index, &x, channels, setting.channels, stride, setting.expansion);
            channels = setting.channels;
            index += 1;
        }
    }
    if let Some(head) = cfg.head_channels {
        x = b.conv("head", &x, channels, head, 1, 1, Layer::Activated);
        channels = head;
    }
    b.nodes.push(NodeSpec::new("pool", OpKind::GlobalAvgPool, &[&x]));
    b.fully_connected("logits", "pool", channels, cfg.num_classes);
    b.nodes.push(NodeSpec::new("softmax", OpKind::Softmax, &["logits"]));

    let graph = GraphSpec {
        input_shape: Shape::new([1, cfg.input_size, cfg.input_size, 3])?,
        nodes: b.nodes,
        output: "softmax".into(),
        weights: b.weights,
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Layer {
    Activated,
    Linear,
    Depthwise,
}

struct Builder {
    rng: Option<ChaCha8Rng>,
    nodes: Vec<NodeSpec>,
    weights: BTreeMap<String, Tensor>,
}

impl Builder {
    fn new(init: Init) -> Self {
        let rng = match init {
            Init::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        Builder { rng, nodes: Vec::new(), weights: BTreeMap::new() }
    }

    fn inverted_residual(&mut self, index: usize, input: &str, cin: usize, cout: usize, stride: usize, t: usize) -> String {
        let name = format!("block{index}");
        let hidden = cin * t;
        let mut x = input.to_string();
        if t != 1 {
            x = self.conv(&format!("{name}_expand"), &x, cin, hidden, 1, 1, Layer::Activated);
        }
        x = self.conv(&format!("{name}_dw"), &x, hidden, hidden, 3, stride, Layer::Depthwise);
        x = self.conv(&format!("{name}_project"), &x, hidden, cout, 1, 1, Layer::Linear);
        if stride == 1 && cin == cout {
            let id = format!("{name}_add");
            self.nodes.push(NodeSpec::new(&id, OpKind::Add, &[input, &x]));
            x = id;
        }
        x
    }

    /// Adds a conv (+ folded batch norm, + ReLU6 unless linear) and returns
    /// the id of the last node.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, id: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize, layer: Layer) -> String {
        let (kind, dims, fan_in) = match layer {
            Layer::Depthwise => (OpKind::DepthwiseConv2D, [1, k, k, cout], k * k),
            _ => (OpKind::Conv2D, [cout, k, k, cin], k * k * cin),
        };
        let gain = if layer == Layer::Linear { 1.0 } else { 2.0 };
        let n: usize = dims.iter().product();
        let mut w = self.normal(n, (gain / fan_in as f32).sqrt());
        let bias = self.fold_batch_norm(&mut w, cout, layer == Layer::Depthwise);
        let (wn, bn) = (format!("{id}.weight"), format!("{id}.bias"));
        self.weights.insert(wn.clone(), Tensor::from_f32(dims, w).expect("sized"));
        self.weights.insert(bn.clone(), Tensor::from_f32([cout], bias).expect("sized"));
        self.nodes.push(NodeSpec::conv(id, kind, input, stride, Padding::Same, wn, Some(bn)));
        if layer == Layer::Linear {
            return id.to_string();
        }
        let relu = format!("{id}_relu");
        self.nodes.push(NodeSpec::new(&relu, OpKind::ReLU6, &[id]));
        relu
    }

    fn fully_connected(&mut self, id: &str, input: &str, cin: usize, cout: usize) {
        let w = self.normal(cin * cout, (1.0 / cin as f32).sqrt());
        let b = self.normal(cout, 0.1);
        let (wn, bn) = (format!("{id}.weight"), format!("{id}.bias"));
        self.weights.insert(wn.clone(), Tensor::from_f32([cout, cin], w).expect("sized"));
        self.weights.insert(bn.clone(), Tensor::from_f32([cout], b).expect("sized"));
        self.nodes.push(NodeSpec::fully_connected(id, input, wn, Some(bn)));
    }

    /// Draws batch-norm statistics, scales the weights by
    /// `gamma / sqrt(var + eps)` per output channel and returns the folded
    /// bias `beta - mean * gamma / sqrt(var + eps)`.
    fn fold_batch_norm(&mut self, w: &mut [f32], channels: usize, channels_last: bool) -> Vec<f32> {
        let Some(rng) = self.rng.as_mut() else { return vec![0.0; channels] };
        let near_one = Uniform::new(0.8f32, 1.2);
        let small = Normal::new(0.0f32, 0.05).unwrap();
        let mut bias = Vec::with_capacity(channels);
        let mut factor = Vec::with_capacity(channels);
        for _ in 0..channels {
            let (gamma, var) = (near_one.sample(rng), near_one.sample(rng));
            let (beta, mean) = (small.sample(rng), small.sample(rng));
            let f = gamma / (var + BN_EPS).sqrt();
            factor.push(f);
            bias.push(beta - mean * f);
        }
        if channels_last {
            for (i, v) in w.iter_mut().enumerate() {
                *v *= factor[i % channels];
            }
        } else {
            let per = w.len() / channels;
            for (i, v) in w.iter_mut().enumerate() {
                *v *= factor[i / per];
            }
        }
        bias
    }

    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        match self.rng.as_mut() {
            Some(rng) => {
                let d = Normal::new(0.0f32, std).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            None => vec![0.0; n],
        }
    }
}
