//! Graph executor for float and int8 models.
//!
//! Buffers are sized from shape inference when the executor is built and
//! reused for every inference. Slot 0 holds the (possibly quantized) graph
//! input; slot `i + 1` holds the output of node `i`.

/// Defines `$name` as a call to `$body`, compiled a second time with AVX2
/// enabled and picked at run time when the CPU supports it. Both builds
/// compute the same values; only the vector width differs.
macro_rules! dispatch_avx2 {
    ($(#[$doc:meta])* $name:ident => $body:ident($($arg:ident: $ty:ty),*)) => {
        $(#[$doc])*
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                #[target_feature(enable = "avx2")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn wide($($arg: $ty),*) {
                    $body($($arg),*)
                }
                // SAFETY: AVX2 support was just checked.
                unsafe { wide($($arg),*) };
                return;
            }
            $body($($arg),*)
        }
    };
}

mod float;
mod int8;
mod workers;

use crate::error::{Error, Result};
use crate::graph::{ConvGeometry, GraphSpec, OpKind, INPUT};
use crate::model::Model;
use crate::tensor::{Quant, QuantParams, Shape, Tensor};

pub(crate) use float::pack_ohwi_to_hwio;
use workers::Workers;

enum FloatOp {
    Conv { geo: ConvGeometry, w: Vec<f32>, bias: Option<Vec<f32>> },
    Pointwise { cin: usize, cout: usize, w: Vec<f32>, bias: Option<Vec<f32>> },
    Depthwise { geo: ConvGeometry, w: Vec<f32>, bias: Option<Vec<f32>> },
    FullyConnected { n_out: usize, w: Vec<f32>, bias: Option<Vec<f32>> },
    Relu6,
    Add,
    GlobalAvgPool { channels: usize, pixels: usize },
    Softmax { row: usize },
}

enum QuantOp {
    Conv { geo: ConvGeometry, in_zp: i32, w: Vec<i16>, rq: int8::Requant },
    Pointwise { in_zp: i32, w: int8::PackedPointwise, rq: int8::Requant },
    Depthwise { geo: ConvGeometry, in_zp: i32, w: Vec<i16>, rq: int8::Requant },
    FullyConnected { n_out: usize, in_zp: i32, w: Vec<i16>, rq: int8::Requant },
    Relu6 { lut: Box<[i8; 256]> },
    Add { a: QuantParams, b: QuantParams, out: QuantParams },
    GlobalAvgPool { channels: usize, pixels: usize, input: QuantParams, out: QuantParams },
    Softmax { row: usize, input: QuantParams },
}

struct Step<Op> {
    op: Op,
    inputs: Vec<usize>,
}

enum Plan {
    Float {
        steps: Vec<Step<FloatOp>>,
        buffers: Vec<Vec<f32>>,
    },
    Quant {
        input: QuantParams,
        steps: Vec<Step<QuantOp>>,
        buffers: Vec<Vec<i8>>,
        /// f32 results of softmax nodes, indexed like `buffers`.
        probs: Vec<Vec<f32>>,
        /// Parameters of each int8 slot, for dequantizing a non-softmax output.
        params: Vec<Option<QuantParams>>,
    },
}

/// Runs one model. Not shareable across concurrent inferences; each
/// executor owns its worker pool and activation buffers.
pub struct Executor {
    plan: Plan,
    workers: Workers,
    scratch: Vec<Vec<i32>>,
    ids: Vec<String>,
    input_shape: Shape,
    shapes: Vec<Shape>,
    output_slot: usize,
}

impl Executor {
    /// Builds an executor; models with int8 weights get the int8 path.
    pub fn new(model: &Model, threads: usize) -> Result<Self> {
        if model.graph.is_quantized() {
            Self::build(&model.graph, threads, Some(model))
        } else {
            Self::build(&model.graph, threads, None)
        }
    }

    /// Float executor for a bare graph.
    pub fn from_graph(graph: &GraphSpec, threads: usize) -> Result<Self> {
        if graph.is_quantized() {
            return Err(Error::graph("quantized graphs need activation parameters; use Executor::new"));
        }
        Self::build(graph, threads, None)
    }

    fn build(graph: &GraphSpec, threads: usize, quant: Option<&Model>) -> Result<Self> {
        let shapes = graph.validate()?;
        let workers = Workers::new(threads)?;
        let slots = graph.input_slots();
        let slot_shape = |s: usize| if s == 0 { &graph.input_shape } else { &shapes[s - 1] };
        let mut sizes = vec![graph.input_shape.numel()];
        sizes.extend(shapes.iter().map(Shape::numel));

        let plan = match quant {
            None => {
                let mut steps = Vec::with_capacity(graph.nodes.len());
                for i in 0..graph.nodes.len() {
                    let input = slot_shape(slots[i][0]);
                    steps.push(Step { op: float_op(graph, i, input, &shapes[i])?, inputs: slots[i].clone() });
                }
                Plan::Float { steps, buffers: sizes.iter().map(|&n| vec![0.0; n]).collect() }
            }
            Some(model) => {
                let edge = |name: &str| -> Result<QuantParams> {
                    model
                        .activations
                        .get(name)
                        .copied()
                        .ok_or_else(|| Error::graph(format!("missing activation quant params for edge '{name}'")))
                };
                let mut params = vec![Some(edge(INPUT)?)];
                for node in &graph.nodes {
                    params.push(if node.kind == OpKind::Softmax { None } else { Some(edge(&node.id)?) });
                }
                let mut steps = Vec::with_capacity(graph.nodes.len());
                for (i, node) in graph.nodes.iter().enumerate() {
                    let ins: Vec<QuantParams> = slots[i]
                        .iter()
                        .map(|&s| {
                            params[s].ok_or_else(|| {
                                Error::graph(format!("node '{}' consumes a softmax output in an int8 graph", node.id))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let input = slot_shape(slots[i][0]);
                    let op = quant_op(graph, i, input, &shapes[i], &ins, params[i + 1])?;
                    steps.push(Step { op, inputs: slots[i].clone() });
                }
                let mut buffers: Vec<Vec<i8>> = Vec::with_capacity(sizes.len());
                let mut probs: Vec<Vec<f32>> = Vec::with_capacity(sizes.len());
                for (slot, &n) in sizes.iter().enumerate() {
                    let softmax = slot > 0 && graph.nodes[slot - 1].kind == OpKind::Softmax;
                    buffers.push(if softmax { Vec::new() } else { vec![0; n] });
                    probs.push(if softmax { vec![0.0; n] } else { Vec::new() });
                }
                Plan::Quant { input: params[0].unwrap(), steps, buffers, probs, params }
            }
        };
        let scratch = vec![Vec::with_capacity(max_scratch(graph, &shapes)); threads];
        Ok(Executor {
            plan,
            workers,
            scratch,
            ids: graph.nodes.iter().map(|n| n.id.clone()).collect(),
            input_shape: graph.input_shape.clone(),
            shapes,
            output_slot: graph.output_slot(),
        })
    }

    pub fn thread_count(&self) -> usize {
        self.workers.threads()
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.plan, Plan::Quant { .. })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    /// Inferred output shape of every node, in node order.
    pub fn node_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Runs one inference and returns the output node as f32.
    pub fn infer(&mut self, input: &Tensor) -> Result<Tensor> {
        self.run(input)?;
        let shape = self.shapes[self.output_slot - 1].clone();
        let data = match &self.plan {
            Plan::Float { buffers, .. } => buffers[self.output_slot].clone(),
            Plan::Quant { buffers, probs, params, .. } => match params[self.output_slot] {
                None => probs[self.output_slot].clone(),
                Some(q) => buffers[self.output_slot].iter().map(|&v| crate::tensor::dequantize(v, q)).collect(),
            },
        };
        Tensor::new(shape, crate::tensor::TensorData::F32(data), None)
    }

    /// Runs one inference without copying out the result.
    pub fn run(&mut self, input: &Tensor) -> Result<()> {
        if input.shape() != &self.input_shape {
            return Err(Error::shape(format!(
                "input shape {} does not match graph input {}",
                input.shape(),
                self.input_shape
            )));
        }
        let x = input.as_f32().ok_or_else(|| Error::shape("executor input must be f32"))?;
        let workers = &self.workers;
        let scratch = &mut self.scratch;
        match &mut self.plan {
            Plan::Float { steps, buffers } => {
                buffers[0].copy_from_slice(x);
                for (i, step) in steps.iter().enumerate() {
                    let (done, rest) = buffers.split_at_mut(i + 1);
                    run_float(workers, scratch, &step.op, &step.inputs, done, &mut rest[0]);
                }
            }
            Plan::Quant { input, steps, buffers, probs, .. } => {
                let q = *input;
                workers.for_rows(&mut buffers[0], 1, scratch, |first, out, _| {
                    int8::quantize_into(&x[first..first + out.len()], q, out)
                });
                for (i, step) in steps.iter().enumerate() {
                    let (done, rest) = buffers.split_at_mut(i + 1);
                    run_quant(workers, scratch, &step.op, &step.inputs, done, &mut rest[0], &mut probs[i + 1]);
                }
            }
        }
        Ok(())
    }

    /// Real-valued activations of every edge from the last float run:
    /// `(edge name, values)` for the input and each node.
    pub fn edge_values(&self) -> Result<Vec<(&str, &[f32])>> {
        let Plan::Float { buffers, .. } = &self.plan else {
            return Err(Error::graph("edge values are only recorded by the float path"));
        };
        let mut out = vec![(INPUT, buffers[0].as_slice())];
        out.extend(self.ids.iter().map(String::as_str).zip(buffers[1..].iter().map(Vec::as_slice)));
        Ok(out)
    }
}

fn max_scratch(graph: &GraphSpec, shapes: &[Shape]) -> usize {
    let widest = shapes.iter().map(|s| *s.dims().last().unwrap()).max().unwrap_or(0);
    let fc = graph.weights.values().map(|t| t.dims()[0]).max().unwrap_or(0);
    4 * widest.max(fc)
}

fn float_weights(graph: &GraphSpec, name: &str) -> Result<Vec<f32>> {
    let t = graph.weight(name)?;
    t.as_f32()
        .map(<[f32]>::to_vec)
        .ok_or_else(|| Error::graph(format!("tensor '{name}' must be f32 in a float graph")))
}

fn float_op(graph: &GraphSpec, i: usize, input: &Shape, output: &Shape) -> Result<FloatOp> {
    let node = &graph.nodes[i];
    let bias = node.bias.as_deref().map(|b| float_weights(graph, b)).transpose()?;
    Ok(match node.kind {
        OpKind::Conv2D => {
            let geo = graph.conv_geometry(node, input)?;
            let w = float_weights(graph, node.weight.as_deref().unwrap())?;
            let w = pack_ohwi_to_hwio(&w, geo.out_c, geo.kernel_h, geo.kernel_w, geo.in_c);
            if is_pointwise(&geo) {
                FloatOp::Pointwise { cin: geo.in_c, cout: geo.out_c, w, bias }
            } else {
                FloatOp::Conv { geo, w, bias }
            }
        }
        OpKind::DepthwiseConv2D => {
            let geo = graph.conv_geometry(node, input)?;
            let w = float_weights(graph, node.weight.as_deref().unwrap())?;
            FloatOp::Depthwise { geo, w, bias }
        }
        OpKind::FullyConnected => {
            let w = float_weights(graph, node.weight.as_deref().unwrap())?;
            let n_out = output.numel();
            FloatOp::FullyConnected { n_out, w: float::transpose(&w, n_out, input.numel()), bias }
        }
        OpKind::ReLU6 => FloatOp::Relu6,
        OpKind::Add => FloatOp::Add,
        OpKind::GlobalAvgPool => {
            let d = input.dims();
            FloatOp::GlobalAvgPool { channels: d[3], pixels: d[1] * d[2] }
        }
        OpKind::Softmax => FloatOp::Softmax { row: *output.dims().last().unwrap() },
    })
}

fn is_pointwise(geo: &ConvGeometry) -> bool {
    geo.kernel_h == 1 && geo.kernel_w == 1 && geo.stride == 1 && geo.out_h == geo.in_h && geo.out_w == geo.in_w
}

fn run_float(
    workers: &Workers,
    scratch: &mut [Vec<i32>],
    op: &FloatOp,
    inputs: &[usize],
    done: &[Vec<f32>],
    out: &mut [f32],
) {
    let x = &done[inputs[0]];
    match op {
        FloatOp::Conv { geo, w, bias } => workers.for_rows(out, geo.out_c, scratch, |first, o, _| {
            float::conv(geo, x, w, bias.as_deref(), first, o)
        }),
        FloatOp::Pointwise { cin, cout, w, bias } => workers.for_rows(out, *cout, scratch, |first, o, _| {
            float::pointwise(*cin, *cout, x, w, bias.as_deref(), first, o)
        }),
        FloatOp::Depthwise { geo, w, bias } => workers.for_rows(out, geo.out_c, scratch, |first, o, _| {
            float::depthwise(geo, x, w, bias.as_deref(), first, o)
        }),
        FloatOp::FullyConnected { n_out, w, bias } => workers.for_rows(out, 1, scratch, |first, o, _| {
            float::fully_connected(*n_out, x, w, bias.as_deref(), first, o)
        }),
        FloatOp::Relu6 => {
            workers.for_rows(out, 1, scratch, |first, o, _| float::relu6(&x[first..first + o.len()], o))
        }
        FloatOp::Add => {
            let y = &done[inputs[1]];
            workers.for_rows(out, 1, scratch, |first, o, _| {
                let r = first..first + o.len();
                float::add(&x[r.clone()], &y[r], o)
            })
        }
        FloatOp::GlobalAvgPool { channels, pixels } => workers.for_rows(out, 1, scratch, |first, o, _| {
            float::global_avg_pool(*channels, *pixels, x, first, o)
        }),
        FloatOp::Softmax { row } => workers.for_rows(out, *row, scratch, |first, o, _| {
            for (k, r) in o.chunks_exact_mut(*row).enumerate() {
                let start = (first + k) * row;
                float::softmax_row(&x[start..start + row], r);
            }
        }),
    }
}

/// Integer weights widened to i16, with per-output-channel real scales.
fn int_weights(graph: &GraphSpec, name: &str, channel_axis: usize) -> Result<(Vec<i16>, Vec<f32>)> {
    let t = graph.weight(name)?;
    let data = t.as_i8().ok_or_else(|| Error::graph(format!("tensor '{name}' must be i8 in a quantized graph")))?;
    let channels = t.dims()[channel_axis];
    let scales = match t.quant() {
        Some(Quant::PerChannel(pc)) if pc.axis == channel_axis => pc.scales.clone(),
        Some(Quant::PerTensor(q)) if q.zero_point == 0 => vec![q.scale; channels],
        _ => {
            return Err(Error::Quant(format!(
                "tensor '{name}' needs symmetric quantization along axis {channel_axis}"
            )))
        }
    };
    if data.contains(&i8::MIN) {
        return Err(Error::Quant(format!("tensor '{name}' uses -128; symmetric weights are limited to +-127")));
    }
    Ok((data.iter().map(|&v| v as i16).collect(), scales))
}

fn int_bias(graph: &GraphSpec, name: Option<&str>, acc_scales: &[f32]) -> Result<Vec<i32>> {
    let Some(name) = name else { return Ok(vec![0; acc_scales.len()]) };
    let t = graph.weight(name)?;
    if let Some(v) = t.as_i32() {
        return Ok(v.to_vec());
    }
    let v = t.as_f32().ok_or_else(|| Error::Quant(format!("bias '{name}' must be i32 or f32")))?;
    Ok(v.iter().zip(acc_scales).map(|(&b, &s)| crate::tensor::round_half_away(b / s)).collect())
}

fn requant(
    graph: &GraphSpec,
    bias: Option<&str>,
    in_scale: f32,
    w_scales: &[f32],
    out: Option<QuantParams>,
) -> Result<int8::Requant> {
    let out = out.expect("non-softmax nodes have params");
    let acc_scales: Vec<f32> = w_scales.iter().map(|&s| in_scale * s).collect();
    let multiplier: Vec<f32> = acc_scales.iter().map(|&s| s / out.scale).collect();
    if multiplier.iter().any(|m| !m.is_finite()) {
        return Err(Error::Quant("requantization multiplier is not finite".into()));
    }
    Ok(int8::Requant {
        bias: int_bias(graph, bias, &acc_scales)?,
        multiplier,
        out_zero_point: out.zero_point,
    })
}

fn quant_op(
    graph: &GraphSpec,
    i: usize,
    input: &Shape,
    output: &Shape,
    ins: &[QuantParams],
    out: Option<QuantParams>,
) -> Result<QuantOp> {
    let node = &graph.nodes[i];
    let qi = ins[0];
    let bias = node.bias.as_deref();
    Ok(match node.kind {
        OpKind::Conv2D => {
            let geo = graph.conv_geometry(node, input)?;
            let (w, scales) = int_weights(graph, node.weight.as_deref().unwrap(), 0)?;
            let w = pack_ohwi_to_hwio(&w, geo.out_c, geo.kernel_h, geo.kernel_w, geo.in_c);
            let rq = requant(graph, bias, qi.scale, &scales, out)?;
            if is_pointwise(&geo) {
                QuantOp::Pointwise { in_zp: qi.zero_point, w: int8::PackedPointwise::new(geo.in_c, geo.out_c, &w), rq }
            } else {
                QuantOp::Conv { geo, in_zp: qi.zero_point, w, rq }
            }
        }
        OpKind::DepthwiseConv2D => {
            let geo = graph.conv_geometry(node, input)?;
            let (w, scales) = int_weights(graph, node.weight.as_deref().unwrap(), 3)?;
            let rq = requant(graph, bias, qi.scale, &scales, out)?;
            QuantOp::Depthwise { geo, in_zp: qi.zero_point, w, rq }
        }
        OpKind::FullyConnected => {
            let (w, scales) = int_weights(graph, node.weight.as_deref().unwrap(), 0)?;
            let n_out = output.numel();
            let rq = requant(graph, bias, qi.scale, &scales, out)?;
            QuantOp::FullyConnected { n_out, in_zp: qi.zero_point, w: float::transpose(&w, n_out, input.numel()), rq }
        }
        OpKind::ReLU6 => QuantOp::Relu6 { lut: Box::new(int8::relu6_table(qi, out.unwrap())) },
        OpKind::Add => QuantOp::Add { a: qi, b: ins[1], out: out.unwrap() },
        OpKind::GlobalAvgPool => {
            let d = input.dims();
            QuantOp::GlobalAvgPool { channels: d[3], pixels: d[1] * d[2], input: qi, out: out.unwrap() }
        }
        OpKind::Softmax => QuantOp::Softmax { row: *output.dims().last().unwrap(), input: qi },
    })
}

fn run_quant(
    workers: &Workers,
    scratch: &mut [Vec<i32>],
    op: &QuantOp,
    inputs: &[usize],
    done: &[Vec<i8>],
    out: &mut [i8],
    probs: &mut [f32],
) {
    let x = &done[inputs[0]];
    match op {
        QuantOp::Conv { geo, in_zp, w, rq } => workers.for_rows(out, geo.out_c, scratch, |first, o, acc| {
            int8::conv(geo, x, *in_zp, w, rq, first, o, acc)
        }),
        QuantOp::Pointwise { in_zp, w, rq } => workers.for_rows(out, w.cout, scratch, |first, o, acc| {
            int8::pointwise(w, x, *in_zp, rq, first, o, acc)
        }),
        QuantOp::Depthwise { geo, in_zp, w, rq } => workers.for_rows(out, geo.out_c, scratch, |first, o, acc| {
            int8::depthwise(geo, x, *in_zp, w, rq, first, o, acc)
        }),
        QuantOp::FullyConnected { n_out, in_zp, w, rq } => workers.for_rows(out, 1, scratch, |first, o, acc| {
            int8::fully_connected(*n_out, x, *in_zp, w, rq, first, o, acc)
        }),
        QuantOp::Relu6 { lut } => workers.for_rows(out, 1, scratch, |first, o, _| {
            int8::lookup(lut, &x[first..first + o.len()], o)
        }),
        QuantOp::Add { a, b, out: qo } => {
            let y = &done[inputs[1]];
            workers.for_rows(out, 1, scratch, |first, o, _| {
                let r = first..first + o.len();
                int8::add(&x[r.clone()], *a, &y[r], *b, *qo, o)
            })
        }
        QuantOp::GlobalAvgPool { channels, pixels, input, out: qo } => {
            workers.for_rows(out, 1, scratch, |first, o, acc| {
                int8::global_avg_pool(*channels, *pixels, x, *input, *qo, first, o, acc)
            })
        }
        QuantOp::Softmax { row, input } => {
            for (xs, p) in x.chunks_exact(*row).zip(probs.chunks_exact_mut(*row)) {
                for (d, &v) in p.iter_mut().zip(xs) {
                    *d = crate::tensor::dequantize(v, *input);
                }
                float::softmax_in_place(p);
            }
        }
    }
}
