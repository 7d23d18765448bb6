//! Dense tensors and the 8-bit affine quantization arithmetic shared by
//! every other module.
//!
//! Activations are NHWC, conv weights OHWI, biases rank 1. All payloads are
//! contiguous and row-major.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have rank >= 1"));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension {d} in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Affine mapping `real = scale * (q - zero_point)` for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Quant(format!("scale must be positive and finite, got {scale}")));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::Quant(format!("zero point {zero_point} outside int8 range")));
        }
        Ok(QuantParams { scale, zero_point })
    }
}

/// Symmetric per-channel parameters; zero points are implicitly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerChannelQuant {
    pub axis: usize,
    pub scales: Vec<f32>,
}

impl PerChannelQuant {
    pub fn new(axis: usize, scales: Vec<f32>) -> Result<Self> {
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Quant(format!("per-channel scale must be positive, got {s}")));
        }
        Ok(PerChannelQuant { axis, scales })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Quant {
    PerTensor(QuantParams),
    PerChannel(PerChannelQuant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
    /// Quantized biases: `real = scale[c] * v`.
    I32,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::I32 => "i32",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// A dense tensor. Quantized dtypes always carry their quantization
/// parameters; float tensors never do.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
    quant: Option<Quant>,
}

impl Tensor {
    pub fn new(shape: Shape, data: TensorData, quant: Option<Quant>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "payload has {} elements but shape {shape} needs {}",
                data.len(),
                shape.numel()
            )));
        }
        match (&data, &quant) {
            (TensorData::F32(_), None) => {}
            (TensorData::F32(_), Some(_)) => {
                return Err(Error::Quant("f32 tensor cannot carry quantization parameters".into()))
            }
            (TensorData::I8(_), Some(q)) => check_quant(&shape, q)?,
            (TensorData::I32(_), Some(q @ Quant::PerChannel(_))) => check_quant(&shape, q)?,
            (TensorData::I32(_), Some(Quant::PerTensor(_))) => {
                return Err(Error::Quant("i32 tensors use per-channel scales".into()))
            }
            (_, None) => {
                return Err(Error::Quant("quantized tensor requires quantization parameters".into()))
            }
        }
        Ok(Tensor { shape, data, quant })
    }

    pub fn from_f32(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, TensorData::F32(data), None)
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Tensor::new(shape, TensorData::F32(vec![0.0; n]), None)
    }

    pub fn from_i8(dims: impl Into<Vec<usize>>, data: Vec<i8>, quant: Quant) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, TensorData::I8(data), Some(quant))
    }

    pub fn from_i32(dims: impl Into<Vec<usize>>, data: Vec<i32>, quant: PerChannelQuant) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, TensorData::I32(data), Some(Quant::PerChannel(quant)))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn quant(&self) -> Option<&Quant> {
        self.quant.as_ref()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// Real-valued view of the tensor (dequantizing if necessary).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match (&self.data, &self.quant) {
            (TensorData::F32(v), _) => v.clone(),
            (TensorData::I8(v), Some(Quant::PerTensor(q))) => {
                v.iter().map(|&x| dequantize(x, *q)).collect()
            }
            (TensorData::I8(v), Some(Quant::PerChannel(pc))) => {
                let scales = expand_channel_scales(&self.shape, pc);
                v.iter().zip(scales).map(|(&x, s)| s * x as f32).collect()
            }
            (TensorData::I32(v), Some(Quant::PerChannel(pc))) => {
                let scales = expand_channel_scales(&self.shape, pc);
                v.iter().zip(scales).map(|(&x, s)| s * x as f32).collect()
            }
            _ => unreachable!("constructor enforces dtype/quant pairing"),
        }
    }
}

fn check_quant(shape: &Shape, q: &Quant) -> Result<()> {
    match q {
        Quant::PerTensor(p) => {
            QuantParams::new(p.scale, p.zero_point)?;
        }
        Quant::PerChannel(pc) => {
            let Some(&channels) = shape.dims().get(pc.axis) else {
                return Err(Error::Quant(format!("quant axis {} out of range for {shape}", pc.axis)));
            };
            if pc.scales.len() != channels {
                return Err(Error::Quant(format!(
                    "{} per-channel scales for axis of size {channels}",
                    pc.scales.len()
                )));
            }
            PerChannelQuant::new(pc.axis, pc.scales.clone())?;
        }
    }
    Ok(())
}

/// Per-element scale for a per-channel quantized tensor.
pub(crate) fn expand_channel_scales<'a>(shape: &Shape, pc: &'a PerChannelQuant) -> impl Iterator<Item = f32> + 'a {
    let dims = shape.dims();
    let inner: usize = dims[pc.axis + 1..].iter().product();
    let channels = dims[pc.axis];
    (0..shape.numel()).map(move |i| pc.scales[(i / inner) % channels])
}

/// Rounds half away from zero. Exact for every finite `f32`: the `f64`
/// addition cannot lose bits and the cast truncates toward zero.
#[inline(always)]
pub fn round_half_away(v: f32) -> i32 {
    let v = v as f64;
    (v + 0.5f64.copysign(v)) as i32
}

#[inline]
pub fn quantize(x: f32, q: QuantParams) -> i8 {
    (round_half_away(x / q.scale).saturating_add(q.zero_point)).clamp(-128, 127) as i8
}

#[inline]
pub fn dequantize(v: i8, q: QuantParams) -> f32 {
    q.scale * (v as i32 - q.zero_point) as f32
}

/// Affine parameters covering `[min, max]`, widened so 0.0 is exact.
pub fn quant_params_from_range(min: f32, max: f32) -> Result<QuantParams> {
    if min.is_nan() || max.is_nan() || min > max {
        return Err(Error::invalid(format!("invalid calibration range [{min}, {max}]")));
    }
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    if lo == 0.0 && hi == 0.0 {
        return Ok(QuantParams { scale: 1.0, zero_point: 0 });
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = round_half_away(-128.0 - lo / scale).clamp(-128, 127);
    QuantParams::new(scale, zero_point)
}

/// Symmetric scale for one weight channel: `max|w| / 127`, or 1.0 for an
/// all-zero channel.
pub fn symmetric_scale(values: impl IntoIterator<Item = f32>) -> f32 {
    let max_abs = values.into_iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / 127.0
    }
}

#[inline]
pub fn quantize_symmetric(x: f32, scale: f32) -> i8 {
    round_half_away(x / scale).clamp(-127, 127) as i8
}
