//! RTEN raw-tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RTEN" | version u8 = 1 | dtype u8 | rank u8 | pad u8 = 0 | dims u32 x rank
//! dtype 0 (f32):                          payload f32 x n
//! dtype 1 (i8, per-tensor):  scale f32 | zero_point i32 | payload i8 x n
//! dtype 2 (i8, per-channel): axis u32 | scales f32 x dims[axis] | payload i8 x n
//! dtype 3 (i32, per-channel): axis u32 | scales f32 x dims[axis] | payload i32 x n
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{PerChannelQuant, Quant, QuantParams, Shape, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;
const DTYPE_I8_PER_CHANNEL: u8 = 2;
const DTYPE_I32_PER_CHANNEL: u8 = 3;

pub fn write_raw_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<usize> {
    let bytes = encode_raw_tensor(t)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn encode_raw_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.len() > u8::MAX as usize {
        return Err(Error::format("rank exceeds 255"));
    }
    let dtype = match (t.data(), t.quant()) {
        (TensorData::F32(_), _) => DTYPE_F32,
        (TensorData::I8(_), Some(Quant::PerTensor(_))) => DTYPE_I8,
        (TensorData::I8(_), Some(Quant::PerChannel(_))) => DTYPE_I8_PER_CHANNEL,
        (TensorData::I32(_), _) => DTYPE_I32_PER_CHANNEL,
        (TensorData::I8(_), None) => unreachable!("i8 tensors carry quant params"),
    };
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, dims.len() as u8, 0]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.quant() {
        Some(Quant::PerTensor(q)) => {
            out.extend_from_slice(&q.scale.to_le_bytes());
            out.extend_from_slice(&q.zero_point.to_le_bytes());
        }
        Some(Quant::PerChannel(pc)) => {
            out.extend_from_slice(&(pc.axis as u32).to_le_bytes());
            for s in &pc.scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        None => {}
    }
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Reads exactly one tensor from the stream. A short stream is an error.
pub fn read_raw_tensor<R: Read>(source: &mut R) -> Result<Tensor> {
    let mut r = Reader(source);
    let magic: [u8; 4] = r.array()?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad RTEN magic {magic:?}")));
    }
    let [version, dtype, rank, _pad] = r.array()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported RTEN version {version}")));
    }
    if dtype > DTYPE_I32_PER_CHANNEL {
        return Err(Error::format(format!("unknown RTEN dtype {dtype}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(r.array()?) as usize);
    }
    let shape = Shape::new(dims).map_err(|e| Error::format(e.to_string()))?;
    let n = shape.numel();
    let tensor = match dtype {
        DTYPE_F32 => {
            let raw = r.bytes(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::new(shape, TensorData::F32(v), None)
        }
        DTYPE_I8 => {
            let scale = f32::from_le_bytes(r.array()?);
            let zero_point = i32::from_le_bytes(r.array()?);
            let q = QuantParams::new(scale, zero_point).map_err(|e| Error::format(e.to_string()))?;
            let v = r.bytes(n)?.into_iter().map(|b| b as i8).collect();
            Tensor::new(shape, TensorData::I8(v), Some(Quant::PerTensor(q)))
        }
        _ => {
            let axis = u32::from_le_bytes(r.array()?) as usize;
            let channels = *shape
                .dims()
                .get(axis)
                .ok_or_else(|| Error::format(format!("quant axis {axis} out of range")))?;
            let mut scales = Vec::with_capacity(channels);
            for _ in 0..channels {
                scales.push(f32::from_le_bytes(r.array()?));
            }
            let pc = Quant::PerChannel(PerChannelQuant { axis, scales });
            if dtype == DTYPE_I8_PER_CHANNEL {
                let v = r.bytes(n)?.into_iter().map(|b| b as i8).collect();
                Tensor::new(shape, TensorData::I8(v), Some(pc))
            } else {
                let raw = r.bytes(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
                let v = raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::new(shape, TensorData::I32(v), Some(pc))
            }
        }
    };
    tensor.map_err(|e| Error::format(e.to_string()))
}

/// Decodes a complete buffer; trailing bytes are a length mismatch.
pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = io::Cursor::new(bytes);
    let t = read_raw_tensor(&mut cursor)?;
    let used = cursor.position() as usize;
    if used != bytes.len() {
        return Err(Error::format(format!(
            "payload length mismatch: {} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn load_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_raw_tensor(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn save_raw_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_raw_tensor(t)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

struct Reader<'a, R>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = self.0.by_ref().take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::format(format!("truncated tensor: expected {n} payload bytes, got {got}")));
        }
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::format("truncated tensor header"),
            _ => Error::Io(e),
        })
    }
}
