//! EMDL model container.
//!
//! ```text
//! "EMDL" | version u16 = 1 | flags u16 = 0 | header_len u32 | header JSON
//! zero padding to a 64-byte boundary
//! blob section: one 64-byte aligned blob per tensor, then the
//! activation parameter table
//! ```
//!
//! Integers and floats in blobs are little-endian. The header is compact
//! JSON with no floating-point fields; blob offsets are relative to the
//! start of the blob section. Blob layouts per encoding (`n` elements,
//! `C` channels along `axis`, `k` codebook entries):
//!
//! | tag  | layout |
//! |------|--------|
//! | F32  | f32 x n |
//! | Q8   | i8 x n, then f32 x C (per channel) or f32 scale + i32 zero point |
//! | I32  | i32 x n, then f32 x C |
//! | CL8  | u8 index x n, f32 x k, exempt mask |
//! | CL4  | 4-bit index x n (low nibble first), f32 x k, exempt mask |
//! | CLQ8 | 4-bit (k <= 16) or u8 index x n, i8 code x k, f32 x C, exempt mask |
//!
//! The exempt mask (present when `preserved_zero` is true) holds one bit per
//! element, least significant bit first; a set bit marks an element that is
//! exactly zero and outside the codebook. The activation table stores
//! `scale f32 | zero_point i32` per edge in the order of `activations.edges`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, NodeSpec};
use crate::model::{ClusterCodebook, Model};
use crate::rten::load_raw_tensor;
use crate::tensor::{quantize_symmetric, PerChannelQuant, Quant, QuantParams, Shape, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"EMDL";
pub const VERSION: u16 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Encoding {
    F32,
    Q8,
    I32,
    CL8,
    CL4,
    CLQ8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preserved_zero: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTable {
    pub edges: Vec<String>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub name: String,
    pub labels: Vec<String>,
    pub input_shape: Vec<usize>,
    pub output: String,
    pub nodes: Vec<NodeSpec>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<ActivationTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSize {
    pub name: String,
    pub encoding: Encoding,
    pub elements: usize,
    pub bytes: u64,
}

/// Exact blob byte counts of a model's tensors and activation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSize {
    pub tensors: Vec<TensorSize>,
    pub activation_bytes: u64,
    pub by_encoding: BTreeMap<Encoding, u64>,
    /// Tensor blobs plus the activation table; excludes header and padding.
    pub total: u64,
}

/// Storage tag a tensor is written with.
pub fn encoding_of(t: &Tensor, codebook: Option<&ClusterCodebook>) -> Encoding {
    match (t.data(), codebook) {
        (TensorData::F32(_), None) => Encoding::F32,
        (TensorData::F32(_), Some(cb)) if cb.centroids.len() <= 16 => Encoding::CL4,
        (TensorData::F32(_), Some(_)) => Encoding::CL8,
        (TensorData::I8(_), None) => Encoding::Q8,
        (TensorData::I8(_), Some(_)) => Encoding::CLQ8,
        (TensorData::I32(_), _) => Encoding::I32,
    }
}

/// Blob length for `n` elements, `channels` scales (0 for a per-tensor
/// Q8 tensor), codebook length `k` and an optional exempt mask.
pub fn blob_len(encoding: Encoding, n: usize, channels: usize, k: usize, mask: bool) -> u64 {
    let mask = if mask { n.div_ceil(8) } else { 0 };
    let indices = |k: usize| if k <= 16 { n.div_ceil(2) } else { n };
    (match encoding {
        Encoding::F32 => 4 * n,
        Encoding::Q8 if channels == 0 => n + 8,
        Encoding::Q8 => n + 4 * channels,
        Encoding::I32 => 4 * n + 4 * channels,
        Encoding::CL8 => n + 4 * k + mask,
        Encoding::CL4 => n.div_ceil(2) + 4 * k + mask,
        Encoding::CLQ8 => indices(k) + k + 4 * channels + mask,
    }) as u64
}

pub fn encoded_size(m: &Model) -> Result<EncodedSize> {
    let mut tensors = Vec::with_capacity(m.graph.weights.len());
    let mut by_encoding = BTreeMap::new();
    for (name, t) in &m.graph.weights {
        let (entry, blob) = encode_tensor(name, t, m.codebooks.get(name))?;
        *by_encoding.entry(entry.encoding).or_insert(0) += blob.len() as u64;
        tensors.push(TensorSize { name: name.clone(), encoding: entry.encoding, elements: t.numel(), bytes: blob.len() as u64 });
    }
    let activation_bytes = 8 * m.activations.len() as u64;
    let total = tensors.iter().map(|t| t.bytes).sum::<u64>() + activation_bytes;
    Ok(EncodedSize { tensors, activation_bytes, by_encoding, total })
}

pub fn save<W: Write>(m: &Model, sink: &mut W) -> Result<usize> {
    let bytes = to_bytes(m)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn save_file(m: &Model, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = to_bytes(m)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load<R: Read>(source: &mut R) -> Result<Model> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn load_file(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

pub fn to_bytes(m: &Model) -> Result<Vec<u8>> {
    m.validate()?;
    let mut blobs: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(m.graph.weights.len());
    for (name, t) in &m.graph.weights {
        let (mut entry, blob) = encode_tensor(name, t, m.codebooks.get(name))?;
        entry.offset = push_blob(&mut blobs, &blob);
        tensors.push(entry);
    }
    if let Some(extra) = m.codebooks.keys().find(|k| !m.graph.weights.contains_key(*k)) {
        return Err(Error::format(format!("codebook for unknown tensor '{extra}'")));
    }
    let activations = (!m.activations.is_empty()).then(|| {
        let mut table = Vec::with_capacity(8 * m.activations.len());
        for q in m.activations.values() {
            table.extend_from_slice(&q.scale.to_le_bytes());
            table.extend_from_slice(&q.zero_point.to_le_bytes());
        }
        ActivationTable {
            edges: m.activations.keys().cloned().collect(),
            offset: push_blob(&mut blobs, &table),
            length: table.len() as u64,
        }
    });
    let header = Header {
        name: m.name.clone(),
        labels: m.labels.clone(),
        input_shape: m.graph.input_shape.dims().to_vec(),
        output: m.graph.output.clone(),
        nodes: m.graph.nodes.clone(),
        tensors,
        activations,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::format("header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + ALIGN + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(out.len().next_multiple_of(ALIGN), 0);
    out.extend_from_slice(&blobs);
    Ok(out)
}

/// Appends `blob` at the next aligned offset and returns that offset.
fn push_blob(blobs: &mut Vec<u8>, blob: &[u8]) -> u64 {
    blobs.resize(blobs.len().next_multiple_of(ALIGN), 0);
    let offset = blobs.len() as u64;
    blobs.extend_from_slice(blob);
    offset
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(format!("file too short for an EMDL preamble ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("bad magic, not an EMDL file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(format!("unsupported EMDL version {version}")));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    if flags != 0 {
        return Err(Error::format(format!("unknown EMDL flags {flags:#06x}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..json_end])
        .map_err(|e| Error::format(format!("malformed header JSON: {e}")))?;
    Ok((header, json_end.next_multiple_of(ALIGN)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, blob_start) = read_header(bytes)?;
    let section = bytes.get(blob_start..).unwrap_or(&[]);
    let mut spans: Vec<(u64, u64, &str)> = header.tensors.iter().map(|t| (t.offset, t.length, t.name.as_str())).collect();
    if let Some(a) = &header.activations {
        spans.push((a.offset, a.length, "activation table"));
    }
    check_spans(&mut spans, section.len() as u64)?;
    if let Some(&(offset, length, _)) = spans.last() {
        if blob_start + (offset + length) as usize != bytes.len() {
            return Err(Error::format("trailing bytes after the last blob"));
        }
    }

    let mut weights = BTreeMap::new();
    let mut codebooks = BTreeMap::new();
    for entry in &header.tensors {
        let blob = &section[entry.offset as usize..(entry.offset + entry.length) as usize];
        let (t, cb) = decode_tensor(entry, blob)?;
        if weights.insert(entry.name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor '{}'", entry.name)));
        }
        if let Some(cb) = cb {
            codebooks.insert(entry.name.clone(), cb);
        }
    }
    let mut activations = BTreeMap::new();
    if let Some(a) = &header.activations {
        if a.length != 8 * a.edges.len() as u64 {
            return Err(Error::format("activation table length does not match its edge list"));
        }
        let blob = &section[a.offset as usize..(a.offset + a.length) as usize];
        for (edge, rec) in a.edges.iter().zip(blob.chunks_exact(8)) {
            let scale = f32::from_le_bytes(rec[..4].try_into().unwrap());
            let zp = i32::from_le_bytes(rec[4..].try_into().unwrap());
            if activations.insert(edge.clone(), QuantParams::new(scale, zp)?).is_some() {
                return Err(Error::format(format!("duplicate activation edge '{edge}'")));
            }
        }
    }
    let graph = GraphSpec {
        input_shape: Shape::new(header.input_shape)?,
        nodes: header.nodes,
        output: header.output,
        weights,
    };
    let model = Model { name: header.name, labels: header.labels, graph, activations, codebooks };
    model.validate()?;
    Ok(model)
}

fn check_spans(spans: &mut [(u64, u64, &str)], section_len: u64) -> Result<()> {
    spans.sort();
    let mut end = 0u64;
    for &(offset, length, name) in spans.iter() {
        if offset % ALIGN as u64 != 0 {
            return Err(Error::format(format!("blob '{name}' at offset {offset} is not {ALIGN}-byte aligned")));
        }
        if offset < end {
            return Err(Error::format(format!("blob '{name}' overlaps the previous blob")));
        }
        end = offset
            .checked_add(length)
            .filter(|&e| e <= section_len)
            .ok_or_else(|| Error::format(format!("blob '{name}' extends past the end of the file")))?;
    }
    Ok(())
}

fn encode_tensor(name: &str, t: &Tensor, cb: Option<&ClusterCodebook>) -> Result<(TensorEntry, Vec<u8>)> {
    let encoding = encoding_of(t, cb);
    let mut entry = TensorEntry {
        name: name.to_string(),
        shape: t.dims().to_vec(),
        encoding,
        offset: 0,
        length: 0,
        axis: None,
        codebook_len: cb.map(|c| c.centroids.len()),
        preserved_zero: cb.map(ClusterCodebook::preserved_zero),
    };
    let mut out = Vec::new();
    match (t.data(), t.quant(), cb) {
        (TensorData::F32(v), _, None) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        (TensorData::F32(v), _, Some(cb)) => {
            cb.check(v.len())?;
            let decoded = cb.decode();
            if v.iter().zip(&decoded).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::format(format!("tensor '{name}' does not match its codebook")));
            }
            push_indices(&mut out, &cb.assignment, cb.centroids.len() <= 16);
            cb.centroids.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
            push_mask(&mut out, cb);
        }
        (TensorData::I8(v), Some(q), None) => {
            out.extend(v.iter().map(|&x| x as u8));
            match q {
                Quant::PerTensor(p) => {
                    out.extend_from_slice(&p.scale.to_le_bytes());
                    out.extend_from_slice(&p.zero_point.to_le_bytes());
                }
                Quant::PerChannel(pc) => {
                    entry.axis = Some(pc.axis);
                    pc.scales.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
                }
            }
        }
        (TensorData::I8(v), Some(Quant::PerChannel(pc)), Some(cb)) => {
            cb.check(v.len())?;
            let s = pc.scales[0];
            if pc.scales.iter().any(|&x| x != s) {
                return Err(Error::format(format!("clustered tensor '{name}' must share one scale")));
            }
            let codes: Vec<i8> = cb.centroids.iter().map(|&c| quantize_symmetric(c, s)).collect();
            let consistent = codes.iter().zip(&cb.centroids).all(|(&q, &c)| (q as f32 * s).to_bits() == c.to_bits())
                && v.iter().enumerate().all(|(i, &x)| {
                    x == if cb.is_exempt(i) { 0 } else { codes[cb.assignment[i] as usize] }
                });
            if !consistent {
                return Err(Error::format(format!("tensor '{name}' does not match its quantized codebook")));
            }
            entry.axis = Some(pc.axis);
            push_indices(&mut out, &cb.assignment, codes.len() <= 16);
            out.extend(codes.iter().map(|&c| c as u8));
            pc.scales.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
            push_mask(&mut out, cb);
        }
        (TensorData::I8(_), _, Some(_)) => {
            return Err(Error::format(format!("clustered tensor '{name}' must use per-channel scales")));
        }
        (TensorData::I32(v), Some(Quant::PerChannel(pc)), _) => {
            entry.axis = Some(pc.axis);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            pc.scales.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
        }
        _ => unreachable!("tensor constructor enforces dtype/quant pairing"),
    }
    if encoding == Encoding::I32 && cb.is_some() {
        return Err(Error::format(format!("i32 tensor '{name}' cannot be clustered")));
    }
    entry.length = out.len() as u64;
    debug_assert_eq!(entry.length, expected_len(&entry).unwrap());
    Ok((entry, out))
}

fn expected_len(e: &TensorEntry) -> Result<u64> {
    let n: usize = e.shape.iter().product();
    let channels = match e.axis {
        Some(a) => *e.shape.get(a).ok_or_else(|| Error::format(format!("tensor '{}': axis {a} out of range", e.name)))?,
        None => 0,
    };
    let k = e.codebook_len.unwrap_or(0);
    let clustered = matches!(e.encoding, Encoding::CL8 | Encoding::CL4 | Encoding::CLQ8);
    if clustered != (k > 0) {
        return Err(Error::format(format!("tensor '{}': codebook length does not match encoding", e.name)));
    }
    if e.encoding == Encoding::CL4 && k > 16 {
        return Err(Error::format(format!("tensor '{}': CL4 needs at most 16 centroids, has {k}", e.name)));
    }
    if matches!(e.encoding, Encoding::CL8 | Encoding::CLQ8) && k > 256 {
        return Err(Error::format(format!("tensor '{}': codebook of {k} exceeds 256", e.name)));
    }
    if matches!(e.encoding, Encoding::I32 | Encoding::CLQ8) && e.axis.is_none() {
        return Err(Error::format(format!("tensor '{}': {:?} requires an axis", e.name, e.encoding)));
    }
    Ok(blob_len(e.encoding, n, channels, k, e.preserved_zero.unwrap_or(false)))
}

fn decode_tensor(e: &TensorEntry, blob: &[u8]) -> Result<(Tensor, Option<ClusterCodebook>)> {
    let expected = expected_len(e)?;
    if blob.len() as u64 != expected {
        return Err(Error::format(format!(
            "tensor '{}': {:?} blob is {} bytes, expected {expected}",
            e.name,
            e.encoding,
            blob.len()
        )));
    }
    let shape = Shape::new(e.shape.clone())?;
    let n = shape.numel();
    let k = e.codebook_len.unwrap_or(0);
    let mut r = Cursor(blob);
    let per_channel = |r: &mut Cursor| -> Result<PerChannelQuant> {
        let axis = e.axis.expect("checked by expected_len");
        PerChannelQuant::new(axis, r.f32s(e.shape[axis]))
    };
    Ok(match e.encoding {
        Encoding::F32 => (Tensor::new(shape, TensorData::F32(r.f32s(n)), None)?, None),
        Encoding::Q8 => {
            let data = r.i8s(n);
            let quant = match e.axis {
                Some(_) => Quant::PerChannel(per_channel(&mut r)?),
                None => {
                    let scale = r.f32s(1)[0];
                    let zp = r.i32s(1)[0];
                    Quant::PerTensor(QuantParams::new(scale, zp)?)
                }
            };
            (Tensor::new(shape, TensorData::I8(data), Some(quant))?, None)
        }
        Encoding::I32 => {
            let data = r.i32s(n);
            let quant = Quant::PerChannel(per_channel(&mut r)?);
            (Tensor::new(shape, TensorData::I32(data), Some(quant))?, None)
        }
        Encoding::CL8 | Encoding::CL4 => {
            let assignment = r.indices(n, e.encoding == Encoding::CL4);
            let centroids = r.f32s(k);
            let exempt = r.mask(n, e.preserved_zero.unwrap_or(false));
            let cb = ClusterCodebook { centroids, assignment, exempt };
            cb.check(n)?;
            (Tensor::new(shape, TensorData::F32(cb.decode()), None)?, Some(cb))
        }
        Encoding::CLQ8 => {
            let assignment = r.indices(n, k <= 16);
            let codes = r.i8s(k);
            let pc = per_channel(&mut r)?;
            let exempt = r.mask(n, e.preserved_zero.unwrap_or(false));
            let s = pc.scales[0];
            if pc.scales.iter().any(|&x| x != s) {
                return Err(Error::format(format!("tensor '{}': CLQ8 scales must be equal", e.name)));
            }
            let cb = ClusterCodebook { centroids: codes.iter().map(|&c| c as f32 * s).collect(), assignment, exempt };
            cb.check(n)?;
            let data = (0..n).map(|i| if cb.is_exempt(i) { 0 } else { codes[cb.assignment[i] as usize] }).collect();
            (Tensor::new(shape, TensorData::I8(data), Some(Quant::PerChannel(pc)))?, Some(cb))
        }
    })
}

fn push_indices(out: &mut Vec<u8>, idx: &[u16], packed: bool) {
    if packed {
        for pair in idx.chunks(2) {
            let hi = pair.get(1).copied().unwrap_or(0);
            out.push((pair[0] as u8 & 0x0f) | ((hi as u8 & 0x0f) << 4));
        }
    } else {
        out.extend(idx.iter().map(|&i| i as u8));
    }
}

fn push_mask(out: &mut Vec<u8>, cb: &ClusterCodebook) {
    let Some(mask) = &cb.exempt else { return };
    for bits in mask.chunks(8) {
        out.push(bits.iter().enumerate().fold(0u8, |b, (i, &set)| b | ((set as u8) << i)));
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        head
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
    }

    fn i32s(&mut self, n: usize) -> Vec<i32> {
        self.take(4 * n).chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
    }

    fn i8s(&mut self, n: usize) -> Vec<i8> {
        self.take(n).iter().map(|&b| b as i8).collect()
    }

    fn indices(&mut self, n: usize, packed: bool) -> Vec<u16> {
        if packed {
            let bytes = self.take(n.div_ceil(2));
            (0..n).map(|i| ((bytes[i / 2] >> (4 * (i % 2))) & 0x0f) as u16).collect()
        } else {
            self.take(n).iter().map(|&b| b as u16).collect()
        }
    }

    fn mask(&mut self, n: usize, present: bool) -> Option<Vec<bool>> {
        present.then(|| {
            let bytes = self.take(n.div_ceil(8));
            (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
        })
    }
}

/// Graph description accepted by [`convert`]. Tensors are read from
/// `<weights dir>/<tensor name>.rten`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    pub input_shape: Vec<usize>,
    pub output: String,
    pub nodes: Vec<NodeSpec>,
    /// Per-edge activation parameters, required for int8 weights.
    #[serde(default)]
    pub activations: BTreeMap<String, QuantParams>,
}

/// Assembles a model from a JSON graph description and a directory of RTEN
/// tensors.
pub fn convert(spec: impl AsRef<Path>, weights_dir: impl AsRef<Path>) -> Result<Model> {
    let spec = spec.as_ref();
    let text = fs::read_to_string(spec).map_err(|e| Error::format(format!("{}: {e}", spec.display())))?;
    let file: GraphFile =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", spec.display())))?;
    let mut weights = BTreeMap::new();
    let mut seen = HashSet::new();
    for name in file.nodes.iter().flat_map(NodeSpec::tensor_names) {
        if !seen.insert(name.to_string()) {
            continue;
        }
        let path = weights_dir.as_ref().join(format!("{name}.rten"));
        let t = load_raw_tensor(&path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        weights.insert(name.to_string(), t);
    }
    let name = file
        .name
        .unwrap_or_else(|| spec.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let graph = GraphSpec { input_shape: Shape::new(file.input_shape)?, nodes: file.nodes, output: file.output, weights };
    let model = Model { name, labels: file.labels, graph, activations: file.activations, codebooks: BTreeMap::new() };
    model.validate()?;
    Ok(model)
}
