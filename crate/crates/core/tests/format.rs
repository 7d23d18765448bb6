use emdl::compress::{cluster_weights, optimize_pipeline, CalibrationSource, CompressionConfig};
use emdl::format::{self, encoded_size, read_header, Encoding, Header, ALIGN};
use emdl::graph::{count_params, GraphSpec, NodeSpec, OpKind, Padding, INPUT};
use emdl::mobilenet::{build_mobilenet_v2, Init};
use emdl::rten::save_raw_tensor;
use emdl::tensor::{Shape, Tensor};
use emdl::Model;
use serde_json::json;

fn two_node_model() -> Model {
    let g = GraphSpec {
        input_shape: Shape::new([1, 1, 1, 2]).unwrap(),
        nodes: vec![
            NodeSpec::conv("c", OpKind::Conv2D, INPUT, 1, Padding::Same, "c.w", Some("c.b".into())),
            NodeSpec::new("sm", OpKind::Softmax, &["c"]),
        ],
        output: "sm".into(),
        weights: [
            ("c.w".to_string(), Tensor::from_f32([3, 1, 1, 2], vec![1.0, -2.0, 0.5, 0.25, -0.125, 3.0]).unwrap()),
            ("c.b".to_string(), Tensor::from_f32([3], vec![0.1, 0.2, 0.3]).unwrap()),
        ]
        .into(),
    };
    Model::new("tiny", vec!["a".into(), "b".into(), "c".into()], g)
}

fn small_mobilenet() -> Model {
    Model::new("mnv2", Vec::new(), build_mobilenet_v2(0.35, 7, 32, Init::Random(7)).unwrap())
}

fn compressed(m: &Model, clusters: Option<usize>, quantize: bool) -> Model {
    let cfg = CompressionConfig {
        sparsity: 0.5,
        clusters,
        quantize,
        calibration: CalibrationSource::Random { count: 4, seed: 1 },
        ..Default::default()
    };
    optimize_pipeline(m, &cfg).unwrap().0
}

/// Preamble, header JSON, zero padding to the alignment, then the blob section.
fn assemble(json: &[u8], blobs: &[u8]) -> Vec<u8> {
    let mut out = b"EMDL".to_vec();
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json);
    while !out.len().is_multiple_of(64) {
        out.push(0);
    }
    out.extend_from_slice(blobs);
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn hand_built_two_node_file() {
    let header = concat!(
        r#"{"name":"tiny","labels":["a","b","c"],"input_shape":[1,1,1,2],"output":"sm","nodes":["#,
        r#"{"id":"c","kind":"Conv2D","inputs":["input"],"stride":1,"padding":"same","weight":"c.w","bias":"c.b"},"#,
        r#"{"id":"sm","kind":"Softmax","inputs":["c"]}],"tensors":["#,
        r#"{"name":"c.b","shape":[3],"encoding":"F32","offset":0,"length":12},"#,
        r#"{"name":"c.w","shape":[3,1,1,2],"encoding":"F32","offset":64,"length":24}]}"#
    );
    let mut blobs = f32_bytes(&[0.1, 0.2, 0.3]);
    blobs.resize(64, 0);
    blobs.extend(f32_bytes(&[1.0, -2.0, 0.5, 0.25, -0.125, 3.0]));
    let hand = assemble(header.as_bytes(), &blobs);

    let written = format::to_bytes(&two_node_model()).unwrap();
    assert_eq!(written, hand);
    assert_eq!(format::from_bytes(&hand).unwrap(), two_node_model());
    let (parsed, blob_start) = read_header(&written).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), serde_json::from_str::<serde_json::Value>(header).unwrap());
    assert_eq!(blob_start % ALIGN, 0);
}

#[test]
fn round_trip_is_exact_for_every_encoding() {
    let base = small_mobilenet();
    let mut seen = std::collections::BTreeSet::new();
    for m in [base.clone(), compressed(&base, Some(16), false), compressed(&base, Some(40), false), compressed(&base, Some(16), true), compressed(&base, None, true)] {
        let bytes = format::to_bytes(&m).unwrap();
        let back = format::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(format::to_bytes(&back).unwrap(), bytes);
        seen.extend(encoded_size(&m).unwrap().by_encoding.into_keys());
    }
    let all = [Encoding::F32, Encoding::Q8, Encoding::I32, Encoding::CL8, Encoding::CL4, Encoding::CLQ8];
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), all);
}

#[test]
fn reference_round_trip_through_files() {
    let m = Model::new("mobilenet_v2_1", Vec::new(), build_mobilenet_v2(1.0, 7, 224, Init::Random(7)).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.emdl"), dir.path().join("b.emdl"));
    format::save_file(&m, &a).unwrap();
    let loaded = format::load_file(&a).unwrap();
    assert_eq!(loaded, m);
    format::save_file(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn blobs_are_aligned_and_disjoint() {
    let m = compressed(&small_mobilenet(), Some(16), true);
    let bytes = format::to_bytes(&m).unwrap();
    let (h, start) = read_header(&bytes).unwrap();
    let mut spans: Vec<(u64, u64)> = h.tensors.iter().map(|t| (t.offset, t.length)).collect();
    let a = h.activations.as_ref().unwrap();
    spans.push((a.offset, a.length));
    spans.sort();
    for w in spans.windows(2) {
        assert!(w[0].0 + w[0].1 <= w[1].0);
    }
    for (o, l) in &spans {
        assert_eq!(o % ALIGN as u64, 0);
        assert!(start as u64 + o + l <= bytes.len() as u64);
    }
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = format::to_bytes(&compressed(&small_mobilenet(), Some(16), true)).unwrap();
    let step = (bytes.len() / 300).max(1);
    for len in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        assert!(format::from_bytes(&bytes[..len]).is_err(), "prefix of {len} bytes loaded");
    }
}

#[test]
fn bad_magic_and_version_are_rejected() {
    let bytes = format::to_bytes(&two_node_model()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(format::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(format::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    let mut flags = bytes;
    flags[6] = 1;
    assert!(format::from_bytes(&flags).is_err());
}

fn rewrite(m: &Model, edit: impl FnOnce(&mut Header)) -> Vec<u8> {
    let bytes = format::to_bytes(m).unwrap();
    let (mut h, start) = read_header(&bytes).unwrap();
    edit(&mut h);
    assemble(&serde_json::to_vec(&h).unwrap(), &bytes[start..])
}

#[test]
fn unedited_rewrite_loads() {
    let m = two_node_model();
    assert_eq!(format::from_bytes(&rewrite(&m, |_| {})).unwrap(), m);
}

#[test]
fn overlapping_out_of_range_and_dangling_blobs_are_rejected() {
    let m = two_node_model();
    let overlap = rewrite(&m, |h| h.tensors[1].offset = 0);
    assert!(format::from_bytes(&overlap).unwrap_err().to_string().contains("overlaps"));
    let past_end = rewrite(&m, |h| h.tensors[1].length = 4096);
    assert!(format::from_bytes(&past_end).is_err());
    let dangling = rewrite(&m, |h| {
        h.tensors.remove(0);
    });
    assert!(format::from_bytes(&dangling).is_err());
    let wrong_len = rewrite(&m, |h| h.tensors[0].length = 8);
    assert!(format::from_bytes(&wrong_len).is_err());
}

#[test]
fn encoded_size_examples() {
    // 15 weights, 3 biases, no zeros so no exempt mask
    let w: Vec<f32> = (0..15).map(|i| i as f32 * 0.1 + 0.05).collect();
    let g = GraphSpec {
        input_shape: Shape::new([1, 1, 1, 3]).unwrap(),
        nodes: vec![
            NodeSpec::conv("c", OpKind::Conv2D, INPUT, 1, Padding::Same, "c.w", None),
            NodeSpec::fully_connected("fc", "c", "fc.w", Some("fc.b".into())),
        ],
        output: "fc".into(),
        weights: [
            ("c.w".to_string(), Tensor::from_f32([5, 1, 1, 3], w).unwrap()),
            ("fc.w".to_string(), Tensor::from_f32([3, 5], vec![0.5; 15]).unwrap()),
            ("fc.b".to_string(), Tensor::from_f32([3], vec![0.0; 3]).unwrap()),
        ]
        .into(),
    };
    let m = Model::new("sizes", Vec::new(), g);
    let s = encoded_size(&m).unwrap();
    assert_eq!(s.by_encoding[&Encoding::F32], 4 * 33);
    assert_eq!(s.total, 4 * 33);

    let c = cluster_weights(&m, 16, true).unwrap();
    assert!(c.codebooks["c.w"].exempt.is_none());
    let s = encoded_size(&c).unwrap();
    let cl4 = s.tensors.iter().find(|t| t.name == "c.w").unwrap();
    assert_eq!((cl4.encoding, cl4.bytes), (Encoding::CL4, 15u64.div_ceil(2) + 64));

    let q = compressed(&m, None, true);
    let s = encoded_size(&q).unwrap();
    let q8 = s.tensors.iter().find(|t| t.name == "c.w").unwrap();
    assert_eq!((q8.encoding, q8.bytes), (Encoding::Q8, 15 + 4 * 5));
    assert_eq!(s.activation_bytes, 8 * q.activations.len() as u64);
}

fn q8_sizes(m: &Model) -> (u64, u64, u64) {
    assert!(count_params(&m.graph) >= 100_000);
    let cfg = CompressionConfig {
        sparsity: 0.0,
        clusters: None,
        quantize: true,
        calibration: CalibrationSource::Random { count: 1, seed: 1 },
        ..Default::default()
    };
    let q = optimize_pipeline(m, &cfg).unwrap().0;
    let sizes = encoded_size(&q).unwrap();
    let q8: Vec<_> = sizes.tensors.iter().filter(|t| t.encoding == Encoding::Q8).collect();
    let elements: u64 = q8.iter().map(|t| t.elements as u64).sum();
    let blobs: u64 = q8.iter().map(|t| t.bytes).sum();
    (elements, blobs, 4 * elements)
}

#[test]
fn q8_payload_is_a_quarter_of_f32() {
    let (payload, blobs, f32_bytes) = q8_sizes(&small_mobilenet());
    assert_eq!(4 * payload, f32_bytes);
    assert!(blobs > payload);
}

#[test]
fn q8_reference_blobs_within_quarter_plus_one_percent() {
    let m = Model::new("r", Vec::new(), build_mobilenet_v2(1.0, 7, 224, Init::Random(7)).unwrap());
    let (_, blobs, f32_bytes) = q8_sizes(&m);
    assert!(blobs as f64 <= 0.26 * f32_bytes as f64, "{blobs} vs {f32_bytes}");
}

#[test]
fn convert_reassembles_a_saved_graph() {
    let m = two_node_model();
    let dir = tempfile::tempdir().unwrap();
    for (name, t) in &m.graph.weights {
        save_raw_tensor(t, dir.path().join(format!("{name}.rten"))).unwrap();
    }
    let spec = json!({
        "name": "tiny",
        "labels": ["a", "b", "c"],
        "input_shape": [1, 1, 1, 2],
        "output": "sm",
        "nodes": m.graph.nodes,
    });
    let spec_path = dir.path().join("graph.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    assert_eq!(format::convert(&spec_path, dir.path()).unwrap(), m);

    std::fs::remove_file(dir.path().join("c.b.rten")).unwrap();
    let err = format::convert(&spec_path, dir.path()).unwrap_err().to_string();
    assert!(err.contains("c.b.rten"), "{err}");
}

