use emdl::compress::{
    calibrate, cluster_weights, eligible_weights, kmeans_1d, optimize_pipeline, prune_magnitude, prune_slice,
    quantize_model, quantize_per_channel, random_inputs, unique_nonzero_values, CalibrationSource, CompressionConfig,
};
use emdl::format::encoded_size;
use emdl::graph::{GraphSpec, NodeSpec, OpKind, Padding, INPUT};
use emdl::mobilenet::{build_inverted_residual_net, BlockSetting, Init, InvertedResidualConfig};
use emdl::tensor::{Shape, Tensor};
use emdl::{Executor, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64) -> Model {
    let cfg = InvertedResidualConfig {
        input_size: 32,
        stem_channels: 8,
        blocks: vec![
            BlockSetting { expansion: 1, channels: 8, repeats: 1, stride: 1 },
            BlockSetting { expansion: 6, channels: 16, repeats: 2, stride: 2 },
        ],
        head_channels: Some(64),
        num_classes: 7,
    };
    Model::new("small", Vec::new(), build_inverted_residual_net(&cfg, Init::Random(seed)).unwrap())
}

fn weights(m: &Model, name: &str) -> Vec<f32> {
    m.graph.weights[name].to_f32_vec()
}

fn calib(count: usize, seed: u64) -> CalibrationSource {
    CalibrationSource::Random { count, seed }
}

/// Zero the `floor(s * n)` entries that come first when ordered by
/// (|w|, index).
fn prune_oracle(w: &[f32], s: f32) -> Vec<f32> {
    let count = (s as f64 * w.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let mut out = w.to_vec();
    for &i in &order[..count] {
        out[i] = 0.0;
    }
    out
}

#[test]
fn prune_four_values_at_half() {
    let mut v = vec![0.1, -0.5, 0.2, 0.05];
    prune_slice(&mut v, 0.5);
    assert_eq!(v, vec![0.0, -0.5, 0.2, 0.0]);
}

#[test]
fn prune_matches_oracle_per_tensor() {
    let m = small_net(3);
    let eligible = eligible_weights(&m);
    for s in [0.0, 0.3, 0.5, 0.77, 1.0] {
        let p = prune_magnitude(&m, s).unwrap();
        for (name, t) in &m.graph.weights {
            let before = t.to_f32_vec();
            let after = weights(&p, name);
            if eligible.contains(name) {
                assert_eq!(after, prune_oracle(&before, s), "{name} at {s}");
                let zeroed_max = before
                    .iter()
                    .zip(&after)
                    .filter(|(_, a)| **a == 0.0)
                    .map(|(b, _)| b.abs())
                    .fold(0.0f32, f32::max);
                let kept_min = after.iter().filter(|a| **a != 0.0).map(|a| a.abs()).fold(f32::INFINITY, f32::min);
                assert!(kept_min >= zeroed_max, "{name}");
            } else {
                assert_eq!(after, before, "{name} should be exempt");
            }
        }
    }
}

#[test]
fn classifier_and_biases_are_exempt() {
    let m = small_net(3);
    let eligible = eligible_weights(&m);
    let classifier = m.graph.nodes.iter().rev().find_map(|n| n.weight.clone()).unwrap();
    assert!(!eligible.contains(&classifier));
    for n in &m.graph.nodes {
        if let Some(b) = &n.bias {
            assert!(!eligible.contains(b));
        }
    }
    let p = prune_magnitude(&m, 1.0).unwrap();
    for name in &eligible {
        assert!(weights(&p, name).iter().all(|&v| v == 0.0));
    }
    assert_eq!(weights(&p, &classifier), weights(&m, &classifier));
}

#[test]
fn pruning_is_idempotent() {
    let m = small_net(5);
    let once = prune_magnitude(&m, 0.6).unwrap();
    let twice = prune_magnitude(&once, 0.6).unwrap();
    assert_eq!(once.graph.weights, twice.graph.weights);
}

#[test]
fn sparsity_outside_unit_interval_is_rejected() {
    let m = small_net(1);
    for s in [-0.1, 1.5, f32::NAN] {
        assert!(prune_magnitude(&m, s).is_err(), "{s}");
    }
}

#[test]
fn kmeans_two_pairs() {
    let km = kmeans_1d(&[1.0, 1.1, 3.0, 3.1], 2).unwrap();
    assert!((km.centroids[0] - 1.05).abs() < 1e-12);
    assert!((km.centroids[1] - 3.05).abs() < 1e-12);
    assert_eq!(km.assignment, vec![0, 0, 1, 1]);
    assert!(km.converged);
}

#[test]
fn kmeans_objective_and_final_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(1..200);
        let k = rng.gen_range(2..20);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let km = kmeans_1d(&values, k).unwrap();
        assert_eq!(km.centroids.len(), k);
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "objective rose: {w:?}");
        }
        if km.converged {
            // nearest centroid, ties to the lower index
            for (v, &a) in values.iter().zip(&km.assignment) {
                let best = (0..k)
                    .min_by(|&i, &j| (v - km.centroids[i]).abs().total_cmp(&(v - km.centroids[j]).abs()).then(i.cmp(&j)))
                    .unwrap();
                assert_eq!((v - km.centroids[a]).abs(), (v - km.centroids[best]).abs());
            }
        }
        let last = km.objective.last().copied().unwrap_or(0.0);
        let direct: f64 = values.iter().zip(&km.assignment).map(|(v, &a)| (v - km.centroids[a]).powi(2)).sum();
        assert!(direct <= last + 1e-9 * last.max(1.0));
    }
}

#[test]
fn kmeans_rejects_single_cluster() {
    assert!(kmeans_1d(&[1.0, 2.0], 1).is_err());
}

#[test]
fn clustering_bounds_unique_values_and_keeps_zeros() {
    let m = prune_magnitude(&small_net(7), 0.5).unwrap();
    for k in [2, 4, 16, 40] {
        let c = cluster_weights(&m, k, true).unwrap();
        for name in eligible_weights(&m) {
            let before = weights(&m, &name);
            let after = weights(&c, &name);
            assert!(unique_nonzero_values(&c.graph.weights[&name]) <= k, "{name} k={k}");
            let cb = &c.codebooks[&name];
            for (i, (&b, &a)) in before.iter().zip(&after).enumerate() {
                if b == 0.0 {
                    assert_eq!(a, 0.0);
                } else {
                    assert!(!cb.is_exempt(i));
                    assert_eq!(a, cb.centroids[cb.assignment[i] as usize]);
                }
            }
        }
    }
}

#[test]
fn clustering_with_many_clusters_never_adds_values() {
    let m = small_net(8);
    let c = cluster_weights(&m, 256, true).unwrap();
    for name in eligible_weights(&m) {
        assert!(unique_nonzero_values(&c.graph.weights[&name]) <= unique_nonzero_values(&m.graph.weights[&name]));
    }
}

#[test]
fn calibration_of_two_inputs_is_elementwise_extrema() {
    let m = small_net(4);
    let xs = random_inputs(m.graph.input_shape.dims(), 2, 12);
    let a = calibrate(&m, &xs[..1], 1).unwrap();
    let b = calibrate(&m, &xs[1..], 1).unwrap();
    let both = calibrate(&m, &xs, 1).unwrap();
    assert_eq!(both.ranges.keys().collect::<Vec<_>>(), a.ranges.keys().collect::<Vec<_>>());
    for (edge, r) in &both.ranges {
        assert_eq!(r.min, a.ranges[edge].min.min(b.ranges[edge].min), "{edge}");
        assert_eq!(r.max, a.ranges[edge].max.max(b.ranges[edge].max), "{edge}");
    }
}

#[test]
fn relu6_edges_stay_in_range() {
    let m = small_net(4);
    let cal = calibrate(&m, &random_inputs(m.graph.input_shape.dims(), 5, 1), 1).unwrap();
    for n in m.graph.nodes.iter().filter(|n| n.kind == OpKind::ReLU6) {
        let r = cal.ranges[&n.id];
        assert!(r.min >= 0.0 && r.max <= 6.0, "{}: {r:?}", n.id);
    }
}

#[test]
fn zero_graph_calibrates_to_unit_scale() {
    let g = GraphSpec {
        input_shape: Shape::new([1, 2, 2, 3]).unwrap(),
        nodes: vec![
            NodeSpec::conv("c", OpKind::Conv2D, INPUT, 1, Padding::Same, "c.w", None),
            NodeSpec::new("r", OpKind::ReLU6, &["c"]),
        ],
        output: "r".into(),
        weights: [("c.w".to_string(), Tensor::zeros([4, 1, 1, 3]).unwrap())].into(),
    };
    let m = Model::new("zeros", Vec::new(), g);
    let cal = calibrate(&m, &[Tensor::zeros([1, 2, 2, 3]).unwrap()], 1).unwrap();
    for edge in [INPUT, "c", "r"] {
        let q = cal.params(edge).unwrap();
        assert_eq!((q.scale, q.zero_point), (1.0, 0), "{edge}");
    }
}

#[test]
fn empty_calibration_is_rejected() {
    let m = small_net(1);
    assert!(calibrate(&m, &[], 1).is_err());
}

#[test]
fn symmetric_channel_rules() {
    let w = Tensor::from_f32([2, 1, 1, 2], vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
    let (q, scales) = quantize_per_channel(&w, 0);
    assert_eq!(q, vec![-127, 127, 0, 0]);
    assert_eq!(scales, vec![1.0 / 127.0, 1.0]);
}

#[test]
fn quantized_biases_use_product_scale() {
    let m = small_net(6);
    let cal = calibrate(&m, &random_inputs(m.graph.input_shape.dims(), 3, 2), 1).unwrap();
    let q = quantize_model(&m, &cal).unwrap();
    for n in &m.graph.nodes {
        let (Some(w), Some(b)) = (&n.weight, &n.bias) else { continue };
        let in_scale = q.activations[&n.inputs[0]].scale;
        let Some(emdl::tensor::Quant::PerChannel(wq)) = q.graph.weights[w].quant() else { panic!("{w}") };
        let bt = &q.graph.weights[b];
        let bias_scales = match bt.quant() {
            Some(emdl::tensor::Quant::PerChannel(p)) => p.scales.clone(),
            other => panic!("{b}: {other:?}"),
        };
        for (bs, ws) in bias_scales.iter().zip(&wq.scales) {
            assert_eq!(*bs, in_scale * ws);
        }
        for (&qb, (&fb, s)) in bt.as_i32().unwrap().iter().zip(weights(&m, b).iter().zip(&bias_scales)) {
            assert!(((qb as f64) - (fb / s) as f64).abs() <= 0.5 + 1e-6);
        }
    }
}

#[test]
fn empty_pipeline_is_identity() {
    let m = small_net(2);
    let cfg = CompressionConfig { sparsity: 0.0, clusters: None, quantize: false, ..Default::default() };
    let (out, report) = optimize_pipeline(&m, &cfg).unwrap();
    assert_eq!(out.graph, m.graph);
    assert_eq!(report.ratio, 1.0);
    assert_eq!(report.original_bytes, report.encoded_bytes);
}

#[test]
fn full_pipeline_keeps_topology_zeros_and_value_bound() {
    let m = small_net(2);
    let cfg = CompressionConfig { sparsity: 0.5, clusters: Some(16), quantize: true, calibration: calib(8, 3), ..Default::default() };
    let pruned = prune_magnitude(&m, 0.5).unwrap();
    let (out, report) = optimize_pipeline(&m, &cfg).unwrap();
    assert_eq!(out.graph.nodes, m.graph.nodes);
    assert!(out.graph.is_quantized());
    for name in eligible_weights(&m) {
        let before = weights(&pruned, &name);
        let after = out.graph.weights[&name].as_i8().unwrap();
        for (b, a) in before.iter().zip(after) {
            if *b == 0.0 {
                assert_eq!(*a, 0, "{name}");
            }
        }
        assert!(unique_nonzero_values(&out.graph.weights[&name]) <= 16, "{name}");
    }
    let sizes = encoded_size(&out).unwrap();
    assert_eq!(report.encoded_bytes, sizes.total);
    let expect = report.original_bytes as f64 / report.encoded_bytes as f64;
    assert_eq!(report.ratio, expect);
    assert!(report.ratio > 1.0, "ratio {}", report.ratio);
}

#[test]
fn quantized_pipeline_is_deterministic() {
    let m = small_net(2);
    let cfg = CompressionConfig { calibration: calib(4, 5), ..Default::default() };
    let (a, ra) = optimize_pipeline(&m, &cfg).unwrap();
    let (b, rb) = optimize_pipeline(&m, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(emdl::format::to_bytes(&a).unwrap(), emdl::format::to_bytes(&b).unwrap());
    let x = random_inputs(m.graph.input_shape.dims(), 1, 77).pop().unwrap();
    let y1 = Executor::new(&a, 1).unwrap().infer(&x).unwrap().to_f32_vec();
    let y3 = Executor::new(&a, 3).unwrap().infer(&x).unwrap().to_f32_vec();
    assert_eq!(y1, y3);
}

#[test]
fn config_validation() {
    let ok = CompressionConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        CompressionConfig { sparsity: 1.01, ..ok.clone() },
        CompressionConfig { clusters: Some(1), ..ok.clone() },
        CompressionConfig { calibration: calib(0, 0), ..ok.clone() },
        CompressionConfig { threads: 0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
