use std::fs;
use std::path::{Path, PathBuf};

use emdl::eval::{
    balanced_accuracy, evaluate, load_manifest, load_manifest_file, macro_f1, preprocess, write_confusion_csv,
    ConfusionMatrix, EmotionLabel, ManifestEntry, Raster, Subset,
};
use emdl::graph::{GraphSpec, NodeSpec, OpKind, INPUT};
use emdl::tensor::{Shape, Tensor};
use emdl::Model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

#[test]
fn manifest_rows_and_errors() {
    let ok = load_manifest("path,label,subset\nimg1.ppm,happiness,A\nimg3.ppm,neutral,-\nimg4.ppm,fear,B\n".as_bytes())
        .unwrap();
    assert_eq!(
        ok,
        vec![
            ManifestEntry { path: "img1.ppm".into(), label: EmotionLabel::Happiness, subset: Subset::A },
            ManifestEntry { path: "img3.ppm".into(), label: EmotionLabel::Neutral, subset: Subset::Untagged },
            ManifestEntry { path: "img4.ppm".into(), label: EmotionLabel::Fear, subset: Subset::B },
        ]
    );
    let err = load_manifest("path,label,subset\nimg2.ppm,joy,-\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("unknown label 'joy' at line 2"), "{err}");
    let err = load_manifest("path,label,subset\na.ppm,anger,-\nb.ppm,anger,C\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(load_manifest("path,label,subset\n".as_bytes()).unwrap().is_empty());
    assert!(load_manifest("file,label,subset\na.ppm,anger,-\n".as_bytes()).is_err());
}

#[test]
fn duplicate_paths_are_kept() {
    let rows = load_manifest("path,label,subset\na.ppm,anger,-\na.ppm,anger,-\n".as_bytes()).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn manifest_file_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,label,subset\nimgs/a.ppm,sadness,A\n/abs/b.ppm,disgust,-\n").unwrap();
    let rows = load_manifest_file(&path).unwrap();
    assert_eq!(rows[0].path, dir.path().join("imgs/a.ppm"));
    assert_eq!(rows[1].path, PathBuf::from("/abs/b.ppm"));
    let missing = load_manifest_file(dir.path().join("nope.csv")).unwrap_err().to_string();
    assert!(missing.contains("nope.csv"), "{missing}");
}

#[test]
fn checkerboard_two_by_two_to_four_by_four() {
    let img = Raster::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
    let t = preprocess(&img, 4).unwrap();
    assert_eq!(t.dims(), &[1, 4, 4, 3]);
    let v = t.as_f32().unwrap();
    let px = |y: usize, x: usize| v[(y * 4 + x) * 3];
    // sample x = (i + 0.5) / 2 - 0.5 -> 0 (clamped), 0.25, 0.75, 1 (clamped)
    let expect_row0 = [0.0, 63.75, 191.25, 255.0];
    for (x, e) in expect_row0.iter().enumerate() {
        assert!((px(0, x) as f64 - (e / 127.5 - 1.0)).abs() < 1e-6, "x={x}");
    }
    // 0.75 * (0.75 * 0 + 0.25 * 255) + 0.25 * (0.75 * 255 + 0.25 * 0)
    assert!((px(1, 1) as f64 - (95.625 / 127.5 - 1.0)).abs() < 1e-6);
    assert!(v[..3].iter().all(|&c| c == px(0, 0)));
}

#[test]
fn same_size_resize_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<u8> = (0..224 * 224 * 3).map(|_| rng.gen()).collect();
    let t = preprocess(&Raster::new(224, 224, 3, data.clone()).unwrap(), 224).unwrap();
    for (o, &p) in t.as_f32().unwrap().iter().zip(&data) {
        assert_eq!(*o, (p as f64 / 127.5 - 1.0) as f32);
    }
}

#[test]
fn preprocess_extremes() {
    let black = preprocess(&Raster::new(3, 5, 1, vec![0; 15]).unwrap(), 224).unwrap();
    assert!(black.as_f32().unwrap().iter().all(|&v| v == -1.0));
    let white = preprocess(&Raster::new(7, 2, 3, vec![255; 42]).unwrap(), 224).unwrap();
    assert!(white.as_f32().unwrap().iter().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn preprocess_bounds_and_shape(w in 1usize..40, h in 1usize..40, gray in any::<bool>(), seed in any::<u64>()) {
        let channels = if gray { 1 } else { 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h * channels).map(|_| rng.gen()).collect();
        let t = preprocess(&Raster::new(w, h, channels, data).unwrap(), 224).unwrap();
        prop_assert_eq!(t.dims(), &[1, 224, 224, 3]);
        prop_assert!(t.as_f32().unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn metric_hand_cases() {
    let m = cm(&[&[8, 2], &[4, 6]]);
    assert!((balanced_accuracy(&m).unwrap() - 0.7).abs() < 1e-12);
    assert!((m.f1(0) - 0.72727).abs() < 1e-5);
    assert!((m.f1(1) - 0.66667).abs() < 1e-5);
    assert!((macro_f1(&m).unwrap() - 0.69697).abs() < 1e-5);
    assert_eq!(balanced_accuracy(&cm(&[&[5, 5], &[5, 5]])).unwrap(), 0.5);
    assert_eq!(macro_f1(&cm(&[&[0, 10], &[10, 0]])).unwrap(), 0.0);
}

/// Per-class loops over the raw counts, kept apart from the library code.
#[allow(clippy::needless_range_loop)]
fn oracle(rows: &[Vec<u64>]) -> (f64, f64) {
    let k = rows.len();
    let mut recalls = Vec::new();
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = rows[c][c] as f64;
        let mut actual = 0.0;
        let mut predicted = 0.0;
        for j in 0..k {
            actual += rows[c][j] as f64;
            predicted += rows[j][c] as f64;
        }
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        if actual > 0.0 {
            recalls.push(r);
        }
        f1_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    (recalls.iter().sum::<f64>() / recalls.len() as f64, f1_sum / k as f64)
}

fn random_rows(rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    loop {
        let sparse = rng.gen_bool(0.3);
        let rows: Vec<Vec<u64>> = (0..7)
            .map(|_| (0..7).map(|_| if sparse && rng.gen_bool(0.6) { 0 } else { rng.gen_range(0..50) }).collect())
            .collect();
        if rows.iter().flatten().any(|&v| v > 0) {
            return rows;
        }
    }
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let rows = random_rows(&mut rng);
        let m = ConfusionMatrix::from_rows(rows.clone()).unwrap();
        let (ba, f1) = oracle(&rows);
        assert!((balanced_accuracy(&m).unwrap() - ba).abs() <= 1e-12);
        assert!((macro_f1(&m).unwrap() - f1).abs() <= 1e-12);
    }
}

#[test]
fn metrics_ignore_class_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let rows = random_rows(&mut rng);
        let mut perm: Vec<usize> = (0..7).collect();
        for i in (1..7).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut moved = vec![vec![0; 7]; 7];
        for i in 0..7 {
            for j in 0..7 {
                moved[perm[i]][perm[j]] = rows[i][j];
            }
        }
        let (a, b) = (ConfusionMatrix::from_rows(rows).unwrap(), ConfusionMatrix::from_rows(moved).unwrap());
        assert!((balanced_accuracy(&a).unwrap() - balanced_accuracy(&b).unwrap()).abs() < 1e-12);
        assert!((macro_f1(&a).unwrap() - macro_f1(&b).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn empty_matrix_has_no_metrics() {
    let m = ConfusionMatrix::new(7);
    assert!(balanced_accuracy(&m).is_err());
    assert!(macro_f1(&m).is_err());
}

/// Class `c` images are one flat colour: a cube corner chosen by the
/// bits of `c + 1`.
fn class_color(c: usize) -> [u8; 3] {
    [0, 1, 2].map(|b| if (c + 1) >> b & 1 == 1 { 255 } else { 0 })
}

fn class_mean(c: usize) -> [f32; 3] {
    class_color(c).map(|v| v as f32 / 127.5 - 1.0)
}

/// GAP then a linear layer scoring `2 m_c . x - |m_c|^2`, so the argmax is
/// the nearest class mean.
fn nearest_mean_model() -> Model {
    let w: Vec<f32> = (0..7).flat_map(|c| class_mean(c).map(|v| 2.0 * v)).collect();
    let b: Vec<f32> = (0..7).map(|c| -class_mean(c).iter().map(|v| v * v).sum::<f32>()).collect();
    let g = GraphSpec {
        input_shape: Shape::new([1, 8, 8, 3]).unwrap(),
        nodes: vec![
            NodeSpec::new("gap", OpKind::GlobalAvgPool, &[INPUT]),
            NodeSpec::fully_connected("fc", "gap", "fc.w", Some("fc.b".into())),
            NodeSpec::new("sm", OpKind::Softmax, &["fc"]),
        ],
        output: "sm".into(),
        weights: [
            ("fc.w".to_string(), Tensor::from_f32([7, 3], w).unwrap()),
            ("fc.b".to_string(), Tensor::from_f32([7], b).unwrap()),
        ]
        .into(),
    };
    Model::new("stub", EmotionLabel::names(), g)
}

fn constant_model(class: usize) -> Model {
    let mut m = nearest_mean_model();
    let w = m.graph.weights.get_mut("fc.w").unwrap();
    *w = Tensor::zeros([7, 3]).unwrap();
    let mut b = vec![0.0; 7];
    b[class] = 1.0;
    m.graph.weights.insert("fc.b".into(), Tensor::from_f32([7], b).unwrap());
    m
}

fn write_ppm(path: &Path, w: usize, h: usize, rgb: [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for _ in 0..w * h {
        bytes.extend_from_slice(&rgb);
    }
    fs::write(path, bytes).unwrap();
}

/// Two images per class; the first is tagged A, the second B for even
/// classes and untagged for odd ones.
fn balanced_manifest(dir: &Path) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for (c, label) in EmotionLabel::ALL.iter().enumerate() {
        for copy in 0..2 {
            let path = dir.join(format!("{c}_{copy}.ppm"));
            write_ppm(&path, 5 + copy, 3 + c, class_color(c));
            let subset = match (copy, c % 2) {
                (0, _) => Subset::A,
                (_, 0) => Subset::B,
                _ => Subset::Untagged,
            };
            out.push(ManifestEntry { path, label: *label, subset });
        }
    }
    out
}

#[test]
fn nearest_mean_stub_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let entries = balanced_manifest(dir.path());
    let report = evaluate(&nearest_mean_model(), &entries, 1).unwrap();
    for s in &report.subsets {
        assert_eq!(s.balanced_accuracy, 1.0, "{}", s.subset);
    }
    assert_eq!(report.subset("full").unwrap().macro_f1, 1.0);
    assert_eq!(report.subset("A").unwrap().macro_f1, 1.0);
    // B holds the four even classes; absent classes count as F1 0
    assert!((report.subset("B").unwrap().macro_f1 - 4.0 / 7.0).abs() < 1e-12);
    let names: Vec<_> = report.subsets.iter().map(|s| s.subset.as_str()).collect();
    assert_eq!(names, ["full", "A", "B"]);
}

#[test]
fn constant_prediction_on_balanced_set() {
    let dir = tempfile::tempdir().unwrap();
    let entries = balanced_manifest(dir.path());
    let report = evaluate(&constant_model(3), &entries, 1).unwrap();
    let full = report.subset("full").unwrap();
    assert!((full.balanced_accuracy - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(full.confusion.col_sum(3), 14);
}

#[test]
fn subsets_partition_the_full_set() {
    let dir = tempfile::tempdir().unwrap();
    let entries = balanced_manifest(dir.path());
    let untagged = entries.iter().filter(|e| e.subset == Subset::Untagged).count() as u64;
    let report = evaluate(&constant_model(0), &entries, 1).unwrap();
    let total = |s: &str| report.subset(s).unwrap().confusion.total();
    assert_eq!(total("A") + total("B") + untagged, total("full"));
    assert_eq!(total("full"), entries.len() as u64);
}

#[test]
fn evaluation_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let entries = balanced_manifest(dir.path());
    let m = nearest_mean_model();
    let one = evaluate(&m, &entries, 1).unwrap();
    for threads in [2, 3] {
        assert_eq!(evaluate(&m, &entries, threads).unwrap(), one);
    }
}

#[test]
fn unreadable_image_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = balanced_manifest(dir.path());
    let bad = dir.path().join("broken.ppm");
    fs::write(&bad, b"P6\n2 2\n255\n\x01").unwrap();
    entries.push(ManifestEntry { path: bad, label: EmotionLabel::Anger, subset: Subset::Untagged });
    let err = evaluate(&nearest_mean_model(), &entries, 1).unwrap_err().to_string();
    assert!(err.contains("broken.ppm"), "{err}");
}

#[test]
fn confusion_csv_layout() {
    let mut m = ConfusionMatrix::new(7);
    m.record(0, 0);
    m.record(2, 5);
    let mut out = Vec::new();
    write_confusion_csv(&m, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0], "happiness,sadness,surprise,fear,anger,disgust,neutral");
    assert_eq!(lines[1], "1,0,0,0,0,0,0");
    assert_eq!(lines[3], "0,0,0,0,0,1,0");
}
