use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use openfake::datamodel::{Image, MethodLabel, Sample};
use openfake::dataset::{self, DatasetManifest, ForgeryOperator};
use openfake::seed::sha256_hex;
use openfake::Error;
use proptest::prelude::*;

fn file_hashes(root: &Path, manifest: &DatasetManifest) -> Vec<String> {
    manifest.rows.iter().map(|r| sha256_hex(&fs::read(root.join(&r.path)).unwrap())).collect()
}

#[test]
fn small_benchmark_counts_and_bytes_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = dataset::generate_synthetic_benchmark(7, 5, 2, 32, a.path()).unwrap();
    let mb = dataset::generate_synthetic_benchmark(7, 5, 2, 32, b.path()).unwrap();
    assert_eq!(ma.rows.len(), 5 * 5 * 2);
    assert_eq!(ma.methods().len(), 5);
    assert_eq!(ma.rows, mb.rows);
    assert_eq!(file_hashes(a.path(), &ma), file_hashes(b.path(), &mb));

    let header = fs::read_to_string(a.path().join(dataset::MANIFEST_FILE)).unwrap();
    assert_eq!(header.lines().next(), Some("path,video_id,frame_idx,method_label"));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join(dataset::SIDECAR_FILE)).unwrap()).unwrap();
    assert_eq!(sidecar["dataset_seed"], 7);

    let other = tempfile::tempdir().unwrap();
    let mc = dataset::generate_synthetic_benchmark(8, 5, 2, 32, other.path()).unwrap();
    assert_ne!(file_hashes(a.path(), &ma), file_hashes(other.path(), &mc));
}

#[test]
fn saved_manifest_and_directory_scan_agree() {
    let dir = tempfile::tempdir().unwrap();
    let generated = dataset::generate_synthetic_benchmark(3, 5, 1, 24, dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    let scanned = dataset::load_framedir(dir.path(), &[]).unwrap();
    assert_eq!(generated, loaded);
    assert_eq!(generated.rows, scanned.rows);
    assert_eq!(scanned.dataset_seed, Some(3));
    for row in &scanned.rows {
        assert_eq!(scanned.load_image(row).unwrap().shape(), (24, 24));
    }
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(dataset::generate_synthetic_benchmark(7, 5, 1, 16, &blocker).is_err());
}

fn write_frames(root: &Path, method: &str, video: &str, frames: u32) {
    for f in 0..frames {
        let path = root.join(method).join(video).join(format!("{f}.png"));
        dataset::save_png(&Image::zeros(8, 8), &path).unwrap();
    }
}

#[test]
fn framedir_counting_and_validation() {
    let empty = tempfile::tempdir().unwrap();
    assert!(dataset::load_framedir(empty.path(), &[]).unwrap().rows.is_empty());

    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), "REAL", "vid", 3);
    write_frames(dir.path(), "DF", "vid", 3);
    let m = dataset::load_framedir(dir.path(), &[]).unwrap();
    assert_eq!(m.rows.len(), 6);
    assert_eq!(m.dataset_seed, None);

    write_frames(dir.path(), "Custom", "vid", 1);
    assert!(matches!(dataset::load_framedir(dir.path(), &[]), Err(Error::UnknownMethod(name)) if name == "Custom"));
    assert_eq!(dataset::load_framedir(dir.path(), &["Custom".into()]).unwrap().rows.len(), 7);

    let broken = dir.path().join("REAL").join("vid").join("9.png");
    fs::write(&broken, b"not a png").unwrap();
    match dataset::load_framedir(dir.path(), &["Custom".into()]) {
        Err(Error::Image { path, .. }) => assert_eq!(path, broken),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn framedir_rejects_mixed_shapes() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), "REAL", "a", 1);
    dataset::save_png(&Image::zeros(10, 10), &dir.path().join("REAL").join("b").join("0.png")).unwrap();
    assert!(matches!(dataset::load_framedir(dir.path(), &[]), Err(Error::Image { .. })));
}

fn shared_manifest() -> &'static DatasetManifest {
    static CELL: OnceLock<(tempfile::TempDir, DatasetManifest)> = OnceLock::new();
    &CELL
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let m = dataset::generate_synthetic_benchmark(11, 20, 3, 16, dir.path()).unwrap();
            (dir, m)
        })
        .1
}

#[test]
fn ten_videos_split_six_two_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::generate_synthetic_benchmark(5, 10, 1, 16, dir.path()).unwrap();
    let s = dataset::make_protocol_splits(&m, (0.6, 0.2, 0.2), 1, 0).unwrap();
    assert_eq!(
        (s.spec.train_videos.len(), s.spec.val_videos.len(), s.spec.test_videos.len()),
        (6, 2, 2)
    );
    assert_eq!(s.train.len(), 6 * 5);
}

fn counts(samples: &[Sample]) -> BTreeMap<(String, MethodLabel), usize> {
    let mut out = BTreeMap::new();
    for s in samples {
        *out.entry((s.video_id.clone(), s.method.clone())).or_insert(0) += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_balanced_and_deterministic(seed in 0u64..10_000, frames in 1usize..5) {
        let m = shared_manifest();
        let s = dataset::make_protocol_splits(m, (0.6, 0.2, 0.2), frames, seed).unwrap();
        prop_assert!(s.spec.is_disjoint());
        let all: BTreeSet<&String> =
            s.spec.train_videos.iter().chain(&s.spec.val_videos).chain(&s.spec.test_videos).collect();
        prop_assert_eq!(all.len(), 20);
        for (part, videos) in [(&s.train, &s.spec.train_videos), (&s.val, &s.spec.val_videos), (&s.test, &s.spec.test_videos)] {
            prop_assert!(part.iter().all(|x| videos.contains(&x.video_id)));
            let c = counts(part);
            prop_assert_eq!(c.len(), videos.len() * 5);
            prop_assert!(c.values().all(|&n| n == frames.min(3)));
        }
        let again = dataset::make_protocol_splits(m, (0.6, 0.2, 0.2), frames, seed).unwrap();
        let ids = |v: &[Sample]| v.iter().map(Sample::id).collect::<Vec<_>>();
        prop_assert_eq!(ids(&s.train), ids(&again.train));
        prop_assert_eq!(ids(&s.test), ids(&again.test));
    }
}

/// Logistic regression on standardised raw pixels, trained by full-batch
/// gradient descent. Returns test accuracy.
fn linear_probe(train: &[(Vec<f64>, bool)], test: &[(Vec<f64>, bool)]) -> f64 {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|(x, _)| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
        .collect();
    let standardise = |x: &[f64]| (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect::<Vec<f64>>();
    let xt: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (standardise(x), f64::from(u8::from(*y)))).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let score = |w: &[f64], b: f64, x: &[f64]| x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &xt {
            let p = 1.0 / (1.0 + (-score(&w, b, x)).exp());
            for j in 0..d {
                gw[j] += (p - y) * x[j];
            }
            gb += p - y;
        }
        for j in 0..d {
            w[j] -= 0.01 * (gw[j] / n + 1e-2 * w[j]);
        }
        b -= 0.01 * gb / n;
    }
    let hits = test.iter().filter(|(x, y)| (score(&w, b, &standardise(x)) > 0.0) == *y).count();
    hits as f64 / test.len() as f64
}

#[test]
fn every_operator_is_linearly_separable_from_real() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::generate_synthetic_benchmark(7, 200, 2, 64, dir.path()).unwrap();
    let s = dataset::make_protocol_splits(&m, (0.6, 0.2, 0.2), 2, 0).unwrap();
    for op in ForgeryOperator::ALL {
        let pick = |v: &[Sample]| -> Vec<(Vec<f64>, bool)> {
            v.iter()
                .filter(|x| x.is_real || x.method == op.label())
                .map(|x| (x.image.data().iter().map(|&p| p as f64).collect(), !x.is_real))
                .collect()
        };
        let acc = linear_probe(&pick(&s.train), &pick(&s.test));
        assert!(acc > 0.6, "{}: linear probe accuracy {acc}", op.name());
    }
}
