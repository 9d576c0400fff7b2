//! Synthetic benchmark generation, frame-directory ingestion and
//! video-grouped splits.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

pub use synth::{render_pristine, FaceGeometry, ForgeryOperator};

use crate::datamodel::{Image, MethodLabel, Sample, SplitSpec};
use crate::error::{io_err, Error, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "dataset.json";

/// Method directory names accepted by [`load_framedir`] without extra
/// declaration.
pub const BUILTIN_METHODS: [&str; 9] = ["REAL", "M1", "M2", "M3", "M4", "DF", "F2F", "FS", "NT"];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub video_id: String,
    pub frame_idx: u32,
    #[serde(rename = "method_label")]
    pub method: MethodLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub dataset_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dataset_seed: Option<u64>,
    image_side: Option<usize>,
    methods: Vec<String>,
    videos: usize,
    frames_per_video: usize,
}

impl DatasetManifest {
    pub fn methods(&self) -> BTreeSet<MethodLabel> {
        self.rows.iter().map(|r| r.method.clone()).collect()
    }

    pub fn video_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.video_id.clone()).collect()
    }

    /// Rows restricted to the given methods.
    pub fn filter_methods(&self, keep: &[MethodLabel]) -> Self {
        Self {
            root: self.root.clone(),
            rows: self.rows.iter().filter(|r| keep.contains(&r.method)).cloned().collect(),
            dataset_seed: self.dataset_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert((&row.video_id, row.frame_idx, &row.method)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate manifest row {}/{}/{}",
                    row.method, row.video_id, row.frame_idx
                )));
            }
            let full = self.root.join(&row.path);
            if !full.is_file() {
                return Err(Error::InvalidInput(format!("manifest path {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    /// Writes `manifest.csv` and the `dataset.json` sidecar into the root.
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(io_err(&path))?;
        let methods = self.methods().into_iter().map(|m| m.to_string()).collect();
        let frames = self.rows.iter().map(|r| r.frame_idx as usize + 1).max().unwrap_or(0);
        let side = match self.rows.first() {
            Some(row) => Some(load_png(&self.root.join(&row.path))?.height()),
            None => None,
        };
        let sidecar = Sidecar {
            dataset_seed: self.dataset_seed,
            image_side: side,
            methods,
            videos: self.video_ids().len(),
            frames_per_video: frames,
        };
        let path = self.root.join(SIDECAR_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(io_err(&path))
    }

    /// Reads a manifest previously written by [`DatasetManifest::save`].
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let mut r = csv::Reader::from_path(&path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let sidecar_path = root.join(SIDECAR_FILE);
        let dataset_seed = match fs::read(&sidecar_path) {
            Ok(bytes) => serde_json::from_slice::<Sidecar>(&bytes)?.dataset_seed,
            Err(_) => None,
        };
        let manifest = Self { root: root.to_path_buf(), rows, dataset_seed };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load_image(&self, row: &ManifestRow) -> Result<Image> {
        load_png(&self.root.join(&row.path))
    }
}

/// Loads an 8-bit PNG as an RGB image in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let err = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let decoded = image::open(path).map_err(|e| err(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let hwc: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::from_interleaved(h as usize, w as usize, &hwc).map_err(|e| err(e.to_string()))
}

/// Saves an image as an 8-bit RGB PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let (h, w) = img.shape();
    let bytes: Vec<u8> = img.to_interleaved().iter().map(|v| (v * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

fn frame_path(method: &str, video_id: &str, frame_idx: u32) -> PathBuf {
    Path::new(method).join(video_id).join(format!("{frame_idx}.png"))
}

/// Synthetic video ids are zero-padded so lexical and numeric order agree.
pub fn synthetic_video_id(index: usize) -> String {
    format!("v{index:04}")
}

/// Writes `n_videos` pristine frame sequences and one manipulated copy per
/// operator, then persists the manifest. Images are `side`×`side`.
pub fn generate_synthetic_benchmark(
    seed: u64,
    n_videos: usize,
    frames_per_video: usize,
    side: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_videos < 5 || frames_per_video == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 videos and 1 frame per video, got {n_videos} and {frames_per_video}"
        )));
    }
    if side < 16 {
        return Err(Error::InvalidInput(format!("image side {side} is below 16")));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows = Vec::with_capacity(n_videos * frames_per_video * 5);
    for v in 0..n_videos {
        let vid = synthetic_video_id(v);
        for f in 0..frames_per_video as u32 {
            let (pristine, geom) = render_pristine(seed, &vid, f, side);
            let mut emit = |method: MethodLabel, img: &Image| -> Result<()> {
                let rel = frame_path(method.as_str(), &vid, f);
                save_png(img, &out_dir.join(&rel))?;
                rows.push(ManifestRow { path: rel, video_id: vid.clone(), frame_idx: f, method });
                Ok(())
            };
            emit(MethodLabel::real(), &pristine)?;
            for op in ForgeryOperator::ALL {
                emit(op.label(), &op.apply(&pristine, &geom, seed, &vid))?;
            }
        }
    }
    rows.sort();
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), rows, dataset_seed: Some(seed) };
    manifest.save()?;
    Ok(manifest)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `root/<method>/<video_id>/<frame_idx>.png`. Method directories
/// must be in [`BUILTIN_METHODS`] or `extra_methods`. Every image is decoded
/// and must share one square RGB shape.
pub fn load_framedir(root: &Path, extra_methods: &[String]) -> Result<DatasetManifest> {
    let mut rows = Vec::new();
    let mut shape = None;
    for method_dir in read_dir_sorted(root)? {
        if !method_dir.is_dir() {
            continue;
        }
        let name = method_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if !BUILTIN_METHODS.contains(&name.as_str()) && !extra_methods.contains(&name) {
            return Err(Error::UnknownMethod(name));
        }
        for video_dir in read_dir_sorted(&method_dir)? {
            if !video_dir.is_dir() {
                continue;
            }
            let video_id = video_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for file in read_dir_sorted(&video_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let stem = file.file_stem().unwrap_or_default().to_string_lossy();
                let frame_idx: u32 = stem.parse().map_err(|_| Error::Image {
                    path: file.clone(),
                    reason: "file stem is not a frame index".into(),
                })?;
                let img = load_png(&file)?;
                let s = img.shape();
                if s.0 != s.1 || shape.is_some_and(|prev| prev != s) {
                    return Err(Error::Image {
                        path: file,
                        reason: format!("shape {}x{} differs from the dataset's square shape", s.0, s.1),
                    });
                }
                shape = Some(s);
                rows.push(ManifestRow {
                    path: frame_path(&name, &video_id, frame_idx),
                    video_id: video_id.clone(),
                    frame_idx,
                    method: MethodLabel::new(name.clone()),
                });
            }
        }
    }
    if rows.is_empty() {
        log::warn!("no frames found under {}", root.display());
    }
    rows.sort();
    let dataset_seed = fs::read(root.join(SIDECAR_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<Sidecar>(&b).ok())
        .and_then(|s| s.dataset_seed);
    let manifest = DatasetManifest { root: root.to_path_buf(), rows, dataset_seed };
    manifest.validate()?;
    Ok(manifest)
}

/// Video-grouped splits and the sampled frames of each.
#[derive(Clone, Debug)]
pub struct ProtocolSplits {
    pub spec: SplitSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ProtocolSplits {
    /// Keeps only samples whose method is in `keep`.
    pub fn restrict(&self, keep: &[MethodLabel]) -> Self {
        let f = |v: &[Sample]| v.iter().filter(|s| keep.contains(&s.method)).cloned().collect();
        Self { spec: self.spec.clone(), train: f(&self.train), val: f(&self.val), test: f(&self.test) }
    }
}

/// Splits videos by `ratios` (rounded, test takes the remainder) so that
/// every video's pristine and manipulated frames share a split, then draws
/// `min(frames_per_video, available)` frames per `(video, method)` uniformly
/// without replacement.
pub fn make_protocol_splits(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    frames_per_video: usize,
    seed: u64,
) -> Result<ProtocolSplits> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(*r >= 0.0)) || ((rt + rv + rs) - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    if frames_per_video == 0 {
        return Err(Error::InvalidInput("frames_per_video must be at least 1".into()));
    }
    let mut videos: Vec<String> = manifest.video_ids().into_iter().collect();
    let n = videos.len();
    let n_train = (rt * n as f64).round() as usize;
    let n_val = (rv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidInput(format!(
            "{n} videos cannot populate train/val/test with ratios {ratios:?}"
        )));
    }
    videos.shuffle(&mut seed::derived_rng(seed, "split/videos"));
    let spec = SplitSpec {
        train_videos: videos[..n_train].iter().cloned().collect(),
        val_videos: videos[n_train..n_train + n_val].iter().cloned().collect(),
        test_videos: videos[n_train + n_val..].iter().cloned().collect(),
    };

    let mut groups: BTreeMap<(&str, &MethodLabel), Vec<&ManifestRow>> = BTreeMap::new();
    for row in &manifest.rows {
        groups.entry((row.video_id.as_str(), &row.method)).or_default().push(row);
    }
    let mut splits = ProtocolSplits { spec, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for ((vid, method), mut rows) in groups {
        rows.sort_by_key(|r| r.frame_idx);
        let mut rng = seed::derived_rng(seed, &format!("split/frames/{vid}/{method}"));
        let k = frames_per_video.min(rows.len());
        let mut chosen: Vec<&ManifestRow> = rows.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_by_key(|r| r.frame_idx);
        let target = if splits.spec.train_videos.contains(vid) {
            &mut splits.train
        } else if splits.spec.val_videos.contains(vid) {
            &mut splits.val
        } else {
            &mut splits.test
        };
        for row in chosen {
            let img = manifest.load_image(row)?;
            target.push(Sample::new(img, row.video_id.clone(), row.frame_idx, row.method.clone()));
        }
    }
    Ok(splits)
}
