//! Shared value types: images, samples, label schemes, splits and the
//! two-view batches consumed by the representation losses.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::seed;

/// An RGB image with values in `[0, 1]`, stored channel-planar (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    /// Wraps planar data; values are checked to be finite and inside `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from interleaved `H × W × 3` values.
    pub fn from_interleaved(height: usize, width: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} interleaved values, got {}",
                Self::CHANNELS * height * width,
                hwc.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; hwc.len()];
        for (p, px) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c];
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub(crate) fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

/// Manipulation method of a frame. `REAL` marks pristine frames.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MethodLabel(String);

impl MethodLabel {
    pub const REAL_NAME: &'static str = "REAL";

    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn real() -> Self {
        Self(Self::REAL_NAME.to_string())
    }

    pub fn is_real(&self) -> bool {
        self.0 == Self::REAL_NAME
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MethodLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MethodLabel {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// One face frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Arc<Image>,
    pub video_id: String,
    pub frame_idx: u32,
    pub method: MethodLabel,
    pub is_real: bool,
}

impl Sample {
    pub fn new(image: Image, video_id: impl Into<String>, frame_idx: u32, method: MethodLabel) -> Self {
        let is_real = method.is_real();
        Self {
            image: Arc::new(image),
            video_id: video_id.into(),
            frame_idx,
            method,
            is_real,
        }
    }

    /// Stable identifier `method/video/frame`.
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.method, self.video_id, self.frame_idx)
    }
}

/// Label granularity used when mapping samples to classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// `REAL` plus one class per forgery method ("scheme 1").
    ForgerySpecific,
    /// `REAL` versus `FAKE` ("scheme 2").
    Binary,
}

impl LabelScheme {
    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::ForgerySpecific => "forgery_specific",
            LabelScheme::Binary => "binary",
        }
    }
}

/// Ordered class alphabet for a set of known methods under a label scheme.
/// Class 0 is always `REAL`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    scheme: LabelScheme,
    known_methods: Vec<MethodLabel>,
    names: Vec<String>,
}

impl ClassMap {
    pub const FAKE_NAME: &'static str = "FAKE";

    /// `known_forgeries` lists the forgery methods (excluding `REAL`).
    pub fn new(scheme: LabelScheme, known_forgeries: &[MethodLabel]) -> Self {
        let known_methods: Vec<MethodLabel> = known_forgeries
            .iter()
            .filter(|m| !m.is_real())
            .cloned()
            .collect();
        let names = match scheme {
            LabelScheme::ForgerySpecific => std::iter::once(MethodLabel::REAL_NAME.to_string())
                .chain(known_methods.iter().map(|m| m.to_string()))
                .collect(),
            LabelScheme::Binary => vec![
                MethodLabel::REAL_NAME.to_string(),
                Self::FAKE_NAME.to_string(),
            ],
        };
        Self {
            scheme,
            known_methods,
            names,
        }
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn known_methods(&self) -> &[MethodLabel] {
        &self.known_methods
    }

    pub fn is_known(&self, method: &MethodLabel) -> bool {
        method.is_real() || self.known_methods.contains(method)
    }

    /// Class index of a method, or `None` when the method is unknown.
    pub fn class_of(&self, method: &MethodLabel) -> Option<usize> {
        if method.is_real() {
            return Some(0);
        }
        let pos = self.known_methods.iter().position(|m| m == method)?;
        Some(match self.scheme {
            LabelScheme::ForgerySpecific => pos + 1,
            LabelScheme::Binary => 1,
        })
    }
}

/// Video-level partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_videos: BTreeSet<String>,
    pub val_videos: BTreeSet<String>,
    pub test_videos: BTreeSet<String>,
}

impl SplitSpec {
    pub fn is_disjoint(&self) -> bool {
        self.train_videos.is_disjoint(&self.val_videos)
            && self.train_videos.is_disjoint(&self.test_videos)
            && self.val_videos.is_disjoint(&self.test_videos)
    }
}

/// `2N` augmented views; views `2k` and `2k + 1` come from sample `k`.
#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub views: Vec<Image>,
    pub labels: Vec<usize>,
    pub is_real: Vec<bool>,
    /// Zero-based index of the source sample of each view.
    pub origin_index: Vec<usize>,
}

impl MultiViewBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Builds the two-view batch for `samples`. Pure in `(samples, policy, seed)`.
pub fn build_multiview_batch(
    samples: &[Sample],
    policy: &AugmentPolicy,
    classes: &ClassMap,
    seed: u64,
) -> Result<MultiViewBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot build a batch from zero samples".into()))?;
    let shape = first.image.shape();
    if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "sample {} is {:?}, batch expects {:?}",
            bad.id(),
            bad.image.shape(),
            shape
        )));
    }
    let n = samples.len();
    let mut batch = MultiViewBatch {
        views: Vec::with_capacity(2 * n),
        labels: Vec::with_capacity(2 * n),
        is_real: Vec::with_capacity(2 * n),
        origin_index: Vec::with_capacity(2 * n),
    };
    for (k, sample) in samples.iter().enumerate() {
        let label = classes.class_of(&sample.method).ok_or_else(|| {
            Error::InvalidInput(format!(
                "sample {} has a method outside the known classes {:?}",
                sample.id(),
                classes.names()
            ))
        })?;
        for view in 0..2 {
            let view_seed = seed::derive(seed, &format!("view/{k}/{view}"));
            batch.views.push(policy.apply(&sample.image, view_seed)?);
            batch.labels.push(label);
            batch.is_real.push(sample.is_real);
            batch.origin_index.push(k);
        }
    }
    Ok(batch)
}

/// One known/unknown assignment of the cross-manipulation protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Combination {
    /// Known classes, `REAL` first.
    pub known: Vec<MethodLabel>,
    pub unknown: MethodLabel,
}

impl Combination {
    pub fn known_forgeries(&self) -> Vec<MethodLabel> {
        self.known.iter().filter(|m| !m.is_real()).cloned().collect()
    }
}

/// One combination per method: that method is unknown, all others plus
/// `REAL` are known.
pub fn leave_one_out_combinations(methods: &[MethodLabel]) -> Result<Vec<Combination>> {
    let forgeries: Vec<&MethodLabel> = methods.iter().filter(|m| !m.is_real()).collect();
    if forgeries.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-out needs at least 2 forgery methods, got {}",
            forgeries.len()
        )));
    }
    Ok(forgeries
        .iter()
        .map(|unknown| Combination {
            known: std::iter::once(MethodLabel::real())
                .chain(forgeries.iter().filter(|m| *m != unknown).map(|m| (*m).clone()))
                .collect(),
            unknown: (*unknown).clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> Vec<MethodLabel> {
        names.iter().map(|n| MethodLabel::new(*n)).collect()
    }

    fn gradient_image(side: usize, shift: f32) -> Image {
        let mut img = Image::zeros(side, side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let v = (x + y + c) as f32 / (2 * side + 3) as f32;
                    img.set(c, y, x, (v + shift).min(1.0));
                }
            }
        }
        img
    }

    #[test]
    fn leave_one_out_matches_four_method_table() {
        let combos = leave_one_out_combinations(&labels(&["DF", "F2F", "FS", "NT"])).unwrap();
        assert_eq!(combos.len(), 4);
        assert_eq!(combos[0].unknown, MethodLabel::new("DF"));
        assert_eq!(combos[0].known, labels(&["REAL", "F2F", "FS", "NT"]));
        for c in &combos {
            assert!(c.known[0].is_real());
            assert!(!c.known.contains(&c.unknown));
        }
    }

    #[test]
    fn leave_one_out_counts_and_rejections() {
        assert_eq!(leave_one_out_combinations(&labels(&["A", "B"])).unwrap().len(), 2);
        assert!(leave_one_out_combinations(&labels(&["A"])).is_err());
        assert!(leave_one_out_combinations(&labels(&["REAL", "A"])).is_err());
        for k in 2..12 {
            let names: Vec<MethodLabel> = (0..k).map(|i| MethodLabel::new(format!("M{i}"))).collect();
            let combos = leave_one_out_combinations(&names).unwrap();
            assert_eq!(combos.len(), k);
            let unknowns: BTreeSet<_> = combos.iter().map(|c| c.unknown.clone()).collect();
            assert_eq!(unknowns.len(), k);
            assert!(combos.iter().all(|c| c.known.len() == k));
        }
    }

    #[test]
    fn class_map_schemes() {
        let known = labels(&["M1", "M3"]);
        let fs = ClassMap::new(LabelScheme::ForgerySpecific, &known);
        assert_eq!(fs.names(), &["REAL", "M1", "M3"]);
        assert_eq!(fs.class_of(&MethodLabel::new("M3")), Some(2));
        assert_eq!(fs.class_of(&MethodLabel::new("M2")), None);
        let bin = ClassMap::new(LabelScheme::Binary, &known);
        assert_eq!(bin.names(), &["REAL", "FAKE"]);
        assert_eq!(bin.class_of(&MethodLabel::new("M3")), Some(1));
        assert_eq!(bin.class_of(&MethodLabel::real()), Some(0));
    }

    #[test]
    fn single_sample_identity_policy_gives_identical_views() {
        let s = Sample::new(gradient_image(8, 0.0), "v0", 0, MethodLabel::new("M1"));
        let classes = ClassMap::new(LabelScheme::ForgerySpecific, &labels(&["M1"]));
        let b = build_multiview_batch(&[s.clone()], &AugmentPolicy::identity(), &classes, 3).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.views[0], b.views[1]);
        assert_eq!(b.views[0], *s.image);
        assert_eq!(b.labels, vec![1, 1]);
        assert_eq!(b.is_real, vec![false, false]);
    }

    #[test]
    fn pairing_structure_for_eight_samples() {
        let classes = ClassMap::new(LabelScheme::ForgerySpecific, &labels(&["M1"]));
        let samples: Vec<Sample> = (0..8)
            .map(|i| {
                let m = if i % 2 == 0 { MethodLabel::real() } else { MethodLabel::new("M1") };
                Sample::new(gradient_image(8, i as f32 * 0.01), format!("v{i}"), 0, m)
            })
            .collect();
        let b = build_multiview_batch(&samples, &AugmentPolicy::default(), &classes, 1).unwrap();
        assert_eq!(b.len(), 16);
        let expected: Vec<usize> = (0..8).flat_map(|k| [k, k]).collect();
        assert_eq!(b.origin_index, expected);
        for k in 0..8 {
            assert_eq!(b.labels[2 * k], b.labels[2 * k + 1]);
            assert_eq!(b.is_real[2 * k], samples[k].is_real);
        }
    }

    #[test]
    fn batch_is_pure_in_seed() {
        let classes = ClassMap::new(LabelScheme::ForgerySpecific, &labels(&["M1"]));
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample::new(gradient_image(16, 0.05 * i as f32), format!("v{i}"), 0, MethodLabel::real()))
            .collect();
        let policy = AugmentPolicy::default();
        let a = build_multiview_batch(&samples, &policy, &classes, 11).unwrap();
        let b = build_multiview_batch(&samples, &policy, &classes, 11).unwrap();
        let c = build_multiview_batch(&samples, &policy, &classes, 12).unwrap();
        assert!(a.views.iter().zip(&b.views).all(|(x, y)| x.data() == y.data()));
        assert!(a.views.iter().zip(&c.views).any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn batch_rejects_empty_and_mixed_shapes() {
        let classes = ClassMap::new(LabelScheme::ForgerySpecific, &labels(&["M1"]));
        let policy = AugmentPolicy::identity();
        assert!(build_multiview_batch(&[], &policy, &classes, 0).is_err());
        let a = Sample::new(gradient_image(8, 0.0), "v0", 0, MethodLabel::real());
        let b = Sample::new(gradient_image(6, 0.0), "v1", 0, MethodLabel::real());
        assert!(matches!(
            build_multiview_batch(&[a, b], &policy, &classes, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(Image::from_planar(1, 1, vec![0.5, 1.2, 0.0]).is_err());
        assert!(Image::from_planar(1, 1, vec![0.5, 0.2]).is_err());
        let img = Image::from_interleaved(1, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.get(0, 0, 1), 0.4);
        assert_eq!(img.to_interleaved(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    }
}
