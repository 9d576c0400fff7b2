//! Procedural face-like frames and four parametric forgery operators.
//!
//! Pristine frames are a smooth two-colour background with an elliptical
//! face, two eyes and a mouth; identity (colours and geometry) is fixed per
//! video and each frame adds a small pose jitter, exposure change and
//! sensor noise. The operators form two families: `M1`/`M3` alter the whole
//! face region smoothly (global signal) while `M2`/`M4` alter small local
//! regions.

use std::collections::HashMap;
use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, MethodLabel};
use crate::seed;

/// Face ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub cx: f32,
    pub cy: f32,
    /// Horizontal semi-axis.
    pub a: f32,
    /// Vertical semi-axis.
    pub b: f32,
}

impl FaceGeometry {
    /// Approximate signed distance to the ellipse boundary, in pixels.
    pub fn signed_distance(&self, y: f32, x: f32) -> f32 {
        let r = (((x - self.cx) / self.a).powi(2) + ((y - self.cy) / self.b).powi(2)).sqrt();
        (r - 1.0) * self.a.min(self.b)
    }

    /// Anti-aliased coverage of the face region.
    pub fn coverage(&self, y: f32, x: f32) -> f32 {
        (0.5 - self.signed_distance(y, x)).clamp(0.0, 1.0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.signed_distance(y as f32, x as f32) < 0.0
    }
}

#[derive(Clone, Debug)]
struct VideoStyle {
    bg: [[f32; 3]; 2],
    bg_angle: f32,
    blob: ([f32; 3], f32, f32, f32),
    center: (f32, f32),
    axes: (f32, f32),
    skin: [f32; 3],
    eye_offset: (f32, f32),
    eye_radius: f32,
    iris: [f32; 3],
    mouth: (f32, f32, f32),
    lips: [f32; 3],
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn uniform3(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl VideoStyle {
    fn sample(rng: &mut impl Rng) -> Self {
        // Skin tones live on a one-parameter family so that channel-wise
        // colour shifts move a face off it.
        let tone = rng.random_range(0.0..1.0);
        Self {
            bg: [uniform3(rng, 0.1, 0.9), uniform3(rng, 0.1, 0.9)],
            bg_angle: rng.random_range(0.0..2.0 * PI),
            blob: (
                uniform3(rng, 0.1, 0.9),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.2),
            ),
            center: (rng.random_range(0.45..0.55), rng.random_range(0.46..0.54)),
            axes: (rng.random_range(0.25..0.3), rng.random_range(0.33..0.38)),
            skin: lerp3([0.95, 0.79, 0.68], [0.47, 0.31, 0.22], tone),
            eye_offset: (rng.random_range(0.36..0.44), rng.random_range(0.18..0.26)),
            eye_radius: rng.random_range(0.13..0.17),
            iris: uniform3(rng, 0.05, 0.45),
            mouth: (
                rng.random_range(0.4..0.5),
                rng.random_range(0.35..0.5),
                rng.random_range(0.08..0.13),
            ),
            lips: [
                rng.random_range(0.6..0.8),
                rng.random_range(0.2..0.35),
                rng.random_range(0.25..0.35),
            ],
        }
    }
}

fn ellipse_coverage(y: f32, x: f32, cy: f32, cx: f32, ry: f32, rx: f32) -> f32 {
    FaceGeometry { cx, cy, a: rx, b: ry }.coverage(y, x)
}

/// Renders one pristine frame of a video.
pub fn render_pristine(dataset_seed: u64, video_id: &str, frame_idx: u32, side: usize) -> (Image, FaceGeometry) {
    let style = VideoStyle::sample(&mut seed::derived_rng(dataset_seed, &format!("video/{video_id}")));
    let mut rng = seed::derived_rng(dataset_seed, &format!("frame/{video_id}/{frame_idx}"));
    let s = side as f32;
    let geom = FaceGeometry {
        cx: style.center.0 * s + rng.random_range(-1.5..1.5),
        cy: style.center.1 * s + rng.random_range(-1.5..1.5),
        a: style.axes.0 * s,
        b: style.axes.1 * s,
    };
    let exposure = rng.random_range(0.97..1.03);
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let (dir_x, dir_y) = (style.bg_angle.cos(), style.bg_angle.sin());
    let eye_r = style.eye_radius * geom.a;
    let eyes = [
        (geom.cy - style.eye_offset.1 * geom.b, geom.cx - style.eye_offset.0 * geom.a),
        (geom.cy - style.eye_offset.1 * geom.b, geom.cx + style.eye_offset.0 * geom.a),
    ];
    let mouth_cy = geom.cy + style.mouth.0 * geom.b;
    let (mouth_rx, mouth_ry) = (style.mouth.1 * geom.a, style.mouth.2 * geom.b);

    let mut img = Image::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f32, x as f32);
            let t = (((fx / s - 0.5) * dir_x + (fy / s - 0.5) * dir_y) + 0.75) / 1.5;
            let mut px = lerp3(style.bg[0], style.bg[1], t.clamp(0.0, 1.0));
            let (bc, by, bx, br) = style.blob;
            let blob = ellipse_coverage(fy, fx, by * s, bx * s, br * s, br * s);
            px = lerp3(px, bc, 0.6 * blob);

            let face = geom.coverage(fy, fx);
            if face > 0.0 {
                let shade = 1.0 - 0.12 * ((fy - geom.cy) / geom.b) - 0.05 * ((fx - geom.cx) / geom.a).abs();
                let mut skin = style.skin.map(|c| c * shade);
                for &(ey, ex) in &eyes {
                    let white = ellipse_coverage(fy, fx, ey, ex, 0.6 * eye_r, eye_r);
                    skin = lerp3(skin, [0.95, 0.95, 0.93], white);
                    let pupil = ellipse_coverage(fy, fx, ey, ex, 0.45 * eye_r, 0.45 * eye_r);
                    skin = lerp3(skin, style.iris, pupil);
                }
                let lips = ellipse_coverage(fy, fx, mouth_cy, geom.cx, mouth_ry, mouth_rx);
                skin = lerp3(skin, style.lips, lips);
                px = lerp3(px, skin, face);
            }
            for (c, v) in px.iter().enumerate() {
                img.set(c, y, x, (v * exposure + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    (img, geom)
}

/// One of the four synthetic manipulation methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForgeryOperator {
    /// `M1`: additive low-frequency sinusoid over the face, offset to be
    /// non-negative.
    Watermark,
    /// `M2`: rectangle swap between the face halves, resampled in coarse
    /// blocks with per-block offsets.
    PatchSwap,
    /// `M3`: colour cast of fixed hue and random strength inside the face.
    ColorShift,
    /// `M4`: unsharp-mask ring along the face boundary.
    BoundaryRing,
}

impl ForgeryOperator {
    pub const ALL: [ForgeryOperator; 4] = [
        ForgeryOperator::Watermark,
        ForgeryOperator::PatchSwap,
        ForgeryOperator::ColorShift,
        ForgeryOperator::BoundaryRing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForgeryOperator::Watermark => "M1",
            ForgeryOperator::PatchSwap => "M2",
            ForgeryOperator::ColorShift => "M3",
            ForgeryOperator::BoundaryRing => "M4",
        }
    }

    pub fn label(self) -> MethodLabel {
        MethodLabel::new(self.name())
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    /// `"global"` for `M1`/`M3`, `"local"` for `M2`/`M4`.
    pub fn family(self) -> &'static str {
        match self {
            ForgeryOperator::Watermark | ForgeryOperator::ColorShift => "global",
            ForgeryOperator::PatchSwap | ForgeryOperator::BoundaryRing => "local",
        }
    }

    /// Applies the operator with parameters fixed per `(dataset, video)`.
    pub fn apply(self, img: &Image, geom: &FaceGeometry, dataset_seed: u64, video_id: &str) -> Image {
        let mut rng = seed::derived_rng(dataset_seed, &format!("op/{}/{video_id}", self.name()));
        let mut out = match self {
            ForgeryOperator::Watermark => watermark(img, geom, &mut rng),
            ForgeryOperator::PatchSwap => patch_swap(img, geom, &mut rng),
            ForgeryOperator::ColorShift => color_shift(img, geom, &mut rng),
            ForgeryOperator::BoundaryRing => boundary_ring(img, geom, &mut rng),
        };
        out.clamp_unit();
        out
    }
}

fn watermark(img: &Image, geom: &FaceGeometry, rng: &mut impl Rng) -> Image {
    let amp = rng.random_range(0.09..0.12);
    let cycles = rng.random_range(3.0..5.0);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let weights = uniform3(rng, 0.7, 1.0);
    let (h, w) = img.shape();
    let mut out = img.clone();
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..h {
        for x in 0..w {
            let m = geom.coverage(y as f32, x as f32);
            if m == 0.0 {
                continue;
            }
            let u = ((x as f32 - geom.cx) * ct + (y as f32 - geom.cy) * st) / (2.0 * geom.a);
            let wave = amp * 0.5 * (1.0 + (2.0 * PI * cycles * u + phase).sin()) * m;
            for (c, wc) in weights.iter().enumerate() {
                out.set(c, y, x, img.get(c, y, x) + wc * wave);
            }
        }
    }
    out
}

fn patch_swap(img: &Image, geom: &FaceGeometry, rng: &mut impl Rng) -> Image {
    let pw = (rng.random_range(0.8..1.0) * geom.a).round().max(2.0) as isize;
    let ph = (rng.random_range(0.6..0.8) * geom.b).round().max(2.0) as isize;
    let left = (
        (geom.cy + rng.random_range(-0.4..-0.2) * geom.b) as isize,
        (geom.cx - 0.45 * geom.a) as isize,
    );
    let right = (
        (geom.cy + rng.random_range(0.15..0.35) * geom.b) as isize,
        (geom.cx + 0.45 * geom.a) as isize,
    );
    let alpha = rng.random_range(0.85..1.0);
    let block = rng.random_range(4..6i64) as isize;
    let (h, w) = img.shape();
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    let mut swapped = img.clone();
    let mut touched = Vec::new();
    for dy in -ph / 2..ph - ph / 2 {
        for dx in -pw / 2..pw - pw / 2 {
            let (ly, lx) = (left.0 + dy, left.1 + dx);
            let (ry, rx) = (right.0 + dy, right.1 + dx);
            if !inside(ly, lx) || !inside(ry, rx) {
                continue;
            }
            let (ly, lx, ry, rx) = (ly as usize, lx as usize, ry as usize, rx as usize);
            for c in 0..3 {
                let l = img.get(c, ly, lx);
                let r = img.get(c, ry, rx);
                swapped.set(c, ry, rx, alpha * l + (1.0 - alpha) * r);
                swapped.set(c, ly, lx, alpha * r + (1.0 - alpha) * l);
            }
            touched.push((ly, lx));
            touched.push((ry, rx));
        }
    }
    // Block means over the swapped pixels, keyed by block cell.
    let cell = |y: usize, x: usize| (y as isize / block, x as isize / block);
    let mut sums: HashMap<(isize, isize), ([f32; 3], usize)> = HashMap::new();
    let mut offsets: HashMap<(isize, isize), f32> = HashMap::new();
    for &(y, x) in &touched {
        offsets.entry(cell(y, x)).or_insert_with(|| rng.random_range(-0.15..0.15));
        let e = sums.entry(cell(y, x)).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += swapped.get(c, y, x);
        }
        e.1 += 1;
    }
    let mut out = swapped.clone();
    for &(y, x) in &touched {
        let (sum, n) = sums[&cell(y, x)];
        let offset = offsets[&cell(y, x)];
        for c in 0..3 {
            out.set(c, y, x, sum[c] / n as f32 + offset);
        }
    }
    // Dark seam along the patch borders.
    for centre in [left, right] {
        for dy in -ph / 2 - 1..=ph - ph / 2 {
            for dx in -pw / 2 - 1..=pw - pw / 2 {
                let edge = dy == -ph / 2 - 1 || dy == ph - ph / 2 || dx == -pw / 2 - 1 || dx == pw - pw / 2;
                let (y, x) = (centre.0 + dy, centre.1 + dx);
                if edge && inside(y, x) {
                    for c in 0..3 {
                        let v = out.get(c, y as usize, x as usize);
                        out.set(c, y as usize, x as usize, v * 0.75);
                    }
                }
            }
        }
    }
    out
}

/// Direction of the `M3` cast, roughly orthogonal to the skin-tone line.
const CAST: [f32; 3] = [-0.6, 1.0, -0.2];

fn color_shift(img: &Image, geom: &FaceGeometry, rng: &mut impl Rng) -> Image {
    let gain = uniform3(rng, 0.95, 1.05);
    let strength = rng.random_range(0.07..0.11);
    let bias = CAST.map(|c| c * strength);
    let (h, w) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let m = geom.coverage(y as f32, x as f32);
            if m == 0.0 {
                continue;
            }
            for ch in 0..3 {
                let v = img.get(ch, y, x);
                out.set(ch, y, x, v + m * (gain[ch] * v + bias[ch] - v));
            }
        }
    }
    out
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let (h, w) = img.shape();
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += img.get(c, yy, xx);
                    }
                }
                out.set(c, y, x, acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32);
            }
        }
    }
    out
}

fn boundary_ring(img: &Image, geom: &FaceGeometry, rng: &mut impl Rng) -> Image {
    let width = rng.random_range(4.0..6.0);
    let amount = rng.random_range(2.5..4.0);
    let blurred = box_blur(&box_blur(img, 2), 2);
    let (h, w) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let d = geom.signed_distance(y as f32, x as f32);
            let ring = (1.0 - d.abs() / width).clamp(0.0, 1.0);
            if ring == 0.0 {
                continue;
            }
            for c in 0..3 {
                let v = img.get(c, y, x);
                let b = blurred.get(c, y, x);
                let target = v + amount * (v - b);
                out.set(c, y, x, v + ring * (target - v));
            }
        }
    }
    out
}
