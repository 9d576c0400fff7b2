//! Stochastic view augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::seed;

/// Random resized crop, horizontal flip, color jitter, grayscale and an
/// optional small rotation. Magnitudes follow common contrastive-learning
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f32, f32),
    pub flip_prob: f32,
    pub color_jitter: f32,
    pub grayscale_prob: f32,
    /// Maximum absolute rotation; 0 disables rotation.
    pub rotation_degrees: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.8, 1.0),
            flip_prob: 0.5,
            color_jitter: 0.4,
            grayscale_prob: 0.1,
            rotation_degrees: 0.0,
        }
    }
}

impl AugmentPolicy {
    /// Crop and flip only. Colour is part of the synthetic forgery signal,
    /// so the synthetic benchmark defaults to this policy.
    pub fn geometric() -> Self {
        Self {
            crop_scale: (0.85, 1.0),
            flip_prob: 0.5,
            color_jitter: 0.0,
            grayscale_prob: 0.0,
            rotation_degrees: 0.0,
        }
    }

    /// Policy that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter: 0.0,
            grayscale_prob: 0.0,
            rotation_degrees: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.color_jitter >= 0.0) || !(self.rotation_degrees >= 0.0) {
            return Err(Error::InvalidInput(
                "color_jitter and rotation_degrees must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Applies the policy with randomness drawn from `seed`. Output has the
    /// input's shape and lies in `[0, 1]`.
    pub fn apply(&self, image: &Image, seed: u64) -> Result<Image> {
        self.validate()?;
        let mut rng = seed::rng(seed);
        let (h, w) = image.shape();
        let mut out = image.clone();

        let (lo, hi) = self.crop_scale;
        if lo < 1.0 {
            let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = scale.sqrt();
            let ch = h as f32 * side;
            let cw = w as f32 * side;
            let oy = rng.random::<f32>() * (h as f32 - ch);
            let ox = rng.random::<f32>() * (w as f32 - cw);
            out = resample(&out, |y, x| {
                (
                    oy + (y as f32 + 0.5) * ch / h as f32 - 0.5,
                    ox + (x as f32 + 0.5) * cw / w as f32 - 0.5,
                )
            });
        }

        if self.rotation_degrees > 0.0 {
            let deg = rng.random_range(-self.rotation_degrees..=self.rotation_degrees);
            let (sin, cos) = deg.to_radians().sin_cos();
            let cy = (h as f32 - 1.0) / 2.0;
            let cx = (w as f32 - 1.0) / 2.0;
            out = resample(&out, |y, x| {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
            });
        }

        if self.flip_prob > 0.0 && rng.random::<f32>() < self.flip_prob {
            out = out.mirrored();
        }

        if self.color_jitter > 0.0 {
            let j = self.color_jitter;
            let brightness = rng.random_range((1.0 - j).max(0.0)..=1.0 + j);
            let contrast = rng.random_range((1.0 - j).max(0.0)..=1.0 + j);
            let saturation = rng.random_range((1.0 - j).max(0.0)..=1.0 + j);
            jitter(&mut out, brightness, contrast, saturation);
        }

        if self.grayscale_prob > 0.0 && rng.random::<f32>() < self.grayscale_prob {
            let plane = h * w;
            let data = out.data_mut();
            for p in 0..plane {
                let g = luma(data[p], data[plane + p], data[2 * plane + p]);
                data[p] = g;
                data[plane + p] = g;
                data[2 * plane + p] = g;
            }
        }

        out.clamp_unit();
        Ok(out)
    }
}

#[inline]
fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let (h, w) = img.shape();
    let plane = h * w;
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = (0..plane)
        .map(|p| luma(data[p], data[plane + p], data[2 * plane + p]))
        .sum::<f32>()
        / plane as f32;
    for v in data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for p in 0..plane {
        let g = luma(data[p], data[plane + p], data[2 * plane + p]);
        for c in 0..3 {
            let v = &mut data[c * plane + p];
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
}

/// Bilinear resampling with edge clamping; `map` gives the source
/// coordinate `(y, x)` of each output pixel.
pub(crate) fn resample(src: &Image, map: impl Fn(usize, usize) -> (f32, f32)) -> Image {
    let (h, w) = src.shape();
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            let sy = sy.clamp(0.0, (h - 1) as f32);
            let sx = sx.clamp(0.0, (w - 1) as f32);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f32;
            let fx = sx - x0 as f32;
            for c in 0..3 {
                let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
                let bottom = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = seed::rng(seed);
        let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
        Image::from_planar(side, side, data).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = random_image(12, 1);
        for seed in 0..10 {
            assert_eq!(AugmentPolicy::identity().apply(&img, seed).unwrap(), img);
        }
    }

    #[test]
    fn forced_flip_mirrors() {
        let img = random_image(9, 2);
        let policy = AugmentPolicy {
            flip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let out = policy.apply(&img, 5).unwrap();
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, 8 - x));
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = random_image(16, 3);
        let policy = AugmentPolicy {
            color_jitter: 0.9,
            rotation_degrees: 20.0,
            grayscale_prob: 0.5,
            ..AugmentPolicy::default()
        };
        for seed in 0..100 {
            let out = policy.apply(&img, seed).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let img = random_image(16, 4);
        let policy = AugmentPolicy::default();
        assert_eq!(policy.apply(&img, 9).unwrap(), policy.apply(&img, 9).unwrap());
    }

    #[test]
    fn rejects_invalid_policies() {
        let img = random_image(4, 0);
        let bad = [
            AugmentPolicy { crop_scale: (0.0, 1.0), ..AugmentPolicy::default() },
            AugmentPolicy { crop_scale: (0.9, 0.8), ..AugmentPolicy::default() },
            AugmentPolicy { flip_prob: 1.5, ..AugmentPolicy::default() },
            AugmentPolicy { color_jitter: -0.1, ..AugmentPolicy::default() },
        ];
        for p in bad {
            assert!(p.apply(&img, 0).is_err());
        }
    }
}
