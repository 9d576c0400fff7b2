//! Class activation maps and 2D embedding layouts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{io_err, Error, Result};
use crate::model::images_to_tensor;
use crate::nn::{Module, Tensor};
use crate::pipeline::TrainedModel;
use crate::seed;

/// Grad-CAM heatmap upsampled to the input resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub heatmap: Vec<f32>,
    pub target_class: usize,
    pub sample_id: String,
}

impl ActivationMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.heatmap[y * self.width + x]
    }

    /// Mean heat over pixels where `inside(y, x)` holds, and over the rest.
    pub fn mean_inside_outside(&self, inside: impl Fn(usize, usize) -> bool) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x) as f64;
                if inside(y, x) {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    /// Shannon entropy of the heatmap read as a distribution over pixels,
    /// divided by its maximum `ln(h·w)`. 1 is perfectly diffuse; an
    /// all-zero map counts as diffuse.
    pub fn spatial_entropy(&self) -> f64 {
        let total: f64 = self.heatmap.iter().map(|&v| v as f64).sum();
        let n = self.heatmap.len();
        if total <= 0.0 || n < 2 {
            return 1.0;
        }
        let h: f64 = self
            .heatmap
            .iter()
            .map(|&v| v as f64 / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        h / (n as f64).ln()
    }

    /// Blends a colour-mapped heatmap over `image` and writes a PNG.
    pub fn save_overlay(&self, image: &Image, path: &Path, opacity: f32) -> Result<()> {
        if image.shape() != (self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "overlay of a {}×{} map on a {:?} image",
                self.height,
                self.width,
                image.shape()
            )));
        }
        let mut planar = image.data().to_vec();
        let plane = self.height * self.width;
        for (i, &v) in self.heatmap.iter().enumerate() {
            let rgb = heat_colour(v);
            for c in 0..3 {
                let p = &mut planar[c * plane + i];
                *p = (1.0 - opacity) * *p + opacity * rgb[c];
            }
        }
        crate::dataset::save_png(&Image::from_planar(self.height, self.width, planar)?, path)
    }
}

/// Blue → cyan → yellow → red.
fn heat_colour(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Grad-CAM on the encoder's final convolutional grid for `target_class`
/// of the Stage-2 classifier. The model itself is not modified.
pub fn gradcam(model: &TrainedModel, image: &Image, target_class: usize, sample_id: &str) -> Result<ActivationMap> {
    let mut classifier = model
        .stack
        .classifier
        .clone()
        .ok_or_else(|| Error::InvalidInput("model has no classifier head".into()))?;
    let k = classifier.classes();
    if target_class >= k {
        return Err(Error::LabelOutOfRange { label: target_class, classes: k });
    }
    let mut encoder = model.stack.encoder.clone();
    let x = images_to_tensor(&[image])?;
    let a = encoder.feature_map(&x, false);
    let [_, channels, gh, gw] = a.shape;
    if gh * gw < 2 {
        return Err(Error::InvalidInput("encoder has no spatial feature grid".into()));
    }
    let r = encoder.head_forward(&a, true);
    let logits = classifier.forward(&r, true);
    let mut onehot = Tensor::zeros(logits.shape);
    onehot.data[target_class] = 1.0;
    let dr = classifier.backward(&onehot);
    let da = encoder.head_backward(&dr);

    let cell = gh * gw;
    let mut cam = vec![0.0f32; cell];
    for ch in 0..channels {
        let grads = &da.data[ch * cell..(ch + 1) * cell];
        let weight = grads.iter().sum::<f32>() / cell as f32;
        for (c, &act) in cam.iter_mut().zip(&a.data[ch * cell..(ch + 1) * cell]) {
            *c += weight * act;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (h, w) = image.shape();
    let mut heatmap = upsample_bilinear(&cam, gh, gw, h, w);
    normalize_unit(&mut heatmap);
    Ok(ActivationMap { height: h, width: w, heatmap, target_class, sample_id: sample_id.to_string() })
}

fn upsample_bilinear(src: &[f32], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f32> {
    let sample = |pos: usize, out: usize, size: usize| {
        let f = ((pos as f32 + 0.5) * size as f32 / out as f32 - 0.5).clamp(0.0, (size - 1) as f32);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(size - 1), f - i0 as f32)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = sample(y, h, sh);
        for x in 0..w {
            let (x0, x1, fx) = sample(x, w, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
fn normalize_unit(v: &mut [f32]) {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 1e-12) || !span.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
}

/// Mean [`ActivationMap::spatial_entropy`] per label.
pub fn entropy_by_label<'a>(maps: impl IntoIterator<Item = (&'a str, &'a ActivationMap)>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (label, map) in maps {
        let e = acc.entry(label.to_string()).or_default();
        e.0 += map.spatial_entropy();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    TsneStyle,
    UmapStyle,
}

impl ProjectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionMethod::TsneStyle => "tsne",
            ProjectionMethod::UmapStyle => "umap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub method: ProjectionMethod,
}

pub const MIN_PROJECTION_POINTS: usize = 10;

/// Lays out the rows of `embeddings` in the plane.
pub fn project_embeddings(
    embeddings: &Tensor,
    labels: &[String],
    method: ProjectionMethod,
    seed: u64,
) -> Result<Projection2D> {
    let m = embeddings.batch();
    if m < MIN_PROJECTION_POINTS {
        return Err(Error::InvalidInput(format!(
            "projection needs at least {MIN_PROJECTION_POINTS} points, got {m}"
        )));
    }
    if labels.len() != m {
        return Err(Error::ShapeMismatch(format!("{m} embeddings, {} labels", labels.len())));
    }
    if !embeddings.all_finite() {
        return Err(Error::InvalidInput("embeddings contain non-finite values".into()));
    }
    let dim = embeddings.item_len();
    let mut x: Vec<f64> = embeddings.data.iter().map(|&v| v as f64).collect();
    let mut d2 = pairwise_sq_dists(&x, m, dim);
    if d2.iter().all(|&d| d == 0.0) {
        log::warn!("all {m} embeddings are identical; jittering before projection");
        let mut rng = seed::derived_rng(seed, "project/jitter");
        let noise = Normal::new(0.0, 1e-3).expect("valid normal");
        x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        d2 = pairwise_sq_dists(&x, m, dim);
    }
    let points = match method {
        ProjectionMethod::TsneStyle => tsne(&d2, m, seed),
        ProjectionMethod::UmapStyle => umap(&d2, m, seed),
    };
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidInput("projection produced non-finite coordinates".into()));
    }
    Ok(Projection2D { points, labels: labels.to_vec(), method })
}

fn pairwise_sq_dists(x: &[f64], m: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = x[i * dim..(i + 1) * dim]
                .iter()
                .zip(&x[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * m + j] = s;
            d[j * m + i] = s;
        }
    }
    d
}

/// Row `i` of Gaussian affinities whose entropy matches `ln(perplexity)`.
fn gaussian_row(d2: &[f64], i: usize, m: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let row = &d2[i * m..(i + 1) * m];
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let mut p = vec![0.0; m];
    let dmin = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    for _ in 0..64 {
        let mut sum = 0.0;
        for j in 0..m {
            p[j] = if j == i { 0.0 } else { (-(row[j] - dmin) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for j in 0..m {
            p[j] /= sum;
            if p[j] > 0.0 {
                h -= p[j] * p[j].ln();
            }
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

fn random_init(m: usize, scale: f64, seed: u64, label: &str) -> Vec<[f64; 2]> {
    let mut rng = seed::derived_rng(seed, label);
    let normal = Normal::new(0.0, scale).expect("valid normal");
    (0..m).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect()
}

/// Exact t-SNE with early exaggeration and per-coordinate gains.
fn tsne(d2: &[f64], m: usize, seed: u64) -> Vec<[f64; 2]> {
    let perplexity = (30.0f64).min((m as f64 - 1.0) / 3.0).max(2.0);
    let mut p = vec![0.0; m * m];
    for i in 0..m {
        let row = gaussian_row(d2, i, m, perplexity);
        p[i * m..(i + 1) * m].copy_from_slice(&row);
    }
    let mut sym = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sym[i * m + j] = ((p[i * m + j] + p[j * m + i]) / (2.0 * m as f64)).max(1e-12);
        }
    }

    let iterations = 750;
    let exaggeration_until = 250;
    let learning_rate = (m as f64 / 12.0).max(50.0);
    let mut y = random_init(m, 1e-4, seed, "project/tsne");
    let mut velocity = vec![[0.0f64; 2]; m];
    let mut gains = vec![[1.0f64; 2]; m];
    let mut q = vec![0.0; m * m];
    for it in 0..iterations {
        let exaggeration = if it < exaggeration_until { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_until { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * m + j] = v;
                q[j * m + i] = v;
                qsum += 2.0 * v;
            }
        }
        for i in 0..m {
            let mut g = [0.0f64; 2];
            for j in 0..m {
                if i == j {
                    continue;
                }
                let w = q[i * m + j];
                let coef = 4.0 * (exaggeration * sym[i * m + j] - w / qsum) * w;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let same_sign = (g[c] > 0.0) == (velocity[i][c] > 0.0);
                gains[i][c] = if same_sign { (gains[i][c] * 0.8).max(0.01) } else { gains[i][c] + 0.2 };
                velocity[i][c] = momentum * velocity[i][c] - learning_rate * gains[i][c] * g[c];
            }
        }
        for i in 0..m {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        center(&mut y);
    }
    y
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

/// Fuzzy k-nearest-neighbour graph embedded by edge sampling with
/// negative sampling, using the curve `1 / (1 + a·d^(2b))`.
fn umap(d2: &[f64], m: usize, seed: u64) -> Vec<[f64; 2]> {
    const A: f64 = 1.577;
    const B: f64 = 0.895;
    let k = 15.min(m - 1);
    let epochs = 300;
    let negatives = 5;

    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..m {
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d2[i * m + a].total_cmp(&d2[i * m + b]).then(a.cmp(&b)));
        let nn = &order[..k];
        let dist: Vec<f64> = nn.iter().map(|&j| d2[i * m + j].sqrt()).collect();
        let rho = dist.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
        let target = (k as f64).log2();
        let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let s: f64 = dist.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum();
            if (s - target).abs() < 1e-5 {
                break;
            }
            if s > target {
                hi = sigma;
                sigma = (lo + sigma) / 2.0;
            } else {
                lo = sigma;
                sigma = if hi.is_finite() { (sigma + hi) / 2.0 } else { sigma * 2.0 };
            }
        }
        for (&j, &d) in nn.iter().zip(&dist) {
            let w = (-(d - rho).max(0.0) / sigma.max(1e-12)).exp();
            *weights.entry((i, j)).or_default() += w;
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for (&(i, j), &w) in &weights {
        if i < j || !weights.contains_key(&(j, i)) {
            let wt = weights.get(&(j, i)).copied().unwrap_or(0.0);
            let union = w + wt - w * wt;
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            edges.push((a, b, union));
        }
    }
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    edges.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
    let wmax = edges.iter().map(|e| e.2).fold(0.0, f64::max).max(1e-12);

    let mut rng = seed::derived_rng(seed, "project/umap");
    let mut y: Vec<[f64; 2]> = (0..m).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect();
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    let mut order: Vec<usize> = (0..edges.len()).collect();
    for epoch in 0..epochs {
        let alpha = 1.0 - epoch as f64 / epochs as f64;
        order.shuffle(&mut rng);
        for &e in &order {
            let (i, j, w) = edges[e];
            if rng.random::<f64>() > w / wmax {
                continue;
            }
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let dist2 = dx * dx + dy * dy;
            if dist2 > 0.0 {
                let coef = -2.0 * A * B * dist2.powf(B - 1.0) / (1.0 + A * dist2.powf(B));
                for (c, d) in [(0, dx), (1, dy)] {
                    let g = clip(coef * d) * alpha;
                    y[i][c] += g;
                    y[j][c] -= g;
                }
            }
            for _ in 0..negatives {
                let n = rng.random_range(0..m);
                if n == i {
                    continue;
                }
                let (dx, dy) = (y[i][0] - y[n][0], y[i][1] - y[n][1]);
                let dist2 = dx * dx + dy * dy;
                let coef = 2.0 * B / ((0.001 + dist2) * (1.0 + A * dist2.powf(B)));
                for (c, d) in [(0, dx), (1, dy)] {
                    y[i][c] += clip(coef * d) * alpha;
                }
            }
        }
    }
    center(&mut y);
    y
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters contribute 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} points, {} labels", points.len(), labels.len())));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l.as_str()).or_insert(next);
    }
    if ids.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l.as_str()]).collect();
    let mut sizes = vec![0usize; ids.len()];
    cluster.iter().for_each(|&c| sizes[c] += 1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        if sizes[cluster[i]] < 2 {
            continue;
        }
        let mut sums = vec![0.0; ids.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[cluster[j]] += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            }
        }
        let a = sums[cluster[i]] / (sizes[cluster[i]] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != cluster[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct PointRow<'a> {
    x: f64,
    y: f64,
    label: &'a str,
}

pub fn write_projection_csv(path: &Path, projection: &Projection2D) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (p, label) in projection.points.iter().zip(&projection.labels) {
        w.serialize(PointRow { x: p[0], y: p[1], label })?;
    }
    w.flush().map_err(io_err(path))
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Renders the layout as a `side × side` PNG scatter, one colour per label
/// in sorted label order.
pub fn render_scatter(projection: &Projection2D, path: &Path, side: u32) -> Result<()> {
    let mut canvas = image::RgbImage::from_pixel(side, side, image::Rgb([255, 255, 255]));
    let names: Vec<&String> = {
        let mut v: Vec<&String> = projection.labels.iter().collect();
        v.sort();
        v.dedup();
        v
    };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &projection.points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let margin = side as f64 * 0.05;
    let usable = side as f64 - 2.0 * margin;
    for (p, label) in projection.points.iter().zip(&projection.labels) {
        let colour = PALETTE[names.binary_search(&label).unwrap_or(0) % PALETTE.len()];
        let coord = |c: usize| {
            let span = (hi[c] - lo[c]).max(1e-12);
            (margin + (p[c] - lo[c]) / span * usable) as i64
        };
        let (cx, cy) = (coord(0), side as i64 - 1 - coord(1));
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..side as i64).contains(&x) && (0..side as i64).contains(&y) {
                    canvas.put_pixel(x as u32, y as u32, image::Rgb(colour));
                }
            }
        }
    }
    canvas
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(per: usize, dim: usize, gap: f64, seed: u64) -> (Tensor, Vec<String>) {
        let mut rng = crate::seed::rng(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                for d in 0..dim {
                    let centre = if d == 0 && c == 1 { gap } else { 0.0 };
                    data.push((centre + normal.sample(&mut rng)) as f32);
                }
                labels.push(format!("c{c}"));
            }
        }
        (Tensor::matrix(2 * per, dim, data).unwrap(), labels)
    }

    #[test]
    fn normalization_contract() {
        let mut v = vec![0.2, 0.5, 1.7];
        normalize_unit(&mut v);
        assert_eq!(v.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(v.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
        let mut flat = vec![0.3; 5];
        normalize_unit(&mut flat);
        assert!(flat.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn upsample_preserves_constants_and_size() {
        let up = upsample_bilinear(&[0.4; 16], 4, 4, 64, 64);
        assert_eq!(up.len(), 64 * 64);
        assert!(up.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn entropy_bounds() {
        let map = |heatmap: Vec<f32>| ActivationMap { height: 2, width: 2, heatmap, target_class: 0, sample_id: "s".into() };
        assert!((map(vec![1.0; 4]).spatial_entropy() - 1.0).abs() < 1e-12);
        assert_eq!(map(vec![1.0, 0.0, 0.0, 0.0]).spatial_entropy(), 0.0);
        assert_eq!(map(vec![0.0; 4]).spatial_entropy(), 1.0);
    }

    #[test]
    fn silhouette_of_separated_and_mixed_points() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        let lab: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert!(silhouette(&pts, &lab).unwrap() > 0.98);
        let mixed: Vec<String> = ["a", "b", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(silhouette(&pts, &mixed).unwrap() < 0.0);
        assert!(silhouette(&pts, &vec!["a".to_string(); 4]).is_err());
    }

    #[test]
    fn projection_shapes_and_determinism() {
        let (x, labels) = clusters(5, 128, 8.0, 1);
        for method in [ProjectionMethod::TsneStyle, ProjectionMethod::UmapStyle] {
            let a = project_embeddings(&x, &labels, method, 3).unwrap();
            assert_eq!(a.points.len(), 10);
            assert_eq!(a, project_embeddings(&x, &labels, method, 3).unwrap());
        }
        let small = Tensor::matrix(9, 4, vec![0.0; 36]).unwrap();
        assert!(project_embeddings(&small, &vec!["a".into(); 9], ProjectionMethod::TsneStyle, 0).is_err());
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let (x, labels) = clusters(40, 128, 12.0, 5);
        for method in [ProjectionMethod::TsneStyle, ProjectionMethod::UmapStyle] {
            let p = project_embeddings(&x, &labels, method, 11).unwrap();
            let s = silhouette(&p.points, &labels).unwrap();
            assert!(s > 0.5, "{method:?} silhouette {s}");
        }
    }

    #[test]
    fn identical_embeddings_are_jittered() {
        let x = Tensor::matrix(12, 8, vec![0.5; 96]).unwrap();
        let labels: Vec<String> = (0..12).map(|i| format!("c{}", i % 2)).collect();
        let p = project_embeddings(&x, &labels, ProjectionMethod::UmapStyle, 0).unwrap();
        assert!(p.points.iter().all(|q| q[0].is_finite() && q[1].is_finite()));
    }
}
