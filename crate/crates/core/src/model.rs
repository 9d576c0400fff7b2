//! Encoder, projection head, classifier head, weight snapshots and
//! stochastic weight averaging.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{io_err, Error, Result};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, AvgPool2, BatchCenter, BatchNorm2d, Conv2d, DenseBlock,
    GlobalAvgPool, Layer, Linear, Module, Param, Relu, Sequential, Tensor,
};
use crate::seed;

/// Width of the encoder output and of the projection.
pub const EMBED_DIM: usize = 128;

const NORM_EPS: f32 = 1e-12;
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Six strided 3×3 convolution blocks.
    SmallConv,
    /// Three densely connected blocks with transition layers.
    Dense,
}

/// Image → `r ∈ R^128`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    features: Sequential,
    pool: GlobalAvgPool,
    fc: Linear,
}

fn conv_block(seq: &mut Sequential, cin: usize, cout: usize, stride: usize, rng: &mut impl rand::Rng) {
    seq.push(Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, rng)));
    seq.push(Layer::BatchNorm(BatchNorm2d::new(cout)));
    seq.push(Layer::Relu(Relu::default()));
}

fn transition(seq: &mut Sequential, cin: usize, cout: usize, rng: &mut impl rand::Rng) {
    seq.push(Layer::BatchNorm(BatchNorm2d::new(cin)));
    seq.push(Layer::Relu(Relu::default()));
    seq.push(Layer::Conv(Conv2d::new(cin, cout, 1, 1, 0, rng)));
    seq.push(Layer::AvgPool(AvgPool2::default()));
}

impl Encoder {
    pub fn new(backbone: Backbone, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut features = Sequential::default();
        let width = match backbone {
            Backbone::SmallConv => {
                conv_block(&mut features, 3, 16, 2, &mut rng);
                conv_block(&mut features, 16, 24, 2, &mut rng);
                conv_block(&mut features, 24, 24, 1, &mut rng);
                conv_block(&mut features, 24, 48, 2, &mut rng);
                conv_block(&mut features, 48, 48, 1, &mut rng);
                conv_block(&mut features, 48, 64, 1, &mut rng);
                64
            }
            Backbone::Dense => {
                conv_block(&mut features, 3, 16, 2, &mut rng);
                let b1 = DenseBlock::new(16, 8, 3, &mut rng);
                let c1 = b1.out_channels();
                features.push(Layer::Dense(b1));
                transition(&mut features, c1, 24, &mut rng);
                let b2 = DenseBlock::new(24, 8, 3, &mut rng);
                let c2 = b2.out_channels();
                features.push(Layer::Dense(b2));
                transition(&mut features, c2, 32, &mut rng);
                let b3 = DenseBlock::new(32, 8, 3, &mut rng);
                let c3 = b3.out_channels();
                features.push(Layer::Dense(b3));
                features.push(Layer::BatchNorm(BatchNorm2d::new(c3)));
                features.push(Layer::Relu(Relu::default()));
                c3
            }
        };
        let fc = Linear::new(width, EMBED_DIM, true, &mut rng);
        Self {
            backbone,
            features,
            pool: GlobalAvgPool::default(),
            fc,
        }
    }

    /// `N × 3 × H × W → N × 128`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let a = self.features.forward(x, train);
        self.head_forward(&a, train)
    }

    /// Final convolutional feature grid, before pooling.
    pub fn feature_map(&mut self, x: &Tensor, train: bool) -> Tensor {
        self.features.forward(x, train)
    }

    pub fn head_forward(&mut self, a: &Tensor, train: bool) -> Tensor {
        let pooled = self.pool.forward(a, train);
        self.fc.forward(&pooled, train)
    }

    /// Backpropagates through the pooling head only; returns the gradient
    /// with respect to the feature grid.
    pub fn head_backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.fc.backward(grad);
        self.pool.backward(&g)
    }

    pub fn backward(&mut self, grad: &Tensor) {
        let g = self.head_backward(grad);
        self.features.backward(&g);
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.features.batch_norms_mut()
    }
}

impl Module for Encoder {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        Encoder::forward(self, x, train)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.head_backward(grad);
        self.features.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.features.params(&format!("{prefix}features"), out);
        self.fc.params(&format!("{prefix}fc"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.features.params_mut(&format!("{prefix}features"), out);
        self.fc.params_mut(&format!("{prefix}fc"), out);
    }
}

/// Batch-level normalization applied between the projection's linear map
/// and its L2 normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionNorm {
    None,
    Center,
    BatchNorm,
}

/// Projection head options.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub bias: bool,
    pub norm: ProjectionNorm,
}

#[derive(Clone, Debug)]
enum BatchLevel {
    Center(BatchCenter),
    Norm(BatchNorm2d),
}

/// Linear map, optional batch-level normalization, then row-wise L2
/// normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    linear: Linear,
    batch: Option<BatchLevel>,
    z: Tensor,
    norms: Vec<f32>,
}

impl ProjectionHead {
    pub fn new(spec: ProjectionSpec, seed: u64) -> Self {
        Self {
            linear: Linear::new(EMBED_DIM, EMBED_DIM, spec.bias, &mut seed::rng(seed)),
            batch: match spec.norm {
                ProjectionNorm::None => None,
                ProjectionNorm::Center => Some(BatchLevel::Center(BatchCenter::new(EMBED_DIM))),
                ProjectionNorm::BatchNorm => Some(BatchLevel::Norm(BatchNorm2d::new(EMBED_DIM))),
            },
            z: Tensor::zeros([0, EMBED_DIM, 1, 1]),
            norms: Vec::new(),
        }
    }
}

impl Module for ProjectionHead {
    fn forward(&mut self, r: &Tensor, train: bool) -> Tensor {
        let mut v = self.linear.forward(r, train);
        match &mut self.batch {
            Some(BatchLevel::Center(m)) => v = m.forward(&v, train),
            Some(BatchLevel::Norm(m)) => v = m.forward(&v, train),
            None => {}
        }
        let (z, norms) = l2_normalize_rows(&v, NORM_EPS);
        if train {
            self.z = z.clone();
            self.norms = norms;
        }
        z
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dv = l2_normalize_rows_backward(&self.z, &self.norms, grad);
        match &mut self.batch {
            Some(BatchLevel::Center(m)) => dv = m.backward(&dv),
            Some(BatchLevel::Norm(m)) => dv = m.backward(&dv),
            None => {}
        }
        self.linear.backward(&dv)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.linear.params(&format!("{prefix}linear"), out);
        match &self.batch {
            Some(BatchLevel::Center(m)) => m.params(&format!("{prefix}center"), out),
            Some(BatchLevel::Norm(m)) => m.params(&format!("{prefix}bn"), out),
            None => {}
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.linear.params_mut(&format!("{prefix}linear"), out);
        match &mut self.batch {
            Some(BatchLevel::Center(m)) => m.params_mut(&format!("{prefix}center"), out),
            Some(BatchLevel::Norm(m)) => m.params_mut(&format!("{prefix}bn"), out),
            None => {}
        }
    }
}

/// `r → K` logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    linear: Linear,
}

impl ClassifierHead {
    pub fn new(classes: usize, seed: u64) -> Self {
        Self {
            linear: Linear::new(EMBED_DIM, classes, true, &mut seed::rng(seed)),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_features
    }
}

impl Module for ClassifierHead {
    fn forward(&mut self, r: &Tensor, train: bool) -> Tensor {
        self.linear.forward(r, train)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        self.linear.backward(grad)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.linear.params(&format!("{prefix}linear"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.linear.params_mut(&format!("{prefix}linear"), out);
    }
}

/// Stacks images into an `N × 3 × H × W` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} in a batch of {:?}",
                img.shape(),
                shape
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec([images.len(), 3, shape.0, shape.1], data)
}

/// Inference-mode embeddings of `images`, computed in chunks.
pub fn encode_images(encoder: &mut Encoder, images: &[&Image]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len() * EMBED_DIM);
    for chunk in images.chunks(ENCODE_CHUNK) {
        let x = images_to_tensor(chunk)?;
        let r = encoder.forward(&x, false);
        rows.extend_from_slice(&r.data);
    }
    let r = Tensor::matrix(images.len(), EMBED_DIM, rows)?;
    if !r.all_finite() {
        return Err(Error::InvalidInput("encoder produced non-finite embeddings".into()));
    }
    Ok(r)
}

/// Encoder, projection and (after stage 2) classifier.
#[derive(Clone, Debug)]
pub struct ModelStack {
    pub encoder: Encoder,
    pub projection: ProjectionHead,
    pub classifier: Option<ClassifierHead>,
}

impl ModelStack {
    pub fn new(backbone: Backbone, projection: ProjectionSpec, seed: u64) -> Self {
        Self {
            encoder: Encoder::new(backbone, seed::derive(seed, "init/encoder")),
            projection: ProjectionHead::new(projection, seed::derive(seed, "init/projection")),
            classifier: None,
        }
    }

    /// Inference-mode embeddings, computed in chunks.
    pub fn encode(&mut self, images: &[&Image]) -> Result<Tensor> {
        encode_images(&mut self.encoder, images)
    }

    /// Unit-norm projections of embeddings.
    pub fn project(&mut self, r: &Tensor) -> Result<Tensor> {
        if r.item_len() != EMBED_DIM {
            return Err(Error::ShapeMismatch(format!(
                "projection expects {EMBED_DIM}-wide rows, got {}",
                r.item_len()
            )));
        }
        Ok(self.projection.forward(r, false))
    }

    /// Classifier logits for images.
    pub fn logits(&mut self, images: &[&Image]) -> Result<Tensor> {
        let r = self.encode(images)?;
        let classifier = self
            .classifier
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("model has no classifier head".into()))?;
        Ok(classifier.forward(&r, false))
    }
}

// ---------------------------------------------------------------------------
// State dictionaries, checkpoints, averaging

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named parameters and buffers of a module.
pub type StateDict = BTreeMap<String, TensorData>;

pub fn state_dict<M: Module>(module: &M) -> StateDict {
    let mut params = Vec::new();
    module.params("", &mut params);
    params
        .into_iter()
        .map(|(name, p)| {
            (
                name,
                TensorData {
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                },
            )
        })
        .collect()
}

pub fn load_state_dict<M: Module>(module: &mut M, state: &StateDict) -> Result<()> {
    let mut params = Vec::new();
    module.params_mut("", &mut params);
    if params.len() != state.len() {
        return Err(Error::Checkpoint(format!(
            "module has {} tensors, state has {}",
            params.len(),
            state.len()
        )));
    }
    for (name, p) in params {
        let t = state
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape, p.shape
            )));
        }
        p.value.copy_from_slice(&t.values);
    }
    Ok(())
}

/// SHA-256 over names, shapes and values.
pub fn state_hash(state: &StateDict) -> String {
    let mut bytes = Vec::new();
    for (name, t) in state {
        bytes.extend_from_slice(name.as_bytes());
        for d in &t.shape {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    seed::sha256_hex(&bytes)
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub state: StateDict,
}

/// Encoder snapshots collected for weight averaging.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSet {
    pub snapshots: Vec<Snapshot>,
}

/// Element-wise arithmetic mean of every tensor across snapshots.
///
/// Normalization statistics are averaged too, but callers are expected to
/// re-estimate them with [`recompute_batch_norm`].
pub fn swa_average(checkpoints: &CheckpointSet) -> Result<StateDict> {
    let first = checkpoints
        .snapshots
        .first()
        .ok_or_else(|| Error::InvalidInput("weight averaging needs at least one snapshot".into()))?;
    for snap in &checkpoints.snapshots[1..] {
        if snap.state.len() != first.state.len()
            || snap
                .state
                .iter()
                .zip(&first.state)
                .any(|((na, a), (nb, b))| na != nb || a.shape != b.shape)
        {
            return Err(Error::ShapeMismatch(format!(
                "snapshot from epoch {} does not match the parameter layout of epoch {}",
                snap.epoch, first.epoch
            )));
        }
    }
    let k = checkpoints.snapshots.len() as f64;
    Ok(first
        .state
        .iter()
        .map(|(name, t)| {
            let mut acc = vec![0.0f64; t.values.len()];
            for snap in &checkpoints.snapshots {
                for (a, v) in acc.iter_mut().zip(&snap.state[name].values) {
                    *a += *v as f64;
                }
            }
            let values = acc.into_iter().map(|a| (a / k) as f32).collect();
            (
                name.clone(),
                TensorData {
                    shape: t.shape.clone(),
                    values,
                },
            )
        })
        .collect())
}

/// Re-estimates batch-norm running statistics with one pass over `images`,
/// as a cumulative average of per-batch statistics.
pub fn recompute_batch_norm(encoder: &mut Encoder, images: &[&Image], batch_size: usize) -> Result<()> {
    if encoder.batch_norms_mut().is_empty() {
        return Ok(());
    }
    for bn in encoder.batch_norms_mut() {
        bn.begin_stat_recompute();
    }
    for chunk in images.chunks(batch_size.max(2)) {
        let x = images_to_tensor(chunk)?;
        encoder.feature_map(&x, true);
    }
    for bn in encoder.batch_norms_mut() {
        bn.end_stat_recompute();
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tag: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes a safetensors container (little-endian `f32`) with the metadata
/// serialized as JSON under the `meta` key.
pub fn save_checkpoint(path: &Path, state: &StateDict, meta: &CheckpointMeta) -> Result<()> {
    use safetensors::tensor::{Dtype, TensorView};
    let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = state
        .iter()
        .map(|(name, t)| {
            let bytes = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), bytes, t.shape.clone())
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    safetensors::tensor::serialize_to_file(views, &Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(StateDict, CheckpointMeta)> {
    use safetensors::SafeTensors;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (_, metadata) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get("meta"))
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or_default();
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut state = StateDict::new();
    for (name, view) in tensors.tensors() {
        if view.dtype() != safetensors::tensor::Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        state.insert(
            name,
            TensorData {
                shape: view.shape().to_vec(),
                values,
            },
        );
    }
    Ok((state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const PLAIN: ProjectionSpec = ProjectionSpec { bias: false, norm: ProjectionNorm::None };

    fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
                Image::from_planar(side, side, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        for backbone in [Backbone::SmallConv, Backbone::Dense] {
            let mut stack = ModelStack::new(backbone, PLAIN, 1);
            let imgs = random_images(3, 32, 2);
            let one = stack.encode(&[&imgs[0]]).unwrap();
            assert_eq!(one.shape, [1, EMBED_DIM, 1, 1]);
            let dup = stack.encode(&[&imgs[1], &imgs[1], &imgs[2]]).unwrap();
            assert_eq!(dup.row(0), dup.row(1));
            assert!(dup.all_finite());
        }
    }

    #[test]
    fn encode_rejects_mixed_shapes() {
        let mut stack = ModelStack::new(Backbone::SmallConv, PLAIN, 1);
        let a = random_images(1, 32, 3);
        let b = random_images(1, 16, 4);
        assert!(stack.encode(&[&a[0], &b[0]]).is_err());
    }

    #[test]
    fn projection_rows_are_unit_and_scale_invariant() {
        let mut stack = ModelStack::new(Backbone::SmallConv, PLAIN, 5);
        let mut rng = seed::rng(6);
        let data: Vec<f32> = (0..4 * EMBED_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = Tensor::matrix(4, EMBED_DIM, data.clone()).unwrap();
        let z = stack.project(&r).unwrap();
        for i in 0..4 {
            let norm: f32 = z.row(i).iter().map(|v| v * v).sum::<f32>();
            assert!((norm.sqrt() - 1.0).abs() < 1e-5);
        }
        let r2 = Tensor::matrix(4, EMBED_DIM, data.iter().map(|v| v * 2.0).collect()).unwrap();
        let z2 = stack.project(&r2).unwrap();
        for (a, b) in z.data.iter().zip(&z2.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = Tensor::matrix(1, EMBED_DIM, vec![0.0; EMBED_DIM]).unwrap();
        assert!(stack.project(&zero).unwrap().all_finite());
        assert!(stack.project(&Tensor::matrix(1, 3, vec![1.0; 3]).unwrap()).is_err());
    }

    fn snapshot(epoch: usize, values: Vec<f32>) -> Snapshot {
        let mut state = StateDict::new();
        state.insert("w".into(), TensorData { shape: vec![values.len()], values });
        Snapshot { epoch, state }
    }

    #[test]
    fn swa_identities() {
        let w = vec![0.5, -1.0, 2.0];
        let one = CheckpointSet { snapshots: vec![snapshot(0, w.clone())] };
        assert_eq!(swa_average(&one).unwrap()["w"].values, w);
        let same = CheckpointSet { snapshots: (0..4).map(|e| snapshot(e, w.clone())).collect() };
        assert_eq!(swa_average(&same).unwrap()["w"].values, w);
        let neg: Vec<f32> = w.iter().map(|v| -v).collect();
        let sym = CheckpointSet { snapshots: vec![snapshot(0, w.clone()), snapshot(1, neg)] };
        assert!(swa_average(&sym).unwrap()["w"].values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn swa_rejects_mismatched_shapes() {
        let bad = CheckpointSet { snapshots: vec![snapshot(0, vec![1.0]), snapshot(1, vec![1.0, 2.0])] };
        assert!(matches!(swa_average(&bad), Err(Error::ShapeMismatch(_))));
        assert!(swa_average(&CheckpointSet::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::new(Backbone::Dense, 3);
        let state = state_dict(&enc);
        let meta = CheckpointMeta { tag: "swa".into(), epoch: 4, seed: 9, config_hash: "abc".into() };
        let path = dir.path().join("enc.safetensors");
        save_checkpoint(&path, &state, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(loaded_meta, meta);
        let mut other = Encoder::new(Backbone::Dense, 4);
        load_state_dict(&mut other, &loaded).unwrap();
        assert_eq!(state_hash(&state_dict(&other)), state_hash(&state));
        let mut wrong = Encoder::new(Backbone::SmallConv, 4);
        assert!(load_state_dict(&mut wrong, &loaded).is_err());
    }

    #[test]
    fn batch_norm_recompute_changes_only_running_stats() {
        let mut enc = Encoder::new(Backbone::SmallConv, 7);
        let imgs = random_images(6, 16, 8);
        let refs: Vec<&Image> = imgs.iter().collect();
        let before = state_dict(&enc);
        recompute_batch_norm(&mut enc, &refs, 3).unwrap();
        let after = state_dict(&enc);
        for (name, t) in &before {
            if name.contains("running") {
                continue;
            }
            assert_eq!(t, &after[name], "{name} changed");
        }
        assert!(before.iter().any(|(n, t)| n.contains("running_mean") && t != &after[n]));
    }
}
