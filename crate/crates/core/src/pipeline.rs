//! Stage-1 representation learning, Stage-2 classifier training on the
//! frozen averaged encoder, and the trained-model bundle.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::config::{ModelConfig, OptimizerConfig, RunConfig, Stage1Config, Stage2Config};
use crate::datamodel::{build_multiview_batch, ClassMap, Image, LabelScheme, MethodLabel, Sample};
use crate::error::{io_err, Error, Result};
use crate::losses::{self, LossVariant};
use crate::model::{
    self, encode_images, images_to_tensor, load_checkpoint, save_checkpoint, state_dict, state_hash,
    CheckpointMeta, CheckpointSet, ClassifierHead, Encoder, ModelStack, Snapshot, StateDict, TensorData,
    EMBED_DIM,
};
use crate::nn::{cosine_lr, zero_grads, Module, Param, Sgd, Tensor};
use crate::openset::softmax_probs;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f32,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    fn new(stage: &str) -> Self {
        Self { stage: stage.to_string(), records: Vec::new() }
    }

    /// Appends the records as `stage,epoch,loss,learning_rate,seconds`
    /// rows, writing a header when the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        let mut out = String::new();
        if fresh {
            out.push_str("stage,epoch,loss,learning_rate,seconds\n");
        }
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{:.3}\n", self.stage, r.epoch, r.loss, r.learning_rate, r.seconds));
        }
        f.write_all(out.as_bytes()).map_err(io_err(path))
    }
}

fn sgd(opt: &OptimizerConfig) -> Sgd {
    Sgd { momentum: opt.momentum, weight_decay: opt.weight_decay }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn grad_tensor(shape: [usize; 4], g: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, g.into_iter().map(|v| v as f32).collect()).expect("gradient matches its input")
}

/// Forgery methods (excluding REAL) present in `samples`, sorted.
pub fn forgery_methods(samples: &[Sample]) -> Vec<MethodLabel> {
    let set: std::collections::BTreeSet<MethodLabel> =
        samples.iter().filter(|s| !s.is_real).map(|s| s.method.clone()).collect();
    set.into_iter().collect()
}

fn check_class_support(samples: &[Sample], classes: &ClassMap) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(samples.len());
    let mut counts = vec![0usize; classes.len()];
    for s in samples {
        let c = classes.class_of(&s.method).ok_or_else(|| {
            Error::InvalidInput(format!("training sample {} is outside the known classes", s.id()))
        })?;
        counts[c] += 1;
        labels.push(c);
    }
    if let Some((i, n)) = counts.iter().enumerate().find(|(_, n)| **n < 2) {
        return Err(Error::MissingClass(format!(
            "class {} has {n} training samples; at least 2 are required",
            classes.names()[i]
        )));
    }
    Ok(labels)
}

fn batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // A trailing singleton cannot be batch-normalized on its own.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Result of stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    /// Averaged encoder with re-estimated normalization statistics, plus
    /// the final projection head.
    pub stack: ModelStack,
    pub checkpoints: CheckpointSet,
    pub log: TrainLog,
}

/// Trains encoder and projection head with the configured loss over
/// two-view batches. With the cross-entropy variant a temporary linear head
/// replaces the projection.
///
/// After each epoch the encoder is saved to `checkpoint_dir` (when given)
/// as `stage1_last.safetensors`; a non-finite loss aborts with
/// [`Error::Diverged`] and leaves that file at the last good epoch.
pub fn stage1_train(
    cfg: &Stage1Config,
    model_cfg: &ModelConfig,
    policy: &AugmentPolicy,
    train: &[Sample],
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Stage1Output> {
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;
    let classes = ClassMap::new(cfg.scheme, &forgery_methods(train));
    check_class_support(train, &classes)?;
    let mut stack = ModelStack::new(model_cfg.backbone, model_cfg.projection(), seed::derive(seed, "stage1/init"));
    let mut ce_head = ClassifierHead::new(classes.len(), seed::derive(seed, "stage1/ce_head"));
    let optimizer = sgd(&cfg.optimizer);
    let steps_per_epoch = batches(train.len(), cfg.batch_size, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let swa_start = cfg.epochs - cfg.swa_window();
    let mut log = TrainLog::new("stage1");
    let mut checkpoints = CheckpointSet::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut lr = cfg.optimizer.learning_rate;
        let plan = batches(train.len(), cfg.batch_size, seed::derive(seed, &format!("stage1/order/{epoch}")));
        for (b, idx) in plan.iter().enumerate() {
            let samples: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch_seed = seed::derive(seed, &format!("stage1/views/{epoch}/{b}"));
            let mv = build_multiview_batch(&samples, policy, &classes, batch_seed)?;
            let views: Vec<&Image> = mv.views.iter().collect();
            let x = images_to_tensor(&views)?;
            let r = stack.encoder.forward(&x, true);

            let (loss, dr) = match loss_cfg.variant {
                LossVariant::CrossEntropy => {
                    let logits = ce_head.forward(&r, true);
                    let (l, g) = losses::cross_entropy_loss_with_grad(&to_f64(&logits), classes.len(), &mv.labels)?;
                    (l, ce_head.backward(&grad_tensor(logits.shape, g)))
                }
                variant => {
                    let z = stack.projection.forward(&r, true);
                    let zf = to_f64(&z);
                    let tau = loss_cfg.temperature;
                    let (l, g) = match variant {
                        LossVariant::WeightedSupcon => losses::weighted_supcon_loss_with_grad(
                            &zf, EMBED_DIM, &mv.labels, &mv.is_real, tau, loss_cfg.alpha,
                        )?,
                        LossVariant::Supcon => losses::supcon_loss_with_grad(&zf, EMBED_DIM, &mv.labels, tau)?,
                        _ => losses::simclr_loss_with_grad(&zf, EMBED_DIM, &mv.origin_index, tau)?,
                    };
                    (l, stack.projection.backward(&grad_tensor(z.shape, g)))
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            stack.encoder.backward(&dr);

            lr = cosine_lr(cfg.optimizer.learning_rate, step, total_steps, cfg.optimizer.warmup_epochs * steps_per_epoch);
            let mut params: Vec<(String, &mut Param)> = Vec::new();
            stack.encoder.params_mut("encoder", &mut params);
            if loss_cfg.variant == LossVariant::CrossEntropy {
                ce_head.params_mut("ce_head.", &mut params);
            } else {
                stack.projection.params_mut("projection.", &mut params);
            }
            optimizer.step(&mut params, lr);
            zero_grads(&mut params);
            loss_sum += loss;
            step += 1;
        }
        let mean = loss_sum / plan.len() as f64;
        log.records.push(EpochRecord { epoch, loss: mean, learning_rate: lr, seconds: started.elapsed().as_secs_f64() });
        log::info!("stage1 epoch {epoch}: loss {mean:.4}");

        let enc_state = state_dict(&stack.encoder);
        if let Some(dir) = checkpoint_dir {
            let meta = CheckpointMeta { tag: "stage1_last".into(), epoch, seed, config_hash: String::new() };
            save_checkpoint(&dir.join("stage1_last.safetensors"), &enc_state, &meta)?;
        }
        if epoch >= swa_start {
            checkpoints.snapshots.push(Snapshot { epoch, state: enc_state });
        }
    }

    let averaged = model::swa_average(&checkpoints)?;
    model::load_state_dict(&mut stack.encoder, &averaged)?;
    let originals: Vec<&Image> = train.iter().map(|s| s.image.as_ref()).collect();
    model::recompute_batch_norm(&mut stack.encoder, &originals, cfg.batch_size)?;
    Ok(Stage1Output { stack, checkpoints, log })
}

/// Trains a linear classifier on frozen encoder features with
/// cross-entropy. Features are computed once, for the training images and
/// (with `flip_augment`) their mirror images.
pub fn stage2_finetune(
    cfg: &Stage2Config,
    encoder: &mut Encoder,
    train: &[Sample],
    classes: &ClassMap,
    seed: u64,
) -> Result<(ClassifierHead, TrainLog)> {
    let labels = check_class_support(train, classes)?;
    let before = state_hash(&state_dict(encoder));

    let originals: Vec<&Image> = train.iter().map(|s| s.image.as_ref()).collect();
    let mut feats = encode_images(encoder, &originals)?.data;
    let mut targets = labels.clone();
    if cfg.flip_augment {
        let mirrored: Vec<Image> = train.iter().map(|s| s.image.mirrored()).collect();
        let refs: Vec<&Image> = mirrored.iter().collect();
        feats.extend(encode_images(encoder, &refs)?.data);
        targets.extend(labels);
    }
    let n = targets.len();

    let mut head = ClassifierHead::new(classes.len(), seed::derive(seed, "stage2/init"));
    let optimizer = sgd(&cfg.optimizer);
    let steps_per_epoch = batches(n, cfg.batch_size, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut log = TrainLog::new("stage2");
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut lr = cfg.optimizer.learning_rate;
        let plan = batches(n, cfg.batch_size, seed::derive(seed, &format!("stage2/order/{epoch}")));
        for idx in &plan {
            let mut x = Vec::with_capacity(idx.len() * EMBED_DIM);
            for &i in idx {
                x.extend_from_slice(&feats[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
            }
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let logits = head.forward(&Tensor::matrix(idx.len(), EMBED_DIM, x)?, true);
            let (loss, g) = losses::cross_entropy_loss_with_grad(&to_f64(&logits), classes.len(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            head.backward(&grad_tensor(logits.shape, g));
            lr = cosine_lr(cfg.optimizer.learning_rate, step, total_steps, cfg.optimizer.warmup_epochs * steps_per_epoch);
            let mut params = Vec::new();
            head.params_mut("", &mut params);
            optimizer.step(&mut params, lr);
            zero_grads(&mut params);
            loss_sum += loss;
            step += 1;
        }
        let mean = loss_sum / plan.len() as f64;
        log.records.push(EpochRecord { epoch, loss: mean, learning_rate: lr, seconds: started.elapsed().as_secs_f64() });
        log::info!("stage2 epoch {epoch}: loss {mean:.4}");
    }

    let after = state_hash(&state_dict(encoder));
    if before != after {
        return Err(Error::InvalidInput("encoder weights changed during classifier training".into()));
    }
    Ok((head, log))
}

/// Encoder, heads and the Stage-2 class alphabet.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub stack: ModelStack,
    pub classes: ClassMap,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    model: ModelConfig,
    scheme: LabelScheme,
    known_methods: Vec<MethodLabel>,
}

const BUNDLE_WEIGHTS: &str = "model.safetensors";
const BUNDLE_META: &str = "model.json";

impl TrainedModel {
    pub fn classifier_mut(&mut self) -> Result<&mut ClassifierHead> {
        self.stack
            .classifier
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("model has no classifier head".into()))
    }

    pub fn embeddings(&mut self, samples: &[Sample]) -> Result<Tensor> {
        let images: Vec<&Image> = samples.iter().map(|s| s.image.as_ref()).collect();
        self.stack.encode(&images)
    }

    /// Softmax over the Stage-2 classes, one row per sample.
    pub fn probabilities(&mut self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let images: Vec<&Image> = samples.iter().map(|s| s.image.as_ref()).collect();
        let logits = self.stack.logits(&images)?;
        Ok((0..logits.batch()).map(|i| softmax_probs(logits.row(i))).collect())
    }

    fn full_state(&self) -> StateDict {
        let mut out = StateDict::new();
        let mut params: Vec<(String, &Param)> = Vec::new();
        self.stack.encoder.params("encoder", &mut params);
        self.stack.projection.params("projection.", &mut params);
        if let Some(c) = &self.stack.classifier {
            c.params("classifier.", &mut params);
        }
        for (name, p) in params {
            out.insert(name, TensorData { shape: p.shape.clone(), values: p.value.clone() });
        }
        out
    }

    /// Hash over every weight and buffer.
    pub fn weights_hash(&self) -> String {
        state_hash(&self.full_state())
    }

    pub fn save(&self, dir: &Path, model_cfg: &ModelConfig, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_checkpoint(&dir.join(BUNDLE_WEIGHTS), &self.full_state(), meta)?;
        let bundle = BundleMeta {
            model: model_cfg.clone(),
            scheme: self.classes.scheme(),
            known_methods: self.classes.known_methods().to_vec(),
        };
        let path = dir.join(BUNDLE_META);
        fs::write(&path, serde_json::to_vec_pretty(&bundle)?).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_META);
        let bundle: BundleMeta = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
        let (state, _) = load_checkpoint(&dir.join(BUNDLE_WEIGHTS))?;
        let classes = ClassMap::new(bundle.scheme, &bundle.known_methods);
        let mut stack = ModelStack::new(bundle.model.backbone, bundle.model.projection(), 0);
        stack.classifier = Some(ClassifierHead::new(classes.len(), 0));
        let mut params: Vec<(String, &mut Param)> = Vec::new();
        stack.encoder.params_mut("encoder", &mut params);
        stack.projection.params_mut("projection.", &mut params);
        if let Some(c) = stack.classifier.as_mut() {
            c.params_mut("classifier.", &mut params);
        }
        if params.len() != state.len() {
            return Err(Error::Checkpoint(format!("bundle has {} tensors, model needs {}", state.len(), params.len())));
        }
        for (name, p) in params {
            let t = state.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape != p.shape {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape)));
            }
            p.value.copy_from_slice(&t.values);
        }
        Ok(Self { stack, classes })
    }
}

/// Everything produced by one two-stage training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub stage1_log: TrainLog,
    pub stage2_log: TrainLog,
    pub checkpoints: CheckpointSet,
}

/// Stage 1 then Stage 2 on `train`, with seeds derived from `seed`.
pub fn train_two_stage(cfg: &RunConfig, train: &[Sample], seed: u64, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let s1 = stage1_train(&cfg.stage1, &cfg.model, &cfg.augment, train, seed::derive(seed, "stage1"), checkpoint_dir)?;
    let mut stack = s1.stack;
    let classes = ClassMap::new(cfg.stage2.scheme, &forgery_methods(train));
    let (head, stage2_log) = stage2_finetune(&cfg.stage2, &mut stack.encoder, train, &classes, seed::derive(seed, "stage2"))?;
    stack.classifier = Some(head);
    Ok(TrainOutcome {
        model: TrainedModel { stack, classes },
        stage1_log: s1.log,
        stage2_log,
        checkpoints: s1.checkpoints,
    })
}

/// Retrains only the Stage-2 head of `model` under another label scheme.
pub fn retrain_classifier(cfg: &Stage2Config, model: &TrainedModel, train: &[Sample], seed: u64) -> Result<(TrainedModel, TrainLog)> {
    let mut out = model.clone();
    out.classes = ClassMap::new(cfg.scheme, &forgery_methods(train));
    let (head, log) = stage2_finetune(cfg, &mut out.stack.encoder, train, &out.classes, seed::derive(seed, "stage2"))?;
    out.stack.classifier = Some(head);
    Ok((out, log))
}

/// Fraction of samples whose argmax class matches their label.
pub fn closed_set_accuracy(model: &mut TrainedModel, samples: &[Sample]) -> Result<f64> {
    let probs = model.probabilities(samples)?;
    let mut hit = 0usize;
    for (p, s) in probs.iter().zip(samples) {
        let y = model
            .classes
            .class_of(&s.method)
            .ok_or_else(|| Error::InvalidInput(format!("sample {} is not a known class", s.id())))?;
        if crate::openset::argmax(p) == y {
            hit += 1;
        }
    }
    Ok(hit as f64 / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, ProjectionNorm, ProjectionSpec};
    use rand::Rng;

    fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
                Image::from_planar(side, side, data).unwrap()
            })
            .collect()
    }

    fn contrastive_objective(stack: &mut ModelStack, x: &Tensor, labels: &[usize], want_grad: bool) -> f64 {
        let r = stack.encoder.forward(x, true);
        let z = stack.projection.forward(&r, true);
        let (l, g) = losses::supcon_loss_with_grad(&to_f64(&z), EMBED_DIM, labels, 0.5).unwrap();
        if want_grad {
            let dr = stack.projection.backward(&grad_tensor(z.shape, g));
            stack.encoder.backward(&dr);
        }
        l
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let norms = [ProjectionNorm::None, ProjectionNorm::Center, ProjectionNorm::BatchNorm];
        for (backbone, norm) in [Backbone::SmallConv, Backbone::Dense].into_iter().flat_map(|b| norms.map(|n| (b, n))) {
            let mut stack = ModelStack::new(backbone, ProjectionSpec { bias: true, norm }, 4);
            let images = random_images(6, 16, 5);
            let refs: Vec<&Image> = images.iter().collect();
            let x = images_to_tensor(&refs).unwrap();
            let labels = [0, 0, 1, 1, 2, 2];
            contrastive_objective(&mut stack, &x, &labels, true);
            let mut params: Vec<(String, &mut Param)> = Vec::new();
            stack.encoder.params_mut("encoder", &mut params);
            let grads: Vec<(String, Vec<f32>)> =
                params.iter().filter(|(_, p)| p.trainable).map(|(n, p)| (n.clone(), p.grad.clone())).collect();
            let h = 1e-2f32;
            let mut checked = 0;
            let mut bad = 0;
            for (name, grad) in &grads {
                let i = grad
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap();
                let nudge = |stack: &mut ModelStack, d: f32| {
                    let mut ps: Vec<(String, &mut Param)> = Vec::new();
                    stack.encoder.params_mut("encoder", &mut ps);
                    ps.into_iter().find(|(n, _)| n == name).unwrap().1.value[i] += d;
                };
                nudge(&mut stack, h);
                let fp = contrastive_objective(&mut stack, &x, &labels, false);
                nudge(&mut stack, -2.0 * h);
                let fm = contrastive_objective(&mut stack, &x, &labels, false);
                nudge(&mut stack, h);
                let fd = ((fp - fm) / (2.0 * h as f64)) as f32;
                let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-3);
                checked += 1;
                if rel > 0.1 {
                    bad += 1;
                    eprintln!("{backbone:?} {name}[{i}]: analytic {} numeric {fd}", grad[i]);
                }
            }
            assert!(bad * 10 <= checked, "{bad} of {checked} parameter gradients disagree");
        }
    }
}
