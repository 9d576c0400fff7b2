use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use openfake::config::RunConfig;
use openfake::datamodel::{MethodLabel, Sample};
use openfake::dataset::{self, DatasetManifest, ForgeryOperator, ProtocolSplits};
use openfake::explain::{self, ProjectionMethod};
use openfake::losses::LossVariant;
use openfake::model::CheckpointMeta;
use openfake::openset::argmax;
use openfake::pipeline::{self, TrainedModel};
use openfake::protocol::{self, AblationAxis, EvalReport, FreshRuns};
use openfake::{seed, Error};

use crate::{Axis, GlobalArgs, Protocol};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

const EMBEDDING_LIMIT: usize = 400;

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(l) = g.lambda {
        cfg.openset.lambda = l;
    }
    if let Some(a) = g.alpha {
        cfg.stage1.alpha = a;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn open_or_generate(dir: &Path, seed: u64, cfg: &RunConfig) -> Result<DatasetManifest> {
    if dir.join(dataset::MANIFEST_FILE).is_file() {
        return Ok(DatasetManifest::load(dir)?);
    }
    log::info!("generating synthetic benchmark in {}", dir.display());
    Ok(dataset::generate_synthetic_benchmark(
        seed,
        cfg.data.synthetic_videos,
        cfg.data.synthetic_frames,
        cfg.data.image_side,
        dir,
    )?)
}

fn open_root(root: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    if root.join(dataset::MANIFEST_FILE).is_file() {
        Ok(DatasetManifest::load(root)?)
    } else {
        Ok(dataset::load_framedir(root, &cfg.data.extra_methods)?)
    }
}

/// The configured dataset, or the synthetic benchmark under `<out>/data`.
fn primary_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    match &cfg.data.root {
        Some(root) => open_root(root, cfg),
        None => open_or_generate(&cfg.out_dir.join("data"), cfg.data.synthetic_seed, cfg),
    }
}

fn splits_of(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<ProtocolSplits> {
    Ok(dataset::make_protocol_splits(manifest, cfg.data.split, cfg.data.frames_per_video, cfg.seed)?)
}

fn save_report(report: &EvalReport, dir: &Path) -> Result<()> {
    report.save(dir)?;
    log::info!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn default_model_dir(cfg: &RunConfig, model: Option<PathBuf>) -> PathBuf {
    model.unwrap_or_else(|| cfg.out_dir.join("model"))
}

pub fn synth_gen(g: &GlobalArgs, n_videos: Option<usize>, frames: Option<usize>, side: Option<usize>) -> Result<()> {
    let cfg = load_config(g)?;
    let manifest = dataset::generate_synthetic_benchmark(
        g.seed.unwrap_or(cfg.data.synthetic_seed),
        n_videos.unwrap_or(cfg.data.synthetic_videos),
        frames.unwrap_or(cfg.data.synthetic_frames),
        side.unwrap_or(cfg.data.image_side),
        &cfg.out_dir,
    )?;
    println!(
        "{} frames, {} videos, methods {:?} in {}",
        manifest.rows.len(),
        manifest.video_ids().len(),
        manifest.methods().iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn train(g: &GlobalArgs, unknown: &[String]) -> Result<()> {
    let cfg = load_config(g)?;
    let manifest = primary_dataset(&cfg)?;
    let present = manifest.methods();
    let unknown: Vec<MethodLabel> = unknown.iter().map(MethodLabel::new).collect();
    if let Some(m) = unknown.iter().find(|m| !present.contains(*m) || m.is_real()) {
        return Err(CliError::Usage(format!("`{m}` is not a forgery method of the dataset")));
    }
    let known: Vec<MethodLabel> = present.into_iter().filter(|m| !unknown.contains(m)).collect();
    let splits = splits_of(&cfg, &manifest)?.restrict(&known);
    let out = &cfg.out_dir;
    let outcome = pipeline::train_two_stage(&cfg, &splits.train, cfg.seed, Some(&out.join("checkpoints")))?;
    let mut model = outcome.model;
    let meta = CheckpointMeta {
        tag: "final".into(),
        epoch: cfg.stage1.epochs,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    model.save(&out.join("model"), &cfg.model, &meta)?;
    outcome.stage1_log.append_csv(&out.join("train_log.csv"))?;
    outcome.stage2_log.append_csv(&out.join("train_log.csv"))?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let acc = pipeline::closed_set_accuracy(&mut model, &splits.test)?;
    println!("closed-set accuracy on known test classes {acc:.4}");
    println!("model saved to {}", out.join("model").display());
    Ok(())
}

pub fn calibrate(g: &GlobalArgs, model_dir: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(g)?;
    let mut model = TrainedModel::load(&default_model_dir(&cfg, model_dir))?;
    let manifest = primary_dataset(&cfg)?;
    let splits = splits_of(&cfg, &manifest)?.restrict(model.classes.known_methods());
    let table = protocol::threshold_sweep(&mut model, &splits.train, &[cfg.openset.lambda], cfg.openset.percentile)?
        .pop()
        .expect("one λ requested");
    let path = cfg.out_dir.join("thresholds.json");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.clone(), source: e })?;
    table.save(&path)?;
    println!("λ = {}", table.lambda_percentile);
    for (i, class) in table.classes.iter().enumerate() {
        println!("{class}: ε = {:.6} from {} samples", table.epsilon[i], table.support_counts[i]);
    }
    println!("thresholds saved to {}", path.display());
    Ok(())
}

fn eval_cross_manipulation(cfg: &RunConfig, splits: &ProtocolSplits, dataset_seed: Option<u64>) -> Result<Vec<EvalReport>> {
    let root = cfg.out_dir.join("cross_manipulation");
    let mut reports = Vec::new();
    for run in protocol::cross_manipulation(cfg, splits, cfg.seed, dataset_seed)? {
        save_report(&run.report, &protocol::combination_dir(&root, &run.combination))?;
        reports.push(run.report);
    }
    Ok(reports)
}

fn eval_cross_family(cfg: &RunConfig, splits: &ProtocolSplits, dataset_seed: Option<u64>) -> Result<Vec<EvalReport>> {
    let mut families: BTreeMap<&str, Vec<MethodLabel>> = BTreeMap::new();
    for m in protocol::forgery_methods(splits) {
        let op = ForgeryOperator::from_name(m.as_str())
            .ok_or_else(|| CliError::Usage(format!("method `{m}` has no family; cross-family needs M1 to M4")))?;
        families.entry(op.family()).or_default().push(m);
    }
    if families.len() != 2 {
        return Err(CliError::Usage("cross-family needs exactly two method families".into()));
    }
    let names: Vec<&str> = families.keys().copied().collect();
    let mut reports = Vec::new();
    for (train_family, unknown_family) in [(names[0], names[1]), (names[1], names[0])] {
        let root = cfg.out_dir.join("cross_family").join(format!("train_{train_family}"));
        for report in protocol::cross_family(
            cfg,
            splits,
            &families[train_family],
            &families[unknown_family],
            unknown_family,
            cfg.seed,
            dataset_seed,
        )? {
            save_report(&report, &root.join(format!("unknown_{}", report.unknown.join("+"))))?;
            reports.push(report);
        }
    }
    Ok(reports)
}

fn eval_cross_dataset(cfg: &RunConfig, splits: &ProtocolSplits, dataset_seed: Option<u64>) -> Result<Vec<EvalReport>> {
    let target = match &cfg.data.cross_root {
        Some(root) => open_root(root, cfg)?,
        None => open_or_generate(&cfg.out_dir.join("data_cross"), seed::derive(cfg.data.synthetic_seed, "cross"), cfg)?,
    };
    let target_splits = splits_of(cfg, &target)?;
    let report = protocol::cross_dataset(cfg, splits, &target_splits, cfg.seed, dataset_seed)?;
    save_report(&report, &cfg.out_dir.join("cross_dataset"))?;
    Ok(vec![report])
}

pub fn eval(g: &GlobalArgs, protocol: Protocol) -> Result<()> {
    let cfg = load_config(g)?;
    let manifest = primary_dataset(&cfg)?;
    let splits = splits_of(&cfg, &manifest)?;
    let reports = match protocol {
        Protocol::CrossManipulation => eval_cross_manipulation(&cfg, &splits, manifest.dataset_seed)?,
        Protocol::CrossFamily => eval_cross_family(&cfg, &splits, manifest.dataset_seed)?,
        Protocol::CrossDataset => eval_cross_dataset(&cfg, &splits, manifest.dataset_seed)?,
    };
    print!("{}", protocol::render_reports(&reports));
    Ok(())
}

fn parse_loss(name: &str) -> Result<LossVariant> {
    LossVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| CliError::Usage(format!("unknown loss `{name}`")))
}

fn ablation_axis(axis: Axis, values: &[String]) -> Result<AblationAxis> {
    let no_values = |name: &str| {
        if values.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("the {name} axis takes no --values")))
        }
    };
    Ok(match axis {
        Axis::Alpha if values.is_empty() => AblationAxis::Alpha(vec![1.0, 1.21, 2.25, 4.0]),
        Axis::Alpha => AblationAxis::Alpha(
            values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| CliError::Usage(format!("α value `{v}` is not a number"))))
                .collect::<Result<_>>()?,
        ),
        Axis::SchemeStage1 => {
            no_values("scheme-stage1")?;
            AblationAxis::SchemeStage1
        }
        Axis::SchemeStage3 => {
            no_values("scheme-stage3")?;
            AblationAxis::SchemeStage3
        }
        Axis::ReprMethod if values.is_empty() => AblationAxis::ReprMethod(LossVariant::ALL.to_vec()),
        Axis::ReprMethod => AblationAxis::ReprMethod(values.iter().map(|v| parse_loss(v)).collect::<Result<_>>()?),
    })
}

pub fn ablate(g: &GlobalArgs, axis: Axis, seeds: &[u64], values: &[String]) -> Result<()> {
    let cfg = load_config(g)?;
    let axis = ablation_axis(axis, values)?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    axis.settings(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = primary_dataset(&cfg)?;
    let splits = splits_of(&cfg, &manifest)?;
    let mut source = FreshRuns { splits: &splits, dataset_seed: manifest.dataset_seed };
    let report = protocol::ablate(&cfg, &splits, &axis, seeds, &mut source)?;
    let stem = cfg.out_dir.join(format!("ablation_{}", report.axis));
    write_file(&stem.with_extension("json"), serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
    write_file(&stem.with_extension("md"), report.render())?;
    print!("{}", report.render());
    Ok(())
}

fn file_safe(id: &str) -> String {
    id.replace('/', "_")
}

pub fn explain(g: &GlobalArgs, model_dir: Option<PathBuf>, per_class: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let mut model = TrainedModel::load(&default_model_dir(&cfg, model_dir))?;
    let manifest = primary_dataset(&cfg)?;
    let test = splits_of(&cfg, &manifest)?.test;
    let out = cfg.out_dir.join("explain");

    let mut chosen: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for s in &test {
        let slot = chosen.entry(s.method.to_string()).or_default();
        if slot.len() < per_class {
            slot.push(s);
        }
    }
    let mut maps = Vec::new();
    for (method, samples) in &chosen {
        let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
        let probs = model.probabilities(&owned)?;
        for (s, p) in owned.iter().zip(&probs) {
            let map = explain::gradcam(&model, &s.image, argmax(p), &s.id())?;
            map.save_overlay(&s.image, &out.join("cam").join(format!("{}.png", file_safe(&s.id()))), 0.5)?;
            maps.push((method.clone(), map));
        }
    }
    let entropy = explain::entropy_by_label(maps.iter().map(|(m, map)| (m.as_str(), map)));

    let mut rng_order: Vec<&Sample> = test.iter().collect();
    if rng_order.len() > EMBEDDING_LIMIT {
        use rand::seq::SliceRandom;
        rng_order.shuffle(&mut seed::derived_rng(cfg.seed, "explain/subset"));
        rng_order.truncate(EMBEDDING_LIMIT);
    }
    let subset: Vec<Sample> = rng_order.into_iter().cloned().collect();
    let labels: Vec<String> = subset.iter().map(|s| s.method.to_string()).collect();
    let embeddings = model.embeddings(&subset)?;
    let mut silhouettes = BTreeMap::new();
    for method in [ProjectionMethod::TsneStyle, ProjectionMethod::UmapStyle] {
        let proj = explain::project_embeddings(&embeddings, &labels, method, seed::derive(cfg.seed, "explain"))?;
        explain::write_projection_csv(&out.join(format!("{}.csv", method.name())), &proj)?;
        explain::render_scatter(&proj, &out.join(format!("{}.png", method.name())), 512)?;
        silhouettes.insert(method.name(), explain::silhouette(&proj.points, &proj.labels)?);
    }
    let summary = serde_json::json!({ "gradcam_entropy": entropy, "silhouette": silhouettes });
    write_file(&out.join("summary.json"), serde_json::to_vec_pretty(&summary).map_err(Error::from)?)?;
    for (label, e) in &entropy {
        println!("{label}: Grad-CAM entropy {e:.4}");
    }
    for (method, s) in &silhouettes {
        println!("{method}: silhouette {s:.4}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn report(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    if !cfg.out_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", cfg.out_dir.display())));
    }
    let found = protocol::collect_reports(&cfg.out_dir)?;
    if found.is_empty() {
        return Err(CliError::Usage(format!("no report.json under {}", cfg.out_dir.display())));
    }
    let reports: Vec<EvalReport> = found.iter().map(|(_, r)| r.clone()).collect();
    let mut text = protocol::render_reports(&reports);
    for (dir, r) in &found {
        let name = dir.strip_prefix(&cfg.out_dir).unwrap_or(dir).display().to_string();
        text.push_str(&format!("\n### {name}\n\n{}", protocol::render_sweep(r)));
    }
    write_file(&cfg.out_dir.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}
