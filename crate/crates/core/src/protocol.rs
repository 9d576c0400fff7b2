//! Evaluation protocols: cross-manipulation (leave one method out),
//! cross-family, cross-dataset, λ sweeps and ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{OpenSetConfig, RunConfig};
use crate::datamodel::{leave_one_out_combinations, Combination, LabelScheme, MethodLabel, Sample};
use crate::dataset::ProtocolSplits;
use crate::error::{io_err, Error, Result};
use crate::losses::LossVariant;
use crate::metrics::{self, ScoreRow, UNKNOWN};
use crate::openset::{self, classify_open_set, estimate_thresholds, ThresholdTable};
use crate::pipeline::{self, closed_set_accuracy, TrainOutcome, TrainedModel};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub tosc: f64,
    pub tosc_merged: f64,
    /// Fraction of known-class test samples labeled UNKNOWN.
    pub known_rejected: f64,
    /// Fraction of unknown-class test samples labeled UNKNOWN.
    pub unknown_rejected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    /// Family tag of the unknowns in the cross-family protocol.
    pub unknown_type: Option<String>,
    /// Max-softmax AUROC with known samples as positives.
    pub unknown_auroc: Option<f64>,
    /// The same scores with the opposite polarity.
    pub unknown_auroc_inverse: Option<f64>,
    /// AUROC of `1 - P(REAL)` for fake-vs-real detection.
    pub detector_auroc: Option<f64>,
    /// REAL versus each known method.
    pub known_class_auroc: BTreeMap<String, f64>,
    pub closed_set_accuracy: f64,
    pub tosc: f64,
    pub tosc_merged: f64,
    pub lambda: f64,
    pub thresholds: ThresholdTable,
    pub lambda_sweep: Vec<SweepRow>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(skip)]
    pub score_rows: Vec<ScoreRow>,
}

impl EvalReport {
    /// `(name, value)` for every numeric metric, used to compare runs.
    pub fn metric_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("closed_set_accuracy".to_string(), self.closed_set_accuracy),
            ("tosc".to_string(), self.tosc),
            ("tosc_merged".to_string(), self.tosc_merged),
        ];
        for (name, v) in [
            ("unknown_auroc", self.unknown_auroc),
            ("unknown_auroc_inverse", self.unknown_auroc_inverse),
            ("detector_auroc", self.detector_auroc),
        ] {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        }
        for (m, v) in &self.known_class_auroc {
            out.push((format!("known_class_auroc/{m}"), *v));
        }
        for (c, e) in self.thresholds.classes.iter().zip(&self.thresholds.epsilon) {
            out.push((format!("epsilon/{c}"), *e));
        }
        for row in &self.lambda_sweep {
            out.push((format!("sweep/{}/tosc", row.lambda), row.tosc));
            out.push((format!("sweep/{}/tosc_merged", row.lambda), row.tosc_merged));
        }
        out
    }

    /// Writes `report.json` and `scores.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(io_err(&path))?;
        metrics::write_score_dump(&dir.join("scores.csv"), &self.score_rows)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let mut report: Self = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
        let scores = dir.join("scores.csv");
        if scores.exists() {
            report.score_rows = metrics::read_score_dump(&scores)?;
        }
        Ok(report)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn prediction_label(pred: Option<usize>, model: &TrainedModel) -> String {
    match pred {
        Some(c) => model.classes.names()[c].clone(),
        None => UNKNOWN.to_string(),
    }
}

fn true_label(sample: &Sample, model: &TrainedModel) -> String {
    match model.classes.class_of(&sample.method) {
        Some(c) => model.classes.names()[c].clone(),
        None => UNKNOWN.to_string(),
    }
}

struct OpenSetOutcome {
    tosc: f64,
    tosc_merged: f64,
    known_rejected: f64,
    unknown_rejected: f64,
    predicted: Vec<String>,
}

fn open_set_outcome(probs: &[Vec<f64>], truth: &[String], table: &ThresholdTable, model: &TrainedModel) -> Result<OpenSetOutcome> {
    let mut predicted = Vec::with_capacity(probs.len());
    let (mut known, mut known_rej, mut unknown, mut unknown_rej) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in probs.iter().zip(truth) {
        let pred = classify_open_set(p, table)?.predicted_class;
        let is_unknown = t == UNKNOWN;
        if is_unknown {
            unknown += 1;
            unknown_rej += usize::from(pred.is_none());
        } else {
            known += 1;
            known_rej += usize::from(pred.is_none());
        }
        predicted.push(prediction_label(pred, model));
    }
    Ok(OpenSetOutcome {
        tosc: metrics::tosc(truth, &predicted)?,
        tosc_merged: metrics::tosc_deepfake_merged(truth, &predicted)?,
        known_rejected: known_rej as f64 / known.max(1) as f64,
        unknown_rejected: unknown_rej as f64 / unknown.max(1) as f64,
        predicted,
    })
}

/// Calibrates thresholds on `calibration` (known classes only) and scores
/// `test`, which may contain unknown methods.
pub fn evaluate(
    model: &mut TrainedModel,
    calibration: &[Sample],
    test: &[Sample],
    openset_cfg: &OpenSetConfig,
) -> Result<EvalReport> {
    if let Some(s) = calibration.iter().find(|s| !model.classes.is_known(&s.method)) {
        return Err(Error::InvalidInput(format!("calibration sample {} belongs to an unknown class", s.id())));
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let started = unix_now();
    let calib_probs = model.probabilities(calibration)?;
    let calib_labels: Vec<usize> =
        calibration.iter().map(|s| model.classes.class_of(&s.method).expect("checked above")).collect();
    let names = model.classes.names().to_vec();
    let table = estimate_thresholds(&calib_probs, &calib_labels, &names, openset_cfg.lambda, openset_cfg.percentile)?;

    let probs = model.probabilities(test)?;
    let truth: Vec<String> = test.iter().map(|s| true_label(s, model)).collect();
    let main = open_set_outcome(&probs, &truth, &table, model)?;

    let scores = metrics::unknown_detection_scores(&probs);
    let positive: Vec<bool> = truth.iter().map(|t| t != UNKNOWN).collect();
    let both = positive.iter().any(|&p| p) && positive.iter().any(|&p| !p);
    let unknown_auroc = if both { Some(metrics::auroc(&scores, &positive)?) } else { None };
    let unknown_auroc_inverse = unknown_auroc.map(|a| 1.0 - a);

    let real_idx = 0;
    let fake_scores: Vec<f64> = probs.iter().map(|p| 1.0 - p[real_idx]).collect();
    let is_fake: Vec<bool> = test.iter().map(|s| !s.is_real).collect();
    let detector_auroc = if is_fake.iter().any(|&f| f) && is_fake.iter().any(|&f| !f) {
        Some(metrics::auroc(&fake_scores, &is_fake)?)
    } else {
        None
    };

    let mut known_class_auroc = BTreeMap::new();
    for method in model.classes.known_methods().to_vec() {
        let class = model.classes.class_of(&method).expect("known method");
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].is_real || test[i].method == method).collect();
        let reals: Vec<usize> = idx.iter().copied().filter(|&i| test[i].is_real).collect();
        let fakes: Vec<usize> = idx.iter().copied().filter(|&i| !test[i].is_real).collect();
        let n = reals.len().min(fakes.len());
        if n == 0 {
            continue;
        }
        let chosen: Vec<usize> = reals[..n].iter().chain(&fakes[..n]).copied().collect();
        let sub: Vec<Vec<f64>> = chosen.iter().map(|&i| probs[i].clone()).collect();
        let s = metrics::method_vs_real_scores(&sub, class, real_idx);
        let pos: Vec<bool> = chosen.iter().map(|&i| !test[i].is_real).collect();
        known_class_auroc.insert(method.to_string(), metrics::auroc(&s, &pos)?);
    }

    let known_test: Vec<Sample> = test.iter().filter(|s| model.classes.is_known(&s.method)).cloned().collect();
    let closed = if known_test.is_empty() { 0.0 } else { closed_set_accuracy(model, &known_test)? };

    let mut lambda_sweep = Vec::new();
    for &lambda in &openset_cfg.sweep {
        let t = estimate_thresholds(&calib_probs, &calib_labels, &names, lambda, openset_cfg.percentile)?;
        let o = open_set_outcome(&probs, &truth, &t, model)?;
        lambda_sweep.push(SweepRow {
            lambda,
            tosc: o.tosc,
            tosc_merged: o.tosc_merged,
            known_rejected: o.known_rejected,
            unknown_rejected: o.unknown_rejected,
        });
    }

    let score_rows = test
        .iter()
        .zip(&truth)
        .zip(&main.predicted)
        .zip(&scores)
        .map(|(((s, t), p), m)| ScoreRow {
            sample_id: s.id(),
            true_label: t.clone(),
            predicted: p.clone(),
            max_score: *m,
            known: t != UNKNOWN,
        })
        .collect();

    let known_names: BTreeSet<String> = calibration.iter().map(|s| s.method.to_string()).collect();
    let unknown_names: BTreeSet<String> =
        test.iter().filter(|s| !model.classes.is_known(&s.method)).map(|s| s.method.to_string()).collect();
    Ok(EvalReport {
        protocol: String::new(),
        known: known_names.into_iter().collect(),
        unknown: unknown_names.into_iter().collect(),
        unknown_type: None,
        unknown_auroc,
        unknown_auroc_inverse,
        detector_auroc,
        known_class_auroc,
        closed_set_accuracy: closed,
        tosc: main.tosc,
        tosc_merged: main.tosc_merged,
        lambda: openset_cfg.lambda,
        thresholds: table,
        lambda_sweep,
        train_samples: calibration.len(),
        test_samples: test.len(),
        config_hash: String::new(),
        seed: 0,
        dataset_seed: None,
        started_unix: started,
        finished_unix: unix_now(),
        score_rows,
    })
}

/// Fails when any sample id of an unknown method occurs in `inputs`.
pub fn audit_no_unknown(inputs: &[&[Sample]], unknown: &[MethodLabel]) -> Result<()> {
    for set in inputs {
        if let Some(s) = set.iter().find(|s| unknown.contains(&s.method)) {
            return Err(Error::InvalidInput(format!("unknown-class sample {} reached training or calibration", s.id())));
        }
    }
    Ok(())
}

/// Result of training and evaluating one known/unknown assignment.
#[derive(Clone, Debug)]
pub struct CombinationRun {
    pub combination: Combination,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains on the known classes of `combination` and evaluates on the test
/// split restricted to known and unknown methods.
pub fn run_combination(
    cfg: &RunConfig,
    splits: &ProtocolSplits,
    combination: &Combination,
    seed: u64,
    dataset_seed: Option<u64>,
) -> Result<CombinationRun> {
    if combination.known_forgeries().len() < 2 {
        return Err(Error::InvalidInput(format!(
            "combination {:?} has fewer than 2 known forgery classes",
            combination.known
        )));
    }
    let known = splits.restrict(&combination.known);
    audit_no_unknown(&[&known.train], std::slice::from_ref(&combination.unknown))?;
    let mut outcome = pipeline::train_two_stage(cfg, &known.train, seed, None)?;
    let mut everything = combination.known.clone();
    everything.push(combination.unknown.clone());
    let test = splits.restrict(&everything).test;
    let mut report = evaluate(&mut outcome.model, &known.train, &test, &cfg.openset)?;
    report.protocol = "cross_manipulation".into();
    report.config_hash = cfg.hash();
    report.seed = seed;
    report.dataset_seed = dataset_seed;
    Ok(CombinationRun { combination: combination.clone(), outcome, report })
}

/// Every forgery method of `splits` (sorted, REAL excluded).
pub fn forgery_methods(splits: &ProtocolSplits) -> Vec<MethodLabel> {
    pipeline::forgery_methods(&splits.train)
}

/// One run per leave-one-out combination.
pub fn cross_manipulation(
    cfg: &RunConfig,
    splits: &ProtocolSplits,
    seed: u64,
    dataset_seed: Option<u64>,
) -> Result<Vec<CombinationRun>> {
    leave_one_out_combinations(&forgery_methods(splits))?
        .iter()
        .map(|c| run_combination(cfg, splits, c, seed::derive(seed, &format!("combo/{}", c.unknown)), dataset_seed))
        .collect()
}

/// Trains on REAL plus `train_family` and reports each method of
/// `unknown_family` as a separate unknown.
pub fn cross_family(
    cfg: &RunConfig,
    splits: &ProtocolSplits,
    train_family: &[MethodLabel],
    unknown_family: &[MethodLabel],
    unknown_type: &str,
    seed: u64,
    dataset_seed: Option<u64>,
) -> Result<Vec<EvalReport>> {
    let mut known = vec![MethodLabel::real()];
    known.extend(train_family.iter().cloned());
    let known_split = splits.restrict(&known);
    audit_no_unknown(&[&known_split.train], unknown_family)?;
    if train_family.len() < 2 {
        return Err(Error::InvalidInput("cross-family training needs at least 2 forgery classes".into()));
    }
    let mut outcome = pipeline::train_two_stage(cfg, &known_split.train, seed::derive(seed, "family"), None)?;
    let mut reports = Vec::new();
    for unknown in unknown_family {
        let mut methods = known.clone();
        methods.push(unknown.clone());
        let test = splits.restrict(&methods).test;
        let mut report = evaluate(&mut outcome.model, &known_split.train, &test, &cfg.openset)?;
        report.protocol = "cross_family".into();
        report.unknown_type = Some(unknown_type.to_string());
        report.config_hash = cfg.hash();
        report.seed = seed;
        report.dataset_seed = dataset_seed;
        reports.push(report);
    }
    Ok(reports)
}

/// Label given to a target-dataset forgery so that it never matches a
/// source class of the same name.
pub fn target_label(method: &MethodLabel) -> MethodLabel {
    MethodLabel::new(format!("target:{method}"))
}

/// Trains on every class of dataset A. On dataset B, REAL is known and
/// every forgery is treated as unknown.
pub fn cross_dataset(
    cfg: &RunConfig,
    source: &ProtocolSplits,
    target: &ProtocolSplits,
    seed: u64,
    dataset_seed: Option<u64>,
) -> Result<EvalReport> {
    let mut outcome = pipeline::train_two_stage(cfg, &source.train, seed::derive(seed, "cross_dataset"), None)?;
    let test: Vec<Sample> = target
        .test
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if !s.is_real {
                s.method = target_label(&s.method);
            }
            s
        })
        .collect();
    let mut report = evaluate(&mut outcome.model, &source.train, &test, &cfg.openset)?;
    report.protocol = "cross_dataset".into();
    report.config_hash = cfg.hash();
    report.seed = seed;
    report.dataset_seed = dataset_seed;
    Ok(report)
}

/// Mean of the defined unknown AUROCs.
pub fn mean_unknown_auroc(reports: &[EvalReport]) -> f64 {
    let v: Vec<f64> = reports.iter().filter_map(|r| r.unknown_auroc).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn mean_of(reports: &[EvalReport], f: impl Fn(&EvalReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha(Vec<f64>),
    SchemeStage1,
    SchemeStage3,
    ReprMethod(Vec<LossVariant>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Alpha(_) => "alpha",
            AblationAxis::SchemeStage1 => "scheme_stage1",
            AblationAxis::SchemeStage3 => "scheme_stage3",
            AblationAxis::ReprMethod(_) => "repr_method",
        }
    }

    /// Setting labels and the config each one runs with.
    pub fn settings(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let schemes = [("scheme1", LabelScheme::ForgerySpecific), ("scheme2", LabelScheme::Binary)];
        let out: Vec<(String, RunConfig)> = match self {
            AblationAxis::Alpha(values) => values
                .iter()
                .map(|&a| {
                    let mut c = base.clone();
                    c.stage1.alpha = a;
                    c.stage1.loss = LossVariant::WeightedSupcon;
                    (format!("alpha={a}"), c)
                })
                .collect(),
            AblationAxis::SchemeStage1 => schemes
                .iter()
                .map(|(n, s)| {
                    let mut c = base.clone();
                    c.stage1.scheme = *s;
                    (n.to_string(), c)
                })
                .collect(),
            AblationAxis::SchemeStage3 => schemes
                .iter()
                .map(|(n, s)| {
                    let mut c = base.clone();
                    c.stage2.scheme = *s;
                    (n.to_string(), c)
                })
                .collect(),
            AblationAxis::ReprMethod(variants) => variants
                .iter()
                .map(|&v| {
                    let mut c = base.clone();
                    c.stage1.loss = v;
                    (v.name().to_string(), c)
                })
                .collect(),
        };
        if out.is_empty() {
            return Err(Error::InvalidInput(format!("ablation axis {} has no settings", self.name())));
        }
        for (_, c) in &out {
            c.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub setting: String,
    /// Mean unknown AUROC per seed, averaged over combinations.
    pub unknown_auroc_per_seed: Vec<f64>,
    pub mean_unknown_auroc: f64,
    pub mean_tosc: f64,
    pub mean_closed_set_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub columns: Vec<AblationColumn>,
}

impl AblationReport {
    /// Markdown table, one row per setting.
    pub fn render(&self) -> String {
        let mut s = format!(
            "| {} | unknown AUROC | TOSC | closed-set acc | per-seed AUROC |\n|---|---|---|---|---|\n",
            self.axis
        );
        for c in &self.columns {
            let per: Vec<String> = c.unknown_auroc_per_seed.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {} |\n",
                c.setting,
                c.mean_unknown_auroc,
                c.mean_tosc,
                c.mean_closed_set_accuracy,
                per.join(" ")
            ));
        }
        s
    }

    pub fn column(&self, setting: &str) -> Option<&AblationColumn> {
        self.columns.iter().find(|c| c.setting == setting)
    }
}

/// Source of cross-manipulation runs; lets callers share runs across
/// ablations.
pub trait RunSource {
    fn runs(&mut self, cfg: &RunConfig, seed: u64) -> Result<Vec<CombinationRun>>;
}

/// Trains every run from scratch.
pub struct FreshRuns<'a> {
    pub splits: &'a ProtocolSplits,
    pub dataset_seed: Option<u64>,
}

impl RunSource for FreshRuns<'_> {
    fn runs(&mut self, cfg: &RunConfig, seed: u64) -> Result<Vec<CombinationRun>> {
        cross_manipulation(cfg, self.splits, seed, self.dataset_seed)
    }
}

fn column(setting: String, per_seed: Vec<Vec<EvalReport>>) -> AblationColumn {
    let all: Vec<EvalReport> = per_seed.iter().flatten().cloned().collect();
    let unknown_auroc_per_seed: Vec<f64> = per_seed.iter().map(|r| mean_unknown_auroc(r)).collect();
    AblationColumn {
        setting,
        mean_unknown_auroc: unknown_auroc_per_seed.iter().sum::<f64>() / unknown_auroc_per_seed.len().max(1) as f64,
        unknown_auroc_per_seed,
        mean_tosc: mean_of(&all, |r| r.tosc),
        mean_closed_set_accuracy: mean_of(&all, |r| r.closed_set_accuracy),
    }
}

/// Runs every setting of `axis` over the cross-manipulation protocol for
/// each seed. The Stage-2 scheme axis retrains only the classifier on top
/// of the base configuration's encoders.
pub fn ablate(
    base: &RunConfig,
    splits: &ProtocolSplits,
    axis: &AblationAxis,
    seeds: &[u64],
    source: &mut dyn RunSource,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one seed".into()));
    }
    let settings = axis.settings(base)?;
    let mut columns = Vec::new();
    if let AblationAxis::SchemeStage3 = axis {
        let mut per_setting: Vec<Vec<Vec<EvalReport>>> = vec![Vec::new(); settings.len()];
        for &seed in seeds {
            let runs = source.runs(base, seed)?;
            let mut by_setting: Vec<Vec<EvalReport>> = vec![Vec::new(); settings.len()];
            for run in &runs {
                let known = splits.restrict(&run.combination.known);
                let mut everything = run.combination.known.clone();
                everything.push(run.combination.unknown.clone());
                let test = splits.restrict(&everything).test;
                for (k, (_, cfg)) in settings.iter().enumerate() {
                    let combo_seed = seed::derive(seed, &format!("combo/{}", run.combination.unknown));
                    let (mut model, _) =
                        pipeline::retrain_classifier(&cfg.stage2, &run.outcome.model, &known.train, combo_seed)?;
                    let mut report = evaluate(&mut model, &known.train, &test, &cfg.openset)?;
                    report.protocol = "cross_manipulation".into();
                    report.seed = combo_seed;
                    by_setting[k].push(report);
                }
            }
            for (k, r) in by_setting.into_iter().enumerate() {
                per_setting[k].push(r);
            }
        }
        for ((name, _), per_seed) in settings.into_iter().zip(per_setting) {
            columns.push(column(name, per_seed));
        }
    } else {
        for (name, cfg) in settings {
            let mut per_seed = Vec::new();
            for &seed in seeds {
                per_seed.push(source.runs(&cfg, seed)?.into_iter().map(|r| r.report).collect());
            }
            columns.push(column(name, per_seed));
        }
    }
    Ok(AblationReport { axis: axis.name().to_string(), seeds: seeds.to_vec(), columns })
}

/// Directory name for a combination's outputs.
pub fn combination_dir(root: &Path, combination: &Combination) -> PathBuf {
    root.join(format!("unknown_{}", combination.unknown))
}

/// Reads every `report.json` below `root`.
pub fn collect_reports(root: &Path) -> Result<Vec<(PathBuf, EvalReport)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("report.json").is_file() {
            out.push((dir.clone(), EvalReport::load(&dir)?));
        }
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Markdown summary of a set of reports.
pub fn render_reports(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut s = String::from(
        "| protocol | unknown | AUROC | closed-set acc | TOSC | TOSC (merged) | detector AUROC |\n|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        s.push_str(&format!(
            "| {} | {}{} | {} | {:.4} | {:.4} | {:.4} | {} |\n",
            r.protocol,
            r.unknown.join("+"),
            r.unknown_type.as_ref().map(|t| format!(" ({t})")).unwrap_or_default(),
            fmt(r.unknown_auroc),
            r.closed_set_accuracy,
            r.tosc,
            r.tosc_merged,
            fmt(r.detector_auroc),
        ));
    }
    if !reports.is_empty() {
        s.push_str(&format!(
            "\nmean unknown AUROC {:.4}, mean TOSC {:.4}\n",
            mean_unknown_auroc(reports),
            mean_of(reports, |r| r.tosc)
        ));
    }
    s
}

/// λ-sweep table for one report.
pub fn render_sweep(report: &EvalReport) -> String {
    let mut s = String::from("| λ | TOSC | TOSC (merged) | known rejected | unknown rejected |\n|---|---|---|---|---|\n");
    for row in &report.lambda_sweep {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            row.lambda, row.tosc, row.tosc_merged, row.known_rejected, row.unknown_rejected
        ));
    }
    s
}

/// Thresholds for every λ in `lambdas` from one set of calibration scores.
pub fn threshold_sweep(
    model: &mut TrainedModel,
    calibration: &[Sample],
    lambdas: &[f64],
    rule: openset::PercentileRule,
) -> Result<Vec<ThresholdTable>> {
    let probs = model.probabilities(calibration)?;
    let labels: Vec<usize> = calibration
        .iter()
        .map(|s| {
            model
                .classes
                .class_of(&s.method)
                .ok_or_else(|| Error::InvalidInput(format!("calibration sample {} is unknown", s.id())))
        })
        .collect::<Result<_>>()?;
    let names = model.classes.names().to_vec();
    lambdas.iter().map(|&l| estimate_thresholds(&probs, &labels, &names, l, rule)).collect()
}
