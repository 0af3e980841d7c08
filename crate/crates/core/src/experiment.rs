//! Experiment configuration, the ablation ladder and report files.
//!
//! One TOML file describes a run: data source, fold count, training and
//! distillation settings, ensemble members, metric options, output
//! directory and seeds. [`run_ablation`] trains the four rungs
//! (stand-alone backbone, multi-task, self-distillation, ensemble) on one
//! shared manifest and fold split and evaluates their out-of-fold
//! predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_synthetic_dataset, inject_label_noise, make_fold_splits, save_folds, DatasetManifest,
    FoldSplit, NoiseConfig, NoiseMode, SyntheticSpec,
};
use crate::distill::{
    predict_triplets, run_fold_protocol, train_baseline, DistillConfig, FrameStore, ProtocolSeeds,
    Selection,
};
use crate::ensemble::{export_predictions, weighted_average, ExportFormat, PredictionSet};
use crate::error::{ConfigIssue, Error, Result};
use crate::metrics::{evaluate, EvalOptions, VideoMap};
use crate::model::{file_hash, sha256_hex, BackboneSpec, Checkpoint, HeadConfig};
use crate::vocab::TripletVocabulary;

/// Either a manifest on disk or a synthetic dataset spec; exactly one must
/// be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            manifest: None,
            synthetic: Some(SyntheticSpec::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    /// Corruption probability per label; 0 disables noise.
    pub rate: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            rate: 0.0,
            mode: NoiseMode::SwapOneComponent,
        }
    }
}

/// Every random stream of a run derives from one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSeeds {
    /// Shared by the teachers of all folds.
    pub teacher_init: u64,
    /// Shared by the students of all folds.
    pub student_init: u64,
    /// Synthetic data, fold split, shuffling and augmentation.
    pub data: u64,
    pub noise: u64,
    /// Initialization of the hard-label rungs.
    pub baseline: u64,
}

impl Default for ExperimentSeeds {
    fn default() -> Self {
        ExperimentSeeds {
            teacher_init: 0,
            student_init: 1,
            data: 2,
            noise: 3,
            baseline: 4,
        }
    }
}

impl ExperimentSeeds {
    pub const NAMES: [&'static str; 5] = ["teacher_init", "student_init", "data", "noise", "baseline"];

    pub fn set(&mut self, name: &str, value: u64) -> Result<()> {
        let slot = match name {
            "teacher_init" => &mut self.teacher_init,
            "student_init" => &mut self.student_init,
            "data" => &mut self.data,
            "noise" => &mut self.noise,
            "baseline" => &mut self.baseline,
            _ => {
                return Err(Error::validation(
                    format!("seeds.{name}"),
                    format!("unknown seed; known: {}", Self::NAMES.join(", ")),
                ))
            }
        };
        *slot = value;
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolSeeds {
        ProtocolSeeds {
            teacher_init: self.teacher_init,
            student_init: self.student_init,
            data: self.data,
            augment: self.data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPreset {
    TripletOnly,
    Multitask,
    MultitaskWithPhase,
}

impl HeadPreset {
    /// Enables this preset's heads; loss weights are kept from `base`.
    pub fn apply(self, base: &HeadConfig) -> HeadConfig {
        let on = match self {
            HeadPreset::TripletOnly => HeadConfig::triplet_only(),
            HeadPreset::Multitask => HeadConfig::multitask(),
            HeadPreset::MultitaskWithPhase => HeadConfig::multitask_with_phase(),
        };
        HeadConfig {
            instrument: on.instrument,
            verb: on.verb,
            target: on.target,
            phase: on.phase,
            ..base.clone()
        }
    }
}

/// One ensemble member: the shared distillation settings with a few
/// overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSettings {
    pub name: String,
    /// Registered backbone name; the shared backbone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    pub heads: HeadPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    /// The first member doubles as the self-distillation rung.
    pub members: Vec<MemberSettings>,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        let member = |name: &str, backbone: Option<&str>, heads, smoothing| MemberSettings {
            name: name.into(),
            backbone: backbone.map(String::from),
            heads,
            smoothing,
            weight: 1.0,
        };
        EnsembleSettings {
            members: vec![
                member("A", None, HeadPreset::Multitask, None),
                member("B", Some("tiny-conv-wide"), HeadPreset::TripletOnly, Some(0.1)),
                member("C", None, HeadPreset::MultitaskWithPhase, None),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: DataSource,
    /// Optional vocabulary file; must agree with the data when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    pub noise: NoiseSettings,
    pub n_folds: usize,
    pub workers: usize,
    pub distill: DistillConfig,
    pub ensemble: EnsembleSettings,
    pub metrics: EvalOptions,
    pub seeds: ExperimentSeeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            vocab: None,
            noise: NoiseSettings::default(),
            n_folds: 5,
            workers: 1,
            distill: DistillConfig::default(),
            ensemble: EnsembleSettings::default(),
            metrics: EvalOptions::default(),
            seeds: ExperimentSeeds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML without semantic checks. Relative paths are resolved
    /// against `base_dir`.
    pub fn parse(text: &str, source: &str, base_dir: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::parse(source, line, e.message().to_string())
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.out_dir);
        if let Some(p) = config.data.manifest.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.vocab.as_mut() {
            resolve(p);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    /// SHA-256 of the settings that determine results. The output directory
    /// and worker count are left out, since neither changes any artifact.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.workers = 1;
        sha256_hex(serde_json::to_string(&canonical).expect("serializable").as_bytes())
    }

    /// Every semantic problem, located in `text` when it is given.
    pub fn issues(&self, text: Option<&str>) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut push = |field: String, message: String| {
            let line = text.and_then(|t| locate(t, &field));
            issues.push(ConfigIssue {
                field,
                line,
                message,
            });
        };
        let mut check = |prefix: &str, result: Result<()>| {
            if let Err(e) = result {
                match e {
                    Error::Validation { field, reason } => {
                        let field = field.strip_prefix("optimizer.").unwrap_or(&field).to_string();
                        let field = field.strip_prefix(prefix).unwrap_or(&field).to_string();
                        push(format!("{prefix}{field}"), reason)
                    }
                    other => push(prefix.trim_end_matches('.').to_string(), other.to_string()),
                }
            }
        };

        let mut num_classes = None;
        let mut n_videos = None;
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) | (None, None) => check(
                "data.",
                Err(Error::validation(
                    "data.manifest",
                    "set exactly one of `manifest` and `synthetic`",
                )),
            ),
            (Some(path), None) => {
                if !path.exists() {
                    check(
                        "data.",
                        Err(Error::validation(
                            "data.manifest",
                            format!("{} does not exist", path.display()),
                        )),
                    );
                }
            }
            (None, Some(spec)) => {
                check("data.synthetic.", spec.validate());
                num_classes = Some(spec.n_valid_triplets);
                n_videos = Some(spec.n_videos);
            }
        }
        if let Some(path) = &self.vocab {
            match TripletVocabulary::load(path) {
                Ok(v) => num_classes = Some(v.num_classes()),
                Err(e) => check("vocab.", Err(Error::validation("vocab", e.to_string()))),
            }
        }
        check(
            "noise.",
            NoiseConfig {
                rate: self.noise.rate,
                mode: self.noise.mode,
                seed: 0,
            }
            .validate()
            .map_err(|e| Error::validation("noise.rate", e.to_string())),
        );
        if self.n_folds < 2 {
            check("", Err(Error::validation("n_folds", "need at least 2 folds")));
        }
        if let Some(n) = n_videos.filter(|&n| n < self.n_folds) {
            check(
                "",
                Err(Error::validation(
                    "n_folds",
                    format!("{n} videos cannot fill {} folds", self.n_folds),
                )),
            );
        }
        if self.workers == 0 {
            check("", Err(Error::validation("workers", "must be at least 1")));
        }

        let d = &self.distill;
        if !(0.0..1.0).contains(&d.smoothing) {
            check(
                "distill.",
                Err(Error::validation("smoothing", format!("{} not in [0, 1)", d.smoothing))),
            );
        }
        if !(0.0..=1.0).contains(&d.alpha) {
            check(
                "distill.",
                Err(Error::validation("alpha", format!("{} not in [0, 1]", d.alpha))),
            );
        }
        check("distill.", d.backbone.validate());
        check("distill.heads.", d.heads.validate().map_err(strip_heads));
        check("distill.teacher_optimizer.", d.teacher_optimizer.validate());
        check("distill.student_optimizer.", d.student_optimizer.validate());
        check("distill.augment.", d.augment.validate());
        if d.augment.resize_hw != d.backbone.input_hw {
            check(
                "distill.",
                Err(Error::validation(
                    "augment.resize_hw",
                    format!(
                        "{:?} differs from backbone.input_hw {:?}",
                        d.augment.resize_hw, d.backbone.input_hw
                    ),
                )),
            );
        }

        let members = &self.ensemble.members;
        if members.is_empty() {
            check("", Err(Error::validation("ensemble.members", "need at least one member")));
        }
        let mut names = BTreeSet::new();
        for (i, m) in members.iter().enumerate() {
            let prefix = format!("ensemble.members[{i}].");
            if !names.insert(m.name.as_str()) {
                check(&prefix, Err(Error::validation("name", format!("duplicate member `{}`", m.name))));
            }
            if let Some(b) = &m.backbone {
                check(
                    &prefix,
                    BackboneSpec::named(b, d.backbone.input_hw)
                        .map(drop)
                        .map_err(|e| match e {
                            Error::Validation { reason, .. } => Error::validation("backbone", reason),
                            other => other,
                        }),
                );
            }
            if let Some(eps) = m.smoothing.filter(|e| !(0.0..1.0).contains(e)) {
                check(&prefix, Err(Error::validation("smoothing", format!("{eps} not in [0, 1)"))));
            }
            if !(m.weight >= 0.0 && m.weight.is_finite()) {
                check(&prefix, Err(Error::validation("weight", "must be finite and >= 0")));
            }
        }
        if !members.is_empty() && members.iter().all(|m| m.weight == 0.0) {
            check("", Err(Error::validation("ensemble.members", "weights sum to zero")));
        }

        if self.metrics.top_k == 0 || num_classes.is_some_and(|c| self.metrics.top_k > c) {
            check(
                "metrics.",
                Err(Error::validation(
                    "top_k",
                    format!("{} outside [1, number of classes]", self.metrics.top_k),
                )),
            );
        }
        issues
    }

    /// Semantic validation of an in-memory config.
    pub fn validate(&self) -> Result<()> {
        let issues = self.issues(None);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                path: PathBuf::from("<config>"),
                issues,
            })
        }
    }

    /// Distillation settings of one ensemble member.
    pub fn member_config(&self, member: &MemberSettings) -> Result<DistillConfig> {
        let mut d = self.distill.clone();
        if let Some(b) = &member.backbone {
            d.backbone = BackboneSpec::named(b, d.backbone.input_hw)?;
        }
        d.heads = member.heads.apply(&d.heads);
        if let Some(eps) = member.smoothing {
            d.smoothing = eps;
        }
        Ok(d)
    }
}

fn strip_heads(e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => {
            Error::validation(field.strip_prefix("heads.").unwrap_or(&field).to_string(), reason)
        }
        other => other,
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of a dotted field path (`a.b[1].c`) in a TOML document. Falls back
/// to the line of the closest enclosing table header.
fn locate(text: &str, field: &str) -> Option<usize> {
    let mut header = String::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut headers: BTreeMap<String, usize> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix("[[").and_then(|l| l.strip_suffix("]]")) {
            let name = name.trim().to_string();
            let count = counts.entry(name.clone()).or_insert(0);
            header = format!("{name}[{count}]");
            *count += 1;
            headers.entry(header.clone()).or_insert(n + 1);
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            header = name.trim().to_string();
            headers.entry(header.clone()).or_insert(n + 1);
        } else if let Some((key, _)) = line.split_once('=') {
            let key = key.trim().trim_matches('"');
            let full = if header.is_empty() {
                key.to_string()
            } else {
                format!("{header}.{key}")
            };
            if full == field {
                return Some(n + 1);
            }
        }
    }
    let mut prefix = field;
    while let Some((head, _)) = prefix.rsplit_once('.') {
        if let Some(&line) = headers.get(head) {
            return Some(line);
        }
        prefix = head;
    }
    None
}

/// Reads, parses and checks a configuration file. Syntax and schema errors
/// stop at the first problem; semantic problems are all collected.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::parse(&text, &path.display().to_string(), base)?;
    let issues = config.issues(Some(&text));
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(Error::InvalidConfig {
            path: path.to_path_buf(),
            issues,
        })
    }
}

/// Builds the run's manifest: generated or loaded, then corrupted when a
/// noise rate is set.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<DatasetManifest> {
    let manifest = match (&config.data.manifest, &config.data.synthetic) {
        (Some(path), None) => DatasetManifest::load(path)?.materialize()?,
        (None, Some(spec)) => generate_synthetic_dataset(&SyntheticSpec {
            seed: config.seeds.data,
            ..spec.clone()
        })?,
        _ => {
            return Err(Error::validation(
                "data",
                "set exactly one of `manifest` and `synthetic`",
            ))
        }
    };
    if let Some(path) = &config.vocab {
        if TripletVocabulary::load(path)? != *manifest.vocab() {
            return Err(Error::validation(
                "vocab",
                format!("{} differs from the dataset vocabulary", path.display()),
            ));
        }
    }
    if config.noise.rate > 0.0 {
        let (noisy, _) = inject_label_noise(
            &manifest,
            &NoiseConfig {
                rate: config.noise.rate,
                mode: config.noise.mode,
                seed: config.seeds.noise,
            },
        )?;
        Ok(noisy)
    } else {
        Ok(manifest)
    }
}

/// A file written by a run, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

impl ArtifactRef {
    fn of(out_dir: &Path, path: &Path) -> Result<Self> {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        Ok(ArtifactRef {
            path: rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            sha256: file_hash(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum RungStatus {
    Completed,
    Failed(String),
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub name: String,
    pub status: RungStatus,
    pub map: Option<f64>,
    pub top_k_accuracy: Option<f64>,
    pub per_video: Vec<VideoMap>,
    pub checkpoints: Vec<ArtifactRef>,
    pub predictions: Option<ArtifactRef>,
}

impl RungReport {
    fn pending(name: &str) -> Self {
        RungReport {
            name: name.to_string(),
            status: RungStatus::Skipped("not run".into()),
            map: None,
            top_k_accuracy: None,
            per_video: Vec::new(),
            checkpoints: Vec::new(),
            predictions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub name: String,
    pub map: Option<f64>,
    pub top_k_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seeds: ExperimentSeeds,
    pub frames: usize,
    pub n_folds: usize,
    pub top_k: usize,
    pub rungs: Vec<RungReport>,
    pub members: Vec<MemberReport>,
}

pub const RUNG_NAMES: [&str; 4] = ["backbone", "multitask", "self_distillation", "ensemble"];

impl AblationReport {
    pub fn is_complete(&self) -> bool {
        self.rungs.iter().all(|r| r.status == RungStatus::Completed)
    }

    pub fn rung(&self, name: &str) -> Option<&RungReport> {
        self.rungs.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(source, e.line(), e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(out, "config_hash: {}", self.config_hash);
        let s = &self.seeds;
        let _ = writeln!(
            out,
            "seeds: teacher_init={} student_init={} data={} noise={} baseline={}",
            s.teacher_init, s.student_init, s.data, s.noise, s.baseline
        );
        let _ = writeln!(out, "frames: {}  folds: {}", self.frames, self.n_folds);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<20} {:>8} {:>8}  status", "rung", "mAP", format!("top-{}", self.top_k));
        for r in &self.rungs {
            let status = match &r.status {
                RungStatus::Completed => "ok".to_string(),
                RungStatus::Failed(e) => format!("FAILED: {e}"),
                RungStatus::Skipped(e) => format!("skipped: {e}"),
            };
            let _ = writeln!(out, "{:<20} {:>8} {:>8}  {status}", r.name, pct(r.map), pct(r.top_k_accuracy));
        }
        if !self.members.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "ensemble members");
            for m in &self.members {
                let _ = writeln!(
                    out,
                    "{:<20} {:>8} {:>8}  {}",
                    m.name,
                    pct(m.map),
                    pct(m.top_k_accuracy),
                    m.error.as_deref().unwrap_or("ok")
                );
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::validation("format", format!("`{other}` is not text or json"))),
        }
    }
}

/// Writes `report.txt` or `report.json` plus one per-video table per
/// completed rung. Returns the written paths.
pub fn emit_report(report: &AblationReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let (name, body) = match format {
        ReportFormat::Text => ("report.txt", report.to_text()),
        ReportFormat::Json => ("report.json", report.to_json()),
    };
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for rung in report.rungs.iter().filter(|r| r.status == RungStatus::Completed) {
        let path = dir.join(format!("per_video_{}.tsv", rung.name));
        std::fs::write(&path, per_video_table(&rung.per_video)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Two-column table of per-video mAP, `-` where undefined.
pub fn per_video_table(rows: &[VideoMap]) -> String {
    let mut out = String::from("video_id\tmap\n");
    for r in rows {
        let _ = match r.map {
            Some(m) => writeln!(out, "{}\t{m:.6}", r.video_id),
            None => writeln!(out, "{}\t-", r.video_id),
        };
    }
    out
}

fn on_folds<T: Send>(
    folds: &[FoldSplit],
    workers: usize,
    f: impl Fn(&FoldSplit) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(&f).collect())
    } else {
        folds.iter().map(f).collect()
    }
}

/// Predictions of each fold's model on that fold's validation videos.
pub fn out_of_fold_predictions(
    store: &FrameStore,
    folds: &[FoldSplit],
    checkpoints: &[Checkpoint],
) -> Result<PredictionSet> {
    let mut pred = PredictionSet::new(store.manifest().vocab().num_classes());
    for (fold, ckpt) in folds.iter().zip(checkpoints) {
        let model = ckpt.model()?;
        let idx = store.indices_of(&fold.val_videos);
        let rows = predict_triplets(&model, store, &idx)?;
        for (&i, row) in idx.iter().zip(rows) {
            pred.insert(store.manifest().frames()[i].key(), row)?;
        }
    }
    Ok(pred)
}

struct Evaluated {
    map: Option<f64>,
    top_k_accuracy: Option<f64>,
    per_video: Vec<VideoMap>,
    predictions: ArtifactRef,
}

fn evaluate_and_export(
    pred: &PredictionSet,
    manifest: &DatasetManifest,
    options: &EvalOptions,
    out_dir: &Path,
    path: &Path,
) -> Result<Evaluated> {
    let report = evaluate(pred, manifest, options)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    export_predictions(pred, path, ExportFormat::Csv)?;
    Ok(Evaluated {
        map: report.triplet_map,
        top_k_accuracy: report.top_k_accuracy,
        per_video: report.per_video,
        predictions: ArtifactRef::of(out_dir, path)?,
    })
}

fn fill(rung: &mut RungReport, result: Result<(Evaluated, Vec<ArtifactRef>)>) {
    match result {
        Ok((e, checkpoints)) => {
            rung.status = RungStatus::Completed;
            rung.map = e.map;
            rung.top_k_accuracy = e.top_k_accuracy;
            rung.per_video = e.per_video;
            rung.checkpoints = checkpoints;
            rung.predictions = Some(e.predictions);
        }
        Err(e) => rung.status = RungStatus::Failed(e.to_string()),
    }
}

/// Trains and evaluates the four rungs. Data preparation errors abort the
/// run; a failing rung is recorded in the report and the rungs that need
/// it are skipped.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let out = config.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // The snapshot sits in the output directory, so `.` points back at it.
    let snapshot = ExperimentConfig {
        out_dir: PathBuf::from("."),
        ..config.clone()
    };
    std::fs::write(out.join("config.toml"), snapshot.to_toml()).map_err(|e| Error::io(out, e))?;

    let manifest = prepare_dataset(config)?;
    manifest.save(&out.join("data").join("manifest.txt"))?;
    let folds = make_fold_splits(&manifest, config.n_folds, config.seeds.data)?;
    save_folds(&folds, &out.join("data").join("folds.json"))?;
    let store = FrameStore::load(manifest)?;
    let manifest = store.manifest();

    let mut rungs: Vec<RungReport> = RUNG_NAMES.iter().map(|n| RungReport::pending(n)).collect();
    let first = &config.ensemble.members[0];

    // Hard-label rungs keep the teacher schedule and pick their best
    // validation epoch, like the students they are compared with.
    for (slot, heads) in [
        (0, HeadPreset::TripletOnly.apply(&config.distill.heads)),
        (1, first.heads.apply(&config.distill.heads)),
    ] {
        let name = RUNG_NAMES[slot];
        let result = (|| {
            let mut train = config.distill.teacher_config(&config.seeds.protocol());
            train.heads = heads.clone();
            train.selection = Selection::BestValMap;
            train.seeds.init = config.seeds.baseline;
            let dir = out.join("rungs").join(name);
            let trained = on_folds(&folds, config.workers, |fold| {
                let ckpt = train_baseline(&store, fold, &train)?;
                let path = dir.join(format!("fold{}", fold.fold_id)).join("model.ckpt");
                ckpt.save(&path)?;
                Ok((ckpt, path))
            })?;
            let refs = trained
                .iter()
                .map(|(_, p)| ArtifactRef::of(out, p))
                .collect::<Result<Vec<_>>>()?;
            let ckpts: Vec<Checkpoint> = trained.into_iter().map(|(c, _)| c).collect();
            let pred = out_of_fold_predictions(&store, &folds, &ckpts)?;
            let e = evaluate_and_export(&pred, manifest, &config.metrics, out, &dir.join("predictions.csv"))?;
            Ok((e, refs))
        })();
        fill(&mut rungs[slot], result);
    }

    let mut member_preds: Vec<Option<PredictionSet>> = Vec::new();
    let mut members = Vec::new();
    let mut member_refs = Vec::new();
    for m in &config.ensemble.members {
        let dir = out.join("members").join(&m.name);
        let result = (|| -> Result<(PredictionSet, Evaluated, Vec<ArtifactRef>)> {
            let d = config.member_config(m)?;
            let record = run_fold_protocol(&store, &folds, &d, &config.seeds.protocol(), &dir, config.workers)?;
            let mut ckpts = Vec::new();
            let mut refs = Vec::new();
            for a in &record.folds {
                ckpts.push(Checkpoint::load(&a.student.path, Some(&a.student.sha256))?);
                refs.push(ArtifactRef::of(out, &a.teacher.path)?);
                refs.push(ArtifactRef::of(out, &a.soft_labels)?);
                refs.push(ArtifactRef::of(out, &a.student.path)?);
            }
            let pred = out_of_fold_predictions(&store, &folds, &ckpts)?;
            let e = evaluate_and_export(&pred, manifest, &config.metrics, out, &dir.join("predictions.csv"))?;
            Ok((pred, e, refs))
        })();
        match result {
            Ok((pred, e, refs)) => {
                members.push(MemberReport {
                    name: m.name.clone(),
                    map: e.map,
                    top_k_accuracy: e.top_k_accuracy,
                    error: None,
                });
                member_refs.push(Some((e, refs)));
                member_preds.push(Some(pred));
            }
            Err(err) => {
                members.push(MemberReport {
                    name: m.name.clone(),
                    map: None,
                    top_k_accuracy: None,
                    error: Some(err.to_string()),
                });
                member_refs.push(None);
                member_preds.push(None);
            }
        }
    }

    match member_refs[0].take() {
        Some(done) => fill(&mut rungs[2], Ok(done)),
        None => {
            rungs[2].status = RungStatus::Failed(members[0].error.clone().unwrap_or_default());
        }
    }

    if member_preds.iter().all(Option::is_some) {
        let result = (|| {
            let sets: Vec<&PredictionSet> = member_preds.iter().flatten().collect();
            let weights: Vec<f64> = config.ensemble.members.iter().map(|m| m.weight).collect();
            let pred = weighted_average(&sets, &weights)?;
            let path = out.join("rungs").join("ensemble").join("predictions.csv");
            let e = evaluate_and_export(&pred, manifest, &config.metrics, out, &path)?;
            Ok((e, Vec::new()))
        })();
        fill(&mut rungs[3], result);
    } else {
        rungs[3].status = RungStatus::Skipped("an ensemble member failed".into());
    }

    Ok(AblationReport {
        config_hash: config.hash(),
        seeds: config.seeds,
        frames: manifest.len(),
        n_folds: folds.len(),
        top_k: config.metrics.top_k,
        rungs,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "c.toml", "n_folds = 5\n");
        let config = validate_config(&path).unwrap();
        assert_eq!(config.n_folds, 5);
        assert_eq!(config.out_dir, dir.path().join("runs/default"));
    }

    #[test]
    fn smoothing_out_of_range_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "c.toml", "n_folds = 5\n\n[distill]\nsmoothing = 1.5\n");
        let Err(Error::InvalidConfig { issues, .. }) = validate_config(&path) else {
            panic!("expected rejection");
        };
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].field, "distill.smoothing");
        assert_eq!(issues[0].line, Some(4));
    }

    #[test]
    fn problems_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        let text = "\
n_folds = 1
workers = 0

[distill]
alpha = 2.0

[distill.backbone]
name = \"resnet\"
embedding_dim = 8
input_hw = [16, 16]

[[ensemble.members]]
name = \"A\"
heads = \"multitask\"

[[ensemble.members]]
name = \"B\"
heads = \"triplet_only\"
smoothing = 3.0
";
        let path = write(dir.path(), "c.toml", text);
        let Err(Error::InvalidConfig { issues, .. }) = validate_config(&path) else {
            panic!("expected rejection");
        };
        let found: Vec<(&str, Option<usize>)> =
            issues.iter().map(|i| (i.field.as_str(), i.line)).collect();
        for expected in [
            ("n_folds", Some(1)),
            ("workers", Some(2)),
            ("distill.alpha", Some(5)),
            ("distill.backbone.name", Some(8)),
            ("ensemble.members[1].smoothing", Some(19)),
        ] {
            assert!(found.contains(&expected), "{expected:?} not in {found:?}");
        }
        let backbone = issues.iter().find(|i| i.field == "distill.backbone.name").unwrap();
        for name in crate::model::registry_names() {
            assert!(backbone.message.contains(name), "{}", backbone.message);
        }
    }

    #[test]
    fn schema_errors_carry_a_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "c.toml", "n_folds = 5\n[distill]\nsmothing = 0.1\n");
        match validate_config(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        b.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.seeds.data = 99;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_toml_round_trip() {
        let config = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&config.to_toml(), "t", Path::new("")).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn seeds_by_name() {
        let mut s = ExperimentSeeds::default();
        s.set("noise", 42).unwrap();
        assert_eq!(s.noise, 42);
        assert!(s.set("init", 1).is_err());
    }

    #[test]
    fn text_report_has_four_rungs() {
        let report = AblationReport {
            config_hash: "abc".into(),
            seeds: ExperimentSeeds::default(),
            frames: 10,
            n_folds: 2,
            top_k: 5,
            rungs: RUNG_NAMES.iter().map(|n| RungReport::pending(n)).collect(),
            members: vec![],
        };
        let text = report.to_text();
        assert!(text.contains("config_hash: abc"));
        for n in RUNG_NAMES {
            assert!(text.contains(n));
        }
        let back = AblationReport::from_json(&report.to_json(), "r").unwrap();
        assert_eq!(back, report);
    }
}
