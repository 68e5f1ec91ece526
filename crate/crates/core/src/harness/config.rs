//! Experiment configuration: INI-style sections of typed `key = value` pairs.
//!
//! ```text
//! [experiment]
//! kind = pretrain
//! seeds = 1, 2, 3
//!
//! [contrast]
//! variant = exemplar
//! tau = 0.1
//! ```
//!
//! Lines starting with `#` or `;` are comments. Missing keys take their
//! defaults; unknown sections or keys are errors reported with their line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastConfig, Encoder, EncoderConfig, Variant};
use crate::data::PretrainMode;
use crate::error::{Error, Result};
use crate::eval::{FewShotConfig, LandmarkConfig, ProbeConfig, ProbeOptimizer};
use crate::inversion::ReconstructorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Pretrain,
    LinearProbe,
    FewShot,
    Landmark,
    Invert,
    Diagnose,
    AblateAugmentations,
    AblateTauK,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Pretrain,
        ExperimentKind::LinearProbe,
        ExperimentKind::FewShot,
        ExperimentKind::Landmark,
        ExperimentKind::Invert,
        ExperimentKind::Diagnose,
        ExperimentKind::AblateAugmentations,
        ExperimentKind::AblateTauK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::LinearProbe => "linear_probe",
            ExperimentKind::FewShot => "few_shot",
            ExperimentKind::Landmark => "landmark",
            ExperimentKind::Invert => "invert",
            ExperimentKind::Diagnose => "diagnose",
            ExperimentKind::AblateAugmentations => "ablate_augmentations",
            ExperimentKind::AblateTauK => "ablate_tau_k",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Noise,
    Directory,
    Manifest,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Noise => "noise",
            DataSource::Directory => "directory",
            DataSource::Manifest => "manifest",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            DataSource::Synthetic,
            DataSource::Noise,
            DataSource::Directory,
            DataSource::Manifest,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown data source {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub source: DataSource,
    /// Dataset location for file-based sources.
    pub path: Option<PathBuf>,
    /// Held-out split for file-based sources.
    pub test_path: Option<PathBuf>,
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Seed of the generated held-out split.
    pub test_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Synthetic,
            path: None,
            test_path: None,
            n_classes: 10,
            per_class: 50,
            image_size: 32,
            seed: 1,
            test_seed: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub level: u8,
    pub mode: PretrainMode,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            level: 5,
            mode: PretrainMode::Unsupervised,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub config: FewShotConfig,
    pub episodes: usize,
    /// Classes `0..base_classes` are used for pretraining, the rest are novel.
    pub base_classes: usize,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        FewShotSpec {
            config: FewShotConfig::default(),
            episodes: 200,
            base_classes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub config: LandmarkConfig,
}

impl Default for LandmarkSpec {
    fn default() -> Self {
        LandmarkSpec {
            n_train: 400,
            n_test: 100,
            config: LandmarkConfig::default(),
        }
    }
}

/// Which frozen encoder scores reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricEncoder {
    /// Randomly initialized and never trained.
    Random,
    Pretrained(Variant),
}

impl MetricEncoder {
    fn name(self) -> &'static str {
        match self {
            MetricEncoder::Random => "random",
            MetricEncoder::Pretrained(v) => v.name(),
        }
    }
}

impl FromStr for MetricEncoder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "random" {
            return Ok(MetricEncoder::Random);
        }
        Variant::parse(s)
            .map(MetricEncoder::Pretrained)
            .ok_or_else(|| format!("unknown metric encoder {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertSpec {
    pub n_images: usize,
    /// Resolution levels of the reconstructor kept (6 is the full layout).
    pub levels: usize,
    pub iterations: usize,
    pub lr: f64,
    pub noise_low: f64,
    pub noise_high: f64,
    pub keep_best: bool,
    /// Pretraining variants whose features are inverted.
    pub encoders: Vec<Variant>,
    pub metric: MetricEncoder,
}

impl Default for InvertSpec {
    fn default() -> Self {
        InvertSpec {
            n_images: 4,
            levels: 5,
            iterations: 3000,
            lr: 0.001,
            noise_low: 0.0,
            noise_high: 0.1,
            keep_best: true,
            encoders: vec![Variant::Moco, Variant::CrossEntropy],
            metric: MetricEncoder::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSpec {
    pub detections: PathBuf,
    pub ground_truth: PathBuf,
    /// Category groups file; the VOC grouping when absent.
    pub similarity: Option<PathBuf>,
    pub weak_iou: f64,
    pub correct_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSpec {
    pub levels: Vec<u8>,
    pub taus: Vec<f64>,
    pub queue_sizes: Vec<usize>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        AblateSpec {
            levels: vec![1, 2, 3, 4, 5],
            taus: vec![0.07, 0.1, 0.2],
            queue_sizes: vec![256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    /// Train the encoder first; otherwise evaluate a randomly initialized one.
    pub pretrain: bool,
    pub data: DataSpec,
    pub augment: AugmentSpec,
    pub encoder: EncoderConfig,
    pub contrast: ContrastConfig,
    pub probe: ProbeConfig,
    pub few_shot: FewShotSpec,
    pub landmark: LandmarkSpec,
    pub invert: InvertSpec,
    pub diagnose: Option<DiagnoseSpec>,
    pub ablate: AblateSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            kind: ExperimentKind::Pretrain,
            seeds: vec![1],
            output_dir: PathBuf::from("runs/experiment"),
            pretrain: true,
            data: DataSpec::default(),
            augment: AugmentSpec::default(),
            encoder: EncoderConfig::default(),
            contrast: ContrastConfig {
                queue_capacity: 256,
                momentum: 0.99,
                epochs: 30,
                batch_size: 32,
                // 0.03 at batch 256, scaled linearly
                lr: 0.00375,
                ..ContrastConfig::exemplar_v2()
            },
            probe: ProbeConfig::default(),
            few_shot: FewShotSpec::default(),
            landmark: LandmarkSpec::default(),
            invert: InvertSpec::default(),
            diagnose: None,
            ablate: AblateSpec::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn mode_name(m: PretrainMode) -> &'static str {
    match m {
        PretrainMode::Supervised => "supervised",
        PretrainMode::Unsupervised => "unsupervised",
    }
}

fn optimizer_name(o: ProbeOptimizer) -> &'static str {
    match o {
        ProbeOptimizer::Adam => "adam",
        ProbeOptimizer::Gd => "gd",
    }
}

impl ExperimentConfig {
    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        s.push_str("[experiment]\n");
        kv(&mut s, "name", self.name.clone());
        kv(&mut s, "kind", self.kind.name().into());
        kv(&mut s, "seeds", list(&self.seeds));
        kv(&mut s, "output_dir", self.output_dir.display().to_string());
        kv(&mut s, "pretrain", self.pretrain.to_string());

        let d = &self.data;
        s.push_str("\n[data]\n");
        kv(&mut s, "source", d.source.name().into());
        if let Some(p) = &d.path {
            kv(&mut s, "path", p.display().to_string());
        }
        if let Some(p) = &d.test_path {
            kv(&mut s, "test_path", p.display().to_string());
        }
        kv(&mut s, "n_classes", d.n_classes.to_string());
        kv(&mut s, "per_class", d.per_class.to_string());
        kv(&mut s, "image_size", d.image_size.to_string());
        kv(&mut s, "seed", d.seed.to_string());
        kv(&mut s, "test_seed", d.test_seed.to_string());

        let a = &self.augment;
        s.push_str("\n[augment]\n");
        kv(&mut s, "level", a.level.to_string());
        kv(&mut s, "mode", mode_name(a.mode).into());
        kv(&mut s, "blur_sigma_min", a.blur_sigma_min.to_string());
        kv(&mut s, "blur_sigma_max", a.blur_sigma_max.to_string());

        let e = &self.encoder;
        s.push_str("\n[encoder]\n");
        kv(&mut s, "channels", list(&e.channels));
        kv(&mut s, "strides", list(&e.strides));
        kv(&mut s, "hidden_dim", e.hidden_dim.to_string());
        kv(&mut s, "embed_dim", e.embed_dim.to_string());

        let c = &self.contrast;
        s.push_str("\n[contrast]\n");
        kv(&mut s, "variant", c.variant.name().into());
        kv(&mut s, "tau", c.tau.to_string());
        kv(&mut s, "queue_capacity", c.queue_capacity.to_string());
        kv(&mut s, "momentum", c.momentum.to_string());
        kv(&mut s, "epochs", c.epochs.to_string());
        kv(&mut s, "batch_size", c.batch_size.to_string());
        kv(&mut s, "lr", c.lr.to_string());
        kv(&mut s, "cosine", c.cosine.to_string());
        kv(&mut s, "sgd_momentum", c.sgd_momentum.to_string());
        kv(&mut s, "weight_decay", c.weight_decay.to_string());

        let p = &self.probe;
        s.push_str("\n[probe]\n");
        kv(&mut s, "epochs", p.epochs.to_string());
        kv(&mut s, "lr", p.lr.to_string());
        kv(&mut s, "weight_decay", p.weight_decay.to_string());
        kv(&mut s, "standardize", p.standardize.to_string());
        kv(&mut s, "optimizer", optimizer_name(p.optimizer).into());

        let f = &self.few_shot;
        s.push_str("\n[few_shot]\n");
        kv(&mut s, "n_way", f.config.n_way.to_string());
        kv(&mut s, "k_shot", f.config.k_shot.to_string());
        kv(&mut s, "n_query", f.config.n_query.to_string());
        kv(&mut s, "rounds", f.config.rounds.to_string());
        kv(&mut s, "lr_grid", list(&f.config.lr_grid));
        kv(
            &mut s,
            "validation_episodes",
            f.config.validation_episodes.to_string(),
        );
        kv(&mut s, "episodes", f.episodes.to_string());
        kv(&mut s, "base_classes", f.base_classes.to_string());

        let l = &self.landmark;
        s.push_str("\n[landmark]\n");
        kv(&mut s, "n_train", l.n_train.to_string());
        kv(&mut s, "n_test", l.n_test.to_string());
        kv(&mut s, "epochs", l.config.epochs.to_string());
        kv(&mut s, "batch_size", l.config.batch_size.to_string());
        kv(&mut s, "lr", l.config.lr.to_string());
        kv(
            &mut s,
            "freeze_backbone",
            l.config.freeze_backbone.to_string(),
        );
        kv(&mut s, "hidden", l.config.hidden.to_string());

        let i = &self.invert;
        s.push_str("\n[invert]\n");
        kv(&mut s, "n_images", i.n_images.to_string());
        kv(&mut s, "levels", i.levels.to_string());
        kv(&mut s, "iterations", i.iterations.to_string());
        kv(&mut s, "lr", i.lr.to_string());
        kv(&mut s, "noise_low", i.noise_low.to_string());
        kv(&mut s, "noise_high", i.noise_high.to_string());
        kv(&mut s, "keep_best", i.keep_best.to_string());
        kv(
            &mut s,
            "encoders",
            i.encoders
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv(&mut s, "metric", i.metric.name().into());

        if let Some(g) = &self.diagnose {
            s.push_str("\n[diagnose]\n");
            kv(&mut s, "detections", g.detections.display().to_string());
            kv(&mut s, "ground_truth", g.ground_truth.display().to_string());
            if let Some(p) = &g.similarity {
                kv(&mut s, "similarity", p.display().to_string());
            }
            kv(&mut s, "weak_iou", g.weak_iou.to_string());
            kv(&mut s, "correct_iou", g.correct_iou.to_string());
        }

        let b = &self.ablate;
        s.push_str("\n[ablate]\n");
        kv(&mut s, "levels", list(&b.levels));
        kv(&mut s, "taus", list(&b.taus));
        kv(&mut s, "queue_sizes", list(&b.queue_sizes));
        s
    }

    /// Parses config text; `path` only labels diagnostics.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut ini = Ini::parse(text, path)?;
        let mut c = ExperimentConfig::default();

        let mut sec = ini.section("experiment");
        sec.set(&mut c.name, "name")?;
        sec.set(&mut c.kind, "kind")?;
        sec.set_list(&mut c.seeds, "seeds")?;
        sec.set(&mut c.output_dir, "output_dir")?;
        sec.set(&mut c.pretrain, "pretrain")?;
        sec.finish()?;

        let mut sec = ini.section("data");
        let d = &mut c.data;
        sec.set(&mut d.source, "source")?;
        sec.set_opt(&mut d.path, "path")?;
        sec.set_opt(&mut d.test_path, "test_path")?;
        sec.set(&mut d.n_classes, "n_classes")?;
        sec.set(&mut d.per_class, "per_class")?;
        sec.set(&mut d.image_size, "image_size")?;
        sec.set(&mut d.seed, "seed")?;
        sec.set(&mut d.test_seed, "test_seed")?;
        sec.finish()?;
        c.encoder.image_size = c.data.image_size;

        let mut sec = ini.section("augment");
        let a = &mut c.augment;
        sec.set(&mut a.level, "level")?;
        sec.set_with(&mut a.mode, "mode", |s| match s {
            "supervised" => Ok(PretrainMode::Supervised),
            "unsupervised" => Ok(PretrainMode::Unsupervised),
            _ => Err(format!("unknown mode {s:?}")),
        })?;
        sec.set(&mut a.blur_sigma_min, "blur_sigma_min")?;
        sec.set(&mut a.blur_sigma_max, "blur_sigma_max")?;
        sec.finish()?;

        let mut sec = ini.section("encoder");
        let e = &mut c.encoder;
        sec.set_list(&mut e.channels, "channels")?;
        sec.set_list(&mut e.strides, "strides")?;
        sec.set(&mut e.hidden_dim, "hidden_dim")?;
        sec.set(&mut e.embed_dim, "embed_dim")?;
        sec.finish()?;

        let mut sec = ini.section("contrast");
        let k = &mut c.contrast;
        sec.set_with(&mut k.variant, "variant", |s| {
            Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))
        })?;
        sec.set(&mut k.tau, "tau")?;
        sec.set(&mut k.queue_capacity, "queue_capacity")?;
        sec.set(&mut k.momentum, "momentum")?;
        sec.set(&mut k.epochs, "epochs")?;
        sec.set(&mut k.batch_size, "batch_size")?;
        sec.set(&mut k.lr, "lr")?;
        sec.set(&mut k.cosine, "cosine")?;
        sec.set(&mut k.sgd_momentum, "sgd_momentum")?;
        sec.set(&mut k.weight_decay, "weight_decay")?;
        sec.finish()?;

        let mut sec = ini.section("probe");
        let p = &mut c.probe;
        sec.set(&mut p.epochs, "epochs")?;
        sec.set(&mut p.lr, "lr")?;
        sec.set(&mut p.weight_decay, "weight_decay")?;
        sec.set(&mut p.standardize, "standardize")?;
        sec.set_with(&mut p.optimizer, "optimizer", |s| match s {
            "adam" => Ok(ProbeOptimizer::Adam),
            "gd" => Ok(ProbeOptimizer::Gd),
            _ => Err(format!("unknown optimizer {s:?}")),
        })?;
        sec.finish()?;

        let mut sec = ini.section("few_shot");
        let f = &mut c.few_shot;
        sec.set(&mut f.config.n_way, "n_way")?;
        sec.set(&mut f.config.k_shot, "k_shot")?;
        sec.set(&mut f.config.n_query, "n_query")?;
        sec.set(&mut f.config.rounds, "rounds")?;
        sec.set_list(&mut f.config.lr_grid, "lr_grid")?;
        sec.set(&mut f.config.validation_episodes, "validation_episodes")?;
        sec.set(&mut f.episodes, "episodes")?;
        sec.set(&mut f.base_classes, "base_classes")?;
        sec.finish()?;

        let mut sec = ini.section("landmark");
        let l = &mut c.landmark;
        sec.set(&mut l.n_train, "n_train")?;
        sec.set(&mut l.n_test, "n_test")?;
        sec.set(&mut l.config.epochs, "epochs")?;
        sec.set(&mut l.config.batch_size, "batch_size")?;
        sec.set(&mut l.config.lr, "lr")?;
        sec.set(&mut l.config.freeze_backbone, "freeze_backbone")?;
        sec.set(&mut l.config.hidden, "hidden")?;
        sec.finish()?;

        let mut sec = ini.section("invert");
        let i = &mut c.invert;
        sec.set(&mut i.n_images, "n_images")?;
        sec.set(&mut i.levels, "levels")?;
        sec.set(&mut i.iterations, "iterations")?;
        sec.set(&mut i.lr, "lr")?;
        sec.set(&mut i.noise_low, "noise_low")?;
        sec.set(&mut i.noise_high, "noise_high")?;
        sec.set(&mut i.keep_best, "keep_best")?;
        sec.set_list_with(&mut i.encoders, "encoders", |s| {
            Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))
        })?;
        sec.set(&mut i.metric, "metric")?;
        sec.finish()?;

        if ini.has_section("diagnose") {
            let mut sec = ini.section("diagnose");
            let mut g = DiagnoseSpec {
                detections: PathBuf::new(),
                ground_truth: PathBuf::new(),
                similarity: None,
                weak_iou: crate::diagnose::DEFAULT_WEAK_IOU,
                correct_iou: crate::diagnose::DEFAULT_CORRECT_IOU,
            };
            sec.require(&mut g.detections, "detections")?;
            sec.require(&mut g.ground_truth, "ground_truth")?;
            sec.set_opt(&mut g.similarity, "similarity")?;
            sec.set(&mut g.weak_iou, "weak_iou")?;
            sec.set(&mut g.correct_iou, "correct_iou")?;
            sec.finish()?;
            c.diagnose = Some(g);
        }

        let mut sec = ini.section("ablate");
        let b = &mut c.ablate;
        sec.set_list(&mut b.levels, "levels")?;
        sec.set_list(&mut b.taus, "taus")?;
        sec.set_list(&mut b.queue_sizes, "queue_sizes")?;
        sec.finish()?;

        ini.finish()?;
        Ok(c)
    }

    /// Reads, parses and validates a config file. Input paths inside it
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_inputs(base);
        c.validate()
            .map_err(|issue| issue.into_error(path, &text))?;
        Ok(c)
    }

    fn resolve_inputs(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [self.data.path.as_mut(), self.data.test_path.as_mut()]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(g) = &mut self.diagnose {
            fix(&mut g.detections);
            fix(&mut g.ground_truth);
            if let Some(p) = &mut g.similarity {
                fix(p);
            }
        }
    }

    /// Semantic checks, including that referenced input files exist.
    pub fn validate(&self) -> std::result::Result<(), ConfigIssue> {
        let issue = |section: &'static str, key: &'static str, message: String| ConfigIssue {
            section,
            key,
            message,
        };
        if self.seeds.is_empty() {
            return Err(issue(
                "experiment",
                "seeds",
                "seed list must not be empty".into(),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(issue("experiment", "name", "name must not be empty".into()));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic | DataSource::Noise => {
                if d.n_classes == 0 || d.per_class == 0 {
                    return Err(issue(
                        "data",
                        "n_classes",
                        "n_classes and per_class must be at least 1".into(),
                    ));
                }
            }
            DataSource::Directory | DataSource::Manifest => {
                match &d.path {
                    None => {
                        return Err(issue(
                            "data",
                            "path",
                            "file-based sources need a path".into(),
                        ))
                    }
                    Some(p) if !p.exists() => {
                        return Err(issue(
                            "data",
                            "path",
                            format!("{} does not exist", p.display()),
                        ))
                    }
                    _ => {}
                }
                if let Some(p) = &d.test_path {
                    if !p.exists() {
                        return Err(issue(
                            "data",
                            "test_path",
                            format!("{} does not exist", p.display()),
                        ));
                    }
                }
            }
        }
        if d.image_size < crate::data::image::MIN_SIDE {
            return Err(issue(
                "data",
                "image_size",
                format!("image size {} is too small", d.image_size),
            ));
        }
        if !(1..=5).contains(&self.augment.level) {
            return Err(issue(
                "augment",
                "level",
                format!("level {} outside 1..5", self.augment.level),
            ));
        }
        if !(0.0 < self.augment.blur_sigma_min
            && self.augment.blur_sigma_min <= self.augment.blur_sigma_max)
        {
            return Err(issue(
                "augment",
                "blur_sigma_min",
                "blur bounds must satisfy 0 < min <= max".into(),
            ));
        }
        if let Err(e) = Encoder::new(self.encoder.clone()) {
            return Err(issue("encoder", "channels", e.to_string()));
        }
        if let Err(e) = self.contrast.validate() {
            return Err(issue(
                "contrast",
                contrast_key(&self.contrast),
                e.to_string(),
            ));
        }
        if self.probe.epochs == 0 || !(self.probe.lr > 0.0) {
            return Err(issue(
                "probe",
                "lr",
                "probe needs epochs >= 1 and lr > 0".into(),
            ));
        }
        match self.kind {
            ExperimentKind::LinearProbe
            | ExperimentKind::AblateAugmentations
            | ExperimentKind::AblateTauK => {
                if matches!(d.source, DataSource::Directory | DataSource::Manifest)
                    && d.test_path.is_none()
                {
                    return Err(issue(
                        "data",
                        "test_path",
                        "linear probes on file datasets need a test_path".into(),
                    ));
                }
            }
            ExperimentKind::FewShot => {
                let f = &self.few_shot;
                if !matches!(d.source, DataSource::Synthetic | DataSource::Noise) {
                    // file datasets are used as given: all classes are novel
                } else if d.n_classes < f.base_classes + f.config.n_way {
                    return Err(issue(
                        "few_shot",
                        "base_classes",
                        format!(
                            "{} classes leave fewer than {} novel classes after {} base classes",
                            d.n_classes, f.config.n_way, f.base_classes
                        ),
                    ));
                }
                if f.episodes < 2 || f.config.lr_grid.is_empty() || f.config.rounds == 0 {
                    return Err(issue(
                        "few_shot",
                        "episodes",
                        "need >= 2 episodes, rounds >= 1 and a learning-rate grid".into(),
                    ));
                }
                if f.config.n_way == 0 || f.config.k_shot == 0 || f.config.n_query == 0 {
                    return Err(issue(
                        "few_shot",
                        "n_way",
                        "n_way, k_shot and n_query must be positive".into(),
                    ));
                }
                if d.per_class < f.config.k_shot + f.config.n_query {
                    return Err(issue(
                        "few_shot",
                        "n_query",
                        "classes are smaller than k_shot + n_query".into(),
                    ));
                }
            }
            ExperimentKind::Landmark => {
                let l = &self.landmark;
                if l.n_train == 0
                    || l.n_test == 0
                    || l.config.batch_size == 0
                    || !(l.config.lr > 0.0)
                {
                    return Err(issue(
                        "landmark",
                        "n_train",
                        "landmark sizes, batch size and lr must be positive".into(),
                    ));
                }
            }
            ExperimentKind::Invert => {
                let i = &self.invert;
                if !(1..=6).contains(&i.levels) {
                    return Err(issue(
                        "invert",
                        "levels",
                        format!("levels {} outside 1..6", i.levels),
                    ));
                }
                if d.image_size % (1 << i.levels) != 0 {
                    return Err(issue(
                        "invert",
                        "levels",
                        format!(
                            "image size {} is not divisible by 2^{}",
                            d.image_size, i.levels
                        ),
                    ));
                }
                if i.iterations == 0 || !(i.lr > 0.0) || !(i.noise_low < i.noise_high) {
                    return Err(issue(
                        "invert",
                        "iterations",
                        "need iterations >= 1, lr > 0, noise_low < noise_high".into(),
                    ));
                }
                if i.n_images == 0 || i.encoders.is_empty() {
                    return Err(issue(
                        "invert",
                        "encoders",
                        "need at least one image and one encoder".into(),
                    ));
                }
            }
            ExperimentKind::Diagnose => {
                let Some(g) = &self.diagnose else {
                    return Err(issue(
                        "experiment",
                        "kind",
                        "diagnose experiments need a [diagnose] section".into(),
                    ));
                };
                for (key, p) in [
                    ("detections", Some(&g.detections)),
                    ("ground_truth", Some(&g.ground_truth)),
                    ("similarity", g.similarity.as_ref()),
                ] {
                    if let Some(p) = p {
                        if !p.exists() {
                            return Err(issue(
                                "diagnose",
                                key,
                                format!("{} does not exist", p.display()),
                            ));
                        }
                    }
                }
                let t = crate::diagnose::Thresholds {
                    weak_iou: g.weak_iou,
                    correct_iou: g.correct_iou,
                };
                if let Err(e) = t.validate() {
                    return Err(issue("diagnose", "weak_iou", e.to_string()));
                }
            }
            ExperimentKind::Pretrain => {}
        }
        let b = &self.ablate;
        if self.kind == ExperimentKind::AblateAugmentations
            && (b.levels.is_empty() || b.levels.iter().any(|l| !(1..=5).contains(l)))
        {
            return Err(issue(
                "ablate",
                "levels",
                "levels must be a non-empty list within 1..5".into(),
            ));
        }
        if self.kind == ExperimentKind::AblateTauK {
            if b.taus.is_empty() || b.taus.iter().any(|t| !(*t > 0.0)) {
                return Err(issue(
                    "ablate",
                    "taus",
                    "taus must be a non-empty list of positive values".into(),
                ));
            }
            if b.queue_sizes.is_empty()
                || b.queue_sizes.iter().any(|&k| k < self.contrast.batch_size)
            {
                return Err(issue(
                    "ablate",
                    "queue_sizes",
                    "queue sizes must be non-empty and at least the batch size".into(),
                ));
            }
        }
        Ok(())
    }

    /// The reconstructor layout used by `invert` runs.
    pub fn reconstructor_spec(&self) -> Result<ReconstructorSpec> {
        ReconstructorSpec::default().truncated(self.invert.levels)
    }
}

fn contrast_key(c: &ContrastConfig) -> &'static str {
    if !(c.tau > 0.0) {
        "tau"
    } else if !(0.0..=1.0).contains(&c.momentum) {
        "momentum"
    } else if c.queue_capacity == 0
        || (c.variant.is_contrastive() && c.batch_size > c.queue_capacity)
    {
        "queue_capacity"
    } else if c.batch_size == 0 {
        "batch_size"
    } else if c.epochs == 0 {
        "epochs"
    } else {
        "lr"
    }
}

/// A semantic config problem tied to a `[section] key`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub section: &'static str,
    pub key: &'static str,
    pub message: String,
}

impl ConfigIssue {
    /// Points at the line defining the key when the file has one.
    pub fn into_error(self, path: &Path, text: &str) -> Error {
        let message = format!("[{}] {}: {}", self.section, self.key, self.message);
        match Ini::parse(text, path)
            .ok()
            .and_then(|ini| ini.line_of(self.section, self.key))
        {
            Some(line) => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            None => Error::Config(format!("{}: {message}", path.display())),
        }
    }
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.section, self.key, self.message)
    }
}

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw sections; entries are removed as typed fields consume them so that
/// leftovers can be reported as unknown.
#[derive(Debug)]
struct Ini {
    path: PathBuf,
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

impl Ini {
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(rest) = t.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, format!("unterminated section header {t:?}")))?
                    .trim()
                    .to_string();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                if sections.contains_key(&name) {
                    return Err(err(line, format!("section [{name}] appears twice")));
                }
                sections.insert(name.clone(), (line, BTreeMap::new()));
                current = Some(name);
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got {t:?}")))?;
            let Some(sec) = &current else {
                return Err(err(line, "key outside of any section".into()));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(err(line, "empty key".into()));
            }
            let entries = &mut sections.get_mut(sec).unwrap().1;
            if entries.contains_key(&key) {
                return Err(err(line, format!("duplicate key {key:?} in [{sec}]")));
            }
            entries.insert(
                key,
                Entry {
                    value: v.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Ini {
            path: path.to_path_buf(),
            sections,
        })
    }

    fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        let (header, entries) = self.sections.get(section)?;
        Some(entries.get(key).map_or(*header, |e| e.line))
    }

    fn section(&mut self, name: &'static str) -> Section {
        let entries = self
            .sections
            .remove(name)
            .map(|(_, e)| e)
            .unwrap_or_default();
        Section {
            path: self.path.clone(),
            name,
            entries,
        }
    }

    fn finish(self) -> Result<()> {
        // every known section is consumed by `section`; anything left is a bug
        debug_assert!(self.sections.is_empty());
        Ok(())
    }
}

const SECTIONS: [&str; 11] = [
    "experiment",
    "data",
    "augment",
    "encoder",
    "contrast",
    "probe",
    "few_shot",
    "landmark",
    "invert",
    "diagnose",
    "ablate",
];

struct Section {
    path: PathBuf,
    name: &'static str,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn error(&self, line: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: format!("[{}] {message}", self.name),
        }
    }

    fn set_with<T>(
        &mut self,
        slot: &mut T,
        key: &str,
        f: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<()> {
        if let Some(e) = self.entries.remove(key) {
            *slot = f(&e.value).map_err(|m| self.error(e.line, format!("{key}: {m}")))?;
        }
        Ok(())
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        self.set_with(slot, key, |s| {
            s.parse::<T>()
                .map_err(|e| format!("cannot parse {s:?}: {e}"))
        })
    }

    fn set_opt<T: FromStr>(&mut self, slot: &mut Option<T>, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        self.set_with(slot, key, |s| {
            s.parse::<T>()
                .map(Some)
                .map_err(|e| format!("cannot parse {s:?}: {e}"))
        })
    }

    fn require<T: FromStr>(&mut self, slot: &mut T, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if !self.entries.contains_key(key) {
            return Err(Error::Config(format!(
                "{}: [{}] is missing required key {key:?}",
                self.path.display(),
                self.name
            )));
        }
        self.set(slot, key)
    }

    fn set_list_with<T>(
        &mut self,
        slot: &mut Vec<T>,
        key: &str,
        f: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<()> {
        self.set_with(slot, key, |s| {
            s.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(&f)
                .collect()
        })
    }

    fn set_list<T: FromStr>(&mut self, slot: &mut Vec<T>, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        self.set_list_with(slot, key, |s| {
            s.parse::<T>()
                .map_err(|e| format!("cannot parse {s:?}: {e}"))
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((k, e)) = self.entries.iter().next() {
            return Err(self.error(e.line, format!("unknown key {k:?}")));
        }
        Ok(())
    }
}
