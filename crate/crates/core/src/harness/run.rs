//! Executes one experiment config per seed and writes its run directory:
//! `metrics.csv`, `run.json`, the config snapshot, checkpoints and plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, ExperimentKind, MetricEncoder};
use super::plots::emit_plots;
use crate::contrast::train::stream_rng;
use crate::contrast::{
    pretrain, save_checkpoint, ContrastConfig, Encoder, EncoderConfig, EpochMetrics, TrainState,
    Variant,
};
use crate::data::augment::resize;
use crate::data::{
    load_dataset, make_noise_dataset, make_synthetic_dataset, pipeline_stage, write_png,
    AugmentationPipeline, DatasetFormat, Image, LabeledImageSet,
};
use crate::diagnose::{
    read_detections, read_ground_truth, top_fp_distribution, write_distribution_csv,
    FpDistribution, SimilarityMap, Thresholds,
};
use crate::error::{Error, Result};
use crate::eval::{
    few_shot_eval, linear_probe, make_landmark_dataset, mean_landmark_error, train_landmark_head,
    FeatureExtractor, FewShotConfig, FrozenEncoder, LandmarkConfig,
};
use crate::inversion::{reconstruction_report, InversionConfig, NamedEncoder, ReportRow};

/// Environment variable overriding where run directories are created.
pub const OUTPUT_ROOT_ENV: &str = "CONTRASTKIT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub metrics: Vec<MetricRow>,
    /// Last value of every metric.
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
    pub fp_distributions: Option<BTreeMap<usize, FpDistribution>>,
    pub perceptual: Option<Vec<ReportRow>>,
}

impl RunRecord {
    /// `(epoch, value)` pairs of one metric, in row order.
    pub fn series(&self, metric: &str) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `$CONTRASTKIT_OUTPUT_ROOT`, else the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")))
}

/// Loads a config file and runs it under [`output_root`].
pub fn run_experiment(
    config_path: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<RunRecord>> {
    let config = ExperimentConfig::load(config_path)?;
    run_config(&config, &output_root(), progress)
}

/// Runs every seed of an already validated config.
pub fn run_config(
    config: &ExperimentConfig,
    root: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<RunRecord>> {
    config
        .validate()
        .map_err(|issue| Error::Config(issue.to_string()))?;
    config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, seed, root, progress))
        .collect()
}

#[derive(Default)]
struct Metrics {
    rows: Vec<MetricRow>,
}

impl Metrics {
    fn push(&mut self, epoch: usize, step: usize, metric: impl Into<String>, value: f64) {
        self.rows.push(MetricRow {
            epoch,
            step,
            metric: metric.into(),
            value,
        });
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "step", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.metric.clone(),
                r.value.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    run_dir: PathBuf,
    metrics: Metrics,
    artifacts: Vec<PathBuf>,
    fp: Option<BTreeMap<usize, FpDistribution>>,
    perceptual: Option<Vec<ReportRow>>,
    progress: &'a mut dyn FnMut(&str),
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    root: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<RunRecord> {
    let started = Instant::now();
    let run_dir = root.join(&config.output_dir).join(format!("seed_{seed}"));
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    progress(&format!(
        "{} ({}) seed {seed} -> {}",
        config.name,
        config.kind.name(),
        run_dir.display()
    ));

    let snapshot = run_dir.join("config.ini");
    fs::write(&snapshot, config.to_text()).map_err(|e| Error::io(&snapshot, e))?;
    let mut cx = Context {
        config,
        seed,
        run_dir: run_dir.clone(),
        metrics: Metrics::default(),
        artifacts: vec![snapshot],
        fp: None,
        perceptual: None,
        progress,
    };
    match config.kind {
        ExperimentKind::Pretrain => run_pretrain(&mut cx)?,
        ExperimentKind::LinearProbe => run_linear_probe(&mut cx)?,
        ExperimentKind::FewShot => run_few_shot(&mut cx)?,
        ExperimentKind::Landmark => run_landmark(&mut cx)?,
        ExperimentKind::Invert => run_invert(&mut cx)?,
        ExperimentKind::Diagnose => run_diagnose(&mut cx)?,
        ExperimentKind::AblateAugmentations => run_ablate_augmentations(&mut cx)?,
        ExperimentKind::AblateTauK => run_ablate_tau_k(&mut cx)?,
    }

    if let Some(bad) = cx.metrics.rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::NonFiniteMetric(format!(
            "{} (epoch {})",
            bad.metric, bad.epoch
        )));
    }
    let metrics_path = run_dir.join("metrics.csv");
    cx.metrics.write_csv(&metrics_path)?;
    cx.artifacts.push(metrics_path);

    let mut final_metrics = BTreeMap::new();
    for r in &cx.metrics.rows {
        final_metrics.insert(r.metric.clone(), r.value);
    }
    let mut record = RunRecord {
        name: config.name.clone(),
        kind: config.kind,
        seed,
        config: config.clone(),
        run_dir: run_dir.clone(),
        metrics: cx.metrics.rows,
        final_metrics,
        wall_clock_secs: 0.0,
        artifacts: cx.artifacts,
        fp_distributions: cx.fp,
        perceptual: cx.perceptual,
    };
    let plots = emit_plots(std::slice::from_ref(&record), &run_dir)?;
    record.artifacts.extend(plots);
    let json_path = run_dir.join("run.json");
    record.artifacts.push(json_path.clone());
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&record)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    if let Some(missing) = record.artifacts.iter().find(|p| !p.exists()) {
        return Err(Error::MissingFile(missing.clone()));
    }
    Ok(record)
}

fn load_split(config: &ExperimentConfig, path: &Path) -> Result<LabeledImageSet> {
    let format = match config.data.source {
        DataSource::Manifest => DatasetFormat::Manifest,
        _ => DatasetFormat::DirectoryPerClass,
    };
    let mut set = load_dataset(path, format)?;
    let size = config.data.image_size;
    for img in &mut set.images {
        if img.height != size || img.width != size {
            *img = resize(img, size);
        }
    }
    Ok(set)
}

/// Training split.
fn train_set(config: &ExperimentConfig) -> Result<LabeledImageSet> {
    let d = &config.data;
    match d.source {
        DataSource::Synthetic => {
            make_synthetic_dataset(d.n_classes, d.per_class, d.image_size, d.seed)
        }
        DataSource::Noise => make_noise_dataset(d.n_classes, d.per_class, d.image_size, d.seed),
        DataSource::Directory | DataSource::Manifest => load_split(
            config,
            d.path.as_deref().expect("validated file source has a path"),
        ),
    }
}

/// Held-out split, if the source provides one.
fn test_set(config: &ExperimentConfig) -> Result<Option<LabeledImageSet>> {
    let d = &config.data;
    match d.source {
        DataSource::Synthetic => {
            make_synthetic_dataset(d.n_classes, d.per_class, d.image_size, d.test_seed).map(Some)
        }
        DataSource::Noise => {
            make_noise_dataset(d.n_classes, d.per_class, d.image_size, d.test_seed).map(Some)
        }
        DataSource::Directory | DataSource::Manifest => d
            .test_path
            .as_deref()
            .map(|p| load_split(config, p))
            .transpose(),
    }
}

fn pipeline(config: &ExperimentConfig, level: u8) -> Result<AugmentationPipeline> {
    let mut p =
        pipeline_stage(level, config.augment.mode)?.with_output_size(config.data.image_size);
    if let Some(b) = &mut p.blur {
        b.sigma_min = config.augment.blur_sigma_min;
        b.sigma_max = config.augment.blur_sigma_max;
    }
    Ok(p)
}

fn encoder_config(config: &ExperimentConfig) -> EncoderConfig {
    EncoderConfig {
        image_size: config.data.image_size,
        ..config.encoder.clone()
    }
}

struct Trained {
    encoder: Encoder,
    params: Vec<f64>,
    state: Option<TrainState>,
}

impl Trained {
    fn frozen(&self) -> FrozenEncoder<'_> {
        FrozenEncoder {
            encoder: &self.encoder,
            params: &self.params,
        }
    }

    fn epochs(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.epoch)
    }

    fn steps(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.step)
    }
}

/// Pretrains an encoder, or draws a random one when pretraining is off.
/// `loss_metric` names the per-epoch loss rows; `None` records nothing.
fn obtain_encoder(
    cx: &mut Context<'_>,
    contrast: &ContrastConfig,
    dataset: &LabeledImageSet,
    pipeline: &AugmentationPipeline,
    loss_metric: Option<&str>,
) -> Result<Trained> {
    let enc_cfg = encoder_config(cx.config);
    if !cx.config.pretrain {
        let encoder = Encoder::new(enc_cfg)?;
        let params = encoder.init_params(&mut stream_rng(cx.seed, u64::MAX));
        return Ok(Trained {
            encoder,
            params,
            state: None,
        });
    }
    let metrics = &mut cx.metrics;
    let progress = &mut *cx.progress;
    let variant = contrast.variant.name();
    let (state, _) = pretrain(
        dataset,
        pipeline,
        enc_cfg,
        contrast,
        cx.seed,
        |m: &EpochMetrics| {
            progress(&format!(
                "  {variant} epoch {}/{}: loss {:.4}, lr {:.5}, {:.0} img/s",
                m.epoch + 1,
                contrast.epochs,
                m.mean_loss,
                m.lr,
                m.throughput
            ));
            if let Some(name) = loss_metric {
                let step = (m.epoch + 1) * m.steps;
                metrics.push(m.epoch + 1, step, name, m.mean_loss);
            }
        },
    )?;
    Ok(Trained {
        encoder: state.encoder.clone(),
        params: state.pair.query.clone(),
        state: Some(state),
    })
}

fn checkpoint(
    cx: &mut Context<'_>,
    trained: &Trained,
    contrast: &ContrastConfig,
    name: &str,
) -> Result<()> {
    if let Some(state) = &trained.state {
        let dir = cx.run_dir.join(name);
        save_checkpoint(&dir, state, contrast)?;
        cx.artifacts.push(dir);
    }
    Ok(())
}

fn probe_accuracy(
    trained: &Trained,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    config: &ExperimentConfig,
) -> Result<f64> {
    let fe = trained.frozen();
    let tr: Vec<&Image> = train.images.iter().collect();
    let te: Vec<&Image> = test.images.iter().collect();
    linear_probe(
        &fe.extract(&tr)?,
        &train.labels,
        &fe.extract(&te)?,
        &test.labels,
        fe.dim(),
        &config.probe,
    )
}

fn run_pretrain(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let data = train_set(config)?;
    let trained = obtain_encoder(
        cx,
        &config.contrast,
        &data,
        &pipeline(config, config.augment.level)?,
        Some("train_loss"),
    )?;
    checkpoint(cx, &trained, &config.contrast, "checkpoint")
}

fn run_linear_probe(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let data = train_set(config)?;
    let test = test_set(config)?.expect("validated probe config has a test split");
    let trained = obtain_encoder(
        cx,
        &config.contrast,
        &data,
        &pipeline(config, config.augment.level)?,
        Some("train_loss"),
    )?;
    checkpoint(cx, &trained, &config.contrast, "checkpoint")?;
    let acc = probe_accuracy(&trained, &data, &test, config)?;
    (cx.progress)(&format!("  probe accuracy {acc:.4}"));
    cx.metrics
        .push(trained.epochs(), trained.steps(), "probe_accuracy", acc);
    Ok(())
}

fn run_few_shot(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let f = &config.few_shot;
    let data = train_set(config)?;
    let (base, novel) = match config.data.source {
        DataSource::Synthetic | DataSource::Noise => (
            data.filter_classes(|l| l < f.base_classes),
            data.filter_classes(|l| l >= f.base_classes),
        ),
        DataSource::Directory | DataSource::Manifest => {
            let novel = test_set(config)?.unwrap_or_else(|| data.clone());
            (data, novel)
        }
    };
    // a cross-entropy classifier only ever sees base labels
    let contrast = config.contrast.clone();
    let trained = obtain_encoder(
        cx,
        &contrast,
        &base,
        &pipeline(config, config.augment.level)?,
        Some("train_loss"),
    )?;
    checkpoint(cx, &trained, &contrast, "checkpoint")?;
    let fs_cfg = FewShotConfig {
        seed: cx.seed,
        ..f.config.clone()
    };
    let out = few_shot_eval(&trained.frozen(), &novel, f.episodes, &fs_cfg)?;
    (cx.progress)(&format!(
        "  few-shot accuracy {} (lr {})",
        out.result, out.lr
    ));
    let (e, s) = (trained.epochs(), trained.steps());
    cx.metrics.push(e, s, "few_shot_accuracy", out.result.mean);
    cx.metrics.push(e, s, "few_shot_ci", out.result.half_width);
    cx.metrics.push(e, s, "few_shot_lr", out.lr);
    Ok(())
}

fn run_landmark(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let l = &config.landmark;
    let data = train_set(config)?;
    let trained = obtain_encoder(
        cx,
        &config.contrast,
        &data,
        &pipeline(config, config.augment.level)?,
        Some("train_loss"),
    )?;
    checkpoint(cx, &trained, &config.contrast, "checkpoint")?;
    let size = config.data.image_size;
    let (train_imgs, train_lm) = make_landmark_dataset(l.n_train, size, config.data.seed)?;
    let (test_imgs, test_lm) = make_landmark_dataset(l.n_test, size, config.data.test_seed)?;
    let lm_cfg = LandmarkConfig {
        seed: cx.seed,
        ..l.config.clone()
    };
    let model = train_landmark_head(
        &trained.encoder,
        &trained.params,
        &train_imgs,
        &train_lm,
        &lm_cfg,
    )?;
    let batches = l.n_train.div_ceil(lm_cfg.batch_size);
    for (e, loss) in model.losses.iter().enumerate() {
        cx.metrics
            .push(e + 1, (e + 1) * batches, "landmark_loss", *loss);
    }
    let preds = model.predict(&trained.encoder, &test_imgs)?;
    let err = mean_landmark_error(&preds, &test_lm)?;
    (cx.progress)(&format!("  landmark error {err:.4}"));
    cx.metrics.push(
        lm_cfg.epochs,
        lm_cfg.epochs * batches,
        "landmark_error",
        err,
    );
    Ok(())
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn find(trained: &[(Variant, Trained)], v: Variant) -> &Trained {
    &trained
        .iter()
        .find(|(u, _)| *u == v)
        .expect("every wanted variant is trained")
        .1
}

fn run_invert(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let inv = &config.invert;
    let data = train_set(config)?;
    let pipe = pipeline(config, config.augment.level)?;
    let mut trained: Vec<(Variant, Trained)> = Vec::new();
    let mut wanted = inv.encoders.clone();
    if let MetricEncoder::Pretrained(v) = inv.metric {
        wanted.push(v);
    }
    for v in wanted {
        if trained.iter().any(|(u, _)| *u == v) {
            continue;
        }
        let contrast = ContrastConfig {
            variant: v,
            ..config.contrast.clone()
        };
        let t = obtain_encoder(cx, &contrast, &data, &pipe, None)?;
        trained.push((v, t));
    }
    let random_metric;
    let metric = match inv.metric {
        MetricEncoder::Random => {
            let encoder = Encoder::new(encoder_config(config))?;
            // a stream no training run draws from
            let params = encoder.init_params(&mut stream_rng(cx.seed, u64::MAX - (1 << 32)));
            random_metric = (encoder, params);
            (&random_metric.0, random_metric.1.as_slice())
        }
        MetricEncoder::Pretrained(v) => {
            let t = find(&trained, v);
            (&t.encoder, t.params.as_slice())
        }
    };

    let pool = test_set(config)?.unwrap_or_else(|| data.clone());
    let n = inv.n_images.min(pool.len());
    let images: Vec<Image> = (0..n)
        .map(|i| pool.images[i * pool.len() / n].clone())
        .collect();
    let named: Vec<NamedEncoder<'_>> = inv
        .encoders
        .iter()
        .map(|v| {
            let t = find(&trained, *v);
            NamedEncoder {
                name: v.name(),
                encoder: &t.encoder,
                params: &t.params,
            }
        })
        .collect();
    let inv_cfg = InversionConfig {
        spec: config.reconstructor_spec()?,
        iterations: inv.iterations,
        lr: inv.lr,
        noise_low: inv.noise_low,
        noise_high: inv.noise_high,
        seed: cx.seed,
        keep_best: inv.keep_best,
        ..InversionConfig::default()
    };
    (cx.progress)(&format!(
        "  inverting {} images through {} encoders, {} iterations each",
        images.len(),
        named.len(),
        inv.iterations
    ));
    let report = reconstruction_report(&images, &named, metric, &inv_cfg)?;

    let rec_dir = cx.run_dir.join("reconstructions");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    for (i, img) in images.iter().enumerate() {
        let p = rec_dir.join(format!("{i:02}_original.png"));
        write_png(img, &p)?;
        cx.artifacts.push(p);
    }
    for (k, (row, img)) in report.rows.iter().zip(&report.reconstructions).enumerate() {
        let p = rec_dir.join(format!(
            "{:02}_{}.png",
            k / named.len(),
            file_stem(&row.encoder)
        ));
        write_png(img, &p)?;
        cx.artifacts.push(p);
    }
    let csv_path = cx.run_dir.join("perceptual.csv");
    report.write_csv(&csv_path)?;
    let means_path = cx.run_dir.join("perceptual_means.csv");
    report.write_means_csv(&means_path)?;
    cx.artifacts.extend([csv_path, means_path]);
    for (name, mean) in &report.means {
        (cx.progress)(&format!("  mean perceptual distance {name}: {mean:.6}"));
        cx.metrics.push(
            0,
            inv.iterations,
            format!("perceptual_distance@{name}"),
            *mean,
        );
    }
    for (name, t) in named
        .iter()
        .map(|n| n.name)
        .zip(inv.encoders.iter().map(|v| find(&trained, *v)))
    {
        let contrast = ContrastConfig {
            variant: Variant::parse(name).expect("variant names parse"),
            ..config.contrast.clone()
        };
        checkpoint(cx, t, &contrast, &format!("checkpoint_{name}"))?;
    }
    cx.perceptual = Some(report.rows);
    Ok(())
}

fn run_diagnose(cx: &mut Context<'_>) -> Result<()> {
    let g = cx
        .config
        .diagnose
        .as_ref()
        .expect("validated diagnose config");
    let dets = read_detections(&g.detections)?;
    let gts = read_ground_truth(&g.ground_truth)?;
    let sim = match &g.similarity {
        Some(p) => SimilarityMap::load(p)?,
        None => SimilarityMap::voc_default(),
    };
    let thresholds = Thresholds {
        weak_iou: g.weak_iou,
        correct_iou: g.correct_iou,
    };
    let dist = top_fp_distribution(&dets, &gts, &sim, thresholds)?;
    let path = cx.run_dir.join("fp_distribution.csv");
    write_distribution_csv(&path, &dist)?;
    cx.artifacts.push(path);
    for d in dist.values().filter(|d| !d.is_empty()) {
        for (name, v) in ["loc", "sim", "oth", "bg"].iter().zip(d.fractions()) {
            cx.metrics
                .push(0, 0, format!("fp_{name}@{}", d.category), v);
        }
    }
    (cx.progress)(&format!(
        "  {} categories with false positives",
        dist.values().filter(|d| !d.is_empty()).count()
    ));
    cx.fp = Some(dist);
    Ok(())
}

fn run_ablate_augmentations(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let data = train_set(config)?;
    let test = test_set(config)?.expect("validated probe config has a test split");
    for &level in &config.ablate.levels {
        let trained = obtain_encoder(cx, &config.contrast, &data, &pipeline(config, level)?, None)?;
        let acc = probe_accuracy(&trained, &data, &test, config)?;
        (cx.progress)(&format!("  level {level}: probe accuracy {acc:.4}"));
        cx.metrics.push(
            trained.epochs(),
            trained.steps(),
            format!("probe_accuracy@level{level}"),
            acc,
        );
    }
    Ok(())
}

fn run_ablate_tau_k(cx: &mut Context<'_>) -> Result<()> {
    let config = cx.config;
    let data = train_set(config)?;
    let test = test_set(config)?.expect("validated probe config has a test split");
    let pipe = pipeline(config, config.augment.level)?;
    for &tau in &config.ablate.taus {
        for &k in &config.ablate.queue_sizes {
            let contrast = ContrastConfig {
                tau,
                queue_capacity: k,
                ..config.contrast.clone()
            };
            let trained = obtain_encoder(cx, &contrast, &data, &pipe, None)?;
            let acc = probe_accuracy(&trained, &data, &test, config)?;
            (cx.progress)(&format!("  tau {tau}, K {k}: probe accuracy {acc:.4}"));
            cx.metrics.push(
                trained.epochs(),
                trained.steps(),
                format!("probe_accuracy@tau{tau}_k{k}"),
                acc,
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            kind,
            output_dir: PathBuf::from("out"),
            ..ExperimentConfig::default()
        };
        c.data.n_classes = 4;
        c.data.per_class = 4;
        c.data.image_size = 16;
        c.encoder.channels = vec![4, 8];
        c.encoder.strides = vec![1, 2];
        c.encoder.hidden_dim = 8;
        c.encoder.embed_dim = 8;
        c.contrast.epochs = 1;
        c.contrast.batch_size = 8;
        c.contrast.queue_capacity = 16;
        c.probe.epochs = 20;
        c
    }

    #[test]
    fn linear_probe_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let recs = run_config(&tiny(ExperimentKind::LinearProbe), dir.path(), &mut |_| {}).unwrap();
        let r = &recs[0];
        assert!(r.final_metrics.contains_key("probe_accuracy"));
        assert_eq!(r.series("train_loss").len(), 1);
        assert!(r.artifacts.iter().all(|p| p.exists()));
        assert_eq!(RunRecord::load(&r.run_dir).unwrap(), *r);
    }

    #[test]
    fn ablation_rows_per_setting() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(ExperimentKind::AblateTauK);
        c.ablate.taus = vec![0.1, 0.2];
        c.ablate.queue_sizes = vec![8, 16];
        let r = &run_config(&c, dir.path(), &mut |_| {}).unwrap()[0];
        assert_eq!(r.metrics.len(), 4);
        assert!(r.final_metrics.contains_key("probe_accuracy@tau0.2_k8"));
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(ExperimentKind::Pretrain);
        c.seeds.clear();
        assert!(matches!(
            run_config(&c, dir.path(), &mut |_| {}),
            Err(Error::Config(_))
        ));
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
