//! Runs several variant configs over a shared seed list and ranks them by
//! their primary metric with 95% confidence intervals.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::plots::bar_chart_svg;
use super::run::{run_config, RunRecord};
use crate::error::{Error, Result};
use crate::eval::{confidence_interval, EvalResult};

/// Metric a comparison ranks by, and whether larger is better.
pub fn primary_metric(kind: ExperimentKind) -> Option<(&'static str, bool)> {
    match kind {
        ExperimentKind::LinearProbe => Some(("probe_accuracy", true)),
        ExperimentKind::FewShot => Some(("few_shot_accuracy", true)),
        ExperimentKind::Landmark => Some(("landmark_error", false)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub name: String,
    pub variant: String,
    pub result: EvalResult,
    /// Per-seed values, in seed order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub higher_is_better: bool,
    pub seeds: Vec<u64>,
    /// Best first.
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<RunRecord>,
}

const REFERENCE_NOTE: &str =
    "Reference only: at full scale (ImageNet, 200 epochs, linear readout) \
MoCo-v2 reaches 67.5% and Exemplar-v2 68.9% top-1. Desk-scale numbers are not comparable.";

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,name,variant,mean,half_width,n\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.rank, r.name, r.variant, r.result.mean, r.result.half_width, r.result.n
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "| rank | name | variant | {} (mean ± 95% CI) |\n|---|---|---|---|\n",
            self.metric
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} ± {:.4} |",
                r.rank, r.name, r.variant, r.result.mean, r.result.half_width
            );
        }
        let _ = write!(
            s,
            "\nSeeds: {}. {} is {} better.\n",
            seeds.join(", "),
            self.metric,
            if self.higher_is_better {
                "higher"
            } else {
                "lower"
            }
        );
        if self.metric == "probe_accuracy" {
            let _ = writeln!(s, "\n{REFERENCE_NOTE}");
        }
        s
    }

    /// Writes `comparison.csv`, `comparison.md` and `comparison.svg`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bars: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .map(|r| (r.name.clone(), r.result.mean, r.result.half_width))
            .collect();
        let files = [
            ("comparison.csv", self.to_csv()),
            ("comparison.md", self.to_markdown()),
            (
                "comparison.svg",
                bar_chart_svg("Variant comparison", &self.metric, &bars),
            ),
        ];
        let mut out = Vec::new();
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Rejects configs whose training or evaluation budgets differ; only the
/// contrastive settings (variant, temperature, queue, momentum, optimizer)
/// may vary.
pub fn check_budgets(configs: &[ExperimentConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    for c in &configs[1..] {
        let mismatch = |what: &str| {
            Err(Error::Config(format!(
                "{} and {} differ in {what}; compared variants need equal budgets",
                first.name, c.name
            )))
        };
        if c.kind != first.kind {
            return mismatch("experiment kind");
        }
        if c.pretrain != first.pretrain {
            return mismatch("whether they pretrain");
        }
        if c.data != first.data {
            return mismatch("data");
        }
        if c.augment != first.augment {
            return mismatch("augmentation");
        }
        if c.encoder != first.encoder {
            return mismatch("encoder architecture");
        }
        if c.contrast.epochs != first.contrast.epochs
            || c.contrast.batch_size != first.contrast.batch_size
        {
            return mismatch("training epochs or batch size");
        }
        if c.probe != first.probe || c.few_shot != first.few_shot || c.landmark != first.landmark {
            return mismatch("evaluation settings");
        }
    }
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("compared configs need distinct names".into()));
    }
    Ok(())
}

/// Runs each config once per seed under `root` and ranks the variants.
pub fn compare_variants(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    root: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<Comparison> {
    check_budgets(configs)?;
    let (metric, higher) = primary_metric(configs[0].kind).ok_or_else(|| {
        Error::Config(format!(
            "{} experiments have no primary metric to compare",
            configs[0].kind.name()
        ))
    })?;
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct.len() != seeds.len() {
        return Err(Error::Config(
            "comparison needs at least two distinct seeds".into(),
        ));
    }

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for c in configs {
        let c = ExperimentConfig {
            seeds: seeds.to_vec(),
            ..c.clone()
        };
        let recs = run_config(&c, root, progress)?;
        let values: Vec<f64> = recs
            .iter()
            .map(|r| {
                r.final_metrics.get(metric).copied().ok_or_else(|| {
                    Error::NonFiniteMetric(format!("{metric} missing from {}", r.name))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(ComparisonRow {
            rank: 0,
            name: c.name.clone(),
            variant: c.contrast.variant.name().to_string(),
            result: confidence_interval(&values)?,
            values,
        });
        records.extend(recs);
    }
    rows.sort_by(|a, b| {
        let ord = a.result.mean.total_cmp(&b.result.mean);
        if higher {
            ord.reverse()
        } else {
            ord
        }
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Comparison {
        metric: metric.to_string(),
        higher_is_better: higher,
        seeds: seeds.to_vec(),
        rows,
        records,
    })
}
