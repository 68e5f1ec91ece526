//! End-to-end runs of the experiment harness and its CLI on tiny configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use contrastkit::contrast::{load_checkpoint, Variant};
use contrastkit::diagnose::{
    write_detections, write_ground_truth, BoundingBox, Detection, GroundTruth,
};
use contrastkit::harness::{
    compare_variants, emit_plots, run_config, ExperimentConfig, ExperimentKind, RunRecord,
};

const TINY: &str = "\
[data]
n_classes = 10
per_class = 4
image_size = 16

[encoder]
channels = 4, 8
strides = 1, 2
hidden_dim = 8
embed_dim = 8

[contrast]
epochs = 2
batch_size = 8
queue_capacity = 16

[probe]
epochs = 30
";

fn tiny(kind: ExperimentKind, name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(TINY, Path::new("tiny.ini")).unwrap();
    c.kind = kind;
    c.name = name.into();
    c.output_dir = PathBuf::from(format!("runs/{name}"));
    c
}

fn quiet() -> impl FnMut(&str) {
    |_| {}
}

fn svgs(dir: &Path, prefix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.starts_with(prefix) && n.ends_with(".svg")
        })
        .count()
}

#[test]
fn pretrain_two_epochs_writes_two_rows_and_a_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let rec = &run_config(
        &tiny(ExperimentKind::Pretrain, "pre"),
        root.path(),
        &mut quiet(),
    )
    .unwrap()[0];
    let csv = fs::read_to_string(rec.run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,metric,value");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,5,train_loss,"));
    let (state, cfg) = load_checkpoint(&rec.run_dir.join("checkpoint")).unwrap();
    assert_eq!(state.epoch, 2);
    assert_eq!(cfg.epochs, 2);
    assert!(rec.run_dir.join("training_curves.svg").exists());
    assert!(rec.artifacts.iter().all(|p| p.exists()));
}

#[test]
fn same_config_and_seed_reproduce_metrics() {
    let c = tiny(ExperimentKind::LinearProbe, "repro");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = &run_config(&c, a.path(), &mut quiet()).unwrap()[0];
    let rb = &run_config(&c, b.path(), &mut quiet()).unwrap()[0];
    assert_eq!(
        fs::read(ra.run_dir.join("metrics.csv")).unwrap(),
        fs::read(rb.run_dir.join("metrics.csv")).unwrap()
    );
    assert_eq!(ra.metrics, rb.metrics);
}

#[test]
fn seeds_fan_out_into_separate_runs() {
    let mut c = tiny(ExperimentKind::Pretrain, "fan");
    c.seeds = vec![3, 4];
    c.contrast.epochs = 1;
    let root = tempfile::tempdir().unwrap();
    let recs = run_config(&c, root.path(), &mut quiet()).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(root.path().join("runs/fan/seed_3/metrics.csv").exists());
    assert!(root.path().join("runs/fan/seed_4/metrics.csv").exists());
    assert_ne!(recs[0].metrics, recs[1].metrics);
}

#[test]
fn tau_ablation_emits_one_probe_row_per_temperature() {
    let mut c = tiny(ExperimentKind::AblateTauK, "taus");
    c.contrast.epochs = 1;
    c.ablate.taus = vec![0.07, 0.1, 0.2];
    c.ablate.queue_sizes = vec![16];
    let root = tempfile::tempdir().unwrap();
    let rec = &run_config(&c, root.path(), &mut quiet()).unwrap()[0];
    let probes: Vec<_> = rec
        .metrics
        .iter()
        .filter(|m| m.metric.starts_with("probe_accuracy@"))
        .collect();
    assert_eq!(probes.len(), 3);
    assert!(rec.run_dir.join("ablation.svg").exists());
}

#[test]
fn augmentation_ablation_covers_each_level() {
    let mut c = tiny(ExperimentKind::AblateAugmentations, "levels");
    c.contrast.epochs = 1;
    c.ablate.levels = vec![1, 3, 5];
    let root = tempfile::tempdir().unwrap();
    let rec = &run_config(&c, root.path(), &mut quiet()).unwrap()[0];
    for l in [1, 3, 5] {
        assert!(rec
            .final_metrics
            .contains_key(&format!("probe_accuracy@level{l}")));
    }
}

#[test]
fn few_shot_and_landmark_runs_report_their_metrics() {
    let root = tempfile::tempdir().unwrap();
    let mut fs_cfg = tiny(ExperimentKind::FewShot, "fewshot");
    fs_cfg.few_shot.episodes = 10;
    fs_cfg.few_shot.config.n_query = 3;
    let rec = &run_config(&fs_cfg, root.path(), &mut quiet()).unwrap()[0];
    let acc = rec.final_metrics["few_shot_accuracy"];
    assert!((0.0..=1.0).contains(&acc));

    let mut lm = tiny(ExperimentKind::Landmark, "landmark");
    lm.landmark.n_train = 16;
    lm.landmark.n_test = 8;
    lm.landmark.config.epochs = 3;
    lm.landmark.config.batch_size = 8;
    lm.landmark.config.hidden = 4;
    let rec = &run_config(&lm, root.path(), &mut quiet()).unwrap()[0];
    assert_eq!(rec.series("landmark_loss").len(), 3);
    assert!(rec.final_metrics["landmark_error"] >= 0.0);
}

#[test]
fn inversion_run_yields_one_scatter() {
    let mut c = tiny(ExperimentKind::Invert, "invert");
    c.pretrain = false;
    c.invert.levels = 2;
    c.invert.iterations = 4;
    c.invert.n_images = 2;
    c.invert.encoders = vec![Variant::Moco, Variant::Exemplar];
    let root = tempfile::tempdir().unwrap();
    let rec = &run_config(&c, root.path(), &mut quiet()).unwrap()[0];
    assert_eq!(rec.perceptual.as_ref().unwrap().len(), 4);
    assert_eq!(svgs(&rec.run_dir, "perceptual_scatter"), 1);
    assert!(rec.run_dir.join("reconstructions/00_original.png").exists());
    let csv = fs::read_to_string(rec.run_dir.join("perceptual.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
    BoundingBox::new(a, b, c, d).unwrap()
}

#[test]
fn diagnose_config_yields_one_pie_per_category() {
    let dir = tempfile::tempdir().unwrap();
    let gts = vec![
        GroundTruth {
            image_id: "a".into(),
            category: 0,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        },
        GroundTruth {
            image_id: "a".into(),
            category: 1,
            bbox: bx(20.0, 20.0, 30.0, 30.0),
        },
        GroundTruth {
            image_id: "b".into(),
            category: 2,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        },
    ];
    let det = |img: &str, category, score, bbox| Detection {
        image_id: img.into(),
        category,
        score,
        bbox,
    };
    let dets = vec![
        det("a", 0, 0.9, bx(5.0, 5.0, 15.0, 15.0)),
        det("a", 1, 0.8, bx(0.0, 0.0, 10.0, 10.0)),
        det("b", 2, 0.7, bx(0.0, 0.0, 10.0, 10.0)),
    ];
    write_detections(&dir.path().join("dets.csv"), &dets).unwrap();
    write_ground_truth(&dir.path().join("gt.csv"), &gts).unwrap();
    let config = dir.path().join("diag.ini");
    fs::write(
        &config,
        "[experiment]\nname = diag\nkind = diagnose\noutput_dir = out\n\n\
         [diagnose]\ndetections = dets.csv\nground_truth = gt.csv\n",
    )
    .unwrap();
    let c = ExperimentConfig::load(&config).unwrap();
    let rec = &run_config(&c, dir.path(), &mut quiet()).unwrap()[0];
    let dist = rec.fp_distributions.as_ref().unwrap();
    let with_fp = dist.values().filter(|d| !d.is_empty()).count();
    assert_eq!(with_fp, 2);
    assert_eq!(svgs(&rec.run_dir, "fp_pie_"), with_fp);
    assert_eq!(rec.final_metrics["fp_loc@0"], 1.0);
}

#[test]
fn identical_variants_under_two_names_tie() {
    let a = tiny(ExperimentKind::LinearProbe, "first");
    let b = ExperimentConfig {
        name: "second".into(),
        output_dir: "runs/second".into(),
        ..a.clone()
    };
    let root = tempfile::tempdir().unwrap();
    let cmp = compare_variants(&[a, b], &[1, 2], root.path(), &mut quiet()).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert_eq!(cmp.rows[0].values, cmp.rows[1].values);
    assert_eq!(cmp.rows[0].result, cmp.rows[1].result);
}

#[test]
fn three_variants_three_seeds() {
    let variant = |name: &str, v: Variant, tau: f64| {
        let mut c = tiny(ExperimentKind::LinearProbe, name);
        c.contrast.epochs = 1;
        c.contrast.variant = v;
        c.contrast.tau = tau;
        c
    };
    let configs = [
        variant("moco", Variant::Moco, 0.2),
        variant("exemplar", Variant::Exemplar, 0.1),
        variant("supervised", Variant::CrossEntropy, 0.1),
    ];
    let root = tempfile::tempdir().unwrap();
    let cmp = compare_variants(&configs, &[1, 2, 3], root.path(), &mut quiet()).unwrap();
    assert_eq!(cmp.records.len(), 9);
    assert_eq!(cmp.rows.len(), 3);
    let ranks: Vec<usize> = cmp.rows.iter().map(|r| r.rank).collect();
    assert_eq!(ranks, vec![1, 2, 3]);
    assert!(cmp
        .rows
        .windows(2)
        .all(|w| w[0].result.mean >= w[1].result.mean));
    let out = cmp.write(&root.path().join("cmp")).unwrap();
    assert_eq!(out.len(), 3);
    assert!(cmp.to_markdown().contains("67.5"));
}

#[test]
fn plots_need_records() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_plots(&[], dir.path()).is_err());
}

fn cli(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_contrastkit"))
        .args(args)
        .env("CONTRASTKIT_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes_and_plot_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let good = root.join("good.ini");
    fs::write(
        &good,
        format!("[experiment]\nname = cli\nkind = pretrain\noutput_dir = runs/cli\n\n{TINY}"),
    )
    .unwrap();
    let bad = root.join("bad.ini");
    fs::write(
        &bad,
        "[experiment]\nkind = pretrain\n\n[contrast]\nbatch_size = lots\n",
    )
    .unwrap();
    let nan = root.join("nan.ini");
    fs::write(
        &nan,
        format!(
            "[experiment]\nname = nan\nkind = pretrain\noutput_dir = runs/nan\n\n{}",
            TINY.replace("queue_capacity = 16", "queue_capacity = 16\nlr = 1e300")
        ),
    )
    .unwrap();

    assert_eq!(
        cli(&["validate", good.to_str().unwrap()], root)
            .status
            .code(),
        Some(0)
    );
    let out = cli(&["validate", bad.to_str().unwrap()], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ini:5"));

    assert_eq!(
        cli(&["run", good.to_str().unwrap()], root).status.code(),
        Some(0)
    );
    let run_dir = root.join("runs/cli/seed_1");
    fs::remove_file(run_dir.join("training_curves.svg")).unwrap();
    assert_eq!(
        cli(&["plot", run_dir.to_str().unwrap()], root)
            .status
            .code(),
        Some(0)
    );
    assert!(run_dir.join("training_curves.svg").exists());
    let rec = RunRecord::load(&run_dir).unwrap();
    assert_eq!(rec.series("train_loss").len(), 2);

    assert_eq!(
        cli(&["run", nan.to_str().unwrap()], root).status.code(),
        Some(3)
    );
}
