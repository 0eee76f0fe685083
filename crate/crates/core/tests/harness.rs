use std::path::{Path, PathBuf};

use attribute_mix::attrnet::AttrNet;
use attribute_mix::dataset::{load_labeled, Split};
use attribute_mix::engine::Tensor;
use attribute_mix::harness::cli;
use attribute_mix::harness::config::{DataSection, ExperimentConfig, MiningSection, Mode, ModelSection, TrainSection};
use attribute_mix::harness::evaluate::evaluate;
use attribute_mix::harness::train::train;
use attribute_mix::synthbench::{generate, GeneratorConfig};

fn dataset(dir: &Path) -> PathBuf {
    let g = GeneratorConfig {
        side: 32,
        train_per_class: 2,
        test_per_class: 1,
        unlabeled_per_class: 2,
        noise_fraction: 0.2,
        ..Default::default()
    };
    generate(&g, dir).unwrap();
    dir.join("manifest.jsonl")
}

fn tiny(manifest: &Path, mode: Mode, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        seed: 3,
        data: DataSection { manifest: manifest.to_path_buf(), ..Default::default() },
        model: ModelSection { input_side: 32, channels: vec![4, 4], ..Default::default() },
        train: TrainSection { epochs, batch_size: 8, mix_epoch_multiplier: 1.0, ..Default::default() },
        mining: MiningSection { auto: true, first_round_epochs: 1, round_epochs: 1, batch_size: 8, ..Default::default() },
        ..Default::default()
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// `epoch,train_loss,test_accuracy` of every metrics row.
fn learning_columns(p: impl AsRef<Path>) -> Vec<String> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn identical_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    for mode in [Mode::Baseline, Mode::AttributeMix, Mode::Cutmix] {
        let cfg = tiny(&m, mode, 2);
        let a = tmp.path().join(format!("{}-a", mode.name()));
        let b = tmp.path().join(format!("{}-b", mode.name()));
        train(&cfg, &a, false).unwrap();
        train(&cfg, &b, false).unwrap();
        assert_eq!(read(a.join("metrics.csv")), read(b.join("metrics.csv")), "{}", mode.name());
        assert_eq!(read(a.join("checkpoints/last.ckpt")), read(b.join("checkpoints/last.ckpt")));
    }
}

#[test]
fn resume_continues_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    let full = tmp.path().join("full");
    train(&tiny(&m, Mode::Baseline, 4), &full, false).unwrap();
    let cut = tmp.path().join("cut");
    train(&tiny(&m, Mode::Baseline, 2), &cut, false).unwrap();
    train(&tiny(&m, Mode::Baseline, 4), &cut, true).unwrap();
    assert_eq!(read(full.join("metrics.csv")), read(cut.join("metrics.csv")));
    assert_eq!(read(full.join("checkpoints/last.ckpt")), read(cut.join("checkpoints/last.ckpt")));
}

#[test]
fn lambda_one_matches_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    let base = tmp.path().join("base");
    train(&tiny(&m, Mode::Baseline, 3), &base, false).unwrap();
    let mut cfg = tiny(&m, Mode::AttributeMix, 3);
    cfg.mix.force_lambda = Some(1.0);
    let mixed = tmp.path().join("mixed");
    train(&cfg, &mixed, false).unwrap();
    assert_eq!(learning_columns(base.join("metrics.csv")), learning_columns(mixed.join("metrics.csv")));
    assert_eq!(read(base.join("checkpoints/last.ckpt")), read(mixed.join("checkpoints/last.ckpt")));
}

#[test]
fn evaluate_agrees_with_logit_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let cfg = tiny(&m, Mode::Baseline, 2);
    train(&cfg, &run, false).unwrap();
    let out = tmp.path().join("eval");
    let report = evaluate(&run.join("checkpoints/last.ckpt"), &m, Split::Test, 0.875, Some(3)).unwrap();
    report.write(&out).unwrap();

    let k = 3;
    let text = String::from_utf8(read(out.join("logits.csv"))).unwrap();
    let (mut correct, mut n) = (0, 0);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let class: usize = f[1].parse().unwrap();
        let z: Vec<f64> = f[3].split(' ').map(|v| v.parse().unwrap()).collect();
        let scores: Vec<f64> = z.chunks(k).map(|c| c.iter().sum()).collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        correct += usize::from(best == class);
        n += 1;
    }
    assert_eq!(n, 8);
    assert!((report.accuracy - correct as f64 / n as f64).abs() < 1e-12);
    assert!(evaluate(&run.join("checkpoints/last.ckpt"), &m, Split::Test, 0.875, Some(2)).is_err());
}

#[test]
fn constant_model_scores_one_over_c() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    let cfg = tiny(&m, Mode::Baseline, 1);
    let mut net = AttrNet::new(cfg.model.to_config(8), 0).unwrap();
    let zeros = net.named_params().into_iter().map(|(n, t)| (n, Tensor::zeros(t.shape()))).collect();
    net.set_params(zeros).unwrap();
    let ckpt = tmp.path().join("zero.ckpt");
    net.save(&ckpt).unwrap();
    let report = evaluate(&ckpt, &m, Split::Test, 1.0, None).unwrap();
    assert!((report.accuracy - 1.0 / 8.0).abs() < 1e-12);
    assert_eq!(load_labeled(&m, Split::Test).unwrap().len(), 8);
}

fn run_cli(args: &[&str]) -> attribute_mix::Result<()> {
    let mut full = vec!["attrmix"];
    full.extend_from_slice(args);
    cli::run(full)
}

#[test]
fn cli_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |p: &str| tmp.path().join(p).to_string_lossy().into_owned();
    run_cli(&[
        "generate", "--out", &t("data"), "--set", "side=32", "--set", "train_per_class=2", "--set", "test_per_class=1",
        "--set", "unlabeled_per_class=3", "--set", "noise_fraction=0.25",
    ])
    .unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "mode = \"attribute_mix\"\nseed = 1\n[data]\nmanifest = \"data/manifest.jsonl\"\nmasks = \"masks\"\n\
         [model]\ninput_side = 32\nchannels = [4, 4]\n\
         [train]\nepochs = 1\nbatch_size = 8\nmix_epoch_multiplier = 2.0\n\
         [mining]\nfirst_round_epochs = 1\nround_epochs = 1\n",
    )
    .unwrap();
    let c = cfg.to_string_lossy().into_owned();
    run_cli(&["mine", "--config", &c, "--out", &t("masks")]).unwrap();
    assert!(tmp.path().join("masks/index.json").exists());
    run_cli(&["augment", "--config", &c, "--masks", &t("masks"), "--out", &t("aug"), "--count", "6"]).unwrap();
    assert!(tmp.path().join("aug/augment.jsonl").exists());
    run_cli(&["train", "--config", &c, "--run-dir", &t("run")]).unwrap();
    let metrics = String::from_utf8(read(tmp.path().join("run/metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    let ckpt = t("run/checkpoints/last.ckpt");
    run_cli(&["evaluate", "--checkpoint", &ckpt, "--manifest", &t("data/manifest.jsonl"), "--out", &t("eval")]).unwrap();
    assert!(tmp.path().join("eval/per_class.csv").exists());
    run_cli(&["pseudo-label", "--checkpoint", &ckpt, "--manifest", &t("data/manifest.jsonl"), "--out", &t("pseudo")]).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&read(tmp.path().join("pseudo/summary.json"))).unwrap();
    assert_eq!(summary["pool_size"], 32);
    assert!(tmp.path().join("pseudo/entropy_histogram.csv").exists());
    let lines = String::from_utf8(read(tmp.path().join("pseudo/pseudo_labels.jsonl"))).unwrap();
    assert_eq!(lines.lines().count(), 16);

    let err = run_cli(&["train", "--config", &c, "--set", "train.epochz=3", "--run-dir", &t("bad")]).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(run_cli(&["evaluate", "--checkpoint", &t("missing.ckpt"), "--manifest", &t("data/manifest.jsonl")]).is_err());
}

#[test]
fn sweep_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"));
    let cfg = tiny(&m, Mode::Mixup, 1);
    let out = tmp.path().join("sweep");
    let (rows, summary) =
        attribute_mix::harness::sweep::sweep(&cfg, "alpha".parse().unwrap(), &["0.5".into(), "2".into()], &[0, 1], &out).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(summary.len(), 2);
    assert!(out.join("sweep.csv").exists() && out.join("summary.csv").exists());
    assert!(out.join("alpha=0.5/seed1/metrics.csv").exists());
}

#[test]
fn baseline_converges_on_default_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&GeneratorConfig { test_per_class: 20, ..Default::default() }, &data).unwrap();
    let m = data.join("manifest.jsonl");
    let cfg = ExperimentConfig {
        data: DataSection { manifest: m.clone(), ..Default::default() },
        ..Default::default()
    };
    assert_eq!(cfg.total_epochs(), 40);
    let run = tmp.path().join("run");
    let summary = train(&cfg, &run, false).unwrap();
    assert!(summary.final_accuracy > 0.9, "test accuracy {}", summary.final_accuracy);
    let ckpt = run.join("checkpoints/last.ckpt");
    let test = evaluate(&ckpt, &m, Split::Test, 0.875, None).unwrap();
    let train_split = evaluate(&ckpt, &m, Split::Train, 0.875, None).unwrap();
    assert!((test.accuracy - summary.final_accuracy).abs() < 1e-12);
    assert!(train_split.accuracy >= test.accuracy, "train {} < test {}", train_split.accuracy, test.accuracy);
}
