//! Training, checkpointing and evaluation end to end on small synthetic tasks.

use std::fs;
use std::path::Path;

use eproto::data::{load_dataset, write_synthetic, ClassRecord, SigmaMode, SyntheticTaskSpec};
use eproto::eval::mean_and_ci95;
use eproto::experiment::{
    evaluate_novel, init_model, run_eval, run_train, ExperimentConfig, StageSelection,
};
use eproto::trainer::Ablation;
use eproto::Error;

fn dataset(root: &Path) -> std::path::PathBuf {
    let spec = SyntheticTaskSpec {
        n_classes: 16,
        dim: 8,
        samples_per_class: 12,
        box_half_width: 2.0,
        sigma_lo: 0.3,
        sigma_hi: 0.8,
        sigma_mode: SigmaMode::Smooth,
        n_validation: 3,
        n_novel: 5,
        seed: 4,
    };
    write_synthetic(&spec, &root.join("data")).unwrap();
    root.join("data").join("manifest.json")
}

fn config(dataset: &Path, out: &Path) -> ExperimentConfig {
    serde_json::from_value(serde_json::json!({
        "dataset": dataset,
        "output_dir": out,
        "seed": 3,
        "model": {"extractor": "mlp", "mlp_hidden": [24], "mlp_out": 12},
        "train": {
            "stage1": {"n_way": 5, "k_shot": 2, "n_query": 3, "episodes": 40},
            "stage2": {"n_query": 3, "episodes": 20, "max_base_samples": 100},
            "validation": {"every": 10, "episodes": 5},
            "checkpoint_every": 10
        },
        "eval": {"n_way": 3, "k_shot": 1, "n_query": 5, "episodes": 40}
    }))
    .unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let straight = config(&data, &tmp.path().join("straight"));
    let broken = config(&data, &tmp.path().join("broken"));

    run_train(&straight, StageSelection::Both, false, None).unwrap();
    let partial = run_train(&broken, StageSelection::Both, false, Some(25)).unwrap();
    assert!(!partial.completed);
    assert!(!broken.output_dir.join("model.ckpt").exists());
    let resumed = run_train(&broken, StageSelection::Both, true, None).unwrap();
    assert!(resumed.completed);

    let a = fs::read(straight.output_dir.join("model.ckpt")).unwrap();
    let b = fs::read(broken.output_dir.join("model.ckpt")).unwrap();
    assert!(a == b, "resumed weights differ");
    let ra = run_eval(&straight, None, None, None).unwrap();
    let rb = run_eval(&broken, None, None, None).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn stage_two_alone_needs_stage_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&dataset(tmp.path()), &tmp.path().join("run"));
    let err = run_train(&cfg, StageSelection::Two, false, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("--stage 1"), "{err}");

    run_train(&cfg, StageSelection::One, false, None).unwrap();
    let out = run_train(&cfg, StageSelection::Two, false, None).unwrap();
    assert!(out.completed && out.stage1.is_none());
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&dataset(tmp.path()), &tmp.path().join("run"));
    assert!(matches!(
        run_eval(&cfg, None, None, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("nope.json"), &tmp.path().join("run"));
    let err = run_train(&cfg, StageSelection::Both, false, None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn untrained_model_is_near_chance_and_report_reaggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(&dataset(tmp.path()), &tmp.path().join("run"));
    cfg.train.ablation = Ablation::PN;
    cfg.eval.n_way = 5;
    cfg.eval.episodes = 300;
    let cfg = cfg.resolve().unwrap();
    let data = load_dataset(&cfg.dataset).unwrap();
    let model = init_model(&cfg.model, &data, cfg.seed).unwrap();
    let report = evaluate_novel(&model, &data, &cfg.train, &cfg.eval).unwrap();

    // a random extractor on well separated clusters still beats chance, but
    // scrambled labels cannot
    assert!(report.mean_acc >= 0.2 - 3.0 * report.ci95);
    assert_eq!(report.per_episode.len(), 300);
    let (mean, ci) = mean_and_ci95(&report.per_episode);
    assert_eq!((mean, ci), (report.mean_acc, report.ci95));

    // sample j of class i comes from class i + j, so labels carry no signal
    let mut scrambled = data.clone();
    let novel = &data.novel.classes;
    let n = novel.len();
    scrambled.novel.classes = (0..n)
        .map(|i| {
            let samples = (0..novel[i].len())
                .map(|j| novel[(i + j) % n].sample(j).to_vec())
                .collect();
            ClassRecord::new(i, novel[i].name.clone(), samples, None)
        })
        .collect();
    let r = evaluate_novel(&model, &scrambled, &cfg.train, &cfg.eval).unwrap();
    assert!(
        (r.mean_acc - 0.2).abs() < 0.1,
        "scrambled support gave {}",
        r.mean_acc
    );
}

#[test]
fn more_shots_do_not_hurt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&dataset(tmp.path()), &tmp.path().join("run"));
    run_train(&cfg, StageSelection::Both, false, None).unwrap();
    let one = run_eval(&cfg, None, Some(200), None).unwrap();
    let mut five = cfg.clone();
    five.eval.k_shot = 5;
    let five = run_eval(&five, None, Some(200), None).unwrap();
    assert!(
        five.mean_acc + 1e-9 >= one.mean_acc,
        "1-shot {} vs 5-shot {}",
        one.mean_acc,
        five.mean_acc
    );
}

#[test]
fn same_seed_same_report_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&dataset(tmp.path()), &tmp.path().join("run"));
    run_train(&cfg, StageSelection::Both, false, None).unwrap();
    run_eval(&cfg, None, None, Some(11)).unwrap();
    let a = fs::read(cfg.output_dir.join("report.json")).unwrap();
    run_eval(&cfg, None, None, Some(11)).unwrap();
    let b = fs::read(cfg.output_dir.join("report.json")).unwrap();
    assert_eq!(a, b);
    run_eval(&cfg, None, None, Some(12)).unwrap();
    let c = fs::read(cfg.output_dir.join("report.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn partial_sections_take_defaults_and_unknown_keys_fail() {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "dataset": "d.json",
        "output_dir": "out",
        "train": {"stage1": {"episodes": 7}, "stage2": {"n_query": 2}, "ablation": {"use_t": false}}
    }))
    .unwrap();
    let defaults = eproto::trainer::TrainConfig::default();
    assert_eq!(cfg.train.stage1.episodes, 7);
    assert_eq!(cfg.train.stage1.n_way, defaults.stage1.n_way);
    assert_eq!(
        cfg.train.stage2.max_base_samples,
        defaults.stage2.max_base_samples
    );
    assert_eq!(cfg.train.ablation.label(), "PN+V+R");
    assert_eq!(cfg.train.validation, defaults.validation);

    let bad = serde_json::from_value::<ExperimentConfig>(serde_json::json!({
        "dataset": "d.json",
        "output_dir": "out",
        "train": {"stage1": {"episode": 7}}
    }));
    assert!(bad.is_err());
}
