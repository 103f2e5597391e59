use std::fs;

use kdmia::attacks::Method;
use kdmia::corpus::{Holdout, SynthConfig};
use kdmia::model::{load_checkpoint, save_checkpoint, ModelConfig};
use kdmia::par::Exec;
use kdmia::pipeline::{
    run_all, stage_distill, stage_prepare, stage_report, stage_teacher, ExperimentConfig, Layout, PipelineError,
    Summary, Variant,
};
use kdmia::training::TrainConfig;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        synth: SynthConfig {
            members: 10,
            nonmembers: 14,
            ..SynthConfig::default()
        },
        holdout: Holdout {
            prefix_pool: 2,
            reference_pool: 3,
        },
        model: ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            intermediate: 24,
            max_seq: 40,
            ..ModelConfig::default()
        },
        teacher: TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
        variants: vec![Variant::None, Variant::Nonvulnerable, Variant::All],
        seed: 11,
        ..ExperimentConfig::default()
    };
    cfg.distill.train = cfg.teacher.clone();
    cfg.attacks.folds = 2;
    cfg.attacks.k_grid = vec![0.25, 1.0];
    cfg.attacks.prefix_grid = vec![1, 2];
    cfg
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let a = run_all(&cfg, &Layout::new(dir.path().join("par")), Exec::Parallel).unwrap();
    let b = run_all(&cfg, &Layout::new(dir.path().join("seq")), Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let read = |d: &str| fs::read(dir.path().join(d).join("summary.json")).unwrap();
    assert_eq!(read("par"), read("seq"));
    assert_eq!(Summary::load(&dir.path().join("par/summary.json")).unwrap(), a);
    for name in ["teacher", "student-none", "student-all"] {
        let file = |d: &str| fs::read(dir.path().join(d).join("attacks").join(name).join("metrics.json")).unwrap();
        assert_eq!(file("par"), file("seq"), "{name}");
    }
}

#[test]
fn summary_records_every_seed_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let s = run_all(&cfg, &Layout::new(dir.path()), Exec::default()).unwrap();
    assert_eq!(s.config_hash, cfg.hash());
    assert_eq!(s.master_seed, 11);
    for label in ["corpus", "teacher/init", "student-all/train", "cv"] {
        assert!(s.seeds.contains_key(label), "{label}");
    }
    assert_eq!(s.report.models.len(), 4);
    assert!(s.report.check("data-selection").is_some());

    let other = ExperimentConfig { seed: 12, ..cfg };
    let t = run_all(&other, &Layout::new(dir.path().join("other")), Exec::default()).unwrap();
    assert_ne!(s.input_hash, t.input_hash);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = small();
    stage_prepare(&cfg, &layout).unwrap();
    let teacher = stage_teacher(&cfg, &layout, Exec::default()).unwrap();
    let loaded = load_checkpoint(&layout.checkpoint("teacher")).unwrap();
    assert_eq!(loaded.config(), teacher.config());
    for (a, b) in loaded.params().iter().zip(teacher.params()) {
        let bits = |t: &kdmia::numeric::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(layout.checkpoint("teacher")).unwrap());
}

#[test]
fn nonvulnerable_needs_a_partition() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = small();
    stage_prepare(&cfg, &layout).unwrap();
    stage_teacher(&cfg, &layout, Exec::default()).unwrap();
    let err = stage_distill(&cfg, &layout, Variant::Nonvulnerable, Exec::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { stage: "partition", .. }), "{err}");
    assert!(err.is_validation());
    stage_distill(&cfg, &layout, Variant::None, Exec::default()).unwrap();
}

#[test]
fn report_needs_results() {
    let dir = tempfile::tempdir().unwrap();
    let err = stage_report(&Layout::new(dir.path())).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn config_requires_variants() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"seed": 3}"#).unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("variants"));

    fs::write(&path, r#"{"variants": []}"#).unwrap();
    let cfg = ExperimentConfig::load(&path);
    assert!(cfg.is_err() || cfg.unwrap().validate().is_err());
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let absent = ExperimentConfig {
        corpus: Some(dir.path().join("absent.jsonl")),
        ..small()
    };
    assert!(absent.validate().unwrap_err().is_validation());

    fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    let cfg = ExperimentConfig {
        corpus: Some(dir.path().join("bad.jsonl")),
        ..small()
    };
    match run_all(&cfg, &Layout::new(dir.path().join("r")), Exec::default()).unwrap_err() {
        PipelineError::Stage { stage, .. } => assert_eq!(stage, "prepare-data"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn restricted_methods_write_only_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.attacks.methods = vec![Method::Loss, Method::Zlib];
    cfg.variants = vec![Variant::None];
    run_all(&cfg, &Layout::new(dir.path()), Exec::default()).unwrap();
    let mut files: Vec<String> = fs::read_dir(dir.path().join("attacks/teacher"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "loss_calibration.json",
            "loss_scores.csv",
            "metrics.csv",
            "metrics.json",
            "zlib_calibration.json",
            "zlib_scores.csv"
        ]
    );
    assert!(!dir.path().join("models/reference").exists());
}
