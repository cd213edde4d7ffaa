mod common;

use std::fs;

use common::{stderr, Toy};
use emdt_cli::evaluate::RunReport;

fn ok(o: &std::process::Output) {
    assert!(o.status.success(), "status {:?}\n{}", o.status, stderr(o));
}

fn read_report(toy: &Toy) -> (String, RunReport) {
    let text = fs::read_to_string(toy.run.join("evaluation/report.json")).unwrap();
    let report = serde_json::from_str(&text).unwrap();
    (text, report)
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let toy = Toy::new(400, 40);
    let o = toy.emdt(&["preprocess", "--data.path", "/no/such/creditcard.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/creditcard.csv"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_2() {
    let toy = Toy::new(400, 40);
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_emdt"))
        .args(["--config", "/no/such.toml", "preprocess"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    drop(toy);
}

#[test]
fn unknown_override_exits_2() {
    let toy = Toy::new(400, 40);
    let o = toy.emdt(&["preprocess", "--data.nonsense", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn strict_schema_check_is_a_data_error() {
    let toy = Toy::new(400, 40);
    let o = toy.emdt(&["preprocess", "--data.strict", "true", "--data.expected_rows", "284807"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn preprocess_is_repeatable_and_skips_when_current() {
    let toy = Toy::new(500, 50);
    ok(&toy.emdt(&["preprocess"]));
    let data = toy.run.join("data");
    let read = |n: &str| fs::read(data.join(n)).unwrap();
    let first: Vec<_> = ["split_train.txt", "split_validation.txt", "split_test.txt"]
        .iter()
        .map(|n| read(n))
        .collect();
    let total: usize = first
        .iter()
        .map(|b| String::from_utf8_lossy(b).lines().count())
        .sum();
    assert_eq!(total, 500);

    let marker = fs::metadata(data.join("train.csv")).unwrap().modified().unwrap();
    ok(&toy.emdt(&["preprocess"]));
    assert_eq!(fs::metadata(data.join("train.csv")).unwrap().modified().unwrap(), marker);

    ok(&toy.emdt(&["preprocess", "--force"]));
    for (n, bytes) in ["split_train.txt", "split_validation.txt", "split_test.txt"]
        .iter()
        .zip(&first)
    {
        assert_eq!(&read(n), bytes, "{n}");
    }
}

#[test]
fn stages_need_their_inputs() {
    let toy = Toy::new(400, 40);
    let o = toy.emdt(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("emdt cluster"), "{}", stderr(&o));
}

#[test]
fn pipeline_artifacts_and_determinism() {
    let a = Toy::new(600, 60);
    ok(&a.emdt(&["pipeline", "--canonical"]));
    let other = a.tmp.path().join("again");
    ok(&a.emdt(&["pipeline", "--canonical", "--output.dir", other.to_str().unwrap()]));

    // Two checkpoints for two clusters, one global model for the ablation.
    let models = a.run.join("models");
    assert!(models.join("clustered/cluster_1.ckpt").exists());
    assert!(models.join("clustered/cluster_2.ckpt").exists());
    assert!(!models.join("clustered/cluster_3.ckpt").exists());
    assert!(models.join("global/cluster_1.ckpt").exists());
    assert!(!models.join("global/cluster_2.ckpt").exists());
    let loss = fs::read_to_string(models.join("clustered/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3 * 2);

    // Synthetic file: one row per training fraud, all labelled fraud.
    let train = emdt_core::dataset::load_csv(&a.run.join("data/train.csv")).unwrap();
    let synth = emdt_core::dataset::load_csv(&a.run.join("synthetic/clustered.csv")).unwrap();
    assert_eq!(synth.len(), train.positives());
    assert!(synth.labels().iter().all(|&l| l == 1));

    let (text_a, report) = read_report(&a);
    let text_b = fs::read_to_string(other.join("evaluation/report.json")).unwrap();
    assert_eq!(text_a, text_b);
    assert!(report.stage_seconds.is_none());

    assert_eq!(report.arms.len(), 4);
    for arm in &report.arms {
        let s = &arm.summary;
        let f1: Vec<f64> = arm.runs.iter().map(|r| r.test.f1).collect();
        assert_eq!(s.f1.values, f1);
        let mean = f1.iter().sum::<f64>() / f1.len() as f64;
        assert!((s.f1.mean - mean).abs() <= 1e-12);
        if s.method != "original" {
            assert!(s.dcr.is_some() && s.correlation_similarity.is_some());
        }
    }
    for name in ["histograms_emdt.csv", "correlation_emdt.csv", "histograms_smote.csv"] {
        assert!(a.run.join("evaluation").join(name).exists(), "{name}");
    }
}

#[test]
fn timings_recorded_without_canonical_flag() {
    let toy = Toy::new(400, 40);
    ok(&toy.emdt(&["pipeline", "--evaluation.arms", "[\"original\", \"emdt\"]"]));
    let (_, report) = read_report(&toy);
    let secs = report.stage_seconds.expect("timings");
    for stage in ["preprocess", "cluster", "train", "generate", "evaluate"] {
        assert!(secs.contains_key(stage), "{stage}");
    }
}

#[test]
fn single_seed_has_zero_std() {
    let toy = Toy::new(400, 40);
    ok(&toy.emdt(&[
        "pipeline",
        "--canonical",
        "--evaluation.seeds",
        "1",
        "--evaluation.arms",
        "[\"original\", \"smote\"]",
    ]));
    let (_, report) = read_report(&toy);
    for arm in &report.arms {
        assert_eq!(arm.summary.f1.std, 0.0);
        assert_eq!(arm.summary.recall.std, 0.0);
    }
}

#[test]
fn ablation_trains_one_model() {
    let toy = Toy::new(400, 40);
    ok(&toy.emdt(&["pipeline", "--canonical", "--clustering.enabled", "false", "--evaluation.arms", "[\"emdt\"]"]));
    let models = toy.run.join("models");
    assert!(models.join("global/cluster_1.ckpt").exists());
    assert!(!models.join("global/cluster_2.ckpt").exists());
    assert!(!models.join("clustered").exists());
}

#[test]
fn zero_multiplier_writes_empty_synthetic_file() {
    let toy = Toy::new(400, 40);
    for stage in ["preprocess", "cluster", "train"] {
        ok(&toy.emdt(&[stage, "--evaluation.arms", "[\"emdt\"]"]));
    }
    ok(&toy.emdt(&["generate", "--augmentation.multiplier", "0", "--evaluation.arms", "[\"emdt\"]"]));
    let synth = emdt_core::dataset::load_csv(&toy.run.join("synthetic/clustered.csv")).unwrap();
    assert_eq!(synth.len(), 0);
}

#[test]
fn checkpoint_config_mismatch_is_a_usage_error() {
    let toy = Toy::new(400, 40);
    for stage in ["preprocess", "cluster", "train"] {
        ok(&toy.emdt(&[stage]));
    }
    let o = toy.emdt(&["generate", "--embedding.dim", "16"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("D = 8"), "{}", stderr(&o));
}

#[test]
fn degenerate_cluster_aborts_with_its_id() {
    let toy = Toy::new(400, 40);
    ok(&toy.emdt(&["preprocess"]));
    // As many clusters as training frauds leaves singleton clusters.
    let train = emdt_core::dataset::load_csv(&toy.run.join("data/train.csv")).unwrap();
    let k = train.positives().to_string();
    ok(&toy.emdt(&["cluster", "--clustering.clusters", &k]));
    let o = toy.emdt(&["train", "--clustering.clusters", &k]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("cluster "), "{}", stderr(&o));
}

#[test]
fn missing_models_skip_the_arm() {
    let toy = Toy::new(400, 40);
    ok(&toy.emdt(&["preprocess"]));
    ok(&toy.emdt(&["evaluate", "--canonical", "--evaluation.arms", "[\"original\", \"emdt\"]"]));
    let (_, report) = read_report(&toy);
    assert_eq!(report.arms.len(), 1);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].reason.contains("emdt train"), "{}", report.skipped[0].reason);
}

#[test]
fn sweep_writes_one_row_per_cell_and_seed() {
    let toy = Toy::new(400, 40);
    for stage in ["preprocess", "cluster"] {
        ok(&toy.emdt(&[stage]));
    }
    ok(&toy.emdt(&["sweep", "--sweep.feature_scales", "[1.0, 500.0]"]));
    let text = fs::read_to_string(toy.run.join("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "factor,value,seed,validation_f1,test_f1");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines.iter().any(|l| l.starts_with("feature_scale,500,")));
}

#[test]
fn print_config_round_trips() {
    let toy = Toy::new(400, 40);
    let o = toy.emdt(&["print-config", "--embedding.dim", "16"]);
    ok(&o);
    let cfg = emdt_cli::config::PipelineConfig::from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg.embedding.dim, 16);
}
