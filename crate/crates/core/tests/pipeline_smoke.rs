use std::path::Path;
use std::process::Command;

use poregan::config::PipelineConfig;
use poregan::pipeline::{Pipeline, Stage};

fn tiny(root: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::toy();
    c.paths.corpus = root.join("corpus");
    c.paths.manifests = root.join("manifests");
    c.paths.checkpoints = root.join("checkpoints");
    c.paths.reports = root.join("reports");
    c.synth.per_depth_count = 8;
    c.data.target_per_class = 6;
    c.data.min_class_size = 1;
    c.data.n_classes = 3;
    c.data.stride = Some(48);
    c.segmentation.epochs = 2;
    c.segmentation.crops_per_image = 2;
    c.gan.epochs = 1;
    c.gan.arch = poregan::cgan::Arch::ModelB;
    c.petro.n_candidates = 100;
    c.petro.pool_size = 50;
    c.petro.real_subimages = 10;
    c.petro.probes = 4;
    c.petro.morph_samples = 3;
    c
}

fn report_numbers(root: &Path) -> Vec<String> {
    ["reports/porosity_control_modelB.csv", "reports/petro_scores.csv", "reports/representativeness.csv"]
        .iter()
        .map(|f| {
            // the hash covers the output paths, which differ between runs
            let text = std::fs::read_to_string(root.join(f)).unwrap();
            text.lines().filter(|l| !l.starts_with("# config_hash")).collect::<Vec<_>>().join("\n")
        })
        .collect()
}

#[test]
fn full_toy_pipeline_emits_reports_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(a.path())).unwrap();
    let outcomes = p.run_all().unwrap();
    assert_eq!(outcomes.len(), Stage::ORDER.len());

    let reports = a.path().join("reports");
    for f in [
        "rev.json",
        "rev.svg",
        "seg_metrics.json",
        "seg_eval.json",
        "training_log_modelB.csv",
        "loss_modelB.svg",
        "porosity_tracking_modelB.svg",
        "porosity_control_modelB.json",
        "porosity_control_modelB.svg",
        "morphology.json",
        "morphology.csv",
        "petro_scores.json",
        "selection.json",
        "representative_d0.png",
        "representative_d1.png",
        "representativeness.json",
        "representativeness.csv",
        "representativeness.svg",
        "error_hist_d0.svg",
        "run_log.jsonl",
    ] {
        assert!(reports.join(f).exists(), "missing {f}");
    }
    let hash = p.config.hash();
    for f in ["porosity_control_modelB.json", "representativeness.csv", "rev.svg", "training_log_modelB.csv"] {
        assert!(std::fs::read_to_string(reports.join(f)).unwrap().contains(&hash), "{f} lacks the config hash");
    }
    let log = std::fs::read_to_string(reports.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), Stage::ORDER.len());

    // stages are re-runnable and identical config + seed reproduces the numbers
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(b.path())).unwrap().run_all().unwrap();
    assert_eq!(report_numbers(a.path()), report_numbers(b.path()));
}

#[test]
fn cli_reports_missing_generator_with_exit_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_poregan"))
        .args(["--toy", "--work"])
        .arg(dir.path())
        .args(["run", "evaluate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gan-train"));
}

#[test]
fn cli_rejects_odd_batch_with_exit_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[gan]\nbatch_size = 15\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_poregan")).arg("--config").arg(&cfg).arg("config").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    let ok = Command::new(env!("CARGO_BIN_EXE_poregan")).arg("config").output().unwrap();
    assert!(String::from_utf8_lossy(&ok.stdout).contains("160 images per porosity class"));
}
