use dlove::harness::{
    read_results, report, select_optimum, ExperimentConfig, Mode, ReportFormat, RunManifest,
    Runner, StageKind, SweepAxis,
};

fn tiny(mode: &str, targets: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
mode = "{mode}"
targets = [{targets}]
seed = 9

[[profiles]]
name = "mini"
cover_shape = [16, 16, 1]
watermark = {{ kind = "bits", n = 4 }}
has_discriminator = false

[[profiles]]
name = "mini-rgb"
cover_shape = [12, 12, 3]
watermark = {{ kind = "bits", n = 12 }}
has_discriminator = false

[data]
train_count = 32
test_count = 8
harvest_count = 24
attack_count = 4

[target_train]
epochs = 1
batch_size = 8

[surrogate_train]
epochs = 1
batch_size = 8

[finetune]
epochs = 2
num_pairs = 16
batch_size = 8

[common]
io_shape = [16, 16, 3]
wm_bits = 10
pairs_per_member = 12

[attack]
epsilon = 0.05
max_iter = 30
"#
    ))
    .unwrap()
}

#[test]
fn second_run_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("whitebox", "\"mini\"");
    let first = Runner::new(&cfg, dir.path())
        .unwrap()
        .run(StageKind::Attack)
        .unwrap();
    assert!(first.stages.iter().all(|s| !s.skipped));
    let csv = std::fs::read(dir.path().join("report.csv")).unwrap();

    let again = Runner::new(&cfg, dir.path())
        .unwrap()
        .run(StageKind::Attack)
        .unwrap();
    assert!(again.stages.iter().all(|s| s.skipped));
    assert_eq!(std::fs::read(dir.path().join("report.csv")).unwrap(), csv);

    let mut wider = cfg.clone();
    wider.attack.epsilon = 0.1;
    let m = Runner::new(&wider, dir.path())
        .unwrap()
        .run(StageKind::Attack)
        .unwrap();
    let skipped: Vec<(&str, bool)> = m
        .stages
        .iter()
        .map(|s| (s.stage.as_str(), s.skipped))
        .collect();
    assert_eq!(
        skipped,
        vec![("train-target/mini", true), ("attack/mini", false)]
    );

    for r in read_results(&m.rows[0].results).unwrap() {
        assert!(r.linf <= r.epsilon_used);
    }
}

#[test]
fn report_regenerates_identically_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = Runner::new(&tiny("whitebox", "\"mini\""), dir.path())
        .unwrap()
        .run(StageKind::Attack)
        .unwrap();
    for f in ReportFormat::ALL {
        let path = dir.path().join(format!("report.{}", f.extension()));
        let before = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(report(&loaded, f, dir.path()).unwrap(), path);
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }
    std::fs::remove_file(&m.rows[0].results).unwrap();
    assert!(report(&m, ReportFormat::Csv, dir.path()).is_err());
}

#[test]
fn empty_manifest_cannot_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = Runner::new(&tiny("whitebox", "\"mini\""), dir.path())
        .unwrap()
        .run(StageKind::TrainTarget)
        .unwrap();
    assert!(m.rows.is_empty());
    assert!(!dir.path().join("report.csv").exists());
    assert!(report(&m, ReportFormat::Csv, dir.path()).is_err());
}

#[test]
fn blackbox_per_target_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("blackbox-per-target", "\"mini\"");
    let mut runner = Runner::new(&cfg, dir.path()).unwrap();
    let m = runner.run(StageKind::Attack).unwrap();
    let labels: Vec<&str> = m.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(
        labels,
        [
            "train-target/mini",
            "train-surrogate/mini",
            "harvest/mini",
            "finetune/mini",
            "attack/mini"
        ]
    );
    let rows = m.load_rows().unwrap();
    assert_eq!(rows[0].epoch, Some(2));
    assert_eq!(rows[0].images, Some(16));
    let results = read_results(&m.rows[0].results).unwrap();
    assert_eq!(results.len(), 4);
    assert!(results
        .iter()
        .all(|r| r.surrogate_success.is_some() && r.linf <= 0.05));
    let evals = runner.evaluate().unwrap();
    let roles: Vec<&str> = evals.iter().map(|e| e.role.as_str()).collect();
    assert_eq!(roles, ["target", "surrogate", "finetuned-surrogate"]);
}

#[test]
fn common_mode_pools_members() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("blackbox-common", "\"mini\", \"mini-rgb\"");
    assert_eq!(cfg.mode, Mode::BlackboxCommon);
    let m = Runner::new(&cfg, dir.path())
        .unwrap()
        .run(StageKind::Attack)
        .unwrap();
    assert_eq!(m.rows.len(), 2);
    let ft = m
        .stages
        .iter()
        .find(|s| s.stage == "finetune/common")
        .unwrap();
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ft.dir.join("report.json")).unwrap()).unwrap();
    let by = rep["heldout_by_member"].as_object().unwrap();
    assert!(by.keys().all(|k| k == "mini" || k == "mini-rgb"));
    for row in &m.rows {
        for r in read_results(&row.results).unwrap() {
            assert!(r.linf <= r.epsilon_used);
        }
    }
}

#[test]
fn sweep_shares_training_and_picks_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("whitebox", "\"mini\"");
    let m = Runner::new(&cfg, dir.path())
        .unwrap()
        .sweep(SweepAxis::Epsilon, &[0.0005, 0.05])
        .unwrap();
    assert_eq!(m.rows.len(), 2);
    assert_eq!(
        m.stages
            .iter()
            .filter(|s| s.stage.starts_with("train-target"))
            .count(),
        1
    );
    let sweep = m.sweep.as_ref().unwrap();
    assert!(sweep.optimum.contains_key("mini"));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    assert_eq!(
        select_optimum(&[(20.0, 50.0), (40.0, 91.0), (60.0, 92.5), (80.0, 93.0)]),
        Some(40.0)
    );
    assert_eq!(select_optimum(&[]), None);
}

#[test]
fn whitebox_mode_rejects_finetune_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("whitebox", "\"mini\"");
    let mut r = Runner::new(&cfg, dir.path()).unwrap();
    assert!(r.sweep(SweepAxis::FinetuneEpochs, &[10.0]).is_err());
    assert!(r.sweep(SweepAxis::Epsilon, &[]).is_err());
}

#[test]
fn shipped_configs_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{e}"));
            c.scaled().validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 5, "only {n} configs found");
}
