use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
mode = "whitebox"
targets = ["mini"]
seed = 5

[[profiles]]
name = "mini"
cover_shape = [16, 16, 1]
watermark = { kind = "bits", n = 4 }
has_discriminator = false

[data]
train_count = 32
test_count = 8
harvest_count = 16
attack_count = 4

[target_train]
epochs = 2
batch_size = 8

[attack]
epsilon = 0.05
max_iter = 40
"#;

fn dlove(args: &[&str], dir: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dlove"))
        .args(args)
        .env("DLOVE_WORKERS", "2")
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn report_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let (code, _, err) = dlove(
        &["report", "--config", &cfg, "--out", "a", "-q"],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = dlove(
        &["report", "--config", &cfg, "--out", "b", "-q"],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    let a = std::fs::read(dir.path().join("a/report.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.csv")).unwrap();
    assert_eq!(a, b);
    let csv = String::from_utf8(a.clone()).unwrap();
    assert!(csv.starts_with(
        "Technique,Epoch,Image,PertLimit,PSNR,SSIM,LPIPS_proxy,MSE,ASR,RemovalRate\n"
    ));
    assert_eq!(csv.lines().count(), 2);

    std::fs::remove_file(dir.path().join("a/report.csv")).unwrap();
    let (code, _, err) = dlove(&["report", "--config", &cfg, "--out", "a"], dir.path());
    assert_eq!(code, 0);
    assert!(
        err.contains("reusing attack/mini") && !err.contains("running"),
        "{err}"
    );
    assert_eq!(std::fs::read(dir.path().join("a/report.csv")).unwrap(), a);

    let (code, _, _) = dlove(
        &[
            "report", "--config", &cfg, "--out", "c", "--seed", "6", "-q",
        ],
        dir.path(),
    );
    assert_eq!(code, 0);
    let manifest = std::fs::read_to_string(dir.path().join("c/manifest.json")).unwrap();
    let first = std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
    let hash = |m: &str| {
        m.lines()
            .find(|l| l.contains("config_hash"))
            .unwrap()
            .to_string()
    };
    assert_ne!(hash(&manifest), hash(&first));
}

#[test]
fn individual_stages_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let (code, out, err) = dlove(
        &["train-target", "--config", &cfg, "--out", "r"],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("train-target finished"));
    let (code, out, _) = dlove(
        &["evaluate", "--config", &cfg, "--out", "r", "-q"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert!(out.contains("mini") && out.contains("target"));
    assert!(dir.path().join("r/evaluation.json").exists());
    let (code, out, err) = dlove(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            "r",
            "--axis",
            "epsilon",
            "--values",
            "0.001,0.05",
            "-q",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("optimum mini"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("r/sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "mode = \"whitebox\"\ntargets = [\"nope\"]\n",
    );
    assert_eq!(
        dlove(&["attack", "--config", &bad, "--out", "x"], dir.path()).0,
        1
    );
    assert_eq!(
        dlove(
            &["attack", "--config", "missing.toml", "--out", "x"],
            dir.path()
        )
        .0,
        1
    );
    assert_eq!(dlove(&["attack"], dir.path()).0, 1);
    let cfg = write(dir.path(), "tiny.toml", TINY);
    assert_eq!(dlove(&["attack", "--config", &cfg], dir.path()).0, 1);
    assert_eq!(
        dlove(
            &["attack", "--config", &cfg, "--out", "x", "--scale", "0"],
            dir.path()
        )
        .0,
        1
    );

    let broken = TINY.replace(
        "[data]\n",
        "[data]\nsource = { type = \"directory\", path = \"no/such/dir\" }\n",
    );
    let cfg = write(dir.path(), "broken.toml", &broken);
    let (code, _, err) = dlove(
        &["attack", "--config", &cfg, "--out", "y", "-q"],
        dir.path(),
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("train-target/mini"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_dlove"))
        .args(["attack", "--config", &cfg, "--out", "z"])
        .env("DLOVE_WORKERS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(dlove(&["--help"], dir.path()).0, 0);
}
