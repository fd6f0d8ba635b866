use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_advblur");

const TINY: &str = r#"
seed = 7
out = "runs"
data_dir = "data"

[synth]
size = 16

[synth.counts]
train = 6
val = 2
test = 6

[train]
epochs = 2
batch_size = 4

[attack]
batch = 8

[eval]
batch = 8
replicates = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Workspace { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.path())
            .env_remove("ADVBLUR_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Last stdout line is the run directory.
    fn run_dir(&self, stdout: &str) -> PathBuf {
        self.path().join(stdout.lines().last().unwrap().trim())
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_is_a_validation_error_naming_the_path() {
    let ws = Workspace::new();
    let out = ws.run(&["synth", "--config", "nowhere.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere.toml"));
}

#[test]
fn malformed_config_and_bad_flags_are_validation_errors() {
    let ws = Workspace::new();
    fs::write(ws.path().join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(ws.run(&["synth", "--config", "bad.toml"]).status.code(), Some(1));
    fs::write(ws.path().join("typo.toml"), "[train]\nepoks = 3\n").unwrap();
    assert_eq!(ws.run(&["synth", "--config", "typo.toml"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ws.run(&["train", "--config", "tiny.toml", "--regime", "nope"]).status.code(), Some(1));
    assert_eq!(ws.run(&["reproduce", "--only", "nine"]).status.code(), Some(1));
}

#[test]
fn synth_twice_gives_identical_trees() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.toml", "--out", "a", "-q"]);
    ws.ok(&["synth", "--config", "tiny.toml", "--out", "b", "-q"]);
    let (a, b) = (tree(&ws.path().join("a")), tree(&ws.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    // regenerating in place is allowed, a different spec is not
    ws.ok(&["synth", "--config", "tiny.toml", "--out", "a", "-q"]);
    assert_eq!(ws.run(&["synth", "--config", "tiny.toml", "--out", "a", "--seed", "8"]).status.code(), Some(1));
}

#[test]
fn seed_flag_beats_environment() {
    let ws = Workspace::new();
    let run = |args: &[&str], env: &str| {
        Command::new(BIN).args(args).current_dir(ws.path()).env("ADVBLUR_SEED", env).output().unwrap()
    };
    assert!(run(&["synth", "--config", "tiny.toml", "--out", "e", "-q"], "21").status.success());
    assert!(run(&["synth", "--config", "tiny.toml", "--out", "f", "--seed", "22", "-q"], "21").status.success());
    let spec = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(ws.path().join(d).join("synth_spec.json")).unwrap()).unwrap()
    };
    assert_eq!(spec("e")["seed"], 21);
    assert_eq!(spec("f")["seed"], 22);
}

#[test]
fn missing_dataset_tells_the_user_to_synth() {
    let ws = Workspace::new();
    for args in [
        &["reproduce", "--config", "tiny.toml", "--only", "kernel-order", "-q"][..],
        &["train", "--config", "tiny.toml", "-q"][..],
    ] {
        let out = ws.run(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(stderr(&out).contains("advblur synth"), "{}", stderr(&out));
    }
}

#[test]
fn grad_check_subset_runs_without_data() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["reproduce", "--config", "tiny.toml", "--only", "grad-checks", "-q"]);
    assert!(stdout.contains("PASS 2 grad-checks"), "{stdout}");
    assert!(!stdout.contains(" 1 blur"));
    let dir = ws.run_dir(&stdout);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("acceptance.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);

    let stdout = ws.ok(&["grad-check", "--config", "tiny.toml", "-q"]);
    assert!(stdout.contains("PASS 1 blur") && stdout.contains("PASS 2 grad-checks"));
}

#[test]
fn training_pipeline_end_to_end() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.toml", "-q"]);

    let twogen = ws.run_dir(&ws.ok(&["train", "--config", "tiny.toml", "--regime", "bat_twogen", "-q"]));
    for f in ["detector.ckpt.json", "generator_real.ckpt.json", "generator_fake.ckpt.json", "train_log.jsonl", "run.json", "config.toml"] {
        assert!(twogen.join(f).is_file(), "missing {f}");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(twogen.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["regime"], "bat_twogen");
    assert_eq!(fs::read_to_string(twogen.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let normal = ws.run_dir(&ws.ok(&["train", "--config", "tiny.toml", "--regime", "normal", "-q"]));
    assert!(!normal.join("generator_real.ckpt.json").exists());
    assert_ne!(normal, twogen);

    // attack: the sweep lands in one report and eps = 0 keeps clean accuracy
    let ckpt = twogen.join("detector.ckpt.json");
    let attack = ws.run_dir(&ws.ok(&["attack", "--config", "tiny.toml", "--checkpoint", ckpt.to_str().unwrap(), "-q"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(attack.join("attack_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    let ks: Vec<u64> = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["attack"].as_str().unwrap().starts_with("blur_k"))
        .map(|e| e["k"].as_u64().unwrap())
        .collect();
    assert_eq!(ks, [3, 5, 9]);
    assert!(attack.join("adv/fgsm/manifest.jsonl").is_file());

    fs::write(
        ws.path().join("zero.toml"),
        format!("{TINY}\n[attack.fgsm]\nepsilon = 0.0\n[attack.pgd]\nepsilon = 0.0\nstep_size = 0.0\n[attack.spatial]\nepsilon = 0.0\n"),
    )
    .unwrap();
    let zero = ws.run_dir(&ws.ok(&["attack", "--config", "zero.toml", "--checkpoint", ckpt.to_str().unwrap(), "-q"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(zero.join("attack_report.json")).unwrap()).unwrap();
    let clean = report["clean_accuracy"].as_f64().unwrap();
    for e in report["entries"].as_array().unwrap() {
        if ["fgsm", "pgd", "spatial"].contains(&e["attack"].as_str().unwrap()) {
            assert_eq!(e["accuracy"].as_f64().unwrap(), clean, "{e}");
        }
    }

    // eval with two detectors adds transfer matrices
    let eval = ws.run_dir(&ws.ok(&[
        "eval",
        "--config",
        "tiny.toml",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--checkpoint",
        normal.join("detector.ckpt.json").to_str().unwrap(),
        "-q",
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["transfer"].as_array().unwrap().len(), 2);
    assert_eq!(report["extra"]["seed"], 7);
    assert!(eval.join("report.txt").is_file());

    // a generator checkpoint is not a detector
    let out = ws.run(&["attack", "--config", "tiny.toml", "--checkpoint", twogen.join("generator_real.ckpt.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.toml", "-q"]);
    let base = ["--config", "tiny.toml", "--regime", "bat_twogen", "--no-timestamps", "-q"];
    let full = ws.run_dir(&ws.ok(&[&["train", "--epochs", "3"][..], &base[..]].concat()));
    let part = ws.run_dir(&ws.ok(&[&["train", "--epochs", "1"][..], &base[..]].concat()));
    ws.ok(&["train", "--resume", part.to_str().unwrap(), "--epochs", "3", "--no-timestamps", "-q"]);
    for f in ["detector.ckpt.json", "generator_real.ckpt.json", "generator_fake.ckpt.json", "train_log.jsonl"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f} differs");
    }
    // resuming under a changed config is refused
    let out = ws.run(&["train", "--resume", part.to_str().unwrap(), "--config", "tiny.toml", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failing_acceptance_exits_with_three() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.toml", "-q"]);
    // two epochs on a handful of images cannot show a generalization gain
    let out = ws.run(&["reproduce", "--config", "tiny.toml", "--only", "generalization", "-q"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("5 generalization"), "{stdout}");
    let code = out.status.code();
    if stdout.contains("FAIL 5") {
        assert_eq!(code, Some(3));
    } else {
        assert_eq!(code, Some(0));
    }
}
