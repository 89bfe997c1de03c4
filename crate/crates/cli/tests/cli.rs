use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn patchmorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchmorph"))
        .args(args)
        .env("PATCHMORPH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = patchmorph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    patchmorph(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"version = 1
preset = "desk"
seed = 5
n_scales = 2
iters_per_new_scale = 3
final_iters = 2
pairs_per_iter = 1
patches_per_pair = 2
affine_widths = [2, 4, 4, 4]
dense_widths = [2, 4, 4]
checkpoint_every = 4
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self) -> PathBuf {
        let data = self.path("data");
        ok(&["synth", "--size", "24", "--n", "2", "--labels", "4", "--seed", "3", "--out-dir", s(&data)]);
        data
    }

    fn train(&self, data: &Path, out: &str) -> PathBuf {
        let cfg = self.path("small.toml");
        std::fs::write(&cfg, SMALL).unwrap();
        let out = self.path(out);
        ok(&["train", "--config", s(&cfg), "--data-dir", s(data), "--out-dir", s(&out), "--log-every", "0"]);
        out
    }
}

#[test]
fn synth_writes_cases_and_listing() {
    let ws = Workspace::new();
    let data = ws.synth();
    for i in 0..2 {
        for part in ["fixed", "moving", "fixed_labels", "moving_labels", "true_ddf"] {
            assert!(data.join(format!("case{i:03}_{part}.nii")).is_file(), "{part}");
        }
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["pairs"].as_array().unwrap().len(), 2);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 3);
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    for d in [&a, &b] {
        ok(&["synth", "--size", "16", "--labels", "3", "--seed", "8", "--out-dir", s(d)]);
    }
    for part in ["fixed", "moving", "moving_labels", "true_ddf"] {
        let name = format!("case000_{part}.nii");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["register", "--fixed", "x.nii"]), 2);
    assert_eq!(code(&["synth", "--n", "0", "--out-dir", s(&ws.path("z"))]), 2);

    let missing = ws.path("missing.nii");
    assert_eq!(
        code(&["warp", "--ddf", s(&missing), "--input", s(&missing), "--out", s(&ws.path("o.nii"))]),
        3
    );
    let listing = ws.path("pairs.json");
    std::fs::write(&listing, r#"{"pairs": []}"#).unwrap();
    assert_eq!(code(&["evaluate", "--pairs", s(&listing)]), 3);

    let cfg = ws.path("bad.toml");
    std::fs::write(&cfg, "version = 1\nn_scales = 0\n").unwrap();
    let data = ws.synth();
    assert_eq!(
        code(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out-dir", s(&ws.path("t"))]),
        2
    );
    assert_eq!(code(&["train", "--data-dir", s(&ws.path("nowhere")), "--out-dir", s(&ws.path("t"))]), 3);
}

#[test]
fn warping_through_the_true_field_restores_labels() {
    let ws = Workspace::new();
    let data = ws.synth();
    let out = ws.path("warped_labels.nii");
    ok(&[
        "warp",
        "--ddf",
        s(&data.join("case000_true_ddf.nii")),
        "--input",
        s(&data.join("case000_moving_labels.nii")),
        "--labels",
        "--reference",
        s(&data.join("case000_fixed.nii")),
        "--out",
        s(&out),
    ]);
    let listing = ws.path("pairs.json");
    let pairs = serde_json::json!({"pairs": [{
        "fixed": data.join("case000_fixed.nii"),
        "moving": data.join("case000_moving.nii"),
        "fixed_labels": data.join("case000_fixed_labels.nii"),
        "moving_labels": data.join("case000_moving_labels.nii"),
        "ddf": data.join("case000_true_ddf.nii"),
    }]});
    std::fs::write(&listing, pairs.to_string()).unwrap();
    let report = ws.path("report.jsonl");
    ok(&["evaluate", "--pairs", s(&listing), "--out", s(&report)]);
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().lines().next().unwrap()).unwrap();
    let before = line["dice_before"].as_f64().unwrap();
    let after = line["dice"]["avg"].as_f64().unwrap();
    assert!(after > before, "{before} -> {after}");
    assert!(after > 0.9, "{after}");
    assert!(out.is_file());
}

#[test]
fn train_register_evaluate_round() {
    let ws = Workspace::new();
    let data = ws.synth();
    let run = ws.train(&data, "run");
    for f in ["config.toml", "train_log.jsonl", "checkpoint_000004.pmck", "model.pmck", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    // The written config reproduces the run.
    let again = ws.path("again");
    ok(&[
        "train",
        "--config",
        s(&run.join("config.toml")),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&again),
        "--log-every",
        "0",
    ]);
    assert_eq!(
        std::fs::read(run.join("model.pmck")).unwrap(),
        std::fs::read(again.join("model.pmck")).unwrap()
    );

    // Resuming from the midway checkpoint ends in the same model.
    let resumed = ws.path("resumed");
    ok(&[
        "train",
        "--resume",
        s(&run.join("checkpoint_000004.pmck")),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&resumed),
        "--log-every",
        "0",
    ]);
    assert_eq!(
        std::fs::read(run.join("model.pmck")).unwrap(),
        std::fs::read(resumed.join("model.pmck")).unwrap()
    );
    assert_eq!(std::fs::read_to_string(resumed.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let model = run.join("model.pmck");
    let fixed = data.join("case001_fixed.nii");
    let moving = data.join("case001_moving.nii");
    let mut fields = Vec::new();
    for name in ["a.nii", "b.nii"] {
        let out = ws.path(name);
        ok(&[
            "register",
            "--model",
            s(&model),
            "--fixed",
            s(&fixed),
            "--moving",
            s(&moving),
            "--seed",
            "2",
            "--out",
            s(&out),
        ]);
        assert!(ws.path(&format!("{name}.manifest.json")).is_file());
        fields.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(fields[0], fields[1]);

    let report = ws.path("eval.jsonl");
    ok(&["evaluate", "--pairs", s(&data.join("manifest.json")), "--model", s(&model), "--out", s(&report)]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        let frac = l["frac_nonpositive_jacobian"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&frac));
    }
}
