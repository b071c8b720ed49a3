use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn verdrift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_verdrift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn help_lists_every_stage() {
    let o = verdrift(&["--help"]);
    assert!(o.status.success());
    let t = text(&o);
    for stage in ["synth", "extract", "imagize", "pair", "train", "eval", "detect", "report", "all"] {
        assert!(t.contains(stage), "{stage} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(verdrift(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(verdrift(&["--out", out, "--runs", "0", "report"]).status.code(), Some(2));
    assert_eq!(verdrift(&["--out", out, "train", "--run", "3"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_three_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for stage in ["extract", "imagize", "train", "eval", "detect", "report"] {
        let o = verdrift(&["--out", out, stage]);
        assert_eq!(o.status.code(), Some(3), "{stage}: {}", text(&o));
        assert!(text(&o).contains(out), "{stage} does not name the missing path");
    }
}

fn small_config(dir: &Path) -> String {
    let lab = verdrift::synth::default_lab();
    let mut small = lab.clone();
    small.devices.retain(|d| ["energenie", "tapo", "hs110"].contains(&d.profile.device_id.as_str()));
    let lab_path = dir.join("small-lab.json");
    fs::write(&lab_path, small.to_json()).unwrap();
    let cfg = serde_json::json!({
        "seed": 5,
        "lab": lab_path,
        "train": { "max_epochs": 2 }
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn stages_run_in_order_and_refuse_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in [&["synth"][..], &["extract"], &["imagize"], &["pair"], &["train"], &["eval"], &["detect", "--run", "1"], &["report"]] {
        let mut args = vec!["--config", cfg.as_str(), "--out", out];
        args.extend_from_slice(stage);
        let o = verdrift(&args);
        assert!(o.status.success(), "{stage:?}: {}", text(&o));
    }
    let report = fs::read_to_string(Path::new(out).join("report.txt")).unwrap();
    assert!(report.contains("Stable versions") && report.contains("Average"));
    assert!(Path::new(out).join("runs/r01/model.bin").exists());

    let o = verdrift(&["--config", &cfg, "--out", out, "--seed", "6", "pair"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}
