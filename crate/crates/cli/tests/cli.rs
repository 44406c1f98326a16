use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmud(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tmud"));
    cmd.current_dir(dir).args(args).env_remove("TMUD_SEED").env_remove("TMUD_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "size": 32,
  "synth": {"n": 300},
  "train": {"architecture": {"kind": "mlp", "hidden": 8}, "config": {"max_epochs": 15}},
  "filtrate": {"labels": ["friendliness"]},
  "ratings": {"panel": {"evaluators": 2}}
}"#;

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tmud(dir.path(), &["--help"], &[]).status.code(), Some(0));
    assert_eq!(tmud(dir.path(), &["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(tmud(dir.path(), &["pipeline", "--resume-from", "nowhere"], &[]).status.code(), Some(1));
    let o = tmud(dir.path(), &["synth", "--print-config"], &[("TMUD_THREADS", "many")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("TMUD_THREADS"));
    fs::write(dir.path().join("bad.json"), r#"{"seed": "x"}"#).unwrap();
    assert_eq!(tmud(dir.path(), &["--config", "bad.json", "synth"], &[]).status.code(), Some(1));
    assert_eq!(tmud(dir.path(), &["--config", "absent.json", "synth"], &[]).status.code(), Some(1));
}

#[test]
fn flags_override_env_which_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"seed": 1, "threads": 2}"#).unwrap();
    let cfg = |args: &[&str], env: &[(&str, &str)]| -> serde_json::Value {
        let o = tmud(dir.path(), args, env);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let base = ["--config", "c.json", "--print-config", "report"];
    assert_eq!(cfg(&base, &[])["seed"], 1);
    assert_eq!(cfg(&base, &[("TMUD_SEED", "5"), ("TMUD_THREADS", "4")])["seed"], 5);
    assert_eq!(cfg(&base, &[("TMUD_THREADS", "4")])["threads"], 4);
    let mut flagged = base.to_vec();
    flagged.extend(["--seed", "9", "--threads", "3"]);
    let v = cfg(&flagged, &[("TMUD_SEED", "5"), ("TMUD_THREADS", "4")]);
    assert_eq!((v["seed"].as_u64(), v["threads"].as_u64()), (Some(9), Some(3)));
}

#[test]
fn synth_writes_a_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("rules.json"),
        r#"[{"id": "wide", "form": "linear-threshold", "terms": [{"param": "mouth-width"}]}]"#,
    )
    .unwrap();
    let args = ["synth", "--n", "40", "--size", "32", "--seed", "7", "--labels", "rules.json", "--out", "data/"];
    let o = tmud(dir.path(), &args, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read(dir.path().join("data/manifests/synth.json")).unwrap();
    let dataset: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("data/dataset.json")).unwrap()).unwrap();
    assert_eq!(dataset["faces"].as_array().unwrap().len(), 40);
    assert_eq!(dataset["faces"][0]["labels"].as_object().unwrap().len(), 1);

    assert!(tmud(dir.path(), &args, &[]).status.success());
    assert_eq!(fs::read(dir.path().join("data/manifests/synth.json")).unwrap(), manifest);
}

#[test]
fn unwritable_directory_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), b"").unwrap();
    let o = tmud(dir.path(), &["synth", "--n", "5", "--size", "32", "--out", "blocker/data"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blocker/data"), "{}", stderr(&o));
}

#[test]
fn report_lists_missing_stages() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmud(dir.path(), &["--root", "run", "report"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("filtrate") && msg.contains("experiment"), "{msg}");
}

#[test]
fn pipeline_runs_resumes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", "small.json", "--root", "run", "pipeline"];
        args.extend(extra);
        tmud(dir.path(), &args, &[("TMUD_THREADS", "2")])
    };
    let o = run(&[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 8, "{stdout}");
    let reports = dir.path().join("run/reports");
    for name in ["table3.md", "table4.md", "table5.md", "table6.md"] {
        assert!(reports.join(name).exists(), "{name}");
    }
    let table4 = fs::read(reports.join("table4.md")).unwrap();
    assert!(String::from_utf8_lossy(&table4).contains("* p < 0.05, ** p < 0.01, *** p < 0.001"));

    let o = run(&["--resume-from", "experiment"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
    assert_eq!(fs::read(reports.join("table4.md")).unwrap(), table4);

    let model = dir.path().join("run/models/dominance.json");
    let text = fs::read_to_string(&model).unwrap().replacen("\"seed\"", "\"seed\" ", 1);
    fs::write(&model, text).unwrap();
    let o = run(&["--resume-from", "direction"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("checksum") && msg.contains("dominance.json"), "{msg}");
}
