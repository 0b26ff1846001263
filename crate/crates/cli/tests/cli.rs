use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hierverb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierverb"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .env_remove("HIERVERB_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) {
    let text = format!(
        "hierarchy = \"data/hierarchy.json\"\n\
         dataset = \"data/dataset.jsonl\"\n\
         out_dir = \"out\"\n\
         k = 2\n\
         epochs = 4\n\
         lr = 0.01\n\
         verbalizer_lr = 0.02\n\
         encoder.r = 8\n\
         [synth]\n\
         branching = [2, 2]\n\
         docs_per_path = 5\n\
         {extra}"
    );
    fs::write(dir.join("run.toml"), text).unwrap();
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn full_run(dir: &Path) {
    write_config(dir, "");
    for cmd in ["synth", "sample", "train", "eval"] {
        ok(&hierverb(dir, &[cmd]));
    }
}

#[test]
fn synth_sample_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "");

    let synth: serde_json::Value = serde_json::from_str(&ok(&hierverb(dir, &["synth"]))).unwrap();
    assert_eq!(synth["paths"], 4);
    assert_eq!(synth["documents"], 20);

    let sample = ok(&hierverb(dir, &["sample"]));
    assert!(sample.contains("support 8 dev 8 test 4"), "{sample}");
    assert_eq!(sample.lines().filter(|l| l.ends_with("\t2")).count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/support_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["K"], 2);

    let train = ok(&hierverb(dir, &["train"]));
    assert!(train.starts_with("kept epoch"));
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/train_log.json")).unwrap()).unwrap();
    assert!(!log["epochs"].as_array().unwrap().is_empty());
    assert!(dir.join("out/checkpoint.json").exists());
    assert!(dir.join("out/vocab.json").exists());

    let report: serde_json::Value = serde_json::from_str(&ok(&hierverb(dir, &["eval"]))).unwrap();
    assert_eq!(report["documents"], 4);
    assert_eq!(report["per_layer"].as_array().unwrap().len(), 2);
    let preds = fs::read_to_string(dir.join("out/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for f in [
        "data/dataset.jsonl",
        "out/support.jsonl",
        "out/support_manifest.json",
        "out/checkpoint.json",
        "out/train_log.json",
        "out/report.json",
        "out/predictions.jsonl",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "");
    ok(&hierverb(dir, &["synth"]));
    let sample = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hierverb"));
        cmd.arg("sample").arg("--config").arg(dir.join("run.toml"));
        cmd.env_remove("HIERVERB_SEED");
        if let Some(s) = env {
            cmd.env("HIERVERB_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        ok(&cmd.output().unwrap());
        fs::read_to_string(dir.join("out/support_manifest.json")).unwrap()
    };
    assert!(sample(Some("7"), None).contains("\"seed\": 7"));
    assert!(sample(Some("7"), Some("3")).contains("\"seed\": 3"));
}

#[test]
fn k_flag_and_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "");
    ok(&hierverb(dir, &["synth"]));
    let out = ok(&hierverb(dir, &["sample", "--k", "1", "--preset", "rcv1"]));
    assert!(out.contains("support 4"), "{out}");
}

#[test]
fn gradcheck_passes_and_reports_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "");
    let out = hierverb(dir, &["gradcheck"]);
    let text = ok(&out);
    assert!(text.contains("A_d"));
    assert!(text.trim_end().ends_with("pass"));
    assert!(dir.join("out/gradcheck.json").exists());
}

#[test]
fn gradcheck_failure_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "[gradcheck]\ntolerance = 1e-14\n");
    let out = hierverb(dir, &["gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_and_mismatched_checkpoint_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "nonsense = 1\n");
    let out = hierverb(dir, &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));

    full_run(dir);
    // A different tree under the same checkpoint.
    fs::write(
        dir.join("data/hierarchy.json"),
        "{\"edges\": [[null, \"topic0\"], [\"topic0\", \"topic0-0\"]]}",
    )
    .unwrap();
    let out = hierverb(dir, &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}
