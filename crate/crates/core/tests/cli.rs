use std::path::Path;
use std::process::Command;

use sparse_rationale::data::{generate, load_jsonl, save_jsonl, SynthSpec, SynthTask};
use sparse_rationale::Error;

const BIN: &str = env!("CARGO_BIN_EXE_sparse-rationale");

const TINY: &str = "\
# tiny run
num_train = 120
num_val = 30
num_test = 30
embed_dim = 8
hidden_dim = 8
epochs = 2
sparsity_runs = 5
seeds = 1,2
";

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn jsonl_round_trip_preserves_documents() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        task: SynthTask::Regression,
        num_train: 20,
        num_val: 2,
        num_test: 2,
        ..SynthSpec::default()
    };
    let docs = generate(&spec).unwrap().train;
    let path = dir.path().join("docs.jsonl");
    save_jsonl(&path, &docs).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), docs);
}

#[test]
fn malformed_jsonl_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\":\"a\",\"sentences\":[[\"x\"]],\"label\":1.0}\nnot json\n").unwrap();
    match load_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn generate_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");

    assert!(cli(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    for split in ["train", "val", "test"] {
        assert!(data.join(format!("{split}.jsonl")).is_file());
    }
    let train = cli(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--objective", "sl0c"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for seed in [1, 2] {
        for f in ["checkpoint.json", "train.log", "vocab.txt"] {
            assert!(out.join(format!("seed-{seed}/{f}")).is_file());
        }
    }
    let snapshot = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(snapshot.contains("objective = sl0c"));

    let mut texts = Vec::new();
    for _ in 0..2 {
        let ev = cli(&["eval", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
        assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
        texts.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let json: serde_json::Value = serde_json::from_slice(&texts[0]).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert!(json["mean"]["iou_f1"].is_number());

    let single = cli(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data.join("test.jsonl")),
        "--checkpoint",
        s(&out.join("seed-1/checkpoint.json")),
        "--out",
        s(&dir.path().join("single")),
    ]);
    assert!(single.status.success(), "{}", String::from_utf8_lossy(&single.stderr));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, format!("{TINY}pi_list = 0.1,0.3\nseeds = 0\n")).unwrap();
    let out = cli(&["sweep", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "pi,seed,task_metric,iou_f1,token_f1,sparsity_mean,sparsity_var");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.1,0,"));
}

#[test]
fn verify_ib_and_grad_check_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let ib = cli(&["verify-ib", "--out", s(dir.path())]);
    assert!(ib.status.success());
    assert!(dir.path().join("ib.json").is_file());
    let gc = cli(&["grad-check", "--out", s(dir.path())]);
    assert!(gc.status.success());
    let table = String::from_utf8(gc.stdout).unwrap();
    assert!(table.lines().count() > 22 && !table.contains("FAIL"));
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "pi = 0.2\nwidth = 3\n").unwrap();
    let cases = [
        (vec!["train", "--config", s(&cfg)], "error[E_PARSE]"),
        (vec!["train", "--pi", "1.5"], "error[E_CONFIG]"),
        (vec!["train", "--objective", "magic"], "error[E_CONFIG]"),
        (vec!["eval", "--checkpoint", "/nonexistent/ck.json", "--out", s(dir.path())], "error[E_IO]"),
    ];
    for (args, prefix) in cases {
        let out = cli(&args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(prefix), "{err}");
    }
}
