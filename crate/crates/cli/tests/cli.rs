use std::path::Path;
use std::process::{Command, Output};

fn hdml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdml")).args(args).output().expect("spawn hdml")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SMALL_CONFIG: &str = "\
# tiny run for the CLI tests
loss = triplet
epochs = 3
embed_dim = 8
extractor_hidden = 16
batch_size = 12
samples_per_class = 3
beta = 1000
ks = 1, 2
";

fn small_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data.csv");
    let out = hdml(&[
        "synth-data", "--classes", "8", "--per-class", "10", "--dim", "6", "--seed", "4", "--out", s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let text = std::fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("label,f_0,f_1,f_2,f_3,f_4,f_5\n"));
    assert_eq!(text.lines().count(), 81);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.path().join("run");
    let out = hdml(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "curves.csv", "manifest.json", "config.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert!(curves.starts_with("step,epoch,j_m,j_syn,j_gen,j_recon,j_soft,weight_w,lambda_interp,j_cls\n"));
    assert!(curves.lines().count() > 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "hdml-manifest");
    assert_eq!(manifest["j_avg_by_epoch"].as_array().unwrap().len(), 3);
    assert!(manifest["final_metrics"]["nmi"].is_number());

    // the saved config reproduces the run exactly
    let again = dir.path().join("again");
    let out = hdml(&[
        "train", "--data", s(&data), "--config", s(&run.join("config.txt")), "--out-dir", s(&again),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(again.join("curves.csv")).unwrap(), curves.as_bytes());
    assert_eq!(
        std::fs::read(again.join("checkpoint.json")).unwrap(),
        std::fs::read(run.join("checkpoint.json")).unwrap()
    );

    let ev = dir.path().join("eval");
    let out = hdml(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--ks", "1,3", "--out-dir", s(&ev),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let recall = metrics["recall"].as_object().unwrap();
    assert_eq!(recall.keys().collect::<Vec<_>>(), ["1", "3"]);
    // same split and clustering seed as the end of training
    for key in ["nmi", "f1", "num_test_points"] {
        assert_eq!(metrics[key], manifest["final_metrics"][key], "{key}");
    }
    assert_eq!(metrics["recall"]["1"], manifest["final_metrics"]["recall"]["1"]);

    let emb = std::fs::read_to_string(ev.join("embeddings.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    let expected: Vec<String> = ["sample_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..8).map(|k| format!("z_{k}")))
        .collect();
    assert_eq!(header, expected.join(","));
    // half of the 8 classes are held out, 10 samples each
    assert_eq!(emb.lines().count(), 41);
}

#[test]
fn eval_rejects_wrong_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL_CONFIG.replace("epochs = 3", "epochs = 0")).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&hdml(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&run)])), 0);

    let other = dir.path().join("other.csv");
    hdml(&["synth-data", "--classes", "4", "--per-class", "3", "--dim", "5", "--out", s(&other)]);
    let out = hdml(&["eval", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&other)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ckpt = dir.path().join("ckpt.json");
    std::fs::write(&ckpt, r#"{"format":"something-else","version":1}"#).unwrap();
    let out = hdml(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    for (text, needle) in [
        ("epochs = 2\nmargn = 1\n", "line 2"),
        ("epochs\n", "line 1"),
        ("epochs = many\n", "line 1"),
        ("epochs = 1\nepochs = 2\n", "line 2"),
        ("margin = -1\n", "margin"),
    ] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, text).unwrap();
        let out = hdml(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&dir.path().join("x"))]);
        assert_eq!(code(&out), 1, "{text:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{text:?}: {err}");
    }
}

#[test]
fn missing_data_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdml(&["train", "--data", s(&dir.path().join("nope.csv")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_reports_each_fragment() {
    let out = hdml(&["gradcheck", "--seed", "3", "--instances", "4"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for f in ["embedder+triplet", "embedder+npair", "generator"] {
        assert!(text.lines().any(|l| l.starts_with(f) && l.ends_with("PASS")), "{text}");
    }
    assert!(text.contains("gradcheck PASS"));
    // an impossible tolerance is a numerical failure
    assert_eq!(code(&hdml(&["gradcheck", "--instances", "2", "--tolerance", "0"])), 2);
    assert_eq!(code(&hdml(&["gradcheck", "--instances", "0"])), 1);
}

#[test]
fn usage_exit_codes() {
    assert_eq!(code(&hdml(&[])), 1);
    assert_eq!(code(&hdml(&["frobnicate"])), 1);
    assert_eq!(code(&hdml(&["eval", "--checkpoint", "x"])), 1);
    assert_eq!(code(&hdml(&["--version"])), 0);
    assert_eq!(code(&hdml(&["train", "--help"])), 0);
}
