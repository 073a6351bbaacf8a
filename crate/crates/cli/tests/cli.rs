use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlmt_core::data::load_manifest;

fn mlmt(args: &[&str]) -> Output {
    mlmt_env(args, None)
}

fn mlmt_env(args: &[&str], root: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlmt"));
    c.args(args).env_remove("MLMT_DATA_ROOT");
    if let Some(r) = root {
        c.env("MLMT_DATA_ROOT", r);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["build-synthetic", "--out", s(&out), "--samples", "10", "--size", "32", "--seed", "4"];
    args.extend_from_slice(extra);
    let o = mlmt(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn desk_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("preset = \"desk\"\ntrain.epochs = 1\ntrain.batch_size = 2\n{body}")).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&mlmt(&[])), 2);
    assert_eq!(code(&mlmt(&["build-synthetic", "--out", "x", "--bogus"])), 2);
    let o = mlmt(&["train-detect", "--out", "x"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("--config") && e.contains("Usage"), "{e}");
    assert_eq!(code(&mlmt(&["--help"])), 0);
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "segment.fusion.stag = \"early\"\n");
    let o = mlmt(&["train-segment", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("segment.fusion.stag"), "{}", stderr(&o));
    let o = mlmt(&["train-segment", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "train.epochs=-3"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "data.train = \"/nonexistent/dataset.json\"\n");
    let o = mlmt(&["train-detect", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn build_synthetic_follows_the_gap_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = build(dir.path(), "a", &["--gap", "2", "--bands", "4"]);
    let b = build(dir.path(), "b", &["--gap", "2", "--bands", "4"]);
    let m = load_manifest(&a).unwrap();
    assert_eq!(m.bands.iter().map(|b| b.layer_index).collect::<Vec<_>>(), [0, 2, 4, 6]);
    assert_eq!(m.len(), 10);
    assert!(a.join("config.resolved.toml").exists());
    let rec = &m.samples[3].bands["b2"];
    for f in [PathBuf::from("dataset.json"), rec.image.clone(), rec.boxes.clone(), rec.mask.clone().unwrap()] {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn detect_train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = build(dir.path(), "data", &[]);
    // Relative data path resolved through the data-root variable.
    let cfg = desk_config(dir.path(), "data.train = \"dataset.json\"\n");
    let model = dir.path().join("det");
    let o = mlmt_env(&["train-detect", "--config", s(&cfg), "--out", s(&model)], Some(&data));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.join("model/config.json").exists());
    assert!(model.join("history.json").exists());
    assert!(model.join("rpn/meta.json").exists());

    let pred = dir.path().join("pred");
    let o = mlmt(&["predict", "--data", s(&data), "--detector", s(&model.join("model")), "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_manifest(&pred).unwrap().len(), 10);

    let mut reports = Vec::new();
    for run in ["e1", "e2"] {
        let out = dir.path().join(run);
        let o = mlmt(&["evaluate", "--pred", s(&pred), "--gt", s(&data), "--task", "detect", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
        assert!(table.starts_with("band,precision,recall,f1\nb0,"), "{table}");
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn segmentation_weak_labels_recursion_and_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let data = build(dir.path(), "data", &[]);
    let weak = dir.path().join("weak");
    let o = mlmt(&["gen-weak-labels", "--data", s(&data), "--out", s(&weak), "weak.intensity_percentile=85", "weak.min_component_area=5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let eroded = dir.path().join("eroded");
    let o = mlmt(&["gen-weak-labels", "--data", s(&data), "--out", s(&eroded), "--erode", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let agree = dir.path().join("agree");
    let o = mlmt(&["agreement", "--a", s(&data), "--b", s(&eroded), "--class-id", "1", "--out", s(&agree)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(agree.join("table.csv")).unwrap();
    assert!(table.starts_with("band,class_id,agreement\nb0,1,0."), "{table}");

    let cfg = desk_config(dir.path(), &format!("data.train = {:?}\n", s(&weak)));
    let rec = dir.path().join("rec");
    let o = mlmt(&["train-recursive", "--config", s(&cfg), "--out", s(&rec), "train.max_recursion_rounds=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(rec.join("rounds.json").exists() && rec.join("best/config.json").exists());

    let cfg = desk_config(dir.path(), &format!("data.train = {:?}\n", s(&data)));
    let seg = dir.path().join("seg");
    let o = mlmt(&["train-segment", "--config", s(&cfg), "--out", s(&seg), "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snap = std::fs::read_to_string(seg.join("config.resolved.toml")).unwrap();
    assert!(snap.contains("seed = 9"), "{snap}");

    let pred = dir.path().join("pred");
    let o = mlmt(&["predict", "--data", s(&data), "--segmenter", s(&seg.join("model")), "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev = dir.path().join("ev");
    let o = mlmt(&["evaluate", "--pred", s(&pred), "--gt", s(&data), "--task", "segment", "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(ev.join("table.csv")).unwrap();
    assert!(table.starts_with("band,background,blob,mean\n"), "{table}");
}
