use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cwssnet::data::parse_ppm;

fn cwssnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwssnet"))
        .arg("--quiet")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(cwssnet(&a, &["--seed", "9", "synth"]));
    ok(cwssnet(&b, &["--seed", "9", "synth"]));
    for f in ["scene.cube", "ground_truth.ppm", "synth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (w, h, rgb) = parse_ppm(&fs::read(a.join("ground_truth.ppm")).unwrap()).unwrap();
    assert_eq!((w, h, rgb.len()), (64, 64, 64 * 64 * 3));
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    ok(cwssnet(&train, &["train", "--epochs", "2"]));
    let trace = fs::read_to_string(train.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# config: {"));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 3);

    let ckpt = train.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(cwssnet(&e1, &["eval", "--checkpoint", ckpt]));
    ok(cwssnet(&e2, &["eval", "--checkpoint", ckpt]));
    let metrics = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(e2.join("metrics.csv")).unwrap());
    assert!(metrics.contains("class,IoU,F1,Acc") && metrics.contains("\nmean,"));

    let p = dir.path().join("p");
    ok(cwssnet(&p, &["predict", "--checkpoint", ckpt]));
    let (w, h, _) = parse_ppm(&fs::read(p.join("prediction.ppm")).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(p.join("prediction.labels").exists() && p.join("prediction.json").exists());
}

#[test]
fn analyze_params_marks_indivisible_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(cwssnet(dir.path(), &["analyze-params", "--r", "6,12", "--l", "2"]));
    let csv = fs::read_to_string(dir.path().join("params.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "R,L,k,C_in,P_std,P_WTBC,ratio,measured,attn,proj,total,note");
    assert!(rows[1].starts_with("6,2,") && rows[1].ends_with("skipped: R not divisible by 2^L"));
    assert!(rows[2].starts_with("12,2,3,32,") && rows[2].contains(",0.5,"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| cwssnet(dir.path(), args).status.code();
    assert_eq!(code(&["train", "--patch-size", "12"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent/ckpt"]), Some(3));
    assert_eq!(code(&["train", "--epochs", "1", "--lr", "1e300"]), Some(4));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(code(&["--config", cfg.to_str().unwrap(), "synth"]), Some(2));
    let o = cwssnet(dir.path(), &["train", "--patch-size", "12"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
