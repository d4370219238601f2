use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scap_core::io;
use scap_core::network::bundled;
use scap_core::{ModelState, NetworkSpec};

fn scap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scap")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scap(dir, args);
    assert!(out.status.success(), "scap {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Pretrained toy model and a small dataset in a fresh directory.
fn pretrained() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--out", "data", "--samples", "48"]);
    ok(tmp.path(), &["pretrain", "--spec", "bundled:toy", "--dataset", "data", "--epochs", "3"]);
    tmp
}

#[test]
fn pretrain_with_zero_epochs_stores_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--out", "data", "--samples", "8"]);
    let out = ok(tmp.path(), &["pretrain", "--spec", "bundled:toy", "--dataset", "data", "--epochs", "0", "--seed", "4"]);
    assert!(out.contains("train_accuracy"));
    let init = ModelState::<f64>::init(NetworkSpec::parse(bundled::TOY).unwrap(), 4).unwrap();
    let stored = fs::read(tmp.path().join("run/model.scmd")).unwrap();
    assert_eq!(stored, io::encode_model(&init).unwrap());
    assert!(tmp.path().join("run/stage-pretrain.txt").exists());
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.spec"), "input channels=1 height=8 width=8\nconv in=1 out=4 kernel=3\nlinear in=3 out=2\n").unwrap();
    ok(tmp.path(), &["gen-data", "--out", "data", "--samples", "4", "--size", "8"]);
    let out = scap(tmp.path(), &["pretrain", "--spec", "bad.spec", "--dataset", "data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = scap(tmp.path(), &["pretrain", "--spec", "bundled:toy", "--dataset", "missing"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    // Wrong image size for the toy network.
    let out = scap(tmp.path(), &["pretrain", "--spec", "bundled:toy", "--dataset", "data"]);
    assert_eq!(code(&out), 2);

    let out = scap(tmp.path(), &["score"]);
    assert_eq!(code(&out), 2, "stage order violation");
}

#[test]
fn capture_writes_chained_pairs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "input channels=1 height=8 width=8\n\
                conv in=1 out=3 kernel=3 pad=1 act=relu\n\
                maxpool kernel=2\n\
                conv in=3 out=4 kernel=3 pad=1 act=relu\n\
                flatten\n\
                linear in=64 out=2\n";
    fs::write(tmp.path().join("two.spec"), spec).unwrap();
    ok(tmp.path(), &["gen-data", "--out", "data", "--samples", "20", "--size", "8"]);
    ok(tmp.path(), &["pretrain", "--spec", "two.spec", "--dataset", "data", "--epochs", "1"]);

    assert_eq!(code(&scap(tmp.path(), &["capture", "--dataset", "data", "--pool-size", "0"])), 2);
    let out = scap(tmp.path(), &["capture", "--dataset", "data", "--spec", "bundled:toy"]);
    assert_eq!(code(&out), 2, "checkpoint/spec mismatch");

    ok(tmp.path(), &["capture", "--dataset", "data", "--pool-size", "8", "--seed", "3"]);
    let pool = tmp.path().join("run/pool");
    let x0: scap_core::Tensor = io::read_tensor(&pool.join("layer00.x.scap")).unwrap();
    let y0: scap_core::Tensor = io::read_tensor(&pool.join("layer00.y.scap")).unwrap();
    let x2: scap_core::Tensor = io::read_tensor(&pool.join("layer02.x.scap")).unwrap();
    let y2: scap_core::Tensor = io::read_tensor(&pool.join("layer02.y.scap")).unwrap();
    assert_eq!(x0.shape().dims(), [8, 1, 8, 8]);
    assert_eq!(y0.shape().dims(), [8, 3, 8, 8]);
    assert_eq!(x2.shape().dims(), [8, 3, 4, 4]);
    assert_eq!(y2.shape().dims(), [8, 4, 4, 4]);
    assert_eq!(fs::read_dir(&pool).unwrap().count(), 5);

    let before: Vec<Vec<u8>> = ["layer00.x.scap", "layer02.y.scap", "manifest.txt"].iter().map(|f| fs::read(pool.join(f)).unwrap()).collect();
    ok(tmp.path(), &["capture", "--dataset", "data", "--pool-size", "8", "--seed", "3"]);
    let after: Vec<Vec<u8>> = ["layer00.x.scap", "layer02.y.scap", "manifest.txt"].iter().map(|f| fs::read(pool.join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn pipeline_through_the_binary() {
    let tmp = pretrained();
    let dir = tmp.path();
    ok(dir, &["capture", "--dataset", "data", "--pool-size", "16"]);
    ok(dir, &["train-ae", "--epochs", "2", "--batch-size", "16", "--accum-steps", "1"]);
    let scored = ok(dir, &["score"]);
    assert_eq!(scored.lines().count(), 3);

    let pruned = ok(dir, &["prune", "--tau", "0,0.5"]);
    assert!(pruned.contains("tau 0.00: FR 0.00% PR 0.00%"), "{pruned}");
    let zero: ModelState<f64> = io::load_model(&dir.join("run/tau-0.00/model.scmd"), None).unwrap();
    let base: ModelState<f64> = io::load_model(&dir.join("run/model.scmd"), None).unwrap();
    assert_eq!(zero, base);

    let report = ok(dir, &["report", "--tau", "0.5"]);
    assert!(report.contains("config_hash = ") && report.contains("config.capture.pool_size = 16"), "{report}");

    ok(dir, &["finetune", "--dataset", "data", "--epochs", "1", "--tau", "0.5"]);
    let summary = ok(dir, &["report"]);
    assert_eq!(summary.lines().count(), 4, "{summary}");

    let out = scap(dir, &["prune", "--tau", "0.5,1.2"]);
    assert_eq!(code(&out), 2);

    // A hand-edited mask with an empty keep-set is a contract breach.
    let mask = dir.join("run/tau-0.50/mask.txt");
    let text = fs::read_to_string(&mask).unwrap();
    let broken: String = text.lines().map(|l| if l.starts_with("0 ") { "0\n".to_string() } else { format!("{l}\n") }).collect();
    fs::write(&mask, broken).unwrap();
    let out = scap(dir, &["verify", "--run", "run"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_prints_one_row_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scap(tmp.path(), &["verify"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 4, "{stdout}");
    for (row, name) in rows.iter().zip(["fidelity identity", "extraction stability", "non-normalized identity", "aligned-channel bound"]) {
        assert!(row.starts_with(name), "{row}");
    }
    assert!(rows[..3].iter().all(|r| r.ends_with("PASS")), "{stdout}");
    // The exit status follows the rows: any FAIL row makes verify fail.
    assert_eq!(out.status.success(), rows.iter().all(|r| r.ends_with("PASS")));
}

#[test]
fn count_reports_bundled_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["count", "--spec", "bundled:vgg16", "--layers"]);
    assert!(out.contains("macs 313463808"), "{out}");
    assert!(out.contains("params 14990922"), "{out}");
    assert_eq!(code(&scap(tmp.path(), &["count", "--spec", "bundled:alexnet"])), 2);
}
