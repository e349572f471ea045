use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambaplace"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn gen_data_writes_splits_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gen-data", "--seed", "17", "--grid", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
    let first = std::fs::read(tmp.path().join("data/manifest.json")).unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).contains("config grid=4"));

    assert_eq!(code(&run(tmp.path(), &["gen-data", "--seed", "17", "--grid", "4"])), 2);
    let o = run(tmp.path(), &["gen-data", "--force", "--seed", "17", "--grid", "4"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(tmp.path().join("data/manifest.json")).unwrap(), first);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--grid", "1"])), 2);
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--no-such-key", "3"])), 2);
    std::fs::write(tmp.path().join("bad.cfg"), "grid=4\nbogus=1\n").unwrap();
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--config", "bad.cfg"])), 2);
}

#[test]
fn config_file_and_overrides_merge() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.cfg"), "# small world\ngrid=5\nqueries_per_cell=2\n").unwrap();
    let o = run(tmp.path(), &["gen-data", "--out", "d", "--config", "run.cfg", "--queries-per-cell", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config grid=5") && err.contains("config queries_per_cell=3"));
    assert!(tmp.path().join("d/manifest.json").exists());
}

#[test]
fn missing_inputs_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["train", "--stage", "coarse"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--grid", "4"])), 0);
    let o = run(tmp.path(), &["train", "--stage", "fine"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("coarse.ckpt"));
    assert_eq!(code(&run(tmp.path(), &["eval"])), 3);
}

#[test]
fn tampered_data_is_a_provenance_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--grid", "4"])), 0);
    let val = tmp.path().join("data/val.jsonl");
    let mut bytes = std::fs::read(&val).unwrap();
    bytes.push(b'\n');
    std::fs::write(&val, bytes).unwrap();
    assert_eq!(code(&run(tmp.path(), &["train"])), 2);
}

#[test]
fn small_run_trains_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "grid=5\nqueries_per_cell=2\nd_model=16\nd_state=4\nheads=2\nout_dim=16\n\
               tam_layers=1\npcm_blocks=1\nccam_stages=1\ncoarse_epochs=1\nfine_epochs=1\nbatch_size=8\n";
    std::fs::write(tmp.path().join("run.cfg"), cfg).unwrap();
    let args = ["--config", "run.cfg"];
    assert_eq!(code(&run(tmp.path(), &[&["gen-data"][..], &args].concat())), 0);
    let o = run(tmp.path(), &[&["train", "--stage", "coarse"][..], &args].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8_lossy(&o.stdout);
    assert!(line.starts_with("stage=coarse epoch=1 loss=") && line.contains(" recall1=") && line.contains(" config="));
    assert_eq!(code(&run(tmp.path(), &[&["train", "--stage", "fine"][..], &args].concat())), 0);
    let o = run(tmp.path(), &[&["eval", "--out", "r.json"][..], &args].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_object().unwrap().len(), 14);
    assert_eq!(std::fs::read(tmp.path().join("r.json")).unwrap(), o.stdout);
    let again = run(tmp.path(), &[&["eval"][..], &args].concat());
    assert_eq!(again.stdout, o.stdout);
}
