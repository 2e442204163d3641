use std::path::Path;
use std::process::{Command, Output};

fn egal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egal")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    let text = format!(
        "image_size = 32\npool = 60\ntest = 30\nseed_epochs = 1\nepochs = 1\nk = 6\nrounds = 1\nseeds = 0\n\
         out = {}\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_config_key_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "colour = blue\n");
    let out = egal(&["run-al", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn report_of_an_empty_directory_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = egal(&["report", "--dir", &tmp.path().display().to_string()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.txt"));
}

#[test]
fn too_few_shots_per_class_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    // ten seed samples per class cannot fill an 11-shot support set
    let cfg = write_config(tmp.path(), "shots = 11\n");
    let out = egal(&["run-al", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gen_data_run_and_report_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "strategy = random,composite\n");
    let out = egal(&["gen-data", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out/data").is_dir());

    let out = egal(&["run-al", "--config", &cfg, "--lambda", "0.6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("composite-0.6"), "{stdout}");

    let out = egal(&["report", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out/report/census.csv").is_file());
}
