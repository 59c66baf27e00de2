use std::path::Path;
use std::process::{Command, Output};

fn fabme(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fabme"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn params_of(variant: &str, cwd: &Path) -> usize {
    let o = fabme(
        &["params", "--variant", variant, "--out", &format!("{variant}.csv")],
        cwd,
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(cwd.join(format!("{variant}.csv"))).unwrap();
    csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn fabme_is_smaller_than_baseline() {
    let dir = tempfile::tempdir().unwrap();
    assert!(params_of("fabme", dir.path()) <= params_of("baseline", dir.path()));
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = fabme(&["gradcheck", "--block", "emca"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS max_rel_err="), "{}", stdout(&o));
    assert!(dir.path().join("gradcheck.csv").is_file());
}

#[test]
fn failures_exit_one_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let o = fabme(&["tile", "--in", "empty", "--out", "tiles"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no images found"));

    assert_eq!(
        fabme(&["params", "--variant", "resnet"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(fabme(&["bench", "--sweep", "200"], dir.path()).status.code(), Some(1));
    assert_eq!(fabme(&["--frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn ground_truth_as_predictions_scores_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let o = fabme(
        &["synth", "--n", "10", "--classes", "3", "--seed", "5", "--out", "synth"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels = dir.path().join("synth/val/labels");
    let o = fabme(
        &[
            "eval",
            "--data",
            "synth/val",
            "--predictions",
            labels.to_str().unwrap(),
            "--classes",
            "3",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "mAP@0.5 = 100.00%");
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.lines().last().unwrap().ends_with(",1.000000"), "{csv}");
}
