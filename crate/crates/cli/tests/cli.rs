//! End-to-end tests of the `partforge` binary: help text is pinned to golden
//! files, generation is byte-deterministic, and the full gen-data ->
//! build-priors -> train -> infer -> eval pipeline runs on a tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn partforge")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn assert_fails(out: &Output, code: i32) -> String {
    assert_eq!(out.status.code(), Some(code), "wrong exit code");
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

#[test]
fn help_text_matches_the_golden_files() {
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut cases = vec![("help_main.txt", vec!["--help"])];
    for sub in ["gen-data", "build-priors", "train", "infer", "eval", "export-mesh"] {
        cases.push((
            match sub {
                "gen-data" => "help_gen-data.txt",
                "build-priors" => "help_build-priors.txt",
                "train" => "help_train.txt",
                "infer" => "help_infer.txt",
                "eval" => "help_eval.txt",
                _ => "help_export-mesh.txt",
            },
            vec![sub, "--help"],
        ));
    }
    for (file, args) in cases {
        let out = run(&args);
        let stdout = assert_ok(&out);
        let expected = fs::read_to_string(golden_dir.join(file))
            .unwrap_or_else(|e| panic!("missing golden {file}: {e}"));
        assert_eq!(stdout, expected, "help for {args:?} drifted from {file}");
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["gen-data", "--bogus"]);
    let stderr = assert_fails(&out, 2);
    assert!(stderr.contains("--bogus"), "stderr: {stderr}");
    // --scan and --data are mutually exclusive.
    let out = run(&["infer", "--model", "m", "--priors", "p", "--out", "o", "--scan", "s", "--data", "d"]);
    assert_fails(&out, 2);
    let out = bin()
        .env("PARTFORGE_THREADS", "many")
        .args(["export-mesh", "--grid", "x", "--out", "y"])
        .output()
        .unwrap();
    let stderr = assert_fails(&out, 2);
    assert!(stderr.contains("PARTFORGE_THREADS"), "stderr: {stderr}");
}

#[test]
fn runtime_failures_exit_1_with_a_single_line() {
    let out = run(&["build-priors", "--data", "/nonexistent-dataset", "--out", "/tmp/never.pfpb"]);
    let stderr = assert_fails(&out, 1);
    assert!(stderr.starts_with("error: "), "stderr: {stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.contains("manifest.toml"), "stderr: {stderr}");
}

/// Every file a generation run writes, keyed by path relative to the root.
fn dir_contents(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn generation_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&[
            "gen-data", "--out", dir.to_str().unwrap(),
            "--count", "4", "--seed", "11", "--resolution", "16",
            "--classes", "chair,table", "--corrupt",
        ]);
        assert_ok(&out);
    }
    let fa = dir_contents(&a);
    let fb = dir_contents(&b);
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert_eq!(ba, bb, "{} differs between identical runs", pa.display());
    }
}

#[test]
fn pipeline_runs_end_to_end_on_a_tiny_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let priors = tmp.path().join("priors.pfpb");
    let rundir = tmp.path().join("run");
    let pred = tmp.path().join("pred");

    // 7 samples -> 4 train / 1 val / 2 test.
    let out = run(&[
        "gen-data", "--out", data.to_str().unwrap(),
        "--count", "7", "--seed", "3", "--resolution", "16", "--classes", "chair",
    ]);
    let stdout = assert_ok(&out);
    assert!(stdout.contains("7 samples"), "stdout: {stdout}");
    assert!(data.join("manifest.toml").is_file());
    assert!(data.join("gen-config.toml").is_file());

    let out = run(&[
        "build-priors", "--data", data.to_str().unwrap(),
        "--out", priors.to_str().unwrap(), "--k", "1", "--seed", "2",
    ]);
    assert_ok(&out);
    assert!(priors.is_file());
    assert!(priors.with_extension("toml").is_file());

    let train_args = [
        "train", "--data", data.to_str().unwrap(),
        "--priors", priors.to_str().unwrap(), "--out", rundir.to_str().unwrap(),
        "--batch-size", "2", "--pretrain-epochs", "1", "--finetune-epochs", "1",
        "--resolution", "16", "--seed", "5",
    ];
    let out = run(&train_args);
    let stdout = assert_ok(&out);
    assert!(stdout.contains("epoch   1/2 [pretrain]"), "stdout: {stdout}");
    assert!(stdout.contains("epoch   2/2 [finetune]"), "stdout: {stdout}");
    for file in ["best.pfck", "latest.pfck", "state.pfts", "model.toml", "train-config.toml"] {
        assert!(rundir.join(file).is_file(), "missing {file}");
    }
    let metrics = fs::read_to_string(rundir.join("metrics.toml")).unwrap();
    assert_eq!(metrics.matches("[[epoch]]").count(), 2);

    // Resuming a finished run does nothing; changing a setting is rejected.
    let out = run(&{
        let mut v = train_args.to_vec();
        v.push("--resume");
        v
    });
    let stdout = assert_ok(&out);
    assert!(stdout.contains("0 epochs this run"), "stdout: {stdout}");
    let out = run(&{
        let mut v = train_args.to_vec();
        v.extend(["--learning-rate", "0.002", "--resume"]);
        v
    });
    let stderr = assert_fails(&out, 1);
    assert!(stderr.contains("differs"), "stderr: {stderr}");

    let out = run(&[
        "infer", "--model", rundir.to_str().unwrap(),
        "--priors", priors.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", pred.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let manifest = fs::read_to_string(data.join("manifest.toml")).unwrap();
    let ids: Vec<&str> = manifest
        .lines()
        .filter_map(|l| l.strip_prefix("id = \""))
        .map(|l| l.trim_end_matches('"'))
        .collect();
    assert_eq!(ids.len(), 7);
    for id in &ids {
        let report = pred.join(id).join("report.toml");
        assert!(report.is_file(), "missing report for {id}");
        let text = fs::read_to_string(&report).unwrap();
        assert!(text.contains("class_name = \"chair\""), "report: {text}");
    }

    for mode in ["completion", "segmentation", "instance"] {
        let out = run(&[
            "eval", "--pred", pred.to_str().unwrap(), "--gt", data.to_str().unwrap(),
            "--mode", mode,
        ]);
        let stdout = assert_ok(&out);
        if mode == "instance" {
            assert!(stdout.contains("mAP@25"), "stdout: {stdout}");
        } else {
            assert!(stdout.contains("IoU"), "stdout: {stdout}");
        }
    }
    let report_path = tmp.path().join("eval.toml");
    let out = run(&[
        "eval", "--pred", pred.to_str().unwrap(), "--gt", data.to_str().unwrap(),
        "--out", report_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(report_path.is_file());
    assert!(tmp.path().join("eval-config.toml").is_file());
}

#[test]
fn export_mesh_writes_obj_vertices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "gen-data", "--out", data.to_str().unwrap(),
        "--count", "1", "--seed", "1", "--resolution", "16", "--classes", "table",
    ]);
    assert_ok(&out);
    let grid = fs::read_dir(data.join("grids"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_scan.pfvg"))
        .expect("scan grid exists");
    let obj = tmp.path().join("scan.obj");
    let out = bin()
        .env("PARTFORGE_THREADS", "2")
        .args(["export-mesh", "--grid", grid.to_str().unwrap(), "--out", obj.to_str().unwrap()])
        .output()
        .unwrap();
    assert_ok(&out);
    let text = fs::read_to_string(&obj).unwrap();
    assert!(text.lines().any(|l| l.starts_with("v ")), "no vertices in {text}");
    assert!(text.lines().any(|l| l.starts_with("f ")), "no faces in {text}");
}
