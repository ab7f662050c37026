//! Exit-code behavior of the command-line binary.

use std::process::Command;

fn exit_code(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_promptdep"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("run promptdep")
        .status
        .code()
        .expect("exit code")
}

fn dataset(dir: &std::path::Path) -> String {
    let data = dir.join("data");
    assert_eq!(
        exit_code(&["synth-gen", "--out", data.to_str().unwrap(), "--n-scenes", "10"]),
        0
    );
    data.join("manifest.jsonl").to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_is_a_validation_error() {
    assert_eq!(exit_code(&["frobnicate", "--out", "x"]), 2);
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(exit_code(&["ambiguity", "--out", out.to_str().unwrap()]), 2);
    let absent = dir.path().join("absent.jsonl");
    assert_eq!(
        exit_code(&[
            "select-k",
            "--out",
            out.to_str().unwrap(),
            "--manifest",
            absent.to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn out_of_range_tau_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let out = dir.path().join("o");
    assert_eq!(
        exit_code(&[
            "oracle-margins",
            "--manifest",
            &m,
            "--out",
            out.to_str().unwrap(),
            "--tau",
            "1.5"
        ]),
        2
    );
}

#[test]
fn failing_external_segmenter_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let out = dir.path().join("o");
    let args = [
        "oracle-margins",
        "--manifest",
        &m,
        "--out",
        out.to_str().unwrap(),
        "--segmenter",
        "external:false {request} {outdir}",
    ];
    assert_eq!(exit_code(&args), 3);
}

#[test]
fn select_k_succeeds_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let out = dir.path().join("o");
    assert_eq!(
        exit_code(&[
            "select-k",
            "--manifest",
            &m,
            "--out",
            out.to_str().unwrap(),
            "--candidates",
            "1,2"
        ]),
        0
    );
    assert!(out.join("select_k.json").exists() && out.join("d0.json").exists());
}
