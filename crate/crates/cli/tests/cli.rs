mod common;

use std::fs;

use tempfile::TempDir;

use common::{code, digests, idmorph, ok, reproducible, TINY};

fn setup() -> TempDir {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &[
            "gen-data",
            "--identities",
            "10",
            "--per-cell",
            "2",
            "--image-size",
            "16",
            "--out",
            "data",
        ],
    );
    fs::write(tmp.path().join("tiny.cfg"), TINY).unwrap();
    tmp
}

#[test]
fn gen_data_without_out_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = idmorph(
        tmp.path(),
        &["gen-data", "--identities", "10", "--per-cell", "4"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_subcommand_and_bad_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&idmorph(tmp.path(), &["frobnicate"])), 2);
    let zero = [
        "gen-data",
        "--identities",
        "0",
        "--per-cell",
        "1",
        "--out",
        "d",
    ];
    assert_eq!(code(&idmorph(tmp.path(), &zero)), 2);
    assert_eq!(
        code(&idmorph(tmp.path(), &["gradcheck", "--instances", "0"])),
        2
    );
}

#[test]
fn gen_data_writes_every_image_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(
            tmp.path(),
            &[
                "gen-data",
                "--identities",
                "10",
                "--per-cell",
                "4",
                "--image-size",
                "16",
                "--out",
                out,
                "--seed",
                "3",
            ],
        );
    }
    let a = digests(&tmp.path().join("a"));
    assert_eq!(a.len(), 200 + 1);
    assert!(a.contains_key("manifest.csv"));
    assert_eq!(a, digests(&tmp.path().join("b")));
}

#[test]
fn config_errors_name_the_line_and_exit_2() {
    let tmp = setup();
    fs::write(tmp.path().join("bad.cfg"), format!("{TINY}lambda = -1\n")).unwrap();
    let out = idmorph(
        tmp.path(),
        &[
            "train",
            "--config",
            "bad.cfg",
            "--data",
            "data/manifest.csv",
        ],
    );
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 9"), "{err}");

    let out = idmorph(
        tmp.path(),
        &["train", "--config", "tiny.cfg", "--set", "warp = 3"],
    );
    assert_eq!(code(&out), 2);
    let out = idmorph(tmp.path(), &["train", "--config", "tiny.cfg"]);
    assert_eq!(code(&out), 2, "missing dataset is a config error");
}

#[test]
fn missing_checkpoint_is_runtime_failure() {
    let tmp = setup();
    for args in [
        &[
            "generate",
            "--checkpoint",
            "none.mgck",
            "--data",
            "data/manifest.csv",
        ][..],
        &[
            "eval-idpres",
            "--checkpoint",
            "none.mgck",
            "--data",
            "data/manifest.csv",
        ],
        &[
            "train",
            "--resume",
            "none.mgck",
            "--data",
            "data/manifest.csv",
        ],
    ] {
        let out = idmorph(tmp.path(), args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("none.mgck"));
    }
}

#[test]
fn corrupt_checkpoint_is_runtime_failure() {
    let tmp = setup();
    fs::write(tmp.path().join("junk.mgck"), b"not a checkpoint").unwrap();
    let out = idmorph(
        tmp.path(),
        &[
            "generate",
            "--checkpoint",
            "junk.mgck",
            "--data",
            "data/manifest.csv",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn every_command_is_checksum_reproducible() {
    let tmp = setup();
    let dir = tmp.path();
    let train = reproducible(
        dir,
        "train",
        &[
            "--config",
            "tiny.cfg",
            "--data",
            "data/manifest.csv",
            "--seed",
            "7",
        ],
    );
    let files = digests(&train);
    for f in [
        "config.txt",
        "metrics.tsv",
        "checkpoint-000003.mgck",
        "checkpoint.mgck",
    ] {
        assert!(files.contains_key(f), "missing {f}");
    }
    let ckpt = train.join("checkpoint.mgck");
    let ckpt = ckpt.to_str().unwrap();

    let gen = reproducible(
        dir,
        "generate",
        &[
            "--checkpoint",
            ckpt,
            "--data",
            "data/manifest.csv",
            "--count",
            "3",
            "--seed",
            "1",
        ],
    );
    assert!(digests(&gen).contains_key("contact_sheet_000.png"));

    let common = [
        "--checkpoint",
        ckpt,
        "--data",
        "data/manifest.csv",
        "--nc",
        "2",
        "--classifier-steps",
        "10",
        "--seed",
        "5",
    ];
    let idpres = reproducible(dir, "eval-idpres", &common);
    let report = fs::read_to_string(idpres.join("idpres.tsv")).unwrap();
    assert!(report.contains("top1\t") && report.contains("top5\t"));

    let mut fewshot = common.to_vec();
    fewshot.extend_from_slice(&["--shots", "2", "--fakes", "4"]);
    let fs_dir = reproducible(dir, "eval-fewshot", &fewshot);
    let files = digests(&fs_dir);
    assert!(files.contains_key("fewshot_baseline.tsv"));
    assert!(files.contains_key("fewshot_augmented.tsv"));

    let gc = reproducible(dir, "gradcheck", &["--instances", "1"]);
    let table = fs::read_to_string(gc.join("gradcheck.tsv")).unwrap();
    assert!(!table.contains("FAIL"));
    assert!(table.lines().any(|l| l.starts_with("generator\t")));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = setup();
    let dir = tmp.path();
    let base = [
        "train",
        "--config",
        "tiny.cfg",
        "--data",
        "data/manifest.csv",
    ];
    let mut full = base.to_vec();
    full.extend_from_slice(&["--run-dir", "full"]);
    ok(dir, &full);
    let mut half = base.to_vec();
    half.extend_from_slice(&["--run-dir", "half", "--steps", "3"]);
    ok(dir, &half);
    ok(
        dir,
        &[
            "train",
            "--resume",
            "half/checkpoint.mgck",
            "--data",
            "data/manifest.csv",
            "--steps",
            "6",
        ],
    );
    let read = |p: &str| fs::read(dir.join(p)).unwrap();
    assert_eq!(read("full/checkpoint.mgck"), read("half/checkpoint.mgck"));
    assert_eq!(read("full/metrics.tsv"), read("half/metrics.tsv"));
}

#[test]
fn resume_rejects_architecture_changes() {
    let tmp = setup();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--data",
            "data/manifest.csv",
            "--run-dir",
            "r",
        ],
    );
    let out = idmorph(
        dir,
        &[
            "train",
            "--resume",
            "r/checkpoint.mgck",
            "--data",
            "data/manifest.csv",
            "--base-channels",
            "4",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn identity_generator_needs_no_checkpoint() {
    let tmp = setup();
    let out = ok(
        tmp.path(),
        &[
            "eval-idpres",
            "--generator",
            "identity",
            "--image-size",
            "16",
            "--data",
            "data/manifest.csv",
            "--nc",
            "2",
            "--classifier-steps",
            "10",
            "--run-dir",
            "ident",
        ],
    );
    assert!(out.contains("idpres.tsv"));
    let report = fs::read_to_string(tmp.path().join("ident/idpres.tsv")).unwrap();
    let field = |k: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k}\t")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(field("top1"), field("real_top1"));
}
