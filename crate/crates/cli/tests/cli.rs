use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lair(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lair"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_succeeds_and_unknown_flags_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lair(dir.path(), &["--help"])), 0);
    assert_eq!(code(&lair(dir.path(), &["train", "--help"])), 0);
    let out = lair(dir.path(), &["gen-data", "--out", "d", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert_eq!(
        fs::read_dir(dir.path()).unwrap().count(),
        0,
        "nothing may be written"
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--max-list", "1", "--out", "d"][..],
        &["verify", "--cases", "0"][..],
        &["ablate", "--grid", "2,x:0.5"][..],
        &["train", "--tau", "0"][..],
        &["pretrain", "--cfg-dropout", "1.0"][..],
    ] {
        assert_eq!(code(&lair(dir.path(), args)), 2, "{args:?}");
    }
    assert!(!dir.path().join("d").exists());
}

#[test]
fn missing_or_corrupt_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = lair(
        dir.path(),
        &[
            "train",
            "--groups",
            "nope.jsonl",
            "--base",
            "nope.json",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    assert_eq!(
        code(&lair(
            dir.path(),
            &["gen-data", "--prompts", "5", "--heldout", "3", "--out", "d"]
        )),
        0
    );
    let groups = dir.path().join("d/groups.jsonl");
    let text = fs::read_to_string(&groups).unwrap();
    fs::write(&groups, &text[..text.len() / 2]).unwrap();
    let out = lair(
        dir.path(),
        &[
            "train",
            "--groups",
            "d/groups.jsonl",
            "--base",
            "b.json",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn gen_data_is_reproducible_and_records_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "gen-data",
            "--prompts",
            "20",
            "--seed",
            "7",
            "--max-list",
            "30",
            "--out",
            out,
        ]
    };
    assert_eq!(code(&lair(dir.path(), &args("a"))), 0);
    assert_eq!(code(&lair(dir.path(), &args("b"))), 0);
    for name in [
        "pretrain.jsonl",
        "pairs.jsonl",
        "groups.jsonl",
        "heldout_prompts.jsonl",
        "heldout_points.jsonl",
        "heldout_groups.jsonl",
    ] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["subcommand"], "gen-data");
    assert_eq!(manifest["config"]["max_list"], 30);
    assert!(manifest["finished_unix"].is_number());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 6);
}

#[test]
fn flags_override_config_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("v.json"),
        r#"{"cases": 3, "seed": 11, "out": "from_file.json"}"#,
    )
    .unwrap();
    assert_eq!(
        code(&lair(
            dir.path(),
            &["verify", "--config", "v.json", "--cases", "4"]
        )),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from_file.json")).unwrap())
            .unwrap();
    assert_eq!(report["cases"], 4);
    assert_eq!(report["seed"], 11);
    assert_eq!(report["suites"].as_array().unwrap().len(), 4);
    assert_eq!(report["passed"], true);

    fs::write(dir.path().join("bad.json"), r#"{"casez": 3}"#).unwrap();
    assert_eq!(
        code(&lair(dir.path(), &["verify", "--config", "bad.json"])),
        2
    );

    assert_eq!(
        code(&lair(
            dir.path(),
            &["gen-data", "--prompts", "4", "--heldout", "2", "--out", "d"]
        )),
        0
    );
    let out = lair(dir.path(), &["train", "--config", "d/run_manifest.json"]);
    assert_eq!(code(&out), 2, "a gen-data manifest cannot configure train");
}

#[test]
fn verify_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["r1.json", "r2.json"] {
        let o = lair(
            dir.path(),
            &["verify", "--seed", "1", "--cases", "100", "--out", out],
        );
        assert_eq!(code(&o), 0);
        assert_eq!(
            String::from_utf8_lossy(&o.stdout)
                .lines()
                .filter(|l| l.contains(" pass "))
                .count(),
            4
        );
    }
    assert_eq!(
        fs::read(dir.path().join("r1.json")).unwrap(),
        fs::read(dir.path().join("r2.json")).unwrap()
    );
}
