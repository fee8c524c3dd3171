//! Exit-code contract of the command-line front end.

use pulseid::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("pulseid").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["synth"]), 2, "missing --out");
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["train", "--data", "d", "--stage1", "s", "--cppg", "c", "--out", "o", "--hybrid", "--rppg-only"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("raw").display().to_string();
    assert_eq!(run(&["synth", "--out", &out, "--subjects", "1"]), 2);
    assert_eq!(run(&["--threads", "0", "synth", "--out", &out]), 2);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"synth": {"subjectz": 3}}"#).unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "synth", "--out", &out]), 2);
    assert!(!dir.path().join("raw").join("manifest.json").exists());
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    assert_eq!(run(&["--config", &p("absent.json"), "synth", "--out", &p("raw")]), 3);
    assert_eq!(run(&["deid", "--manifest", &p("absent/manifest.json"), "--out", &p("deid")]), 3);
    assert_eq!(run(&["authenticate", "--model", &p("model.ckpt"), "--video", &p("v.rppg"), "--claim", "0"]), 3);
}

#[test]
fn train_without_stage1_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synth": {"n_subjects": 2, "sessions": 1, "duration_s": 60.0, "height": 12, "width": 12, "external_ids": 2, "external_duration_s": 20.0}}"#).unwrap();
    let c = cfg.display().to_string();
    assert_eq!(run(&["--config", &c, "synth", "--out", &p("raw")]), 0);
    assert_eq!(run(&["--config", &c, "deid", "--manifest", &p("raw/manifest.json"), "--out", &p("deid")]), 0);
    let code = run(&[
        "--config", &c, "train", "--data", &p("deid"), "--stage1", &p("nope.ckpt"),
        "--cppg", &p("raw/external/cppg_manifest.json"), "--out", &p("s2"),
    ]);
    assert_eq!(code, 3);
    assert!(dir.path().join("deid").join("run_manifest.json").exists());
}
