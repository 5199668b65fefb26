use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dino-pretssel"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DINO_PRETSSEL_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["corpus", "features", "train", "infer", "eval"] {
        assert!(text.contains(sub), "usage lacks {sub}");
    }
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--stage", "3", "--manifest", "m", "--features", "f"], dir.path()).status.code(), Some(2));
}

#[test]
fn stage_two_without_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--stage", "2", "--manifest", "m.jsonl", "--features", "f.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().filter(|l| l.starts_with("error: ")).count(), 1);
    assert!(err.contains("error: invalid-argument:"), "{err}");
}

#[test]
fn bad_config_lists_offending_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[augment]\nsnr_min_db = 50.0\nsnr_max_db = 10.0\n").unwrap();
    let o = run(&["--config", "c.toml", "corpus", "validate", "--manifest", "m.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("augment.snr_min_db") && err.contains("augment.snr_max_db"), "{err}");
    let o = run(&["--set", "nope.key=1", "corpus", "validate", "--manifest", "m.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["corpus", "validate", "--manifest", "absent.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error: io:"));
}

#[test]
fn config_path_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nlr = -1.0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dino-pretssel"))
        .args(["corpus", "validate", "--manifest", "m.jsonl"])
        .current_dir(dir.path())
        .env("DINO_PRETSSEL_CONFIG", "c.toml")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"));
}

/// corpus → features → stage 1 → stage 2 → infer → eval, at a few steps each.
#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--preset", "smoke", "--set", "train.stage1_iters=2", "--set", "train.stage2_iters=2"];
    let step = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(common);
        let o = run(&all, d);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    step(&["corpus", "generate", "--n", "8", "--seed", "1", "--out", "corpus"]);
    step(&["corpus", "validate", "--manifest", "corpus/manifest.jsonl"]);
    step(&["features", "train-codebook", "--manifest", "corpus/manifest.jsonl", "--V", "16", "--out", "book.bin"]);
    let f = step(&["features", "extract", "--manifest", "corpus/manifest.jsonl", "--codebook", "book.bin", "--out", "feat.bin"]);
    assert_eq!(f["vocab"], 16);
    let m = ["--manifest", "corpus/manifest.jsonl", "--features", "feat.bin", "--out", "run"];
    let s1 = step(&[&["train", "--stage", "1"][..], &m].concat());
    assert_eq!(s1["steps"], 2);
    step(&[&["train", "--stage", "2", "--resume", "run/stage1.ckpt"][..], &m].concat());
    assert_eq!(std::fs::read_to_string(d.join("run/log_stage2.jsonl")).unwrap().lines().count(), 2);

    let wav = "corpus/wavs/utt00000.wav";
    assert!(d.join(wav).exists());
    std::fs::write(
        d.join("req.jsonl"),
        format!("{{\"id\":\"a\",\"units\":[1,2,3],\"durations\":[2,1,3],\"language_id\":\"en\",\"reference_audio_path\":\"{wav}\"}}\n"),
    )
    .unwrap();
    let inf = step(&["infer", "--checkpoint", "run/stage2.ckpt", "--input", "req.jsonl", "--out", "mels", "--wav-debug"]);
    assert_eq!(inf["outputs"][0]["frames"], 12);
    assert!(d.join("mels/a.mel").exists() && d.join("mels/a.wav").exists());

    let rob = step(&[
        "eval", "robustness", "--checkpoint", "run/stage2.ckpt", "--manifest", "corpus/manifest.jsonl", "--snrs", "0,10",
        "--out", "rob.json",
    ]);
    assert_eq!(rob["per_snr"].as_array().unwrap().len(), 2);
    assert!(d.join("rob.json").exists());
    step(&["eval", "recon", "--checkpoint", "run/stage2.ckpt", "--manifest", "corpus/manifest.jsonl", "--features", "feat.bin"]);

    std::fs::write(d.join("pairs.jsonl"), format!("{{\"original\":\"{wav}\",\"denoised\":\"{wav}\"}}\n")).unwrap();
    let snr = step(&["eval", "snr", "--pairs", "pairs.jsonl"]);
    assert_eq!(snr["pairs"][0]["residual_floored"], true);
}
