use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spoofbreak"));
    c.env("RUST_LOG", "warn").env_remove("SPOOFBREAK_CACHE");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[data]
frame_len = 512
toy_clips = 24

[ensemble]
surrogate_epochs = 1

[generator]
channels = [2, 2, 2, 2]

[discriminator]
channels = 2
fc = [4, 4]

[training]
batch_size = 2
total_steps = 2
checkpoint_every = 1
"#;

#[test]
fn unknown_subcommand_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn evaluate_without_pairs_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["evaluate", "--victims", "white:toy_cnn_small:x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--pairs"), "{}", stderr(&o));
}

#[test]
fn bad_config_values_exit_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[losses]\nlambda1 = -1.0\n").unwrap();
    let o = run(&["--config", "bad.toml", "prepare-toy", "--n", "4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("losses.lambda1"), "{}", stderr(&o));

    std::fs::write(dir.path().join("typo.toml"), "[training]\nlearning_rate = 1.0\n").unwrap();
    let o = run(&["--config", "typo.toml", "prepare-toy", "--n", "4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("training.learning_rate"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--report", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn prepare_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let args = ["--config", "small.toml", "prepare-toy", "--n", "20", "--seed", "7", "--out", "d"];
    let first = run(&args, dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(!stdout(&first).contains("byte-identical"));
    let second = run(&args, dir.path());
    assert!(second.status.success());
    assert!(stdout(&second).contains("byte-identical"), "{}", stdout(&second));
    assert!(dir.path().join("d/resolved_config.toml").exists());
    let resolved = std::fs::read_to_string(dir.path().join("d/resolved_config.toml")).unwrap();
    assert!(resolved.contains("lambda2 = 0.0001"), "{resolved}");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let ok = |args: &[&str]| {
        let o = run(args, cwd);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    let cfg = format!(
        "{SMALL}\n[[ensemble.members]]\nfamily = \"toy_cnn_small\"\nweights_path = \"surr/toy_cnn_small_w2_s7.safetensors\"\n"
    );
    std::fs::write(cwd.join("small.toml"), SMALL).unwrap();
    ok(&["--config", "small.toml", "prepare-toy", "--out", "data"]);
    ok(&["--config", "small.toml", "train-surrogate", "--manifest", "data/manifest.jsonl", "--family", "toy_cnn_small", "--width", "2", "--out", "surr"]);
    assert!(cwd.join("surr/toy_cnn_small_w2_s7.safetensors").exists());
    std::fs::write(cwd.join("attack.toml"), cfg).unwrap();
    ok(&["--config", "attack.toml", "train-attack", "--manifest", "data/manifest.jsonl", "--out", "run"]);
    assert!(cwd.join("run/checkpoints/step_0000002.safetensors").exists());
    assert_eq!(std::fs::read_to_string(cwd.join("run/metrics.jsonl")).unwrap().lines().count(), 2);
    ok(&["--config", "attack.toml", "attack", "--checkpoint", "run/checkpoints/step_0000002.safetensors", "--manifest", "data/manifest.jsonl", "--out", "att"]);
    let table = ok(&[
        "--config", "attack.toml", "evaluate", "--pairs", "att/pairs.jsonl", "--manifest", "data/manifest.jsonl",
        "--victims", "white:toy_cnn_small:surr/toy_cnn_small_w2_s7.safetensors", "--out", "ev", "--no-quality",
    ]);
    assert!(table.contains("average"), "{table}");
    let csv = std::fs::read_to_string(cwd.join("ev/report.csv")).unwrap();
    assert!(csv.starts_with("victim_id,dataset_tag,scenario,acc_ba,acc_aa,drop,success_rate\n"));
    assert!(ok(&["report", "--report", "ev/report.json", "--out", "ev"]).contains("average"));
    ok(&["--config", "attack.toml", "dump-samples", "--pairs", "att/pairs.jsonl", "--clips", "toy_fake_00000,toy_real_00000", "--out", "samples"]);
    assert!(cwd.join("samples/toy_fake_00000/spectrogram.png").exists());

    // Relative weights missing locally are found through the cache variable.
    let cached = bin()
        .args(["--config", "small.toml", "evaluate", "--pairs", "att/pairs.jsonl", "--manifest", "data/manifest.jsonl", "--no-quality"])
        .args(["--victims", "white:toy_cnn_small:toy_cnn_small_w2_s7.safetensors", "--out", "ev2"])
        .env("SPOOFBREAK_CACHE", cwd.join("surr"))
        .current_dir(cwd)
        .output()
        .unwrap();
    assert!(cached.status.success(), "{}", stderr(&cached));
    assert_eq!(std::fs::read_to_string(cwd.join("ev2/report.csv")).unwrap(), csv);
}
