use std::path::{Path, PathBuf};
use std::process::Command;

use anoncodec_cli::{run_from_args, EvaluationOutput, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};
use anoncodec_core::eval::compute_eer;
use anoncodec_core::signal::load_wav;
use anoncodec_core::train::{Checkpoint, RunConfig, FINAL_CHECKPOINT, LOSS_LOG};

const TINY_TOML: &str = r#"
seed = 5

[model]
base_channels = 1
encoder_out_dim = 4
lstm_layers = 1
speaker_dim = 3
speaker_hidden = 4
codebook_size = 4
teacher_vocab = 5
disc_channels = 1

[optim]
batch_size = 2
steps = 2

[data]
segment_frames = 4
holdout_per_speaker = 1

[anon]
num_selected = 2
"#;

fn run(args: &[&str]) -> Result<(), (u8, String)> {
    let mut full = vec!["anoncodec"];
    full.extend_from_slice(args);
    run_from_args(full).map_err(|f| (f.code, format!("{:#}", f.error)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    /// Synthetic corpus, tiny config, a two-step checkpoint and a pool.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        run(&["--seed", "1", "--out", s(&d.join("corpus")), "synth-data", "--speakers", "3", "--utts", "3", "--duration", "0.5"]).unwrap();
        std::fs::write(d.join("tiny.toml"), TINY_TOML).unwrap();
        run(&["--config", s(&d.join("tiny.toml")), "--out", s(&d.join("run")), "train", "--manifest", s(&d.join("corpus/manifest.jsonl"))])
            .unwrap();
        run(&[
            "--out",
            s(&d.join("pool.bin")),
            "build-pool",
            "--checkpoint",
            s(&d.join("run").join(FINAL_CHECKPOINT)),
            "--manifest",
            s(&d.join("corpus/manifest.jsonl")),
        ])
        .unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ckpt(&self) -> PathBuf {
        self.p("run").join(FINAL_CHECKPOINT)
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_anoncodec");
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
    let status = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE as i32));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["train", "--toy", "--manifest", s(&dir.path().join("missing.jsonl")), "--out", s(&dir.path().join("r"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA as i32));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth-data", "--speakers", "0"]).unwrap_err().0, EXIT_USAGE);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nlr = 0.0\n").unwrap();
    assert_eq!(run(&["--config", s(&bad), "train"]).unwrap_err().0, EXIT_USAGE);
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["--config", s(&bad), "train"]).unwrap_err().0, EXIT_USAGE);
}

#[test]
fn train_resume_pool_anonymize_evaluate() {
    let su = Setup::new();
    let ck = Checkpoint::load(su.ckpt()).unwrap();
    assert_eq!(ck.step, 2);
    assert_eq!(ck.config.seed, 5);
    assert_eq!(std::fs::read_to_string(su.p("run").join(LOSS_LOG)).unwrap().lines().count(), 2);

    // Resuming with nothing left to do leaves the parameters alone.
    run(&["--out", s(&su.p("run2")), "train", "--resume", s(&su.ckpt())]).unwrap();
    let again = Checkpoint::load(su.p("run2").join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(again.step, 2);
    assert_eq!(again.generator, ck.generator);
    assert_eq!(again.discriminator, ck.discriminator);

    // Pool building is reproducible.
    let pool = std::fs::read(su.p("pool.bin")).unwrap();
    run(&["--out", s(&su.p("pool2.bin")), "build-pool", "--checkpoint", s(&su.ckpt()), "--manifest", s(&su.p("corpus/manifest.jsonl"))])
        .unwrap();
    assert_eq!(std::fs::read(su.p("pool2.bin")).unwrap(), pool);

    // Anonymization keeps names and durations and is repeatable.
    let manifest = su.p("corpus/manifest.jsonl");
    for out in ["anon1", "anon2"] {
        run(&["--out", s(&su.p(out)), "anonymize", "--checkpoint", s(&su.ckpt()), "--pool", s(&su.p("pool.bin")), "--manifest", s(&manifest)])
            .unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(su.p("anon1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in &names {
        let a = std::fs::read(su.p("anon1").join(n)).unwrap();
        assert_eq!(a, std::fs::read(su.p("anon2").join(n)).unwrap());
        let orig = load_wav(su.p("corpus").join(n)).unwrap();
        let anon = load_wav(su.p("anon1").join(n)).unwrap();
        assert!(orig.len().abs_diff(anon.len()) <= 320);
    }

    // A different seed changes the output.
    run(&["--seed", "99", "--out", s(&su.p("anon3")), "anonymize", "--checkpoint", s(&su.ckpt()), "--pool", s(&su.p("pool.bin")), "--manifest", s(&manifest)])
        .unwrap();
    assert_ne!(std::fs::read(su.p("anon1").join(&names[0])).unwrap(), std::fs::read(su.p("anon3").join(&names[0])).unwrap());

    // An empty input directory is not an error.
    std::fs::create_dir(su.p("empty")).unwrap();
    run(&["--out", s(&su.p("anon_empty")), "anonymize", "--checkpoint", s(&su.ckpt()), "--pool", s(&su.p("pool.bin")), "--input-dir", s(&su.p("empty"))])
        .unwrap();

    // A missing pool is a data error.
    let err = run(&["anonymize", "--checkpoint", s(&su.ckpt()), "--pool", s(&su.p("nope.bin")), "--manifest", s(&manifest)]).unwrap_err();
    assert_eq!(err.0, EXIT_DATA);

    // Passthrough evaluation: the anonymized arm equals the baseline, and the
    // dumped scores reproduce the reported EER.
    let report = su.p("report.json");
    let scores = su.p("scores.txt");
    run(&[
        "--out",
        s(&report),
        "evaluate",
        "--checkpoint",
        s(&su.ckpt()),
        "--pool",
        s(&su.p("pool.bin")),
        "--manifest",
        s(&manifest),
        "--num-target",
        "10",
        "--num-nontarget",
        "10",
        "--scores",
        s(&scores),
        "--passthrough",
    ])
    .unwrap();
    let out: EvaluationOutput = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(out.report.eer_percent, out.report.baseline_eer_percent);
    assert_eq!(out.report.token_preservation, 1.0);
    assert_eq!(out.report.num_target_trials, 10);
    assert_eq!(out.run_config, ck.config);
    let text = std::fs::read_to_string(&scores).unwrap();
    let anon: Vec<(f64, bool)> = text
        .lines()
        .filter(|l| l.starts_with("anonymized "))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[4].parse().unwrap(), f[3] == "target")
        })
        .collect();
    assert_eq!(anon.len(), 20);
    assert_eq!(text.lines().count(), 40);
    assert_eq!(compute_eer(&anon).unwrap().eer_percent, out.report.eer_percent);
}

#[test]
fn nan_guard_exits_with_numeric_code() {
    let su = Setup::new();
    let mut ck = Checkpoint::load(su.ckpt()).unwrap();
    let id = ck.generator.id("head.emo.w").unwrap();
    ck.generator.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    ck.config.optim.steps = 3;
    let poisoned = su.p("poisoned.ckpt");
    ck.save(&poisoned).unwrap();
    let out = su.p("nan_run");
    let (code, msg) = run(&["--out", s(&out), "train", "--resume", s(&poisoned)]).unwrap_err();
    assert_eq!(code, EXIT_NUMERIC);
    assert!(msg.contains("emo"), "{msg}");
    assert!(!out.join(FINAL_CHECKPOINT).exists());
}

#[test]
fn config_file_settings_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY_TOML).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.model.encoder_out_dim, 4);
    assert_eq!(cfg.anon.num_selected, 2);
    assert_eq!(cfg.data.out_dir, dir.path().join("run"));
}
