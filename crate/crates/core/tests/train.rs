use anoncodec_core::data::{load_manifest, make_synthetic_corpus, Corpus, SynthConfig};
use anoncodec_core::model::CodecConfig;
use anoncodec_core::train::{run_training, split_corpus, Checkpoint, RunConfig, TrainError, Trainer, FINAL_CHECKPOINT, LOSS_LOG};

fn tiny() -> CodecConfig {
    CodecConfig {
        base_channels: 1,
        encoder_out_dim: 4,
        lstm_layers: 1,
        speaker_dim: 3,
        speaker_hidden: 4,
        codebook_size: 4,
        teacher_vocab: 5,
        disc_channels: 1,
        ..CodecConfig::default()
    }
}

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = tiny();
    cfg.optim.batch_size = 2;
    cfg.optim.steps = 4;
    cfg.data.segment_frames = 4;
    cfg.data.holdout_per_speaker = 1;
    cfg
}

fn corpus(dir: &std::path::Path) -> Corpus {
    let cfg = SynthConfig { duration_s: 0.5, ..SynthConfig::default() };
    let m = make_synthetic_corpus(dir, 2, 3, 1, &cfg).unwrap();
    Corpus::load(m).unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::toy();
    let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let partial = RunConfig::from_toml_str("seed = 9\n[optim]\nsteps = 10\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.optim.steps, 10);
    assert_eq!(partial.optim.lr, RunConfig::default().optim.lr);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(RunConfig::from_toml_str("sead = 1\n"), Err(TrainError::ConfigInvalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[optim]\nlearning_rate = 1.0\n"), Err(TrainError::ConfigInvalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[optim]\nlr = -1.0\n"), Err(TrainError::ConfigInvalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[optim]\nbatch_size = 0\n"), Err(TrainError::ConfigInvalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[model]\nnum_quantizers = 1\n"), Err(TrainError::ConfigInvalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[anon]\nalpha = 2.0\n"), Err(TrainError::ConfigInvalid(_))));
}

#[test]
fn config_paths_resolve_against_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[data]\nmanifest = \"corpus/manifest.jsonl\"\nout_dir = \"/abs/out\"\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.data.manifest, dir.path().join("corpus/manifest.jsonl"));
    assert_eq!(cfg.data.out_dir, std::path::PathBuf::from("/abs/out"));
}

#[test]
fn split_holds_out_last_utterances_per_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let (train, held) = split_corpus(&c, 1);
    assert_eq!(train.len(), 4);
    assert_eq!(held.len(), 2);
    for &h in &held {
        let later = (h + 1..c.len()).any(|j| c.label(j) == c.label(h));
        assert!(!later, "held-out utterance {h} is not the last of its speaker");
    }
    // Never holds out a speaker's only training utterance.
    let (train, held) = split_corpus(&c, 10);
    assert_eq!((train.len(), held.len()), (2, 4));
}

#[test]
fn learning_rate_decays_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run();
    cfg.optim.lr_decay = 0.5;
    let t = Trainer::new(cfg, corpus(dir.path())).unwrap();
    // Four training utterances, batch two.
    assert_eq!(t.steps_per_epoch(), 2);
    assert_eq!(t.lr_at(0), 3e-4);
    assert_eq!(t.lr_at(1), 3e-4);
    assert_eq!(t.lr_at(2), 1.5e-4);
    assert_eq!(t.lr_at(5), 7.5e-5);
}

#[test]
fn checkpoint_round_trip_is_byte_stable_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_run(), corpus(&dir.path().join("c"))).unwrap();
    t.train_step().unwrap();
    let ck = t.checkpoint();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 1);
    assert_eq!(back.to_bytes(), bytes);
    back.networks().unwrap();

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(TrainError::CheckpointInvalid(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(TrainError::CheckpointInvalid(_))));
    assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(TrainError::CheckpointInvalid(_))));
}

#[test]
fn training_is_deterministic_and_resume_is_seamless() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("c"));
    let straight = |out: &str| {
        let mut t = Trainer::new(tiny_run(), c.clone()).unwrap();
        let s = run_training(&mut t, &dir.path().join(out)).unwrap();
        assert_eq!(s.reports.len(), 4);
        t.checkpoint().to_bytes()
    };
    let a = straight("a");
    let b = straight("a");
    assert_eq!(a, b);

    // Two steps, save, reload, two more.
    let mut half = tiny_run();
    half.optim.steps = 2;
    let mut t = Trainer::new(half, c.clone()).unwrap();
    let out = dir.path().join("a");
    run_training(&mut t, &out).unwrap();
    let mut ck = Checkpoint::load(out.join(FINAL_CHECKPOINT)).unwrap();
    ck.config.optim.steps = 4;
    let mut resumed = Trainer::resume(ck, c.clone()).unwrap();
    let s = run_training(&mut resumed, &out).unwrap();
    assert_eq!(s.reports.len(), 2);
    assert_eq!(resumed.checkpoint().to_bytes(), a);
    let log = std::fs::read_to_string(out.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run();
    cfg.data.checkpoint_every = 2;
    let mut t = Trainer::new(cfg, corpus(&dir.path().join("c"))).unwrap();
    let out = dir.path().join("run");
    run_training(&mut t, &out).unwrap();
    assert!(out.join("step0000002.ckpt").is_file());
    assert!(out.join(FINAL_CHECKPOINT).is_file());
    let ck = Checkpoint::load(out.join("step0000002.ckpt")).unwrap();
    assert_eq!(ck.step, 2);
}

#[test]
fn non_finite_loss_aborts_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_run(), corpus(&dir.path().join("c"))).unwrap();
    let store = t.generator_mut();
    let id = store.id("head.emo.w").unwrap();
    store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let out = dir.path().join("run");
    match run_training(&mut t, &out) {
        Err(TrainError::NonFiniteLoss { step, term }) => {
            assert_eq!(step, 0);
            assert_eq!(term, "emo");
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
    assert!(!out.join(FINAL_CHECKPOINT).exists());
}

#[test]
fn heldout_accuracy_is_a_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny_run(), corpus(&dir.path().join("c"))).unwrap();
    let acc = t.heldout_accuracy().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let manifest = load_manifest(dir.path().join("c/manifest.jsonl")).unwrap();
    assert_eq!(manifest.num_speakers(), 2);
}
