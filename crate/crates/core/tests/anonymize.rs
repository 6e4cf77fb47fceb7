use anoncodec_core::anonymize::{
    anonymize_utterance, build_pool, draw_pseudo_speaker, mean_direction, pseudo_speaker, utterance_rng, AnonError, AnonSpec,
    PoolEntry, Selection, SpeakerPool,
};
use anoncodec_core::data::{make_synthetic_corpus, Corpus, Manifest, ManifestRecord, SynthConfig};
use anoncodec_core::model::{cosine, CodecConfig, CodecModel, SpeakerEmbedding};
use anoncodec_core::signal::AudioBuffer;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn random_pool(n: usize, d: usize, seed: u64) -> SpeakerPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| PoolEntry {
            id: format!("p{i}"),
            embedding: SpeakerEmbedding::normalized((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        })
        .collect();
    SpeakerPool::new(entries, "random").unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hand-computed mean direction of the selected entries.
fn oracle_mean(pool: &SpeakerPool, selected: &[usize]) -> Vec<f64> {
    let d = pool.dim();
    let mut acc = vec![0.0; d];
    for &i in selected {
        for k in 0..d {
            acc[k] += pool.entries()[i].embedding.vector[k];
        }
    }
    let n = norm(&acc);
    acc.iter().map(|x| x / n).collect()
}

#[test]
fn alpha_endpoints() {
    let pool = random_pool(30, 8, 1);
    let one = AnonSpec { alpha: 1.0, ..AnonSpec::default() };
    let draw = draw_pseudo_speaker(&pool, &one, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mean = oracle_mean(&pool, &draw.selected);
    for (a, b) in draw.speaker.vector.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
    let zero = AnonSpec { alpha: 0.0, ..AnonSpec::default() };
    let draw = draw_pseudo_speaker(&pool, &zero, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for (a, b) in draw.speaker.vector.iter().zip(&draw.random) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((norm(&draw.random) - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mix_is_exact_convex_combination(alpha in 0.0f64..=1.0, seed in 0u64..10_000, m in 1usize..=12) {
        let pool = random_pool(12, 5, 7);
        let spec = AnonSpec { alpha, num_selected: m, ..AnonSpec::default() };
        let draw = draw_pseudo_speaker(&pool, &spec, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(draw.selected.len(), m);
        let mut sorted = draw.selected.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        let mean = oracle_mean(&pool, &draw.selected);
        for k in 0..5 {
            prop_assert!((draw.pool_mean[k] - mean[k]).abs() < 1e-12);
            let want = alpha * mean[k] + (1.0 - alpha) * draw.random[k];
            prop_assert!((draw.mix[k] - want).abs() < 1e-12);
        }
        prop_assert!((draw.speaker.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_alpha_moves_toward_pool_mean(seed in 0u64..10_000) {
        let pool = random_pool(25, 6, 2);
        let mut last = f64::NEG_INFINITY;
        for i in 0..100 {
            let alpha = i as f64 / 99.0;
            let spec = AnonSpec { alpha, ..AnonSpec::default() };
            let draw = draw_pseudo_speaker(&pool, &spec, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let c = cosine(&draw.speaker.vector, &draw.pool_mean);
            prop_assert!(c >= last - 1e-12, "alpha {alpha}: {c} < {last}");
            last = c;
        }
    }
}

#[test]
fn pool_too_small_and_invalid_spec() {
    let pool = random_pool(5, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(pseudo_speaker(&pool, &AnonSpec::default(), &mut rng), Err(AnonError::PoolTooSmall { need: 20, have: 5 })));
    let bad = AnonSpec { alpha: 1.5, num_selected: 2, ..AnonSpec::default() };
    assert!(matches!(pseudo_speaker(&pool, &bad, &mut rng), Err(AnonError::InvalidSpec(_))));
    let bad = AnonSpec { gaussian_sigma: Some(0.0), num_selected: 2, ..AnonSpec::default() };
    assert!(matches!(pseudo_speaker(&pool, &bad, &mut rng), Err(AnonError::InvalidSpec(_))));
}

#[test]
fn utterance_streams_are_independent() {
    let pool = random_pool(40, 16, 5);
    let spec = AnonSpec::default();
    let draws: Vec<SpeakerEmbedding> = (0..100)
        .map(|i| pseudo_speaker(&pool, &spec, &mut utterance_rng(spec.seed, &format!("utt{i}"))).unwrap())
        .collect();
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            assert!(cosine(&draws[i].vector, &draws[j].vector) < 0.999, "{i} vs {j}");
        }
    }
    // Same id and seed reproduce the draw; a different seed does not.
    let again = pseudo_speaker(&pool, &spec, &mut utterance_rng(spec.seed, "utt3")).unwrap();
    assert_eq!(again, draws[3]);
    let other = pseudo_speaker(&pool, &spec, &mut utterance_rng(spec.seed + 1, "utt3")).unwrap();
    assert_ne!(other, draws[3]);
}

#[test]
fn full_pool_with_alpha_one_is_deterministic() {
    let pool = random_pool(20, 8, 9);
    let spec = AnonSpec { alpha: 1.0, num_selected: 20, ..AnonSpec::default() };
    let a = pseudo_speaker(&pool, &spec, &mut utterance_rng(0, "x")).unwrap();
    let b = pseudo_speaker(&pool, &spec, &mut utterance_rng(0, "y")).unwrap();
    for (x, y) in a.vector.iter().zip(&b.vector) {
        assert!((x - y).abs() < 1e-12);
    }
    let all: Vec<usize> = (0..20).collect();
    for (x, y) in a.vector.iter().zip(&oracle_mean(&pool, &all)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn farthest_selection_picks_from_least_similar() {
    let pool = random_pool(30, 6, 4);
    let orig = pool.entries()[0].embedding.clone();
    let mut sims: Vec<(f64, usize)> =
        pool.entries().iter().enumerate().map(|(i, e)| (cosine(&e.embedding.vector, &orig.vector), i)).collect();
    sims.sort_by(|a, b| a.0.total_cmp(&b.0));
    let allowed: Vec<usize> = sims[..10].iter().map(|s| s.1).collect();
    let spec = AnonSpec { num_selected: 5, selection: Selection::Farthest, ..AnonSpec::default() };
    for seed in 0..20 {
        let draw = draw_pseudo_speaker(&pool, &spec, Some(&orig), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(draw.selected.iter().all(|i| allowed.contains(i)));
    }
    assert!(matches!(
        draw_pseudo_speaker(&pool, &spec, None, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(AnonError::InvalidSpec(_))
    ));
}

#[test]
fn pool_validation_and_file_round_trip() {
    assert!(matches!(SpeakerPool::new(vec![], "x"), Err(AnonError::InvalidPool(_))));
    let not_unit = PoolEntry { id: "a".into(), embedding: SpeakerEmbedding { vector: vec![1.0, 1.0], normalized: false } };
    assert!(matches!(SpeakerPool::new(vec![not_unit], "x"), Err(AnonError::InvalidPool(_))));
    let a = PoolEntry { id: "a".into(), embedding: SpeakerEmbedding::normalized(vec![1.0, 0.0]) };
    let b = PoolEntry { id: "b".into(), embedding: SpeakerEmbedding::normalized(vec![1.0, 0.0, 0.0]) };
    assert!(matches!(SpeakerPool::new(vec![a, b], "x"), Err(AnonError::DimensionMismatch(_))));

    let pool = random_pool(7, 5, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pool.bin");
    pool.save(&p).unwrap();
    let back = SpeakerPool::load(&p).unwrap();
    assert_eq!(back.len(), 7);
    assert_eq!(back.source(), "random");
    for (x, y) in back.entries().iter().zip(pool.entries()) {
        assert_eq!(x.id, y.id);
        for (u, v) in x.embedding.vector.iter().zip(&y.embedding.vector) {
            assert!((u - v).abs() < 1e-6);
        }
    }
    let first = std::fs::read(&p).unwrap();
    back.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let mut bytes = first.clone();
    bytes[0] = b'X';
    assert!(matches!(SpeakerPool::from_bytes(&bytes), Err(AnonError::InvalidPool(_))));
    assert!(matches!(SpeakerPool::from_bytes(&first[..first.len() - 3]), Err(AnonError::InvalidPool(_))));
}

#[test]
fn mean_direction_of_identical_vectors() {
    let v = [0.6, 0.0, 0.8];
    let m = mean_direction([&v[..], &v[..]]);
    for (a, b) in m.iter().zip(&v) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn corpus(dir: &std::path::Path, speakers: usize, utts: usize) -> Corpus {
    let m = make_synthetic_corpus(dir, speakers, utts, 3, &SynthConfig { duration_s: 0.4, ..SynthConfig::default() }).unwrap();
    Corpus::load(m).unwrap()
}

#[test]
fn build_pool_averages_per_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 3, 2);
    let model = CodecModel::new(&tiny(), 3, 1).unwrap();
    let pool = build_pool(&c, &model).unwrap();
    assert_eq!(pool.len(), 3);
    assert_eq!(pool.dim(), 3);
    for (s, entry) in pool.entries().iter().enumerate() {
        assert_eq!(entry.id, c.manifest.speakers[s]);
        let embs: Vec<Vec<f64>> =
            (0..c.len()).filter(|&i| c.label(i) == s).map(|i| model.embed(&c.audio[i]).unwrap().vector).collect();
        let mut acc = vec![0.0; 3];
        for e in &embs {
            acc.iter_mut().zip(e).for_each(|(a, x)| *a += x);
        }
        let n = norm(&acc);
        for (a, b) in entry.embedding.vector.iter().zip(&acc) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    // One speaker with one utterance: the entry is that embedding.
    let m1 = Manifest::new(vec![c.manifest.records[0].clone()], c.manifest.base_dir.clone()).unwrap();
    let c1 = Corpus::from_parts(m1, vec![c.audio[0].clone()]).unwrap();
    let p1 = build_pool(&c1, &model).unwrap();
    let e = model.embed(&c.audio[0]).unwrap();
    for (a, b) in p1.entries()[0].embedding.vector.iter().zip(&e.vector) {
        assert!((a - b).abs() < 1e-12);
    }

    let empty = Corpus::from_parts(Manifest::new(Vec::<ManifestRecord>::new(), ".").unwrap(), vec![]).unwrap();
    assert!(matches!(build_pool(&empty, &model), Err(AnonError::EmptyManifest)));
}

#[test]
fn anonymized_utterance_keeps_duration_and_codes() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 3, 1);
    let model = CodecModel::new(&tiny(), 3, 1).unwrap();
    let pool = build_pool(&c, &model).unwrap();
    let spec = AnonSpec { num_selected: 2, ..AnonSpec::default() };
    for len in [320, 1000, 6400] {
        let buf = AudioBuffer::new(c.audio[0].samples[..len].to_vec(), 16000).unwrap();
        let a = anonymize_utterance(&buf, &model, &pool, &spec, &mut utterance_rng(0, "a")).unwrap();
        let b = anonymize_utterance(&buf, &model, &pool, &spec, &mut utterance_rng(0, "b")).unwrap();
        assert_eq!(a.audio.len(), len.div_ceil(320) * 320);
        assert!(a.audio.len() - len < 320);
        // The speaker swap happens after quantization.
        let direct = model.analyze(&buf).unwrap().quant.indices;
        assert_eq!(a.codes, direct);
        assert_eq!(b.codes, direct);
        assert_ne!(a.pseudo_speaker, b.pseudo_speaker);
    }

    let pass = AnonSpec { passthrough: true, ..spec.clone() };
    let out = anonymize_utterance(&c.audio[0], &model, &pool, &pass, &mut utterance_rng(0, "a")).unwrap();
    assert_eq!(out.audio, c.audio[0]);
    assert!(out.pseudo_speaker.is_none());

    let wrong = random_pool(4, 5, 1);
    assert!(matches!(
        anonymize_utterance(&c.audio[0], &model, &wrong, &spec, &mut utterance_rng(0, "a")),
        Err(AnonError::DimensionMismatch(_))
    ));
    let short = AudioBuffer::new(vec![0.0; 100], 16000).unwrap();
    assert!(matches!(
        anonymize_utterance(&short, &model, &pool, &spec, &mut utterance_rng(0, "a")),
        Err(AnonError::Model(_))
    ));
}
