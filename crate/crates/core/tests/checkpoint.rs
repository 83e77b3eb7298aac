use std::path::PathBuf;

use longscape::checkpoint::{self, CheckpointError, MAGIC};
use longscape::data::ImageBatch;
use longscape::loss::LossWeights;
use longscape::optim::TrainSchedule;
use longscape::{Error, GeneratorConfig, Models, ParamStore, TrainState, Trainer};
use longscape_tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trainer() -> Trainer {
    let models = Models::new(GeneratorConfig::scaled(0.25).unwrap()).unwrap();
    let schedule = TrainSchedule {
        warmup_iters: 2,
        n_cir_threshold: 1,
        batch: 2,
        ..TrainSchedule::default()
    };
    Trainer::new(models, schedule, LossWeights::default(), 5).unwrap()
}

fn batch(k: u64) -> ImageBatch {
    let samples: Vec<Tensor<f32>> = (0..2)
        .map(|s| Tensor::rand_uniform(&[3, 32, 64], -1.0, 1.0, 10 * k + s).unwrap())
        .collect();
    ImageBatch::stack(&samples, vec![PathBuf::from("a"), PathBuf::from("b")], vec![0, 1]).unwrap()
}

fn trained(steps: u64) -> (Trainer, TrainState<f32>) {
    let t = trainer();
    let mut state = TrainState::init(&t.models, 5).unwrap();
    for k in 0..steps {
        t.train_step(&mut state, &batch(k)).unwrap();
    }
    state.epoch = 4;
    (t, state)
}

fn bits<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    T::to_le_bytes_vec(t.data(), &mut out);
    out
}

fn assert_same_store<T: Element>(a: &ParamStore<T>, b: &ParamStore<T>) {
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
    for (name, p) in a.iter() {
        let q = b.get(name).unwrap();
        assert_eq!(bits(&p.value), bits(&q.value), "{name}");
        assert_eq!(bits(&p.m), bits(&q.m), "{name}.m");
        assert_eq!(bits(&p.v), bits(&q.v), "{name}.v");
    }
}

#[test]
fn round_trip_is_bitwise_exact() {
    let (t, state) = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lsc");
    checkpoint::save(&state, t.fingerprint(), &path).unwrap();
    let back: TrainState<f32> = checkpoint::load(&path, Some(t.fingerprint())).unwrap();
    assert_eq!((back.step, back.epoch), (3, 4));
    assert_same_store(&state.gen, &back.gen);
    assert_same_store(&state.global, &back.global);
    assert_same_store(&state.local, &back.local);
    assert!(state.global.steps > 0);
    assert_eq!(&std::fs::read(&path).unwrap()[..8], MAGIC);
}

#[test]
fn double_precision_round_trip() {
    let t = trainer();
    let state = TrainState::<f64>::init(&t.models, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.lsc");
    checkpoint::save(&state, 7, &path).unwrap();
    let back: TrainState<f64> = checkpoint::load(&path, None).unwrap();
    assert_eq!(back, state);
    let wrong = checkpoint::load::<f32>(&path, None);
    assert!(matches!(wrong, Err(CheckpointError::Malformed(_))));
}

#[test]
fn resumed_training_repeats_the_uninterrupted_run() {
    let (t, mut straight) = trained(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.lsc");
    checkpoint::save(&straight, t.fingerprint(), &path).unwrap();
    let mut resumed: TrainState<f32> = checkpoint::load(&path, Some(t.fingerprint())).unwrap();
    for k in 2..5 {
        let a = t.train_step(&mut straight, &batch(k)).unwrap();
        let b = t.train_step(&mut resumed, &batch(k)).unwrap();
        assert!(a.l_d.is_some());
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.l_rec.to_bits(), b.l_rec.to_bits());
        assert_eq!(a.l_adv_g.map(f64::to_bits), b.l_adv_g.map(f64::to_bits));
        assert_eq!(a.l_d.map(f64::to_bits), b.l_d.map(f64::to_bits));
    }
    assert_same_store(&straight.gen, &resumed.gen);
}

fn saved_bytes() -> Vec<u8> {
    let t = trainer();
    let state = TrainState::<f32>::init(&t.models, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.lsc");
    checkpoint::save(&state, 1, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn truncated_files_fail_cleanly() {
    let bytes = saved_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cuts: Vec<usize> = (0..50).map(|_| rng.random_range(0..bytes.len())).collect();
    cuts.extend([0, 7, 8, 11, 12, bytes.len() - 1]);
    for cut in cuts {
        match checkpoint::decode(&bytes[..cut]) {
            Err(CheckpointError::Truncated(msg)) => assert!(cut >= 8, "{cut}: {msg}"),
            Err(CheckpointError::BadMagic) => assert!(cut < 8),
            other => panic!("cut at {cut}: {:?}", other.map(|(h, _)| h)),
        }
    }
}

#[test]
fn corrupted_bytes_never_panic() {
    let bytes = saved_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let mut b = bytes.clone();
        let at = rng.random_range(8..200.min(b.len()));
        b[at] = rng.random();
        if let Ok((h, e)) = checkpoint::decode(&b) {
            let _ = checkpoint::from_entries::<f32>(&h, &e, None);
        }
    }
}

#[test]
fn header_errors() {
    let bytes = saved_bytes();
    assert!(matches!(checkpoint::decode(&[]), Err(CheckpointError::BadMagic)));
    let mut b = bytes.clone();
    b[0] ^= 1;
    assert!(matches!(checkpoint::decode(&b), Err(CheckpointError::BadMagic)));
    let mut b = bytes.clone();
    b[8] += 1;
    assert!(matches!(checkpoint::decode(&b), Err(CheckpointError::Version { found: 2, expected: 1 })));
    let mut b = bytes.clone();
    b.push(0);
    assert!(matches!(checkpoint::decode(&b), Err(CheckpointError::Malformed(_))));
}

#[test]
fn fingerprint_mismatch_is_reported() {
    let (t, state) = trained(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.lsc");
    checkpoint::save(&state, t.fingerprint(), &path).unwrap();
    let other = Trainer::new(
        Models::new(GeneratorConfig::scaled(0.5).unwrap()).unwrap(),
        TrainSchedule::default(),
        LossWeights::default(),
        5,
    )
    .unwrap();
    assert_ne!(other.fingerprint(), t.fingerprint());
    let err = checkpoint::load::<f32>(&path, Some(other.fingerprint())).unwrap_err();
    assert!(matches!(err, CheckpointError::Fingerprint { .. }));
    let err: Error = err.into();
    assert!(err.to_string().contains("fingerprint"));
    assert!(checkpoint::load::<f32>(&path, None).is_ok());
}

#[test]
fn saving_over_a_file_leaves_nothing_else_behind() {
    let (t, state) = trained(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.lsc");
    std::fs::write(&path, b"old").unwrap();
    checkpoint::save(&state, t.fingerprint(), &path).unwrap();
    checkpoint::save(&state, t.fingerprint(), &path).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("c.lsc")]);
    assert!(checkpoint::save(&state, 0, &dir.path().join("missing/x.lsc")).is_err());
}
