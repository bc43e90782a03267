use gsam::checkpoint;
use gsam::data::{collate, generate_shapes, AugmentConfig, Sample};
use gsam::train::{train_step, train_until, Adam, TrainState};
use gsam::{Exec, Model, ModelConfig, TrainConfig};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        lr0: 2e-3,
        seed: 7,
        augment: AugmentConfig {
            crop: Some((16, 16)),
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data() -> (Vec<Sample>, Vec<Sample>) {
    let mut all = generate_shapes(10, (24, 24), 3, 3).unwrap();
    let val = all.split_off(8);
    (all, val)
}

#[test]
fn fixed_batch_loss_never_increases() {
    let samples = generate_shapes(4, (16, 16), 3, 11).unwrap();
    let (images, labels) = collate(&samples).unwrap();
    let mut monotone = 0;
    let mut traces = Vec::new();
    for seed in 0..3 {
        let mut model = Model::new(&ModelConfig::tiny(), seed).unwrap();
        let mut adam = Adam::new();
        let losses: Vec<f64> = (0..21)
            .map(|_| train_step(&mut model, &mut adam, &images, &labels, 1e-3, Exec::default()).unwrap())
            .collect();
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        traces.push(losses);
    }
    assert!(monotone >= 2, "only {monotone} of 3 seeds were monotone: {traces:?}");
}

#[test]
fn resumed_run_matches_the_unbroken_run() {
    let (train, val) = data();
    let cfg = config(4);

    let mut model = Model::new(&ModelConfig::tiny(), 1).unwrap();
    let mut state = TrainState::default();
    train_until(&mut model, &train, &val, &cfg, &mut state, 4, Exec::Sequential, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.gsam");
    let mut first = Model::new(&ModelConfig::tiny(), 1).unwrap();
    let mut partial = TrainState::default();
    train_until(&mut first, &train, &val, &cfg, &mut partial, 2, Exec::Sequential, |m, s| {
        checkpoint::save_resumable(&path, m, &cfg, s)
    })
    .unwrap();
    assert_eq!(partial.next_epoch, 2);
    drop(first);

    let ckpt = checkpoint::load(&path).unwrap();
    let (saved_cfg, mut resumed) = ckpt.trainer.unwrap();
    assert_eq!(saved_cfg, cfg);
    let mut second = ckpt.model;
    train_until(&mut second, &train, &val, &saved_cfg, &mut resumed, 4, Exec::Sequential, |_, _| Ok(())).unwrap();

    assert_eq!(resumed.log, state.log);
    assert_eq!(second.params, model.params);
    assert_eq!(resumed.adam, state.adam);
}

#[test]
fn training_is_identical_across_exec_modes() {
    let (train, val) = data();
    let cfg = config(2);
    let run = |exec| {
        let mut model = Model::new(&ModelConfig::tiny(), 4).unwrap();
        let mut state = TrainState::default();
        train_until(&mut model, &train, &val, &cfg, &mut state, 2, exec, |_, _| Ok(())).unwrap();
        (model.params, state.log)
    };
    let (p1, l1) = run(Exec::Sequential);
    let (p2, l2) = run(Exec::Parallel);
    assert_eq!(l1, l2);
    for ((n1, a), (n2, b)) in p1.iter().zip(p2.iter()) {
        assert_eq!(n1, n2);
        assert!(a.value.bit_eq(&b.value), "{n1}");
    }
}

#[test]
fn frozen_tensors_stay_put_and_the_rest_moves() {
    let (train, val) = data();
    let mut model = Model::new(&ModelConfig::tiny(), 2).unwrap();
    let init = model.params.clone();
    let mut state = TrainState::default();
    train_until(&mut model, &train, &val, &config(2), &mut state, 2, Exec::default(), |_, _| Ok(())).unwrap();

    let mut changed = Vec::new();
    for (name, p) in model.params.iter() {
        let before = &init.get(name).unwrap().value;
        if p.frozen {
            assert!(p.value.bit_eq(before), "frozen {name} changed");
        } else if !p.value.bit_eq(before) {
            changed.push(name.to_string());
        }
    }
    for needle in ["encoder.peg.", ".adapter.", "cnn.", "decoder."] {
        assert!(changed.iter().any(|n| n.contains(needle)), "no {needle} tensor changed");
    }
    assert!(init.iter().any(|(_, p)| p.frozen));
}

#[test]
fn nonfinite_input_is_reported() {
    let (mut train, val) = data();
    train[0].image = gsam::FeatureMap::new(train[0].image.tensor().map(|_| f64::NAN)).unwrap();
    let mut model = Model::new(&ModelConfig::tiny(), 0).unwrap();
    let mut state = TrainState::default();
    let err = train_until(&mut model, &train, &val, &config(1), &mut state, 1, Exec::default(), |_, _| Ok(()));
    assert!(matches!(err, Err(gsam::Error::Numeric(_))), "{err:?}");
}
