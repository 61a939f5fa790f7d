use std::time::Instant;

use ndarray::Array2;
use oodsim_core::data::{build_windows, synth_generate, Dataset, NormStats, SynthConfig};
use oodsim_core::model::{prediction_loss, total_loss, Batch, ModelConfig, WindowInput, WorldModel};
use oodsim_core::tape::Tape;
use oodsim_core::train::{
    compute_metrics, evaluate, frames, model_grad_check, train, Checkpoint, Prepared, Protocol, Scored, SplitConfig,
    TrainConfig, Trainer,
};

fn world(seed: u64) -> Dataset {
    synth_generate(seed, &SynthConfig::default()).unwrap().into()
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig { model: ModelConfig::tiny(8, 3, 2), max_epochs: 3, patience: 2, seed, ..Default::default() }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let data = world(3);
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(8, 3, 2) };
    let model = WorldModel::for_dataset(cfg, &data, 5).unwrap();
    let stats = NormStats::fit(&data.panel, 0..48).unwrap();
    let prepared = Prepared::new(&model, &data, stats, &[]).unwrap();
    // windows late enough that most states have active policies
    let windows: Vec<_> = build_windows(&data.panel, 3, 2, 30..48, &[0, 5, 11]).unwrap().into_iter().step_by(4).collect();
    let inputs: Vec<WindowInput> = windows.iter().map(|w| prepared.window_input(w)).collect();
    assert!(inputs.iter().flat_map(|w| &w.tokens).any(|t| !prepared.sets[t.policy_set].is_empty()));
    let frames = frames(&prepared.inputs);
    let batch = Batch { graph: &data.graph, frames: &frames, policy_sets: &prepared.sets, windows: &inputs };
    let target = prepared.targets(&windows).into_shape_with_order((windows.len() * 2, 1)).unwrap();

    let start = Instant::now();
    let report = model_grad_check(&model, &batch, &target, 1.0, 1e-5).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    assert!(report.groups.iter().any(|g| g.name == "codebook.codes"));
    assert!(report.groups.iter().any(|g| g.name.starts_with("kg.")));
    for g in &report.groups {
        assert!(g.max_rel < 1e-4, "{} rel {} abs {}", g.name, g.max_rel, g.max_abs);
    }
}

#[test]
fn prediction_loss_matches_loop() {
    let pred = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.7 - j as f64).sin());
    let y = Array2::from_shape_fn((6, 2), |(i, j)| (i + j) as f64 * 0.1);
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = prediction_loss(&mut tape, p, y.clone()).unwrap();
    let mut expect = 0.0;
    for i in 0..6 {
        for j in 0..2 {
            expect += (pred[[i, j]] - y[[i, j]]).powi(2);
        }
    }
    assert!((tape.scalar(l) - expect / 6.0).abs() < 1e-14);

    let mut tape = Tape::new();
    let p = tape.constant(Array2::from_elem((1, 1), 3.0));
    let l = prediction_loss(&mut tape, p, Array2::zeros((1, 1))).unwrap();
    assert_eq!(tape.scalar(l), 9.0);
    let bad = tape.constant(Array2::zeros((2, 1)));
    assert!(prediction_loss(&mut tape, bad, Array2::zeros((3, 1))).is_err());
}

#[test]
fn total_loss_weights_commitment() {
    let mut tape = Tape::new();
    let p = tape.constant(Array2::from_elem((1, 1), 0.5));
    let v = tape.constant(Array2::from_elem((1, 1), 0.2));
    let one = total_loss(&mut tape, p, Some(v), 1.0);
    assert!((tape.scalar(one) - 0.7).abs() < 1e-15);
    let zero = total_loss(&mut tape, p, Some(v), 0.0);
    assert_eq!(tape.scalar(zero), 0.5);
    let z = tape.constant(Array2::zeros((1, 1)));
    let v = tape.constant(Array2::from_elem((1, 1), 0.1));
    let two = total_loss(&mut tape, z, Some(v), 2.0);
    assert!((tape.scalar(two) - 0.2).abs() < 1e-15);
}

#[test]
fn same_seed_same_checkpoint() {
    let data = world(1);
    let a = train(&data, &quick_config(7)).unwrap();
    let b = train(&data, &quick_config(7)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.hash(), b.hash());
    let c = train(&data, &quick_config(8)).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let data = world(2);
    let ckpt = train(&data, &quick_config(1)).unwrap();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let prepared = Prepared::new(&ckpt.model, &data, ckpt.norm.clone(), &[]).unwrap();
    let windows = build_windows(&data.panel, 3, 2, 40..60, &[0, 1, 2, 3]).unwrap();
    let before = prepared.predict(&ckpt.model, &data, false, &windows).unwrap();
    let after = prepared.predict(&loaded.model, &data, false, &windows).unwrap();
    assert_eq!(before.as_slice().unwrap(), after.as_slice().unwrap());

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn early_stopping_keeps_earliest_best() {
    let data = world(4);
    // a vanishing learning rate and no codebook leave validation MAE flat after the first epoch
    let mut cfg = quick_config(3);
    cfg.adam.lr = 1e-300;
    cfg.max_epochs = 50;
    cfg.patience = 4;
    cfg.model.dropout = 0.0;
    cfg.model.ablations.no_vq = true;
    let ckpt = train(&data, &cfg).unwrap();
    assert_eq!(ckpt.history.len(), 5);
    assert_eq!(ckpt.best_epoch, 1);
}

#[test]
fn evaluation_protocols() {
    let data = world(5);
    let id = train(&data, &quick_config(2)).unwrap();
    let report = evaluate(&id, &data, Protocol::Id).unwrap();
    assert_eq!(report.windows, 12 * (12 - 2 + 1));
    for m in [&report.normalized, &report.raw, &report.persistence_normalized] {
        assert!(m.rmse >= m.mae && m.rmse_1_3 >= m.mae_1_3 && m.mae >= 0.0);
        assert_eq!(m.mae_4_6, 0.0);
    }
    assert!(matches!(evaluate(&id, &data, Protocol::Ood), Err(oodsim_core::Error::SplitMismatch(_))));

    let mut cfg = quick_config(2);
    cfg.split = SplitConfig { protocol: Protocol::Ood, ood_test_count: 3, ..Default::default() };
    let ood = train(&data, &cfg).unwrap();
    assert_eq!(ood.split.test_states.len(), 3);
    let report = evaluate(&ood, &data, Protocol::Ood).unwrap();
    assert_eq!(report.normalized.per_state.len(), 3);
    assert!(report.normalized.per_state.keys().all(|s| ood.split.test_states.contains(s)));
}

#[test]
fn ood_training_never_sees_held_out_features() {
    let data = world(6);
    let mut cfg = quick_config(4);
    cfg.split = SplitConfig { protocol: Protocol::Ood, ood_test_count: 4, ..Default::default() };
    let trainer = Trainer::new(&data, &cfg).unwrap();
    for s in &trainer.split.test_states {
        let i = data.panel.state_index(s).unwrap();
        assert!(trainer.prepared.train_inputs.index_axis(ndarray::Axis(0), i).iter().all(|&v| v == 0.0));
        assert!(trainer.train_windows().iter().all(|w| w.state != i));
    }
}

#[test]
fn constant_mean_predictor_rmse_is_target_std() {
    let targets = [1.0, 4.0, 2.0, 9.0, 3.0, 5.0];
    let mean = targets.iter().sum::<f64>() / 6.0;
    let std = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
    let scored: Vec<Scored> =
        targets.iter().enumerate().map(|(i, &t)| Scored { state: 0, horizon: i, prediction: mean, target: t }).collect();
    let m = compute_metrics(&scored, &["A".to_string()]);
    assert!((m.rmse - std).abs() < 1e-12);
}
