use std::collections::BTreeMap;

use driftseg_core::adaptation::AdaptConfig;
use driftseg_core::checkpoint::{load_model, save_model, Container, NamedTensor};
use driftseg_core::data::{benchmark_domains, synth_domain, AugmentPolicy, Sample};
use driftseg_core::model::{images_to_tensor, Model, ModelConfig, ModelState};
use driftseg_core::nn::{BnMode, ParameterStore, Tape, Tensor};
use driftseg_core::training::*;
use driftseg_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn median_frequency_examples() {
    let w = median_freq_weights(&[500, 300, 200, 0, 0]).unwrap();
    let expect_present = [0.6, 1.0, 1.5];
    for (a, b) in w.iter().zip(expect_present) {
        assert!((a - b).abs() < 1e-12, "{w:?}");
    }
    assert!((w[3] - 15.0).abs() < 1e-12 && (w[4] - 15.0).abs() < 1e-12);
    assert_eq!(median_freq_weights(&[7; 5]).unwrap(), [1.0; 5]);
    let with_absent = median_freq_weights(&[10, 10, 10, 0, 10]).unwrap();
    assert_eq!(&with_absent[..3], &[1.0; 3]);
    assert_eq!(with_absent[3], 10.0);
    assert!(median_freq_weights(&[0; 5]).is_err());
}

fn scalar_store(values: &[f64]) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    store.insert("x", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    store
}

fn set_grad(store: &mut ParameterStore<f64>, g: &[f64]) {
    let p = store.iter_mut().next().unwrap();
    p.grad = Tensor::new(vec![g.len()], g.to_vec()).unwrap();
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut store = scalar_store(&[0.3, -2.0]);
    let mut state = AdamState::new(&store, AdamConfig::default());
    for _ in 0..3 {
        set_grad(&mut store, &[0.0, 0.0]);
        adam_step(&mut store, &mut state, 0.1).unwrap();
    }
    assert_eq!(store.iter().next().unwrap().value.data(), &[0.3, -2.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = scalar_store(&[1.0, 1.0, 1.0]);
    let mut state = AdamState::new(&store, AdamConfig::default());
    set_grad(&mut store, &[0.5, -3.0, 1e-3]);
    adam_step(&mut store, &mut state, 0.01).unwrap();
    let v = store.iter().next().unwrap().value.data().to_vec();
    // m_hat / sqrt(v_hat) = sign(g), up to eps.
    assert!((v[0] - 0.99).abs() < 1e-8);
    assert!((v[1] - 1.01).abs() < 1e-8);
    assert!((v[2] - 0.99).abs() < 1e-6);
}

#[test]
fn adam_matches_scalar_trace() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
    let grads = [0.7, -0.2];
    let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    let mut store = scalar_store(&[1.5]);
    let mut state = AdamState::new(&store, AdamConfig::default());
    for g in grads {
        set_grad(&mut store, &[g]);
        adam_step(&mut store, &mut state, lr).unwrap();
    }
    assert!((store.iter().next().unwrap().value.data()[0] - theta).abs() <= 1e-12);
    assert_eq!(state.t, 2);
}

#[test]
fn adam_aborts_on_nan_gradient() {
    let mut store = scalar_store(&[1.0]);
    let mut state = AdamState::new(&store, AdamConfig::default());
    set_grad(&mut store, &[f64::NAN]);
    let err = adam_step(&mut store, &mut state, 0.1).unwrap_err();
    assert!(matches!(err, Error::Diverged(ref m) if m.contains("`x`")), "{err}");
    assert_eq!(state.t, 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let mut c = TrainConfig::default();
    c.swa.enabled = true;
    c.epochs = 5;
    assert!(c.validate().is_err());
    c.epochs = 10;
    assert!(c.validate().is_ok());
    c.swa.swa_lr = 0.0;
    assert!(c.validate().is_err());
    let c = TrainConfig { lr: -1.0, ..TrainConfig::default() };
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epocs": 3}"#).is_err());
}

#[test]
fn swa_phase_runs_at_constant_rate_for_the_tail() {
    let mut c = TrainConfig {
        epochs: 12,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    c.swa = SwaConfig {
        enabled: true,
        num_snapshots: 4,
        swa_lr: 0.005,
    };
    let sched = lr_schedule(&c);
    let at_swa: Vec<usize> = sched.iter().filter(|(_, &lr)| lr == 0.005).map(|(&e, _)| e).collect();
    assert_eq!(at_swa, vec![8, 9, 10, 11]);
    assert_eq!(c.swa_start(), Some(8));
}

fn toy_samples(n: usize, size: usize) -> Vec<Sample> {
    synth_domain(&benchmark_domains()[0], n, size, size).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 2e-3,
        batch_size: 5,
        augment_policy: AugmentPolicy::none(),
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_tiny_set() {
    let data = toy_samples(10, 32);
    let refs: Vec<&Sample> = data.iter().collect();
    let model = Model::build_two_stream(&ModelConfig::new(2, 8), 1).unwrap();
    let out = train(model, &refs, &small_config(200)).unwrap();
    let first = out.log[0].mean_loss;
    let last = out.log.last().unwrap().mean_loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    assert_eq!(out.log.len(), 200);
    assert!(out.checkpoints.snapshots.is_empty());
}

#[test]
fn training_is_deterministic() {
    let data = toy_samples(6, 32);
    let refs: Vec<&Sample> = data.iter().collect();
    let mut config = small_config(3);
    config.batch_size = 2;
    config.augment_policy = AugmentPolicy::default();
    let run = || {
        let model = Model::build_two_stream(&ModelConfig::new(2, 4), 3).unwrap();
        train(model, &refs, &config).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.state(), b.model.state());
    assert_eq!(a.log, b.log);
    config.seed += 1;
    let model = Model::build_two_stream(&ModelConfig::new(2, 4), 3).unwrap();
    let c = train(model, &refs, &config).unwrap();
    assert_ne!(a.model.state(), c.model.state());
}

#[test]
fn stratified_training_uses_single_domain_batches() {
    let specs = benchmark_domains();
    let mut data = synth_domain(&specs[0], 4, 32, 32).unwrap();
    data.extend(synth_domain(&specs[3], 4, 32, 32).unwrap());
    let refs: Vec<&Sample> = data.iter().collect();
    let config = TrainConfig {
        sampler: SamplerKind::Stratified,
        batch_size: 2,
        ..small_config(2)
    };
    let mut trainer = Trainer::new(Model::build_two_stream(&ModelConfig::new(2, 4), 3).unwrap(), &refs, config).unwrap();
    while !trainer.finished() {
        let plan = trainer.plan().unwrap();
        assert_eq!(plan.batches.len(), 4);
        for b in &plan.batches {
            assert!(b.indices.iter().all(|&i| refs[i].domain_id == b.domain));
        }
        trainer.run_epoch(1e-3).unwrap();
    }
}

#[test]
fn swa_training_collects_tail_snapshots() {
    let data = toy_samples(4, 32);
    let refs: Vec<&Sample> = data.iter().collect();
    let mut config = small_config(5);
    config.batch_size = 2;
    config.swa = SwaConfig {
        enabled: true,
        num_snapshots: 3,
        swa_lr: 0.004,
    };
    let out = train(Model::build_two_stream(&ModelConfig::new(2, 4), 2).unwrap(), &refs, &config).unwrap();
    let epochs: Vec<usize> = out.checkpoints.snapshots.iter().map(|s| s.epoch).collect();
    assert_eq!(epochs, vec![2, 3, 4]);
    let lrs: Vec<f64> = out.log.iter().map(|l| l.lr).collect();
    assert_eq!(lrs, vec![2e-3, 2e-3, 0.004, 0.004, 0.004]);
    assert_eq!(out.checkpoints.snapshots.last().unwrap().state, out.model.state());
}

#[test]
fn empty_training_set_is_rejected() {
    let model = Model::build_two_stream(&ModelConfig::new(2, 4), 2).unwrap();
    assert!(matches!(train(model, &[], &small_config(1)), Err(Error::Empty(_))));
}

fn random_state(seed: u64) -> ModelState<f32> {
    let mut model = Model::<f32>::build_two_stream(&ModelConfig::new(2, 4), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    model.state()
}

fn snapshots(states: Vec<ModelState<f32>>) -> CheckpointSet<f32> {
    CheckpointSet {
        snapshots: states.into_iter().enumerate().map(|(epoch, state)| Snapshot { epoch, state }).collect(),
    }
}

#[test]
fn swa_average_matches_elementwise_mean() {
    let states: Vec<ModelState<f32>> = (0..5).map(random_state).collect();
    let avg = swa_average(&snapshots(states.clone())).unwrap();
    for (i, (name, t)) in avg.params.iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            let mut sum = 0.0f64;
            for s in &states {
                assert_eq!(&s.params[i].0, name);
                sum += s.params[i].1.data()[j] as f64;
            }
            let oracle = sum / 5.0;
            assert!(((v as f64) - oracle).abs() <= 1e-7 * oracle.abs().max(1e-30) + 1e-12, "{name}[{j}]");
        }
    }
}

#[test]
fn swa_average_examples() {
    let s = random_state(1);
    let same = swa_average(&snapshots(vec![s.clone(); 4])).unwrap();
    assert_eq!(same.params, s.params);
    let mut zero = s.clone();
    let mut two = s.clone();
    for ((_, a), (_, b)) in zero.params.iter_mut().zip(two.params.iter_mut()) {
        a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        b.data_mut().iter_mut().for_each(|v| *v = 2.0);
    }
    let one = swa_average(&snapshots(vec![zero, two])).unwrap();
    assert!(one.params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
    assert!(swa_average::<f32>(&CheckpointSet::default()).is_err());
    let mut bad = s.clone();
    bad.params.pop();
    assert!(swa_average(&snapshots(vec![s, bad])).is_err());
}

fn loss_of(model: &Model<f32>, data: &[Sample], mode: BnMode, weights: &[f32]) -> f64 {
    let h = data[0].height;
    let pre: Vec<&[u8]> = data.iter().map(|s| s.pre.as_slice()).collect();
    let post: Vec<&[u8]> = data.iter().map(|s| s.post.as_slice()).collect();
    let targets: Vec<u8> = data.iter().flat_map(|s| s.mask.clone()).collect();
    let mut tape = Tape::inference();
    let out = model
        .forward(&mut tape, &images_to_tensor(&pre, h, h).unwrap(), &images_to_tensor(&post, h, h).unwrap(), mode)
        .unwrap();
    let loss = tape.weighted_softmax_ce(out.logits.unwrap(), &targets, weights).unwrap();
    tape.value(loss).data()[0] as f64
}

#[test]
fn refresh_bn_restores_eval_behavior_after_swa() {
    let data = toy_samples(8, 32);
    let refs: Vec<&Sample> = data.iter().collect();
    let mut config = small_config(30);
    config.batch_size = 8;
    config.swa = SwaConfig {
        enabled: true,
        num_snapshots: 10,
        swa_lr: 2e-3,
    };
    let out = train(Model::build_two_stream(&ModelConfig::new(2, 8), 4).unwrap(), &refs, &config).unwrap();
    let mut model = out.model.clone();
    model.load_state(&swa_average(&out.checkpoints).unwrap()).unwrap();
    let adapt = AdaptConfig {
        batch_size: 8,
        ..AdaptConfig::default()
    };
    refresh_bn(&mut model, &refs, &adapt).unwrap();
    let weights = [1.0f32; 5];
    let train_loss = loss_of(&model, &data, BnMode::Train, &weights);
    let eval_loss = loss_of(&model, &data, BnMode::Eval, &weights);
    assert!((eval_loss - train_loss).abs() <= 0.1 * train_loss, "eval {eval_loss} vs train {train_loss}");
    let once = model.state();
    refresh_bn(&mut model, &refs, &adapt).unwrap();
    let twice = model.state();
    for (layer, s) in &once.bn {
        for (a, b) in s.running_mean.iter().zip(&twice.bn[layer].running_mean) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{layer}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dseg");
    let mut model = Model::<f32>::build_two_stream(&ModelConfig::new(2, 4), 8).unwrap();
    model.load_state(&random_state(3)).unwrap();
    model.bn_stats_mut("dec.s0.bn1").unwrap().num_batches_tracked = 17;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), serde_json::json!(8));
    save_model(&path, &model, meta).unwrap();
    let (loaded, meta) = load_model::<f32>(&path).unwrap();
    assert_eq!(loaded.state(), model.state());
    assert_eq!(meta["seed"], 8);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"DSEG1");
    let again = dir.path().join("n.dseg");
    save_model(&again, &loaded, [("seed".to_string(), serde_json::json!(8))].into()).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
    let names: Vec<String> = Container::from_bytes(&bytes).unwrap().tensors.iter().map(|t| t.name.clone()).collect();
    assert!(names.contains(&"dec.s0.bn1/running_mean".to_string()));
    assert!(names.contains(&"dec.s0.bn1/num_batches_tracked".to_string()));
}

#[test]
fn corrupt_containers_are_rejected() {
    let mut c = Container::new(serde_json::json!({}));
    c.tensors.push(NamedTensor::from_floats("a", vec![2], &[1.0f32, 2.0]));
    let bytes = c.to_bytes().unwrap();
    assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(Container::from_bytes(&wrong), Err(Error::Checkpoint(_))));
    c.tensors.push(NamedTensor::from_floats("a", vec![1], &[1.0f32]));
    assert!(c.to_bytes().is_err());
    assert!(Container::from_bytes(b"DSEG1").is_err());
}

#[test]
fn float_widths_convert_on_load() {
    let t = NamedTensor::from_floats("x", vec![2], &[0.25f32, -1.5]);
    assert_eq!(t.to_floats::<f64>().unwrap(), vec![0.25, -1.5]);
    assert!(t.to_u64().is_err());
    assert_eq!(NamedTensor::from_u64("n", &[9]).to_u64().unwrap(), vec![9]);
}
