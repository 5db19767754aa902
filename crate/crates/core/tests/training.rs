use hsam_core::config::RunConfig;
use hsam_core::data::{class_frequencies, generate, Dataset, GenerateSpec};
use hsam_core::metrics::HdVariant;
use hsam_core::model::Toggles;
use hsam_core::nn::{ParamStore, Scope};
use hsam_core::optim::{AdamW, OptimConfig};
use hsam_core::train::{argmax_channels, Trainer};
use hsam_core::verify::miniature_config;
use hsam_core::{Tape, Tensor};

fn tiny_data(seed: u64, n: usize, tail: f64) -> Dataset {
    generate(&GenerateSpec { seed, n, height: 16, width: 16, classes: 3, tail_ratio: tail, split: "train".into() })
        .unwrap()
}

fn tiny_config(toggles: Toggles) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = miniature_config();
    cfg.model.toggles = toggles;
    cfg.train.batch_size = 4;
    cfg.optim.warmup_steps = 5;
    cfg.optim.lr = 5e-3;
    cfg
}

fn trainer(cfg: &RunConfig, ds: &Dataset) -> Trainer {
    Trainer::new(cfg, class_frequencies(ds, &cfg.data.noise).table).unwrap()
}

#[test]
fn decoupled_decay_with_zero_gradient() {
    let mut store = ParamStore::new();
    let w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let id = store.add("w", w.clone(), true);
    let cfg = OptimConfig { lr: 0.01, warmup_steps: 0, weight_decay: 0.1, ..OptimConfig::default() };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &[(id, Tensor::zeros(&[3]))]).unwrap();
    let expect = w.map(|v| v * (1.0 - 0.01 * 0.1));
    assert_eq!(store.get(id).value, expect);
    assert_eq!(store.get(id).value.data()[0], 0.999);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::new();
    let target = Tensor::new(&[4], vec![1.0, -3.0, 0.25, 2.0]).unwrap();
    let id = store.add("w", Tensor::zeros(&[4]), true);
    let cfg = OptimConfig { lr: 0.05, warmup_steps: 10, weight_decay: 0.0, ..OptimConfig::default() };
    let mut opt = AdamW::new(cfg, &store);
    for _ in 0..1500 {
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let d = s.param(id).sub(&tape.constant(target.clone())).unwrap();
        d.mul(&d).unwrap().sum(None).unwrap().backward().unwrap();
        let grads = s.grads();
        drop(s);
        opt.step(&mut store, &grads).unwrap();
    }
    assert!(store.get(id).value.max_abs_diff(&target) < 1e-3, "{:?}", store.get(id).value);
}

#[test]
fn argmax_ties_go_to_the_lower_class() {
    let data = [0.5, 0.2, 0.5, 0.3, 0.1, 0.7];
    assert_eq!(argmax_channels(&data, 2, 3), vec![0, 0, 1]);
}

#[test]
fn every_toggle_combination_trains() {
    let ds = tiny_data(1, 8, 0.7);
    for t in Toggles::all() {
        let cfg = tiny_config(t);
        let mut tr = trainer(&cfg, &ds);
        let stats = tr.train_epoch(&ds).unwrap();
        assert_eq!(stats.steps, 2);
        assert!(stats.total.is_finite());
        assert_eq!(stats.stage2.is_some(), t.any());
        if t.any() {
            let expect = stats.lambda_w * stats.stage1 + (1.0 - stats.lambda_w) * stats.stage2.unwrap();
            assert!((stats.total - expect).abs() < 1e-9);
        } else {
            assert_eq!(stats.total, stats.stage1);
        }
        let (report, preds) = tr.evaluate(&ds, HdVariant::Avg).unwrap();
        assert_eq!(preds.len(), ds.len());
        assert!((0.0..=1.0).contains(&report.mean_dice));
    }
}

#[test]
fn epochs_replay_bit_identically() {
    let ds = tiny_data(2, 8, 0.6);
    let cfg = tiny_config(Toggles::default());
    let run = || {
        let mut tr = trainer(&cfg, &ds);
        let a = tr.train_epoch(&ds).unwrap();
        let b = tr.train_epoch(&ds).unwrap();
        let params: Vec<Vec<u64>> =
            tr.store.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        (a, b, params)
    };
    let (a1, b1, p1) = run();
    let (a2, b2, p2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(p1, p2);
}

#[test]
fn frozen_encoder_weights_never_move() {
    let ds = tiny_data(3, 8, 0.6);
    let cfg = tiny_config(Toggles::default());
    let mut tr = trainer(&cfg, &ds);
    let before: Vec<(String, Vec<u64>)> = tr
        .store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert!(!before.is_empty());
    let lora_before: Vec<Tensor> =
        tr.store.iter().filter(|(_, p)| p.name.ends_with("lora_up")).map(|(_, p)| p.value.clone()).collect();
    for _ in 0..2 {
        tr.train_epoch(&ds).unwrap();
    }
    let after: Vec<(String, Vec<u64>)> = tr
        .store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert_eq!(before, after);
    let lora_after: Vec<Tensor> =
        tr.store.iter().filter(|(_, p)| p.name.ends_with("lora_up")).map(|(_, p)| p.value.clone()).collect();
    assert_ne!(lora_before, lora_after);
}

#[test]
fn untrained_model_is_near_chance_on_balanced_data() {
    let ds = tiny_data(4, 24, 1.0);
    let cfg = tiny_config(Toggles::default());
    let tr = trainer(&cfg, &ds);
    let (report, _) = tr.evaluate(&ds, HdVariant::Avg).unwrap();
    // Chance for a label-agnostic predictor is about the class share, far
    // from what training reaches.
    assert!(report.mean_dice < 0.5, "{report:?}");
}

#[test]
fn mismatched_noise_table_is_rejected() {
    let cfg = tiny_config(Toggles::default());
    let table = hsam_core::attention::NoiseTable::zeros(5);
    assert!(Trainer::new(&cfg, table).is_err());
}

#[test]
fn short_training_lowers_the_loss() {
    let ds = tiny_data(5, 16, 0.8);
    let cfg = tiny_config(Toggles::default());
    let mut tr = trainer(&cfg, &ds);
    let first = tr.train_epoch(&ds).unwrap().total;
    let mut last = first;
    for _ in 0..15 {
        last = tr.train_epoch(&ds).unwrap().total;
    }
    assert!(last < 0.8 * first, "{first} → {last}");
}
