mod common;

use std::fs;

use mps::dataset::{Dataset, GeneratorConfig, Split, generate_synthetic_dataset};
use mps::encoders::{ConditionSpec, Dimension, SyntheticImage, Vocabulary};
use mps::head::mps_score;
use mps::model::{HeadConfig, MaskMode, ModelConfig, MpsModel};
use mps::optim::{AdamWConfig, OptimizerState};
use mps::scoring::Prepared;
use mps::training::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use mps::training::trainer::pair_targets;
use mps::training::{TrainConfig, TrainState, Variant, load_checkpoint, load_checkpoint_for, save_checkpoint, train, train_step};
use mps::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(ppc: usize) -> Dataset {
    generate_synthetic_dataset(&GeneratorConfig {
        prompts_per_category: ppc,
        seed: 4,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .dataset
}

fn model_for(ds: &Dataset, dim: usize, mode: MaskMode) -> MpsModel {
    let texts: Vec<&str> = ds.prompts.iter().map(|p| p.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 2048).unwrap();
    let mut cfg = common::config(dim, 1, 2, 32, mode);
    cfg.vocab_size = vocab.len();
    MpsModel::new(cfg, vocab, 8).unwrap()
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        warmup: 2,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

fn step_on(model: &mut MpsModel, ds: &Dataset, pair: usize, opt: &mut OptimizerState<f32>, lr: f64) -> f64 {
    let prepared = Prepared::new(model, ds).unwrap();
    let pairs = vec![&ds.pairs[pair]];
    let ix = vec![prepared.resolve(pairs[0]).unwrap()];
    let dims = [Dimension::Overall];
    let batch = prepared.batch(&ix, &dims);
    let targets = pair_targets(&pairs, &dims);
    let snapshot = model.clone();
    let loss = train_step(model, opt, &batch, &targets, 1, lr).unwrap();
    drop(prepared);
    if lr == 0.0 {
        for (a, b) in snapshot.params.iter().zip(model.params.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }
    loss
}

#[test]
fn zero_lr_step_leaves_parameters_unchanged() {
    let ds = data(1);
    let mut m = model_for(&ds, 16, MaskMode::Hard);
    let mut opt = OptimizerState::new(AdamWConfig::default(), &m.params);
    let loss = step_on(&mut m, &ds, 0, &mut opt, 0.0);
    assert!(loss.is_finite() && loss >= 0.0);
    assert_eq!(opt.step(), 1);
}

#[test]
fn loss_on_one_pair_does_not_increase() {
    let ds = data(1);
    let pair = ds.pairs.iter().position(|p| !p.labels.overall.is_tie()).unwrap();
    let mut m = model_for(&ds, 16, MaskMode::Hard);
    let mut opt = OptimizerState::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &m.params,
    );
    let losses: Vec<f64> = (0..50).map(|_| step_on(&mut m, &ds, pair, &mut opt, 1e-4)).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn same_seed_same_trajectory_and_checkpoints() {
    let ds = data(2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| train(&quick(12), model_for(&ds, 16, MaskMode::Hard), &ds, Some(d.path())).unwrap())
        .collect();
    let bits = |r: &mps::training::TrainOutcome| r.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&runs[0]), bits(&runs[1]));
    for name in ["best", "final", "train_log.jsonl"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(name)).unwrap(), "{name}");
    }
    let other = train(
        &TrainConfig {
            seed: 1,
            ..quick(12)
        },
        model_for(&ds, 16, MaskMode::Hard),
        &ds,
        None,
    )
    .unwrap();
    assert_ne!(bits(&runs[0]), bits(&other));
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = data(1);
    let m = model_for(&ds, 16, MaskMode::Hard);
    for cfg in [
        TrainConfig { steps: 0, ..quick(1) },
        TrainConfig { batch_size: 0, ..quick(1) },
        TrainConfig { dimensions: vec![], ..quick(1) },
    ] {
        assert!(matches!(train(&cfg, m.clone(), &ds, None), Err(Error::Config(_))));
    }
    let mut no_train = ds.clone();
    for p in &mut no_train.pairs {
        p.split = Split::Test;
    }
    assert!(train(&quick(1), m, &no_train, None).is_err());
}

#[test]
fn periodic_checkpoints_and_log() {
    let ds = data(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        dimensions: vec![Dimension::Overall],
        ..quick(10)
    };
    let out = train(&cfg, model_for(&ds, 16, MaskMode::Hard), &ds, Some(dir.path())).unwrap();
    assert!(dir.path().join("step000004").exists());
    assert!(dir.path().join("step000008").exists());
    assert!(!dir.path().join("step000010").exists());
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert_eq!(out.log.len(), 10);
    assert!(out.log[4].val_accuracy.as_ref().unwrap().contains_key(&Dimension::Overall));
    let (_, state) = load_checkpoint(&dir.path().join("final")).unwrap();
    assert_eq!(state.step, 10);
}

fn probes(m: &MpsModel) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let prompts = ["a red fox", "harbor with light", "sharp hands", "a blue owl"];
    let mut out = Vec::new();
    for i in 0..16 {
        let img: SyntheticImage = common::random_image(&mut rng, 32);
        let spec = ConditionSpec::for_dimension(Dimension::ALL[i % 4]);
        out.push(mps_score(prompts[i / 4], &img, &spec, m).unwrap().to_bits());
    }
    out
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = MpsModel::new(common::config(32, 2, 4, 32, MaskMode::Hard), common::vocab(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let state = TrainState {
        step: 7,
        rng_seed: 9,
        rng_word_pos: 123,
    };
    save_checkpoint(&m, state, &path).unwrap();
    let (back, st) = load_checkpoint(&path).unwrap();
    assert_eq!(st, state);
    assert_eq!(back.config, m.config);
    assert_eq!(probes(&back), probes(&m));
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"MPSCKPT1");
    assert_eq!(bytes, checkpoint_bytes(&back, st).unwrap());
}

#[test]
fn corrupt_checkpoints_are_errors() {
    let m = MpsModel::new(common::config(16, 1, 2, 32, MaskMode::Hard), common::vocab(), 6).unwrap();
    let bytes = checkpoint_bytes(&m, TrainState::default()).unwrap();
    for cut in [0, 7, 15, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint_from_bytes(&bad).is_err());
    let mut longer = bytes;
    longer.extend_from_slice(&[0; 4]);
    assert!(checkpoint_from_bytes(&longer).is_err());
}

#[test]
fn width_mismatch_names_the_parameter() {
    let small = MpsModel::new(common::config(16, 1, 2, 32, MaskMode::Hard), common::vocab(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&small, TrainState::default(), &path).unwrap();
    let wide: ModelConfig = common::config(32, 1, 2, 32, MaskMode::Hard);
    match load_checkpoint_for(&path, &wide) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
            let msg = Error::ParamShape { name: name.clone(), expected, found }.to_string();
            assert!(msg.contains(&name), "{msg}");
        }
        other => panic!("expected a shape error, got {:?}", other.map(|_| ())),
    }
    assert!(load_checkpoint_for(&path, &small.config).is_ok());
}

#[test]
fn variants_configure_the_head() {
    let mut h = HeadConfig::default();
    Variant::Base.apply(&mut h);
    assert!(!h.cross_attention);
    assert_eq!(h.mask_mode, MaskMode::Off);
    Variant::CrossAttention.apply(&mut h);
    assert!(h.cross_attention);
    assert_eq!(h.mask_mode, MaskMode::Off);
    Variant::Mask.apply(&mut h);
    assert_eq!(h.mask_mode, MaskMode::Hard);
    let mut soft = HeadConfig {
        mask_mode: MaskMode::Soft,
        ..HeadConfig::default()
    };
    Variant::Separate.apply(&mut soft);
    assert_eq!(soft.mask_mode, MaskMode::Soft);
    for v in Variant::ALL {
        let key = serde_json::to_value(v).unwrap();
        assert_eq!(key.as_str().unwrap().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn trained_model_responds_to_the_condition() {
    let ds = data(3);
    let out = train(
        &TrainConfig {
            lr: 3e-3,
            ..quick(40)
        },
        model_for(&ds, 16, MaskMode::Hard),
        &ds,
        None,
    )
    .unwrap();
    let m = out.final_model;
    let prompt = &ds.prompts[0].text;
    let img = &ds.pixels[0];
    let scores: Vec<f32> = Dimension::ALL
        .iter()
        .map(|&d| mps_score(prompt, img, &ConditionSpec::for_dimension(d), &m).unwrap())
        .collect();
    assert!(scores.windows(2).any(|w| w[0] != w[1]), "{scores:?}");
}
