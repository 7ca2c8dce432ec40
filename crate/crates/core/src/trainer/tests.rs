use std::collections::BTreeMap;

use ndarray::Array3;
use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::config::{ModalitySettings, Paths, TextTower};
use crate::curation::{FilterRules, TextView};
use crate::encoders::EncoderConfig;
use crate::lora::LoraConfig;
use crate::preproc::{PreprocConfig, RawModalitySample, VisualConfig};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        width: 16,
        heads: 2,
        ..EncoderConfig::desk()
    }
}

fn run(strategy: Strategy, batch_size: usize, epochs: usize) -> RunConfig {
    let mut modalities = BTreeMap::new();
    modalities.insert(
        "depth".to_string(),
        ModalitySettings {
            kind: None,
            encoder: tiny_encoder(),
            lora: Some(LoraConfig::new(2, 16.0, 0.0)),
            init: None,
            preproc: None,
        },
    );
    RunConfig {
        train: TrainConfig {
            lr: 3e-3,
            coefficient_lr: 1.0,
            batch_size,
            epochs,
            warmup_steps: 1,
            mask_ratio: 0.0,
            strategy,
            seed: 5,
            ..TrainConfig::default()
        },
        text: TextTower {
            layers: 1,
            width: 32,
            ..TextTower::default()
        },
        preproc: PreprocConfig {
            visual: VisualConfig {
                resize_short: 28,
                crop: 28,
                ..VisualConfig::default()
            },
            ..PreprocConfig::default()
        },
        modalities,
        paths: Paths::default(),
        curation: FilterRules::default(),
        text_view: TextView::TitleHashtags,
    }
}

const WORDS: [&str; 4] = ["red dog", "blue car", "green tree", "white bird"];

fn dataset(n: usize) -> PairedDataset {
    let pairs = (0..n)
        .map(|i| {
            let c = i % WORDS.len();
            let map = Array3::from_shape_fn((28, 28, 1), |(y, x, _)| {
                let (fy, fx) = ((c + 1) as f32 * 0.2, (c % 2) as f32 * 0.3 + 0.1);
                0.5 + 0.4 * (fy * y as f32 + fx * x as f32 + i as f32 * 0.01).sin()
            });
            Pair {
                id: format!("s{i}"),
                sample: RawModalitySample::map(format!("s{i}"), Modality::Depth, map).unwrap(),
                caption: format!("a {}", WORDS[c]),
                label: Some(WORDS[c].to_string()),
            }
        })
        .collect();
    PairedDataset { pairs }
}

#[test]
fn lora_strategy_freezes_the_base() {
    let state = TrainState::new(run(Strategy::Lora, 4, 1), "depth").unwrap();
    let store = &state.registry.entry("depth").unwrap().encoder.store;
    for (_, p) in store.iter() {
        let expect = matches!(
            p.kind,
            ParamKind::LoraA | ParamKind::LoraB | ParamKind::Position | ParamKind::Projection
        );
        assert_eq!(p.trainable, expect, "{}", p.name);
    }
    let full = TrainState::new(run(Strategy::FullTuning, 4, 1), "depth").unwrap();
    let store = &full.registry.entry("depth").unwrap().encoder.store;
    assert!(store.iter().all(|(_, p)| p.trainable));
    assert_eq!(full.registry.entry("depth").unwrap().encoder.adapter_count(), 0);
    assert!(full.registry.text.is_frozen());
}

#[test]
fn lora_without_adapter_config_is_rejected() {
    let mut r = run(Strategy::Lora, 4, 1);
    r.modalities.get_mut("depth").unwrap().lora = None;
    assert!(matches!(TrainState::new(r, "depth"), Err(Error::Config(_))));
}

#[test]
fn presets_follow_the_recipe_table() {
    let v = TrainConfig::preset(Modality::Video);
    assert_eq!((v.lr, v.batch_size, v.epochs, v.warmup_steps, v.mask_ratio), (1e-4, 640, 16, 2000, 0.3));
    let a = TrainConfig::preset(Modality::Audio);
    assert_eq!((a.lr, a.coefficient_lr, a.batch_size, a.epochs), (5e-4, 1e-3, 512, 8));
    let i = TrainConfig::preset(Modality::Infrared);
    assert_eq!((i.lr, i.batch_size, i.mask_ratio), (1e-4, 1024, 0.5));
    assert_eq!(TrainConfig::default().betas, [0.9, 0.98]);
    assert_eq!(TrainConfig::default().weight_decay, 0.2);
}

#[test]
fn training_lowers_loss_and_leaves_text_untouched() {
    let data = dataset(8);
    let mut state = TrainState::new(run(Strategy::FullTuning, 8, 30), "depth").unwrap();
    let text_before = state.registry.text.store.clone();
    let summary = train(&mut state, &data, &TrainOptions::default()).unwrap();
    assert_eq!(summary.metrics.len(), 30);
    let first = summary.metrics[0].loss;
    let last = summary.metrics.last().unwrap().loss;
    assert!(last < 0.8 * first, "loss {first} -> {last}");
    assert_eq!(state.registry.text.store, text_before);
    assert!(summary.metrics.iter().all(|m| m.tau >= crate::loss::TAU_MIN && m.tau <= crate::loss::TAU_MAX));
}

#[test]
fn empty_dataset_is_an_error() {
    let mut state = TrainState::new(run(Strategy::Lora, 4, 1), "depth").unwrap();
    let err = train(&mut state, &PairedDataset::default(), &TrainOptions::default());
    assert!(matches!(err, Err(Error::Data(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = dataset(6);
    let cfg = run(Strategy::Lora, 4, 3);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = TrainState::new(cfg.clone(), "depth").unwrap();
    let full = train(&mut straight, &data, &TrainOptions::default()).unwrap();
    assert_eq!(full.metrics.len(), 6);

    let mut first = TrainState::new(cfg, "depth").unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        metrics_path: Some(dir.path().join("m.jsonl")),
        stop_at: Some(3),
    };
    let part = train(&mut first, &data, &opts).unwrap();
    let ckpt = part.checkpoints.last().unwrap().clone();
    assert!(ckpt.ends_with("step_00000003.lbck"));

    let mut resumed = load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = train(
        &mut resumed,
        &data,
        &TrainOptions {
            stop_at: None,
            ..opts
        },
    )
    .unwrap();
    let joined: Vec<f64> = part.metrics.iter().chain(&rest.metrics).map(|m| m.loss).collect();
    let straight_losses: Vec<f64> = full.metrics.iter().map(|m| m.loss).collect();
    assert_eq!(joined, straight_losses);
    assert_eq!(
        resumed.registry.entry("depth").unwrap().encoder.store,
        straight.registry.entry("depth").unwrap().encoder.store
    );
    assert_eq!(resumed.temperature, straight.temperature);
    let lines = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let state = TrainState::new(run(Strategy::Lora, 4, 1), "depth").unwrap();
    let mut bytes = checkpoint_file(&state).unwrap().to_bytes();
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0xff;
    assert!(matches!(
        crate::tensor_file::TensorFile::from_bytes(&bytes),
        Err(Error::Checkpoint(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn each_epoch_visits_every_sample_once(n in 1usize..60, b in 1usize..17, epoch in 0u64..4) {
        let mut cfg = run(Strategy::Lora, b, 5);
        cfg.train.batch_size = b;
        let state = TrainState {
            temperature: cfg.train.temperature(),
            optimizer: AdamW::new(&cfg.train),
            registry: cfg.build_registry(&[]).unwrap(),
            modality: "depth".into(),
            run: cfg,
            step: 0,
        };
        let spe = state.config().steps_per_epoch(n);
        let mut seen: Vec<usize> = (epoch * spe..(epoch + 1) * spe)
            .flat_map(|s| state.batch_indices(s, n))
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}
