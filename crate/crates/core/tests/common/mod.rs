#![allow(dead_code)]

use polybind::config::RunConfig;
use polybind::encoders::EncoderConfig;
use polybind::eval::{generate_fixture, FixtureSpec};
use polybind::preproc::Modality;
use polybind::trainer::{PairedDataset, Strategy, TrainState};

/// Desk run for `modality` with the given strategy and batch shape.
pub fn desk_run(modality: &str, strategy: Strategy, batch_size: usize, epochs: usize, seed: u64) -> RunConfig {
    let mut run = RunConfig::desk(&[modality]).unwrap();
    run.train.strategy = strategy;
    run.train.batch_size = batch_size;
    run.train.epochs = epochs;
    run.train.seed = seed;
    run
}

/// Smaller towers for tests that only need the plumbing.
pub fn small_run(modality: &str, strategy: Strategy, batch_size: usize, epochs: usize, seed: u64) -> RunConfig {
    let mut run = desk_run(modality, strategy, batch_size, epochs, seed);
    run.text.layers = 1;
    run.text.width = 32;
    for m in run.modalities.values_mut() {
        m.encoder = EncoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            ..m.encoder.clone()
        };
    }
    run
}

pub fn fixture_pairs(n: usize, modality: Modality, seed: u64) -> PairedDataset {
    let spec = FixtureSpec {
        modalities: vec![modality],
        ..FixtureSpec::new(n, 1, 8, 0.02, seed)
    };
    generate_fixture(&spec).unwrap().dataset(modality).unwrap()
}

pub fn text_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in state.registry.text.store.iter() {
        out.extend(p.name.as_bytes());
        for v in p.value.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Serialized base-group weights of the modality tower, adapters excluded.
pub fn base_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    let store = &state.registry.entry(&state.modality).unwrap().encoder.store;
    for (_, p) in store.iter() {
        if p.group == polybind::params::ParamGroup::Base && p.kind.decays() && !p.trainable {
            out.extend(p.name.as_bytes());
            for v in p.value.iter() {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}
