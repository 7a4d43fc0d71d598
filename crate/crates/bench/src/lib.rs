//! Shared fixtures for the benchmarks: a deterministic synthetic cohort
//! and a seeded model sized like the published configuration.

use ragline::model::{toy_config, ModelState};
use ragline::tasks::{generate, SyntheticConfig, SyntheticDataset};
use ragline::timeline::{TimeDeltaScaler, TimelineEvent};

pub const BENCH_SEED: u64 = 1021;

pub fn cohort(patients: usize) -> SyntheticDataset {
    generate(&SyntheticConfig {
        patients,
        seed: BENCH_SEED,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn model(vocab_size: usize) -> ModelState {
    let mut cfg = toy_config(64, vocab_size, 24, 128);
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 4;
    cfg.fusion_layers = 2;
    cfg.fusion_heads = 4;
    ModelState::init(cfg, BENCH_SEED).unwrap()
}

pub fn scaler() -> TimeDeltaScaler {
    TimeDeltaScaler::new(365 * 24 * 60)
}

pub fn histories(data: &SyntheticDataset) -> Vec<(String, Vec<TimelineEvent>)> {
    data.patients
        .iter()
        .map(|p| (p.timeline.patient_id.clone(), p.timeline.events.clone()))
        .collect()
}
