//! Shared fixtures for the benchmarks.

use fits_core::corpus::{generate_synthetic_dataset, GenConfig};
use fits_core::trainer::{Model, TaskData, TrainConfig};

/// Default-sized synthetic benchmark with an untrained default model.
pub fn fixture() -> (TaskData, Model, TrainConfig) {
    let cfg = TrainConfig::default();
    let d = generate_synthetic_dataset(&GenConfig::default()).expect("default generator config");
    let data = TaskData::new(d.kg, &d.train, &d.dev, &d.test).expect("vocabulary");
    let model = Model::init(data.encoder_config(&cfg.model), cfg.model.ka_init, cfg.seed)
        .expect("default model");
    (data, model, cfg)
}
