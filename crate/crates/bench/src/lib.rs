//! Shared fixtures for the pipeline benchmarks.

use amil_core::data::generate;
use amil_core::{em_fit, AnomalyReference, Bag, EmConfig, GeneratorConfig, GmmParams, ModelConfig, ModelParams, Tensor2};

/// A small separable dataset with default model dimensions.
pub fn bags(bags_per_class: usize) -> Vec<Bag> {
    let cfg = GeneratorConfig {
        bags_per_class,
        ..GeneratorConfig::default()
    };
    generate(&cfg).expect("generator preset is valid").training_view().to_vec()
}

/// Initialized parameters plus an anomaly reference fitted on the control
/// embeddings of `bags`.
pub fn model(bags: &[Bag]) -> (ModelConfig, ModelParams, AnomalyReference) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg).expect("default config is valid");
    let z = amil_core::training::control_embeddings(&params, bags, &cfg).expect("shapes agree");
    let gmm = em_fit(&z, 1, &EmConfig::default(), None).expect("enough controls");
    let reference = AnomalyReference::calibrate(gmm, &z, true).expect("fitted");
    (cfg, params, reference)
}

/// `n` points in `k` dimensions drawn from two offset blobs, deterministic.
pub fn blobs(n: usize, k: usize) -> Tensor2 {
    let mut data = Vec::with_capacity(n * k);
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..n {
        for _ in 0..k {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            data.push(u - 0.5 + if i % 2 == 0 { 3.0 } else { 0.0 });
        }
    }
    Tensor2::from_vec(n, k, data).expect("length matches")
}

pub fn mixture(data: &Tensor2, k: usize) -> GmmParams {
    em_fit(data, k, &EmConfig::default(), None).expect("enough samples")
}
