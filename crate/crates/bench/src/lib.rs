//! Fixtures shared by the benchmarks.

use mtlb_core::model::{fit_intentions, ModelConfig, MotionTransformer};
use mtlb_core::scene::{generate_synthetic, to_ego_frame, vectorize, GeneratorConfig, Preset, SceneSample};
use mtlb_core::Tensor;

/// `count` vectorized source-like scenes for `cfg`.
pub fn samples(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<SceneSample> {
    generate_synthetic(&GeneratorConfig {
        seed,
        preset: Preset::SourceLike,
        count,
        ..GeneratorConfig::default()
    })
    .expect("generator defaults are valid")
    .iter()
    .map(|s| vectorize(&to_ego_frame(s)?, &cfg.vectorize()))
    .collect::<mtlb_core::Result<_>>()
    .expect("generated scenes vectorize")
}

/// Untrained model with intentions fitted on the samples' endpoints.
pub fn model(cfg: &ModelConfig, samples: &[SceneSample]) -> MotionTransformer {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.endpoint().to_vec()).collect();
    let intentions = fit_intentions(&Tensor::from_rows(&rows).expect("rows"), cfg.modes, 0).expect("enough endpoints");
    MotionTransformer::new(cfg.clone(), intentions, 0).expect("valid config")
}
