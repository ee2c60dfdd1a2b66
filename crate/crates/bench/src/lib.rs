//! Inputs shared by the kernel benchmarks.

use tofe_core::config::ExperimentConfig;
use tofe_core::datagen::sample_real_sized;
use tofe_core::denoiser::DenoiserParams;
use tofe_core::schedule::NoiseSchedule;
use tofe_core::tensor::Latent;

/// Default-configuration denoiser (untrained; kernel cost does not depend
/// on the weights), schedule and one clean latent.
pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub params: DenoiserParams,
    pub sched: NoiseSchedule,
    pub latent: Latent,
}

impl Fixture {
    pub fn new() -> Self {
        let cfg = ExperimentConfig::default();
        let params = DenoiserParams::init(cfg.denoiser, 1);
        let sched = cfg.schedule().expect("default schedule is valid");
        let image = sample_real_sized(1, 1, cfg.dataset.image_size).remove(0).image;
        Self { latent: Latent::from_image(&image), cfg, params, sched }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic pseudo-random rows in `[-1, 1)` for metric benchmarks.
pub fn rows(n: usize, dim: usize, salt: u64) -> Vec<Vec<f64>> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
                })
                .collect()
        })
        .collect()
}
