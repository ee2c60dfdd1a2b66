//! Declarative experiment configuration, read from one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::datagen::{default_generator_specs, CorruptionKind, DatasetConfig, GeneratorSpec, MAX_SEVERITY};
use crate::denoiser::{DenoiserTopology, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::TsneConfig;
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::tofe::TofeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Where the denoisers' training data and the feature extractor come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    /// Size of the real-image set every denoiser is trained on.
    pub training_images: usize,
    pub data_seed: u64,
    /// Seed of the condition bank (one embedding per shape class).
    pub bank_seed: u64,
    /// Model seed of the feature extractor; kept apart from every generator.
    pub extractor_seed: u64,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            training_images: 2000,
            data_seed: 1,
            bank_seed: 7,
            extractor_seed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub tsne: TsneConfig,
    pub js_bins: usize,
    /// Reals and fakes per generator fed to the separation analysis.
    pub per_class: usize,
    /// Test images reconstructed for PSNR/SSIM.
    pub reconstruction_images: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tsne: TsneConfig::default(),
            js_bins: 32,
            per_class: 200,
            reconstruction_images: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub kinds: Vec<CorruptionKind>,
    pub max_severity: u8,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            max_severity: MAX_SEVERITY,
            seed: 77,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub eta: Vec<f32>,
    pub iters: Vec<usize>,
    pub steps: Vec<usize>,
    /// Reals and fakes per generator used for every ablation value.
    pub per_class: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            eta: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            iters: vec![10, 20, 30, 40, 50],
            steps: vec![1, 50],
            per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserTopology,
    pub models: ModelsConfig,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
    pub generators: Vec<GeneratorSpec>,
    pub tofe: TofeConfig,
    pub classifier: ClassifierConfig,
    pub analysis: AnalysisConfig,
    pub robustness: RobustnessConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserTopology::default(),
            models: ModelsConfig::default(),
            training: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            generators: default_generator_specs(),
            tofe: TofeConfig::default(),
            classifier: ClassifierConfig::default(),
            analysis: AnalysisConfig::default(),
            robustness: RobustnessConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingInput(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.schedule.total_steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let d = &self.denoiser;
        if d.height != self.dataset.image_size || d.width != self.dataset.image_size {
            return Err(Error::Config(format!(
                "denoiser is {}x{} but dataset.image_size is {}",
                d.height, d.width, self.dataset.image_size
            )));
        }
        if d.hidden_layers == 0 || d.hidden == 0 || d.cond_dim == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        self.training.validate()?;
        self.tofe.validate()?;
        if self.tofe.steps > self.schedule.total_steps {
            return Err(Error::Config("tofe.steps exceeds schedule.total_steps".into()));
        }
        if self.generators.is_empty() {
            return Err(Error::Config("at least one generator is required".into()));
        }
        if let Some(g) = self.generators.iter().find(|g| g.model_seed == self.models.extractor_seed) {
            return Err(Error::Config(format!(
                "generator {} reuses the extractor seed {}",
                g.id, self.models.extractor_seed
            )));
        }
        crate::datagen::resolve_train_generators(&self.generators, &self.dataset)?;
        if self.models.training_images == 0 {
            return Err(Error::Config("models.training_images must be positive".into()));
        }
        if self.analysis.js_bins == 0 {
            return Err(Error::Config("analysis.js_bins must be positive".into()));
        }
        if self.robustness.max_severity > MAX_SEVERITY {
            return Err(Error::Config(format!("robustness.max_severity exceeds {MAX_SEVERITY}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1", "[tofe]\netaa = 0.1", "[schedule]\ntotal = 3", "[analysis.tsne]\nperp = 3.0"] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[tofe]\niters = 3\n").unwrap();
        assert_eq!(cfg.tofe.iters, 3);
        assert_eq!(cfg.tofe.eta, TofeConfig::default().eta);
    }

    #[test]
    fn inconsistent_values_rejected() {
        for text in [
            "[dataset]\nimage_size = 8",
            "[schedule]\nbeta_start = 0.5\nbeta_end = 0.1",
            "[models]\nextractor_seed = 101",
            "[tofe]\nsteps = 101",
            "[robustness]\nmax_severity = 6",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
