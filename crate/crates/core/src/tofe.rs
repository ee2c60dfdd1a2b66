//! Trajectory-following embedding optimization.
//!
//! An image is inverted with DDIM into a latent trajectory. For every
//! transition, starting at the noisiest one, a condition embedding is refined
//! by plain gradient descent until guided denoising from `z_t` lands on the
//! trajectory's `z_{t-1}`. The refined embeddings are the image's feature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, DenoiserParams, EmbeddingOrigin, GuidedStepObjective};
use crate::error::{Error, Result};
use crate::schedule::{cfg_predict, ddim_transition, invert_trajectory, NoiseSchedule, DEFAULT_GUIDANCE};
use crate::tensor::{Image, Latent};

/// Starting point of every per-timestep optimization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TofeInit {
    #[default]
    NullText,
    Custom(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TofeConfig {
    /// Gradient-descent learning rate.
    pub eta: f32,
    /// Gradient steps per timestep.
    pub iters: usize,
    /// Number of inversion transitions.
    pub steps: usize,
    pub guidance_w: f32,
    /// Timesteps per transition; `None` spreads `steps` over the whole schedule.
    pub stride: Option<usize>,
    pub init: TofeInit,
}

impl Default for TofeConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            iters: 10,
            steps: 1,
            guidance_w: DEFAULT_GUIDANCE,
            stride: None,
            init: TofeInit::NullText,
        }
    }
}

impl TofeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !self.guidance_w.is_finite() {
            return Err(Error::Config("guidance_w must be finite".into()));
        }
        Ok(())
    }

    fn initial_embedding(&self, dim: usize) -> Result<ConditionEmbedding> {
        match &self.init {
            TofeInit::NullText => Ok(ConditionEmbedding::null_text(dim)),
            TofeInit::Custom(values) if values.len() == dim => {
                Ok(ConditionEmbedding::custom(values.clone()))
            }
            TofeInit::Custom(values) => Err(Error::shape(
                format!("{dim}-dim initial embedding"),
                format!("{} values", values.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

/// Where a feature came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub id: String,
    pub label: Label,
    pub generator: String,
}

/// Optimized embeddings of one image, ordered as optimized (noisiest first).
#[derive(Debug, Clone, PartialEq)]
pub struct TofeFeature {
    pub source: SourceInfo,
    pub embeddings: Vec<ConditionEmbedding>,
    pub per_step_final_loss: Vec<f32>,
    /// End of the inversion trajectory, kept so reconstruction does not
    /// have to invert again.
    pub z_end: Latent,
}

impl TofeFeature {
    pub fn steps(&self) -> usize {
        self.embeddings.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.embeddings.first().map_or(0, ConditionEmbedding::dim)
    }

    /// Classifier input: all embeddings concatenated.
    pub fn flatten(&self) -> Vec<f32> {
        self.embeddings
            .iter()
            .flat_map(|e| e.values.iter().copied())
            .collect()
    }
}

/// A feature plus the loss at the start of each per-timestep optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub feature: TofeFeature,
    pub per_step_initial_loss: Vec<f32>,
}

pub fn extract_features(
    image: &Latent,
    source: SourceInfo,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
) -> Result<TofeFeature> {
    extract_traced(image, source, params, sched, cfg).map(|e| e.feature)
}

pub fn extract_traced(
    image: &Latent,
    source: SourceInfo,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
) -> Result<Extraction> {
    cfg.validate()?;
    if image.timestep != 0 {
        return Err(Error::Contract(format!(
            "features are extracted from z_0, got t={}",
            image.timestep
        )));
    }
    if !params.is_finite() {
        return Err(Error::Numeric("denoiser parameters are not finite".into()));
    }
    let dim = params.topology().cond_dim;
    let null = ConditionEmbedding::null_text(dim);
    let init = cfg.initial_embedding(dim)?;
    let trajectory = invert_trajectory(image, params, &null, sched, cfg.steps, cfg.stride)?;

    let mut embeddings = Vec::with_capacity(cfg.steps);
    let mut finals = Vec::with_capacity(cfg.steps);
    let mut initials = Vec::with_capacity(cfg.steps);
    for k in (1..trajectory.latents.len()).rev() {
        let z_t = &trajectory.latents[k];
        let target = &trajectory.latents[k - 1];
        let mut objective =
            GuidedStepObjective::new(params, z_t, z_t.timestep, &null, cfg.guidance_w, target, sched)?;
        let mut cond = init.values.clone();
        let mut initial = None;
        for _ in 0..cfg.iters {
            let (loss, grad) = objective.loss_and_grad(&cond)?;
            initial.get_or_insert(loss);
            for (c, g) in cond.iter_mut().zip(&grad) {
                *c -= cfg.eta * g;
            }
        }
        let last = objective.loss(&cond)?;
        if !last.is_finite() || cond.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding optimization diverged at t={}",
                z_t.timestep
            )));
        }
        initials.push(initial.unwrap_or(last));
        finals.push(last);
        embeddings.push(ConditionEmbedding {
            values: cond,
            origin: EmbeddingOrigin::Optimized,
        });
    }

    Ok(Extraction {
        feature: TofeFeature {
            source,
            embeddings,
            per_step_final_loss: finals,
            z_end: trajectory.end().clone(),
        },
        per_step_initial_loss: initials,
    })
}

/// Extracts features for many images in parallel; output order follows input.
pub fn extract_many(
    images: &[(Image, SourceInfo)],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
) -> Result<Vec<Extraction>> {
    images
        .par_iter()
        .map(|(img, src)| extract_traced(&Latent::from_image(img), src.clone(), params, sched, cfg))
        .collect()
}

/// Guided DDIM sampling from the cached trajectory end, using the feature's
/// embedding at each timestep.
pub fn reconstruct(
    feature: &TofeFeature,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
    z_end: &Latent,
) -> Result<Latent> {
    if feature.steps() != cfg.steps {
        return Err(Error::Contract(format!(
            "feature has {} steps, config expects {}",
            feature.steps(),
            cfg.steps
        )));
    }
    reconstruct_with(&feature.embeddings, params, sched, cfg, z_end)
}

/// Reconstruction guided by the null-text embedding at every step; the
/// baseline that optimized embeddings are compared against.
pub fn reconstruct_null(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
    z_end: &Latent,
) -> Result<Latent> {
    let null = ConditionEmbedding::null_text(params.topology().cond_dim);
    reconstruct_with(&vec![null; cfg.steps], params, sched, cfg, z_end)
}

fn reconstruct_with(
    embeddings: &[ConditionEmbedding],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
    z_end: &Latent,
) -> Result<Latent> {
    let timesteps = sched.strided_timesteps(cfg.steps, cfg.stride)?;
    let top = *timesteps.last().expect("non-empty");
    if z_end.timestep != top {
        return Err(Error::Contract(format!(
            "reconstruction starts at t={top}, latent is tagged t={}",
            z_end.timestep
        )));
    }
    let null = ConditionEmbedding::null_text(params.topology().cond_dim);
    let mut z = z_end.clone();
    for (pair, cond) in timesteps.windows(2).rev().zip(embeddings) {
        let (prev, t) = (pair[0], pair[1]);
        let eps_c = crate::denoiser::denoiser_forward(params, &z, t, cond)?;
        let eps_u = crate::denoiser::denoiser_forward(params, &z, t, &null)?;
        let eps = cfg_predict(&eps_c, &eps_u, cfg.guidance_w)?;
        z = ddim_transition(&z, &eps, t, prev, sched)?;
    }
    Ok(z)
}
