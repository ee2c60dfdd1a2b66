//! TOFE: text-condition embeddings optimized so that guided DDIM denoising
//! retraces a DDIM inversion, used as features for spotting images made by
//! diffusion models.
//!
//! Everything runs on a desk-scale toy world: procedural "real" images,
//! small MLP denoisers acting as generators, and an MLP detector.

pub mod classifier;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod evalharness;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod store;
pub mod tensor;
pub mod tofe;

pub use classifier::{predict, train_mlp, ClassifierConfig, MlpModel, TrainedClassifier};
pub use config::ExperimentConfig;
pub use datagen::{Corpus, CorpusItem, CorruptionKind, CorruptionSpec, DatasetConfig, GeneratorSpec, Split};
pub use denoiser::{
    loss_and_grad_condition, ConditionEmbedding, DenoiserParams, DenoiserTopology, EmbeddingOrigin, SamplerKind,
};
pub use error::{Error, FormatError, Result};
pub use metrics::{accuracy_ap, js_divergence_2d, mmd_rbf, psnr, ssim, tsne, Bandwidth, PointCloud, TsneConfig};
pub use schedule::{ddim_invert_step, ddim_sample_step, make_linear_schedule, NoiseSchedule};
pub use tensor::{Image, Latent};
pub use tofe::{extract_features, Label, SourceInfo, TofeConfig, TofeFeature};
