//! Desk-scale detection corpus: procedural "real" images, "fake" images from
//! a family of toy diffusion generators, and robustness corruptions.

pub mod corrupt;
pub mod real;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{generate_with, ConditionedImage, DenoiserParams, SamplerKind};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Image;
use crate::tofe::{Label, SourceInfo};

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec, MAX_SEVERITY};
pub use real::{sample_real, sample_real_sized, ConditionBank, RealSample, ShapeClass};

/// One toy diffusion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub id: String,
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance_w: f32,
    /// Training seed of the generator's denoiser.
    pub model_seed: u64,
    pub sampler_seed_base: u64,
}

/// The ten default generators. The first three are the training generators.
pub fn default_generator_specs() -> Vec<GeneratorSpec> {
    use SamplerKind::{DdimSampler as Ddim, DdpmAncestral as Ddpm};
    let table: [(SamplerKind, usize, f32, u64); 10] = [
        (Ddim, 50, 7.5, 101),
        (Ddpm, 20, 3.0, 102),
        (Ddim, 10, 1.0, 103),
        (Ddim, 20, 3.0, 101),
        (Ddpm, 50, 7.5, 103),
        (Ddim, 50, 1.0, 102),
        (Ddpm, 10, 1.0, 101),
        (Ddim, 10, 7.5, 104),
        (Ddpm, 20, 7.5, 104),
        (Ddim, 20, 1.0, 104),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(kind, steps, guidance_w, model_seed))| GeneratorSpec {
            id: format!("g{i:02}"),
            kind,
            steps,
            guidance_w,
            model_seed,
            sampler_seed_base: 10_000 * (i as u64 + 1),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Reals and fakes per training generator in the detector's training split.
    pub train_real: usize,
    pub train_fake: usize,
    /// Reals and fakes per generator in the test split.
    pub test_real: usize,
    pub test_fake: usize,
    pub real_seed: u64,
    /// Ids of the generators whose images train the detector; empty means
    /// the first three.
    pub train_generators: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: real::DEFAULT_IMAGE_SIZE,
            train_real: 500,
            train_fake: 500,
            test_real: 200,
            test_fake: 200,
            real_seed: 2024,
            train_generators: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub source: SourceInfo,
    pub split: Split,
    pub image: Image,
}

/// An in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub generators: Vec<GeneratorSpec>,
    pub train_generators: Vec<String>,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn test_generators(&self) -> Vec<String> {
        self.generators
            .iter()
            .filter(|g| !self.train_generators.contains(&g.id))
            .map(|g| g.id.clone())
            .collect()
    }

    pub fn select<'a>(
        &'a self,
        split: Split,
        generator: Option<&'a str>,
    ) -> impl Iterator<Item = &'a CorpusItem> + 'a {
        self.items
            .iter()
            .filter(move |it| it.split == split && generator.map_or(true, |g| it.source.generator == g))
    }
}

/// Stable 64-bit digest of a string, for deriving sub-seeds.
pub fn seed_for(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Images the toy generators (and the feature extractor) are trained on.
pub fn generator_training_set(seed: u64, n: usize, size: usize, bank: &ConditionBank) -> Vec<ConditionedImage> {
    sample_real_sized(seed, n, size)
        .into_iter()
        .map(|s| ConditionedImage {
            cond: bank.get(s.class).clone(),
            image: s.image,
        })
        .collect()
}

/// Resolves the training-generator list, defaulting to the first three.
pub fn resolve_train_generators(specs: &[GeneratorSpec], cfg: &DatasetConfig) -> Result<Vec<String>> {
    let ids: BTreeSet<&str> = specs.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != specs.len() {
        return Err(Error::Config("generator ids must be unique".into()));
    }
    let train: Vec<String> = if cfg.train_generators.is_empty() {
        specs.iter().take(3).map(|s| s.id.clone()).collect()
    } else {
        cfg.train_generators.clone()
    };
    for id in &train {
        if !ids.contains(id.as_str()) {
            return Err(Error::Config(format!("unknown training generator {id:?}")));
        }
    }
    Ok(train)
}

/// Samples fake image `index` of a generator's split.
pub fn sample_fake(
    spec: &GeneratorSpec,
    model: &DenoiserParams,
    sched: &NoiseSchedule,
    bank: &ConditionBank,
    split: Split,
    index: usize,
) -> Result<Image> {
    let seed = spec.sampler_seed_base
        + match split {
            Split::Train => 0,
            Split::Test => 5_000_000,
        }
        + index as u64;
    let class = ShapeClass::ALL[(seed_for(seed, "class") % ShapeClass::ALL.len() as u64) as usize];
    let z = generate_with(model, sched, spec.kind, spec.steps, bank.get(class), spec.guidance_w, seed)?;
    Ok(z.to_image().quantize_8bit())
}

/// Builds the detection corpus. `models` maps each `model_seed` to its
/// trained denoiser.
pub fn build_corpus(
    specs: &[GeneratorSpec],
    models: &BTreeMap<u64, DenoiserParams>,
    sched: &NoiseSchedule,
    bank: &ConditionBank,
    cfg: &DatasetConfig,
) -> Result<Corpus> {
    if specs.is_empty() {
        return Err(Error::Config("at least one generator is required".into()));
    }
    let train_generators = resolve_train_generators(specs, cfg)?;
    for spec in specs {
        if !models.contains_key(&spec.model_seed) {
            return Err(Error::Config(format!(
                "generator {} needs a model trained with seed {}",
                spec.id, spec.model_seed
            )));
        }
    }

    let mut items = Vec::new();
    for spec in specs {
        let model = &models[&spec.model_seed];
        let mut splits = vec![(Split::Test, cfg.test_real, cfg.test_fake)];
        if train_generators.contains(&spec.id) {
            splits.insert(0, (Split::Train, cfg.train_real, cfg.train_fake));
        }
        for (split, n_real, n_fake) in splits {
            let real_seed = seed_for(cfg.real_seed, &format!("{}/{}", spec.id, split.name()));
            for (i, sample) in sample_real_sized(real_seed, n_real, cfg.image_size).into_iter().enumerate() {
                items.push(CorpusItem {
                    source: SourceInfo {
                        id: format!("{}/{}/real/{i:05}", spec.id, split.name()),
                        label: Label::Real,
                        generator: spec.id.clone(),
                    },
                    split,
                    image: sample.image,
                });
            }
            let fakes: Vec<Image> = (0..n_fake)
                .into_par_iter()
                .map(|i| sample_fake(spec, model, sched, bank, split, i))
                .collect::<Result<_>>()?;
            for (i, image) in fakes.into_iter().enumerate() {
                items.push(CorpusItem {
                    source: SourceInfo {
                        id: format!("{}/{}/fake/{i:05}", spec.id, split.name()),
                        label: Label::Fake,
                        generator: spec.id.clone(),
                    },
                    split,
                    image,
                });
            }
        }
    }
    Ok(Corpus {
        generators: specs.to_vec(),
        train_generators,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserTopology;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn default_specs_layout() {
        let specs = default_generator_specs();
        assert_eq!(specs.len(), 10);
        let train = resolve_train_generators(&specs, &DatasetConfig::default()).unwrap();
        assert_eq!(train, vec!["g00", "g01", "g02"]);
        let kinds: BTreeSet<_> = specs.iter().map(|s| format!("{:?}", s.kind)).collect();
        assert_eq!(kinds.len(), 2);
    }

    #[test]
    fn rejects_bad_configuration() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let bank = ConditionBank::new(1, 32);
        let models = BTreeMap::new();
        assert!(matches!(
            build_corpus(&[], &models, &sched, &bank, &DatasetConfig::default()),
            Err(Error::Config(_))
        ));
        let specs = default_generator_specs();
        assert!(matches!(
            build_corpus(&specs, &models, &sched, &bank, &DatasetConfig::default()),
            Err(Error::Config(_))
        ));
        let cfg = DatasetConfig {
            train_generators: vec!["nope".into()],
            ..DatasetConfig::default()
        };
        assert!(resolve_train_generators(&specs, &cfg).is_err());
        let mut dup = specs.clone();
        dup[1].id = dup[0].id.clone();
        assert!(resolve_train_generators(&dup, &DatasetConfig::default()).is_err());
    }

    #[test]
    fn small_corpus_counts_and_determinism() {
        let sched = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let bank = ConditionBank::new(1, 32);
        let specs: Vec<GeneratorSpec> = default_generator_specs().into_iter().take(4).map(|mut s| {
            s.steps = s.steps.min(10);
            s
        }).collect();
        let models: BTreeMap<u64, DenoiserParams> = specs
            .iter()
            .map(|s| (s.model_seed, DenoiserParams::init(DenoiserTopology::default(), s.model_seed)))
            .collect();
        let cfg = DatasetConfig {
            train_real: 3,
            train_fake: 2,
            test_real: 2,
            test_fake: 1,
            ..DatasetConfig::default()
        };
        let corpus = build_corpus(&specs, &models, &sched, &bank, &cfg).unwrap();
        // 3 training generators with both splits, 1 test-only generator.
        assert_eq!(corpus.items.len(), 3 * (3 + 2 + 2 + 1) + (2 + 1));
        assert_eq!(corpus.test_generators(), vec!["g03"]);
        assert_eq!(corpus.select(Split::Train, Some("g03")).count(), 0);
        assert_eq!(corpus, build_corpus(&specs, &models, &sched, &bank, &cfg).unwrap());
        let ids: BTreeSet<_> = corpus.items.iter().map(|i| i.source.id.clone()).collect();
        assert_eq!(ids.len(), corpus.items.len());
    }
}
