//! End-to-end experiments: detection benchmark, separation analysis,
//! reconstruction quality, robustness sweep and ablations.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict, train_mlp, ClassifierConfig, MlpModel, TrainedClassifier};
use crate::config::{AnalysisConfig, ExperimentConfig, RobustnessConfig};
use crate::datagen::{
    build_corpus, corrupt, generator_training_set, seed_for, ConditionBank, Corpus, CorpusItem, CorruptionKind,
    CorruptionSpec, Split,
};
use crate::denoiser::{train_denoiser, DenoiserParams, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_ap, js_divergence_2d, mmd_rbf, psnr, ssim, tsne, Bandwidth, PointCloud};
use crate::schedule::NoiseSchedule;
use crate::tensor::Image;
use crate::tofe::{extract_many, reconstruct, reconstruct_null, Extraction, Label, TofeConfig, TofeFeature};

/// Detector decision threshold on the fake probability.
pub const DECISION_THRESHOLD: f64 = 0.5;
/// PSNR of identical images is infinite; means use this ceiling instead.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_seed: u64,
    pub initial_loss: f32,
    pub final_loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub extractor: DenoiserParams,
    /// Generator denoisers keyed by model seed.
    pub generators: BTreeMap<u64, DenoiserParams>,
    pub summaries: Vec<TrainSummary>,
}

pub fn condition_bank(cfg: &ExperimentConfig) -> ConditionBank {
    ConditionBank::new(cfg.models.bank_seed, cfg.denoiser.cond_dim)
}

/// Training settings of one model; the optimizer seed mixes the shared
/// training seed with the model seed.
pub fn model_train_config(cfg: &ExperimentConfig, model_seed: u64) -> TrainConfig {
    TrainConfig {
        seed: seed_for(cfg.training.seed, &format!("model/{model_seed}")),
        ..cfg.training.clone()
    }
}

/// Trains the model behind `model_seed` on the shared real training set.
pub fn train_model(cfg: &ExperimentConfig, model_seed: u64) -> Result<(DenoiserParams, TrainSummary)> {
    let sched = cfg.schedule()?;
    let bank = condition_bank(cfg);
    let data = generator_training_set(
        cfg.models.data_seed,
        cfg.models.training_images,
        cfg.dataset.image_size,
        &bank,
    );
    let (params, report) = train_denoiser(&data, &sched, cfg.denoiser, &model_train_config(cfg, model_seed))?;
    Ok((
        params,
        TrainSummary { model_seed, initial_loss: report.initial_loss, final_loss: report.final_loss },
    ))
}

/// Trains every generator model plus the feature extractor.
pub fn train_models(cfg: &ExperimentConfig) -> Result<TrainedModels> {
    cfg.validate()?;
    let seeds: BTreeSet<u64> = cfg.generators.iter().map(|g| g.model_seed).collect();
    let (extractor, summary) = train_model(cfg, cfg.models.extractor_seed)?;
    let mut summaries = vec![summary];
    let mut generators = BTreeMap::new();
    for seed in seeds {
        let (params, summary) = train_model(cfg, seed)?;
        summaries.push(summary);
        generators.insert(seed, params);
    }
    Ok(TrainedModels { extractor, generators, summaries })
}

pub fn build_dataset(cfg: &ExperimentConfig, generators: &BTreeMap<u64, DenoiserParams>) -> Result<Corpus> {
    build_corpus(&cfg.generators, generators, &cfg.schedule()?, &condition_bank(cfg), &cfg.dataset)
}

fn tagged(items: &[&CorpusItem]) -> Vec<(Image, crate::tofe::SourceInfo)> {
    items.iter().map(|it| (it.image.clone(), it.source.clone())).collect()
}

/// TOFE features of every corpus item, in corpus order.
pub fn extract_corpus(
    corpus: &Corpus,
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
) -> Result<Vec<Extraction>> {
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    extract_many(&tagged(&items), extractor, sched, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentSummary {
    pub images: usize,
    /// Images whose final loss is at most the initial loss at every step.
    pub descended: usize,
    pub fraction: f64,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
}

pub fn descent_summary(extractions: &[Extraction]) -> DescentSummary {
    let images = extractions.len();
    let descended = extractions
        .iter()
        .filter(|e| {
            e.per_step_initial_loss
                .iter()
                .zip(&e.feature.per_step_final_loss)
                .all(|(i, f)| f <= i)
        })
        .count();
    let mean = |f: &dyn Fn(&Extraction) -> &[f32]| {
        let (sum, n) = extractions
            .iter()
            .flat_map(|e| f(e).iter())
            .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    DescentSummary {
        images,
        descended,
        fraction: if images == 0 { 0.0 } else { descended as f64 / images as f64 },
        mean_initial_loss: mean(&|e| &e.per_step_initial_loss),
        mean_final_loss: mean(&|e| &e.feature.per_step_final_loss),
    }
}

fn check_aligned(corpus: &Corpus, features: &[TofeFeature]) -> Result<()> {
    if corpus.items.len() != features.len() {
        return Err(Error::Contract(format!(
            "{} features for {} dataset items",
            features.len(),
            corpus.items.len()
        )));
    }
    if let Some((it, f)) = corpus.items.iter().zip(features).find(|(it, f)| it.source != f.source) {
        return Err(Error::Contract(format!(
            "feature {} is out of step with dataset item {}",
            f.source.id, it.source.id
        )));
    }
    Ok(())
}

/// Fails if any listed id is not a training-split image of a training
/// generator.
pub fn assert_no_leak(corpus: &Corpus, training_ids: &[&str]) -> Result<()> {
    let allowed: BTreeSet<&str> = corpus
        .items
        .iter()
        .filter(|it| it.split == Split::Train && corpus.train_generators.contains(&it.source.generator))
        .map(|it| it.source.id.as_str())
        .collect();
    match training_ids.iter().find(|id| !allowed.contains(**id)) {
        Some(id) => Err(Error::Contract(format!("detector training would see held-out image {id}"))),
        None => Ok(()),
    }
}

/// Trains the detector on the training split of the training generators.
pub fn train_detector(corpus: &Corpus, features: &[TofeFeature], cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    check_aligned(corpus, features)?;
    let chosen: Vec<&TofeFeature> = corpus
        .items
        .iter()
        .zip(features)
        .filter(|(it, _)| it.split == Split::Train && corpus.train_generators.contains(&it.source.generator))
        .map(|(_, f)| f)
        .collect();
    let ids: Vec<&str> = chosen.iter().map(|f| f.source.id.as_str()).collect();
    assert_no_leak(corpus, &ids)?;
    let x: Vec<Vec<f32>> = chosen.iter().map(|f| f.flatten()).collect();
    let y: Vec<Label> = chosen.iter().map(|f| f.source.label).collect();
    train_mlp(&x, &y, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub generator: String,
    pub in_distribution: bool,
    pub real: usize,
    pub fake: usize,
    pub acc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: Vec<DetectionRow>,
    pub average_acc: f64,
    pub average_ap: f64,
    pub id_average_acc: f64,
    pub ood_average_acc: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores the test split of every generator. Shared by the benchmark and
/// the robustness sweep so their uncorrupted results agree exactly.
pub fn evaluate_detector(corpus: &Corpus, features: &[TofeFeature], model: &MlpModel) -> Result<DetectionReport> {
    check_aligned(corpus, features)?;
    let mut rows = Vec::with_capacity(corpus.generators.len());
    for g in &corpus.generators {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (it, f) in corpus.items.iter().zip(features) {
            if it.split == Split::Test && it.source.generator == g.id {
                scores.push(predict(model, &f.flatten())?);
                labels.push(it.source.label.code());
            }
        }
        let (acc, ap) = accuracy_ap(&scores, &labels, DECISION_THRESHOLD)?;
        let fake = labels.iter().filter(|&&l| l == 1).count();
        rows.push(DetectionRow {
            generator: g.id.clone(),
            in_distribution: corpus.train_generators.contains(&g.id),
            real: labels.len() - fake,
            fake,
            acc,
            ap,
        });
    }
    Ok(DetectionReport {
        average_acc: mean_of(rows.iter().map(|r| r.acc)),
        average_ap: mean_of(rows.iter().map(|r| r.ap)),
        id_average_acc: mean_of(rows.iter().filter(|r| r.in_distribution).map(|r| r.acc)),
        ood_average_acc: mean_of(rows.iter().filter(|r| !r.in_distribution).map(|r| r.acc)),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: DetectionReport,
    pub classifier: TrainedClassifier,
    pub extractions: Vec<Extraction>,
}

/// Extracts features for the whole corpus, trains the detector and scores
/// every generator.
pub fn run_detection_benchmark(
    corpus: &Corpus,
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
    tofe_cfg: &TofeConfig,
    clf_cfg: &ClassifierConfig,
) -> Result<BenchmarkOutcome> {
    let extractions = extract_corpus(corpus, extractor, sched, tofe_cfg)?;
    let features: Vec<TofeFeature> = extractions.iter().map(|e| e.feature.clone()).collect();
    let classifier = train_detector(corpus, &features, clf_cfg)?;
    let report = evaluate_detector(corpus, &features, &classifier.model)?;
    Ok(BenchmarkOutcome { report, classifier, extractions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    Tofe,
    Pixels,
}

impl FeatureMethod {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMethod::Tofe => "tofe",
            FeatureMethod::Pixels => "pixels",
        }
    }
}

/// Real and fake feature vectors of one generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationGroup {
    pub generator: String,
    pub real: Vec<Vec<f32>>,
    pub fake: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub generator: String,
    pub method: FeatureMethod,
    pub real: usize,
    pub fake: usize,
    pub mmd: f64,
    pub js: f64,
}

/// Minimum reals and fakes per generator for the separation analysis.
pub const MIN_SEPARATION_SAMPLES: usize = 50;

/// Embeds reals and fakes jointly with t-SNE, then measures MMD and JS
/// divergence between the two projected clouds.
pub fn separation_scores(real: &[Vec<f32>], fake: &[Vec<f32>], cfg: &AnalysisConfig) -> Result<(f64, f64)> {
    if real.len() < MIN_SEPARATION_SAMPLES || fake.len() < MIN_SEPARATION_SAMPLES {
        return Err(Error::Config(format!(
            "separation analysis needs {MIN_SEPARATION_SAMPLES} reals and fakes, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    // Bitwise-equal rows share one t-SNE point.
    let mut slot: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    let mut unique: Vec<&Vec<f32>> = Vec::new();
    let index: Vec<usize> = real
        .iter()
        .chain(fake)
        .map(|row| {
            *slot.entry(row.iter().map(|v| v.to_bits()).collect()).or_insert_with(|| {
                unique.push(row);
                unique.len() - 1
            })
        })
        .collect();
    let embedding = tsne(&PointCloud::from_f32_rows(&unique)?, &cfg.tsne)?.embedding;
    let rows = |ids: &[usize]| PointCloud::from_rows(&ids.iter().map(|&i| embedding.point(i)).collect::<Vec<_>>());
    let (x, y) = (rows(&index[..real.len()])?, rows(&index[real.len()..])?);
    Ok((mmd_rbf(&x, &y, Bandwidth::Median)?, js_divergence_2d(&x, &y, cfg.js_bins)?))
}

/// Test-split groups per generator, capped at `per_class` reals and fakes:
/// TOFE features and raw pixels of the same images.
pub fn separation_groups(
    corpus: &Corpus,
    features: &[TofeFeature],
    per_class: usize,
) -> Result<(Vec<SeparationGroup>, Vec<SeparationGroup>)> {
    check_aligned(corpus, features)?;
    let mut tofe = Vec::new();
    let mut pixels = Vec::new();
    for g in &corpus.generators {
        let mut t = SeparationGroup { generator: g.id.clone(), real: Vec::new(), fake: Vec::new() };
        let mut p = t.clone();
        for (it, f) in corpus.items.iter().zip(features) {
            if it.split != Split::Test || it.source.generator != g.id {
                continue;
            }
            let (tv, pv) = match it.source.label {
                Label::Real => (&mut t.real, &mut p.real),
                Label::Fake => (&mut t.fake, &mut p.fake),
            };
            if tv.len() < per_class {
                tv.push(f.flatten());
                pv.push(it.image.pixels.clone());
            }
        }
        tofe.push(t);
        pixels.push(p);
    }
    Ok((tofe, pixels))
}

fn separation_rows(groups: &[SeparationGroup], method: FeatureMethod, cfg: &AnalysisConfig) -> Result<Vec<SeparationRow>> {
    groups
        .par_iter()
        .map(|g| {
            let (mmd, js) = separation_scores(&g.real, &g.fake, cfg)?;
            Ok(SeparationRow {
                generator: g.generator.clone(),
                method,
                real: g.real.len(),
                fake: g.fake.len(),
                mmd,
                js,
            })
        })
        .collect()
}

/// One TOFE row and one raw-pixel row per generator.
pub fn run_separation_analysis(
    tofe: &[SeparationGroup],
    pixels: &[SeparationGroup],
    cfg: &AnalysisConfig,
) -> Result<Vec<SeparationRow>> {
    let a = separation_rows(tofe, FeatureMethod::Tofe, cfg)?;
    let b = separation_rows(pixels, FeatureMethod::Pixels, cfg)?;
    let mut by_gen: BTreeMap<&str, Vec<SeparationRow>> = BTreeMap::new();
    for row in a.iter().chain(&b) {
        by_gen.entry(row.generator.as_str()).or_default().push(row.clone());
    }
    let order: Vec<&str> = tofe.iter().chain(pixels).map(|g| g.generator.as_str()).collect();
    let mut seen = BTreeSet::new();
    Ok(order
        .into_iter()
        .filter(|g| seen.insert(*g))
        .flat_map(|g| by_gen.remove(g).unwrap_or_default())
        .collect())
}

/// Generators on which TOFE beats the raw-pixel baseline on both MMD and JS.
pub fn tofe_wins(rows: &[SeparationRow]) -> Vec<String> {
    let pick = |m: FeatureMethod| -> BTreeMap<&str, &SeparationRow> {
        rows.iter().filter(|r| r.method == m).map(|r| (r.generator.as_str(), r)).collect()
    };
    let (t, p) = (pick(FeatureMethod::Tofe), pick(FeatureMethod::Pixels));
    t.iter()
        .filter(|(g, tr)| p.get(*g).map_or(false, |pr| tr.mmd > pr.mmd && tr.js > pr.js))
        .map(|(g, _)| g.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub images: usize,
    /// Images where the optimized embeddings reconstruct with higher PSNR
    /// than the null embedding.
    pub improved: usize,
    pub improved_fraction: f64,
    pub tofe_psnr_mean: f64,
    pub null_psnr_mean: f64,
    pub tofe_ssim_mean: f64,
    pub null_ssim_mean: f64,
}

/// Indices of up to `n` test items spread evenly over the test split.
pub fn spread_test_indices(corpus: &Corpus, n: usize) -> Vec<usize> {
    let test: Vec<usize> = (0..corpus.items.len()).filter(|&i| corpus.items[i].split == Split::Test).collect();
    if n == 0 || test.is_empty() {
        return Vec::new();
    }
    let n = n.min(test.len());
    (0..n).map(|k| test[k * test.len() / n]).collect()
}

/// Reconstructs images from their trajectory end, once guided by the TOFE
/// embeddings and once by the null embedding.
pub fn run_reconstruction(
    corpus: &Corpus,
    features: &[TofeFeature],
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TofeConfig,
    images: usize,
) -> Result<ReconstructionReport> {
    check_aligned(corpus, features)?;
    let picked = spread_test_indices(corpus, images);
    let scores: Vec<[f64; 4]> = picked
        .par_iter()
        .map(|&i| {
            let original = &corpus.items[i].image;
            let f = &features[i];
            let ours = reconstruct(f, extractor, sched, cfg, &f.z_end)?.to_image();
            let null = reconstruct_null(extractor, sched, cfg, &f.z_end)?.to_image();
            Ok([psnr(original, &ours)?, psnr(original, &null)?, ssim(original, &ours)?, ssim(original, &null)?])
        })
        .collect::<Result<_>>()?;
    let improved = scores.iter().filter(|s| s[0] > s[1]).count();
    let col = |k: usize| mean_of(scores.iter().map(|s| if k < 2 { s[k].min(PSNR_CAP) } else { s[k] }));
    Ok(ReconstructionReport {
        images: scores.len(),
        improved,
        improved_fraction: if scores.is_empty() { 0.0 } else { improved as f64 / scores.len() as f64 },
        tofe_psnr_mean: col(0),
        null_psnr_mean: col(1),
        tofe_ssim_mean: col(2),
        null_ssim_mean: col(3),
    })
}

/// Applies a corruption to a `[-1, 1]` image. Severity 0 returns the image
/// untouched without a range round trip.
pub fn corrupt_signed(image: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    if spec.severity == 0 {
        return corrupt(image, spec, seed);
    }
    Ok(corrupt(&image.to_unit_range(), spec, seed)?.from_unit_range())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Average over generators, as in the detection benchmark.
    pub ap: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub points: Vec<RobustnessPoint>,
    /// Spearman correlation between severity and AP per kind.
    pub spearman: BTreeMap<CorruptionKind, f64>,
}

/// Re-extracts features of corrupted test images and scores them with the
/// trained detector, for every kind and severity `0..=max_severity`.
pub fn run_robustness(
    corpus: &Corpus,
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
    tofe_cfg: &TofeConfig,
    model: &MlpModel,
    cfg: &RobustnessConfig,
) -> Result<RobustnessReport> {
    let test = Corpus {
        generators: corpus.generators.clone(),
        train_generators: corpus.train_generators.clone(),
        items: corpus.items.iter().filter(|it| it.split == Split::Test).cloned().collect(),
    };
    let mut points = Vec::new();
    let mut spearman = BTreeMap::new();
    for &kind in &cfg.kinds {
        let mut aps = Vec::new();
        for severity in 0..=cfg.max_severity {
            let spec = CorruptionSpec::new(kind, severity)?;
            let items = test
                .items
                .par_iter()
                .map(|it| {
                    let seed = seed_for(cfg.seed, &format!("{}/{}/{}", kind.name(), severity, it.source.id));
                    Ok(CorpusItem { image: corrupt_signed(&it.image, spec, seed)?, ..it.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            let corrupted = Corpus { items, ..test.clone() };
            let features: Vec<TofeFeature> = extract_corpus(&corrupted, extractor, sched, tofe_cfg)?
                .into_iter()
                .map(|e| e.feature)
                .collect();
            let report = evaluate_detector(&corrupted, &features, model)?;
            aps.push(report.average_ap);
            points.push(RobustnessPoint { kind, severity, ap: report.average_ap, acc: report.average_acc });
        }
        let levels: Vec<f64> = (0..aps.len()).map(|s| s as f64).collect();
        spearman.insert(kind, spearman_correlation(&levels, &aps));
    }
    Ok(RobustnessReport { points, spearman })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. A constant input
/// has no rank order and yields 0.
pub fn spearman_correlation(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Eta,
    Iters,
    Steps,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Eta => "eta",
            AblationAxis::Iters => "iters",
            AblationAxis::Steps => "steps",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TofeConfig, value: f64) -> Result<TofeConfig> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        let mut cfg = base.clone();
        match self {
            AblationAxis::Eta => cfg.eta = value as f32,
            AblationAxis::Iters => cfg.iters = count()?,
            AblationAxis::Steps => cfg.steps = count()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: f64,
    pub config: TofeConfig,
    pub mean_mmd: f64,
    pub mean_js: f64,
    pub generators: Vec<SeparationRow>,
}

/// Reruns the TOFE separation analysis once per axis value on the first
/// `per_class` test reals and fakes of every generator.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[f64],
    base: &TofeConfig,
    corpus: &Corpus,
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
    analysis: &AnalysisConfig,
    per_class: usize,
) -> Result<Vec<AblationRow>> {
    let mut kept = Vec::new();
    for g in &corpus.generators {
        for label in [Label::Real, Label::Fake] {
            kept.extend(
                corpus
                    .items
                    .iter()
                    .filter(|it| it.split == Split::Test && it.source.generator == g.id && it.source.label == label)
                    .take(per_class)
                    .cloned(),
            );
        }
    }
    let subset = Corpus { items: kept, ..corpus.clone() };
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis.apply(base, value)?;
        let features: Vec<TofeFeature> = extract_corpus(&subset, extractor, sched, &cfg)?
            .into_iter()
            .map(|e| e.feature)
            .collect();
        let (groups, _) = separation_groups(&subset, &features, per_class)?;
        let generators = separation_rows(&groups, FeatureMethod::Tofe, analysis)?;
        rows.push(AblationRow {
            axis,
            value,
            config: cfg,
            mean_mmd: mean_of(generators.iter().map(|r| r.mmd)),
            mean_js: mean_of(generators.iter().map(|r| r.js)),
            generators,
        });
    }
    Ok(rows)
}

/// Widens an f32 through its shortest decimal form, so `0.01f32` reports
/// as `0.01`.
fn f32_to_decimal(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

/// Runs every configured ablation axis.
pub fn run_all_ablations(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    extractor: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<Vec<AblationRow>> {
    let a = &cfg.ablation;
    let axes = [
        (AblationAxis::Eta, a.eta.iter().map(|&v| f32_to_decimal(v)).collect::<Vec<_>>()),
        (AblationAxis::Iters, a.iters.iter().map(|&v| v as f64).collect()),
        (AblationAxis::Steps, a.steps.iter().map(|&v| v as f64).collect()),
    ];
    let mut rows = Vec::new();
    for (axis, values) in axes {
        rows.extend(run_ablation(axis, &values, &cfg.tofe, corpus, extractor, sched, &cfg.analysis, a.per_class)?);
    }
    Ok(rows)
}

/// Everything an experiment reports. Sections are filled by the stages that
/// produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub models: Option<Vec<TrainSummary>>,
    pub descent: Option<DescentSummary>,
    pub detection: Option<DetectionReport>,
    pub separation: Option<Vec<SeparationRow>>,
    pub reconstruction: Option<ReconstructionReport>,
    pub robustness: Option<RobustnessReport>,
    pub ablation: Option<Vec<AblationRow>>,
}

impl ExperimentReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("models.data_seed".into(), cfg.models.data_seed);
        seeds.insert("models.bank_seed".into(), cfg.models.bank_seed);
        seeds.insert("models.extractor_seed".into(), cfg.models.extractor_seed);
        seeds.insert("training.seed".into(), cfg.training.seed);
        seeds.insert("dataset.real_seed".into(), cfg.dataset.real_seed);
        seeds.insert("classifier.seed".into(), cfg.classifier.seed);
        seeds.insert("analysis.tsne.seed".into(), cfg.analysis.tsne.seed);
        seeds.insert("robustness.seed".into(), cfg.robustness.seed);
        for g in &cfg.generators {
            seeds.insert(format!("generators.{}.model_seed", g.id), g.model_seed);
            seeds.insert(format!("generators.{}.sampler_seed_base", g.id), g.sampler_seed_base);
        }
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seeds,
            models: None,
            descent: None,
            detection: None,
            separation: None,
            reconstruction: None,
            robustness: None,
            ablation: None,
        }
    }
}

fn to_csv<R: Serialize>(records: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Contract(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(format!("csv: {e}")))
}

pub fn detection_csv(report: &DetectionReport) -> Result<String> {
    to_csv(&report.rows)
}

pub fn separation_csv(rows: &[SeparationRow]) -> Result<String> {
    to_csv(rows)
}

/// One `(kind, severity, ap)` line per robustness point.
pub fn robustness_csv(report: &RobustnessReport) -> Result<String> {
    #[derive(Serialize)]
    struct Line {
        kind: CorruptionKind,
        severity: u8,
        ap: f64,
    }
    to_csv(report.points.iter().map(|p| Line { kind: p.kind, severity: p.severity, ap: p.ap }))
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    #[derive(Serialize)]
    struct Line {
        axis: AblationAxis,
        value: f64,
        mean_mmd: f64,
        mean_js: f64,
    }
    to_csv(rows.iter().map(|r| Line { axis: r.axis, value: r.value, mean_mmd: r.mean_mmd, mean_js: r.mean_js }))
}
