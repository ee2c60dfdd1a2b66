//! Detection head: a four-layer MLP trained with cross-entropy on
//! standardized feature vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::OptimizerKind;
use crate::nn::{chunked_gradients, Activation, Mlp, Optimizer};
use crate::tofe::Label;

pub const DEFAULT_CLASSIFIER_WIDTH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub optimizer: OptimizerKind,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            iterations: 10_000,
            batch_size: 64,
            seed: 0,
            hidden: DEFAULT_CLASSIFIER_WIDTH,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Trained detector plus the feature standardization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub net: Mlp,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, feature: &[f32]) -> Vec<f32> {
        feature
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }

    /// `(p_real, p_fake)` from a softmax over the two logits.
    pub fn probabilities(&self, feature: &[f32]) -> Result<(f64, f64)> {
        if feature.len() != self.input_dim() {
            return Err(Error::shape(
                format!("{}-dim feature", self.input_dim()),
                format!("{}-dim feature", feature.len()),
            ));
        }
        let logits = self.net.forward(&self.standardize(feature));
        Ok(softmax2(logits[0] as f64, logits[1] as f64))
    }
}

fn softmax2(real: f64, fake: f64) -> (f64, f64) {
    let m = real.max(fake);
    let (er, ef) = ((real - m).exp(), (fake - m).exp());
    (er / (er + ef), ef / (er + ef))
}

/// Probability that `feature` is fake.
pub fn predict(model: &MlpModel, feature: &[f32]) -> Result<f64> {
    model.probabilities(feature).map(|(_, fake)| fake)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub model: MlpModel,
    /// Mean cross-entropy of each mini-batch.
    pub loss_curve: Vec<f32>,
}

const CHUNK: usize = 8;

pub fn train_mlp(features: &[Vec<f32>], labels: &[Label], cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", features.len()), format!("{} labels", labels.len())));
    }
    if !(labels.contains(&Label::Real) && labels.contains(&Label::Fake)) {
        return Err(Error::Config("classifier training needs both real and fake examples".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("learning_rate and batch_size must be positive".into()));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape(format!("{dim}-dim features"), format!("{}-dim feature", bad.len())));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; dim];
    for f in features {
        for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-12 { v.sqrt() as f32 } else { 1.0 })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let widths = [dim, cfg.hidden, cfg.hidden, cfg.hidden, 2];
    let mut model = MlpModel {
        net: Mlp::new(&widths, Activation::Silu, &mut rng),
        mean,
        std,
    };
    let inputs: Vec<Vec<f32>> = features.iter().map(|f| model.standardize(f)).collect();
    let targets: Vec<usize> = labels.iter().map(|&l| l.code() as usize).collect();

    let mut opt = Optimizer::new(cfg.optimizer, &model.net, cfg.learning_rate, 0.0);
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..inputs.len())).collect();
        let net = &model.net;
        let (mut grads, loss) = chunked_gradients(net, &batch, CHUNK, |&i, grads| {
            let trace = net.forward_traced(&inputs[i]);
            let out = trace.output();
            let (pr, pf) = softmax2(out[0] as f64, out[1] as f64);
            let probs = [pr, pf];
            let grad_out: Vec<f32> = (0..2)
                .map(|k| (probs[k] - if k == targets[i] { 1.0 } else { 0.0 }) as f32)
                .collect();
            net.backward(&trace, &grad_out, Some(grads), 0..0);
            -(probs[targets[i]].max(1e-300).ln()) as f32
        });
        grads.scale(1.0 / cfg.batch_size as f32);
        opt.step(&mut model.net, &grads);
        loss_curve.push(loss / cfg.batch_size as f32);
    }
    if !model.net.is_finite() {
        return Err(Error::Numeric("classifier training diverged".into()));
    }
    Ok(TrainedClassifier { model, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, separation: f32, seed: u64) -> (Vec<Vec<f32>>, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let centre = if label == Label::Fake { separation / 2.0 } else { -separation / 2.0 };
            f.push(vec![
                centre + rng.sample::<f32, _>(StandardNormal),
                rng.sample::<f32, _>(StandardNormal),
            ]);
            l.push(label);
        }
        (f, l)
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let (f, l) = blobs(20, 6.0, 1);
        let cfg = ClassifierConfig { iterations: 0, hidden: 16, ..ClassifierConfig::default() };
        let a = train_mlp(&f, &l, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Mlp::new(&[2, 16, 16, 16, 2], Activation::Silu, &mut rng);
        assert_eq!(a.model.net, init);
        assert!(a.loss_curve.is_empty());
    }

    #[test]
    fn separates_blobs_at_default_rate() {
        let (f, l) = blobs(400, 6.0, 2);
        let trained = train_mlp(&f, &l, &ClassifierConfig::default()).unwrap();
        let correct = f
            .iter()
            .zip(&l)
            .filter(|(x, &y)| (predict(&trained.model, x).unwrap() >= 0.5) == (y == Label::Fake))
            .count();
        assert!(correct as f64 / f.len() as f64 >= 0.99, "accuracy {}", correct as f64 / 400.0);
        let c = &trained.loss_curve;
        assert!(c[c.len() - 1] <= c[0]);
    }

    #[test]
    fn prediction_properties() {
        let (f, l) = blobs(40, 6.0, 3);
        let cfg = ClassifierConfig { iterations: 50, hidden: 16, ..ClassifierConfig::default() };
        let m = train_mlp(&f, &l, &cfg).unwrap().model;
        let x = &f[0];
        assert_eq!(predict(&m, x).unwrap(), predict(&m, x).unwrap());
        let (pr, pf) = m.probabilities(x).unwrap();
        assert!((pr + pf - 1.0).abs() < 1e-6);
        assert!(pf > 0.0 && pf < 1.0);
        assert_eq!(softmax2(0.3, 0.3), (0.5, 0.5));
        assert!(predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn deterministic_and_invariant_to_feature_rescaling() {
        let (f, l) = blobs(60, 4.0, 4);
        let cfg = ClassifierConfig { iterations: 200, hidden: 32, learning_rate: 1e-3, ..ClassifierConfig::default() };
        let a = train_mlp(&f, &l, &cfg).unwrap();
        assert_eq!(a, train_mlp(&f, &l, &cfg).unwrap());
        // Powers of two keep the rescaling exact in floating point.
        let map = |x: &Vec<f32>| vec![x[0] * 4.0 + 3.0, x[1] * 0.5 - 1.0];
        let g: Vec<Vec<f32>> = f.iter().map(map).collect();
        let b = train_mlp(&g, &l, &cfg).unwrap();
        for (x, y) in f.iter().zip(&g) {
            let (pa, pb) = (predict(&a.model, x).unwrap(), predict(&b.model, y).unwrap());
            assert!((pa - pb).abs() < 1e-5, "{pa} vs {pb}");
        }
    }

    #[test]
    fn rejects_bad_training_sets() {
        let f = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            train_mlp(&f, &[Label::Real, Label::Real], &ClassifierConfig::default()),
            Err(Error::Config(_))
        ));
        let g = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(
            train_mlp(&g, &[Label::Real, Label::Fake], &ClassifierConfig::default()),
            Err(Error::Shape { .. })
        ));
    }
}
