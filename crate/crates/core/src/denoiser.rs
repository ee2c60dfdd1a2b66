//! Conditional noise predictor `eps_theta(z_t, t, C)` and everything that
//! differentiates through it.
//!
//! The network is a flatten-and-concatenate MLP: the input is the flattened
//! latent, a sinusoidal timestep embedding and the condition embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{chunked_gradients, Activation, Mlp, Optimizer, OptimizerKind};
use crate::schedule::{cfg_predict, ddim_transition, NoiseSchedule};
use crate::tensor::{check_len, Image, Latent};

pub const DEFAULT_COND_DIM: usize = 32;
pub const DEFAULT_TIME_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    NullText,
    Optimized,
    Custom,
}

impl EmbeddingOrigin {
    pub fn code(self) -> u8 {
        match self {
            EmbeddingOrigin::NullText => 0,
            EmbeddingOrigin::Optimized => 1,
            EmbeddingOrigin::Custom => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbeddingOrigin::NullText),
            1 => Some(EmbeddingOrigin::Optimized),
            2 => Some(EmbeddingOrigin::Custom),
            _ => None,
        }
    }
}

/// A continuous text-condition vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub values: Vec<f32>,
    pub origin: EmbeddingOrigin,
}

impl ConditionEmbedding {
    /// The null-text embedding used for unconditional prediction.
    pub fn null_text(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            origin: EmbeddingOrigin::NullText,
        }
    }

    pub fn custom(values: Vec<f32>) -> Self {
        Self {
            values,
            origin: EmbeddingOrigin::Custom,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fixed architecture of a denoiser; recorded in the parameter file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTopology {
    pub height: usize,
    pub width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for DenoiserTopology {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            time_dim: DEFAULT_TIME_DIM,
            cond_dim: DEFAULT_COND_DIM,
            hidden: DEFAULT_HIDDEN,
            hidden_layers: 2,
            activation: Activation::Silu,
        }
    }
}

impl DenoiserTopology {
    pub fn latent_len(&self) -> usize {
        self.height * self.width
    }

    pub fn input_dim(&self) -> usize {
        self.latent_len() + self.time_dim + self.cond_dim
    }

    /// Position of the condition embedding inside the network input.
    pub fn cond_range(&self) -> std::ops::Range<usize> {
        let start = self.latent_len() + self.time_dim;
        start..start + self.cond_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        w.push(self.latent_len());
        w
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

/// Anything that can predict the noise in a latent.
pub trait NoisePredictor: Sync {
    fn predict(&self, z_t: &Latent, t: usize, cond: &ConditionEmbedding) -> Result<Vec<f32>>;
}

/// Weights of the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    topology: DenoiserTopology,
    net: Mlp,
}

impl DenoiserParams {
    pub fn init(topology: DenoiserTopology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&topology.widths(), topology.activation, &mut rng);
        Self { topology, net }
    }

    pub fn zeros(topology: DenoiserTopology) -> Self {
        Self {
            topology,
            net: Mlp::zeros(&topology.widths(), topology.activation),
        }
    }

    pub fn from_parts(topology: DenoiserTopology, net: Mlp) -> Result<Self> {
        if net.widths() != topology.widths() || net.activation != topology.activation {
            return Err(Error::shape(
                format!("{:?}", topology.widths()),
                format!("{:?}", net.widths()),
            ));
        }
        Ok(Self { topology, net })
    }

    pub fn topology(&self) -> &DenoiserTopology {
        &self.topology
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite()
    }

    fn input(&self, z: &[f32], t: usize, cond: &[f32]) -> Result<Vec<f32>> {
        check_len(self.topology.latent_len(), z.len())?;
        check_len(self.topology.cond_dim, cond.len())?;
        let mut x = Vec::with_capacity(self.topology.input_dim());
        x.extend_from_slice(z);
        x.extend(timestep_embedding(t, self.topology.time_dim));
        x.extend_from_slice(cond);
        Ok(x)
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, z_t: &Latent, t: usize, cond: &ConditionEmbedding) -> Result<Vec<f32>> {
        denoiser_forward(self, z_t, t, cond)
    }
}

pub fn denoiser_forward(
    params: &DenoiserParams,
    z_t: &Latent,
    t: usize,
    cond: &ConditionEmbedding,
) -> Result<Vec<f32>> {
    let x = params.input(&z_t.data, t, &cond.values)?;
    Ok(params.net.forward(&x))
}

/// The guided-denoising reconstruction objective for one transition
/// `z_t -> z_prev`, as a function of the condition embedding alone.
///
/// The unconditional prediction does not depend on the condition, so it is
/// evaluated once and reused across gradient steps.
pub struct GuidedStepObjective<'a> {
    params: &'a DenoiserParams,
    input: Vec<f32>,
    eps_uncond: Vec<f32>,
    target: &'a [f32],
    z_t: &'a [f32],
    scale: f32,
    noise: f32,
    guidance: f32,
}

impl<'a> GuidedStepObjective<'a> {
    pub fn new(
        params: &'a DenoiserParams,
        z_t: &'a Latent,
        t: usize,
        uncond: &ConditionEmbedding,
        guidance: f32,
        target: &'a Latent,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        if target.timestep >= t {
            return Err(Error::Contract(format!(
                "target must precede the source timestep (target t={}, source t={t})",
                target.timestep
            )));
        }
        check_len(z_t.len(), target.len())?;
        let (scale, noise) = sched.transition_coefficients(t, target.timestep)?;
        let input = params.input(&z_t.data, t, &uncond.values)?;
        let eps_uncond = params.net.forward(&input);
        Ok(Self {
            params,
            input,
            eps_uncond,
            target: &target.data,
            z_t: &z_t.data,
            scale,
            noise,
            guidance,
        })
    }

    fn set_condition(&mut self, cond: &[f32]) -> Result<()> {
        check_len(self.params.topology.cond_dim, cond.len())?;
        let range = self.params.topology.cond_range();
        self.input[range].copy_from_slice(cond);
        Ok(())
    }

    /// Guided prediction of the previous latent for a given condition.
    pub fn predict_previous(&mut self, cond: &[f32]) -> Result<Vec<f32>> {
        self.set_condition(cond)?;
        let eps_cond = self.params.net.forward(&self.input);
        let eps = cfg_predict(&eps_cond, &self.eps_uncond, self.guidance)?;
        Ok(self
            .z_t
            .iter()
            .zip(&eps)
            .map(|(&z, &e)| self.scale * z + self.noise * e)
            .collect())
    }

    /// Mean squared reconstruction error.
    pub fn loss(&mut self, cond: &[f32]) -> Result<f32> {
        let pred = self.predict_previous(cond)?;
        Ok(mse(self.target, &pred))
    }

    /// Loss and its gradient with respect to the condition embedding.
    pub fn loss_and_grad(&mut self, cond: &[f32]) -> Result<(f32, Vec<f32>)> {
        self.set_condition(cond)?;
        let trace = self.params.net.forward_traced(&self.input);
        let eps_cond = trace.output();
        let n = self.target.len() as f32;
        let mut loss = 0.0f32;
        // d loss / d eps_cond = -2/n * (target - z*) * noise * w
        let mut grad_out = Vec::with_capacity(eps_cond.len());
        for i in 0..eps_cond.len() {
            let eps = self.guidance * eps_cond[i] + (1.0 - self.guidance) * self.eps_uncond[i];
            let pred = self.scale * self.z_t[i] + self.noise * eps;
            let resid = self.target[i] - pred;
            loss += resid * resid;
            grad_out.push(-2.0 / n * resid * self.noise * self.guidance);
        }
        let grad = self
            .params
            .net
            .backward(&trace, &grad_out, None, self.params.topology.cond_range());
        Ok((loss / n, grad))
    }
}

fn mse(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len() as f32;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / n
}

/// Loss `mean((target - z*)^2)` for the guided step from `z_t` to
/// `target.timestep`, and its gradient with respect to `cond`.
/// No gradient flows into `uncond` or the network weights.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad_condition(
    params: &DenoiserParams,
    z_t: &Latent,
    t: usize,
    cond: &ConditionEmbedding,
    uncond: &ConditionEmbedding,
    w: f32,
    target: &Latent,
    sched: &NoiseSchedule,
) -> Result<(f32, Vec<f32>)> {
    GuidedStepObjective::new(params, z_t, t, uncond, w, target, sched)?.loss_and_grad(&cond.values)
}

/// A training image together with the embedding of its caption.
#[derive(Debug, Clone)]
pub struct ConditionedImage {
    pub image: Image,
    pub cond: ConditionEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    /// Only used by the SGD optimizer.
    pub momentum: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
    pub cond_drop_prob: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            grad_clip: 1.0,
            seed: 0,
            cond_drop_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss summary of a training run. Running losses average the first and
/// last `min(100, iterations)` mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    pub curve: Vec<f32>,
}

const TRAIN_CHUNK: usize = 8;

struct Draw {
    index: usize,
    t: usize,
    drop: bool,
    noise: Vec<f32>,
}

/// Fits the noise predictor to a dataset with the denoising objective
/// `||eps - eps_theta(sqrt(a_t) z_0 + sqrt(1 - a_t) eps, t, C)||^2`.
///
/// Per-sample gradients are computed in fixed chunks and summed in chunk
/// order, so the result does not depend on the rayon thread count.
pub fn train_denoiser(
    dataset: &[ConditionedImage],
    sched: &NoiseSchedule,
    topology: DenoiserTopology,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate()?;
    for item in dataset {
        check_len(topology.latent_len(), item.image.len())?;
        check_len(topology.cond_dim, item.cond.dim())?;
    }
    let mut params = DenoiserParams::init(topology, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut optimizer = Optimizer::new(cfg.optimizer, &params.net, cfg.learning_rate, cfg.momentum);
    let null = ConditionEmbedding::null_text(topology.cond_dim);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let draws: Vec<Draw> = (0..cfg.batch_size)
            .map(|_| Draw {
                index: rng.gen_range(0..dataset.len()),
                t: rng.gen_range(1..=sched.total_steps()),
                drop: rng.gen::<f32>() < cfg.cond_drop_prob,
                noise: (0..topology.latent_len())
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect(),
            })
            .collect();

        let net = &params;
        let (mut total, batch_loss) = chunked_gradients(&params.net, &draws, TRAIN_CHUNK, |d, grads| {
            let item = &dataset[d.index];
            let a = sched.alpha(d.t);
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            let z: Vec<f32> = item
                .image
                .pixels
                .iter()
                .zip(&d.noise)
                .map(|(&x, &e)| sa * x + sn * e)
                .collect();
            let cond = if d.drop { &null.values } else { &item.cond.values };
            let x = net.input(&z, d.t, cond).expect("validated shapes");
            let trace = net.net.forward_traced(&x);
            let n = d.noise.len() as f32;
            let mut loss = 0.0f32;
            let grad_out: Vec<f32> = trace
                .output()
                .iter()
                .zip(&d.noise)
                .map(|(&p, &e)| {
                    loss += (p - e) * (p - e) / n;
                    2.0 * (p - e) / n
                })
                .collect();
            net.net.backward(&trace, &grad_out, Some(grads), 0..0);
            loss
        });
        let inv = 1.0 / cfg.batch_size as f32;
        total.scale(inv);
        if cfg.grad_clip > 0.0 {
            let norm = total.norm();
            if norm > cfg.grad_clip {
                total.scale(cfg.grad_clip / norm);
            }
        }
        optimizer.step(&mut params.net, &total);
        curve.push(batch_loss * inv);
    }

    if !params.is_finite() {
        return Err(Error::Numeric("denoiser training diverged".into()));
    }
    let window = curve.len().min(100);
    let mean = |s: &[f32]| if s.is_empty() { f32::NAN } else { s.iter().sum::<f32>() / s.len() as f32 };
    let report = TrainReport {
        initial_loss: mean(&curve[..window]),
        final_loss: mean(&curve[curve.len() - window..]),
        curve,
    };
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic DDIM.
    DdimSampler,
    /// Stochastic ancestral sampling (DDIM with eta = 1).
    DdpmAncestral,
}

/// Draws `z_T ~ N(0, I)` from `seed` and denoises it with guided DDIM over
/// `steps` uniformly strided timesteps.
pub fn generate(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    steps: usize,
    cond: &ConditionEmbedding,
    w: f32,
    seed: u64,
) -> Result<Latent> {
    generate_with(params, sched, SamplerKind::DdimSampler, steps, cond, w, seed)
}

pub fn generate_with(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    steps: usize,
    cond: &ConditionEmbedding,
    w: f32,
    seed: u64,
) -> Result<Latent> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let topo = params.topology();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let timesteps = sched.strided_timesteps(steps, None)?;
    let top = *timesteps.last().expect("non-empty");
    let noise: Vec<f32> = (0..topo.latent_len())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let mut z = Latent::new(topo.height, topo.width, noise, top)?;
    let null = ConditionEmbedding::null_text(topo.cond_dim);
    for pair in timesteps.windows(2).rev() {
        let (prev, t) = (pair[0], pair[1]);
        let eps_c = denoiser_forward(params, &z, t, cond)?;
        let eps = if w == 1.0 {
            eps_c
        } else {
            let eps_u = denoiser_forward(params, &z, t, &null)?;
            cfg_predict(&eps_c, &eps_u, w)?
        };
        z = match kind {
            SamplerKind::DdimSampler => ddim_transition(&z, &eps, t, prev, sched)?,
            SamplerKind::DdpmAncestral => ancestral_step(&z, &eps, t, prev, sched, &mut rng),
        };
    }
    Ok(z)
}

fn ancestral_step(
    z: &Latent,
    eps: &[f32],
    t: usize,
    prev: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Latent {
    let a_t = sched.alpha(t) as f64;
    let a_prev = sched.alpha(prev) as f64;
    let sigma = ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let (sa_t, sn_t, sa_prev) = (a_t.sqrt(), (1.0 - a_t).sqrt(), a_prev.sqrt());
    let data = z
        .data
        .iter()
        .zip(eps)
        .map(|(&zv, &ev)| {
            let x0 = (zv as f64 - sn_t * ev as f64) / sa_t;
            let fresh: f64 = if prev > 0 { rng.sample(StandardNormal) } else { 0.0 };
            (sa_prev * x0 + dir * ev as f64 + sigma * fresh) as f32
        })
        .collect();
    Latent {
        height: z.height,
        width: z.width,
        data,
        timestep: prev,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ddim_sample_step, make_linear_schedule};

    fn small_topology() -> DenoiserTopology {
        DenoiserTopology {
            height: 4,
            width: 4,
            time_dim: 4,
            cond_dim: 6,
            hidden: 12,
            hidden_layers: 2,
            activation: Activation::Silu,
        }
    }

    fn random_latent(rng: &mut ChaCha8Rng, t: usize) -> Latent {
        let data = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Latent::new(4, 4, data, t).unwrap()
    }

    fn random_cond(rng: &mut ChaCha8Rng, dim: usize) -> ConditionEmbedding {
        ConditionEmbedding::custom((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_params_predict_zero() {
        let params = DenoiserParams::zeros(small_topology());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_latent(&mut rng, 3);
        let c = random_cond(&mut rng, 6);
        assert_eq!(denoiser_forward(&params, &z, 3, &c).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn forward_is_deterministic_and_lipschitz_in_condition() {
        let params = DenoiserParams::init(small_topology(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_latent(&mut rng, 5);
        let c = random_cond(&mut rng, 6);
        let a = denoiser_forward(&params, &z, 5, &c).unwrap();
        let b = denoiser_forward(&params, &z, 5, &c).unwrap();
        assert_eq!(a, b);

        let dir: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let change = |delta: f32| {
            let shifted = ConditionEmbedding::custom(
                c.values.iter().zip(&dir).map(|(v, d)| v + delta * d).collect(),
            );
            let out = denoiser_forward(&params, &z, 5, &shifted).unwrap();
            out.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
        };
        let (small, large) = (change(1e-2), change(2e-2));
        assert!(small > 0.0);
        // Halving the perturbation roughly halves the response.
        assert!((large / small - 2.0).abs() < 0.1, "ratio {}", large / small);
    }

    #[test]
    fn shape_errors() {
        let params = DenoiserParams::zeros(small_topology());
        let z = Latent::new(2, 2, vec![0.0; 4], 1).unwrap();
        assert!(denoiser_forward(&params, &z, 1, &ConditionEmbedding::null_text(6)).is_err());
        let z = Latent::new(4, 4, vec![0.0; 16], 1).unwrap();
        assert!(denoiser_forward(&params, &z, 1, &ConditionEmbedding::null_text(5)).is_err());
    }

    #[test]
    fn exact_target_gives_zero_loss_and_gradient() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let params = DenoiserParams::init(small_topology(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_latent(&mut rng, 4);
        let c = random_cond(&mut rng, 6);
        let null = ConditionEmbedding::null_text(6);
        let eps_c = denoiser_forward(&params, &z, 4, &c).unwrap();
        let eps_u = denoiser_forward(&params, &z, 4, &null).unwrap();
        let eps = cfg_predict(&eps_c, &eps_u, 7.5).unwrap();
        let target = ddim_sample_step(&z, &eps, 4, &sched).unwrap();
        let (loss, grad) =
            loss_and_grad_condition(&params, &z, 4, &c, &null, 7.5, &target, &sched).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().map(|g| g * g).sum::<f32>().sqrt() < 1e-6);
    }

    #[test]
    fn target_timestep_must_precede_source() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let params = DenoiserParams::zeros(small_topology());
        let z = Latent::new(4, 4, vec![0.0; 16], 4).unwrap();
        let target = Latent::new(4, 4, vec![0.0; 16], 4).unwrap();
        let null = ConditionEmbedding::null_text(6);
        assert!(matches!(
            loss_and_grad_condition(&params, &z, 4, &null, &null, 1.0, &target, &sched),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unit_guidance_matches_unguided_objective() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let params = DenoiserParams::init(small_topology(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_latent(&mut rng, 6);
        let target = random_latent(&mut rng, 5);
        let c = random_cond(&mut rng, 6);
        let null = ConditionEmbedding::null_text(6);
        let (loss, _) =
            loss_and_grad_condition(&params, &z, 6, &c, &null, 1.0, &target, &sched).unwrap();
        let eps = denoiser_forward(&params, &z, 6, &c).unwrap();
        let pred = ddim_sample_step(&z, &eps, 6, &sched).unwrap();
        let direct = mse(&target.data, &pred.data);
        assert!((loss - direct).abs() < 1e-6);
    }

    fn toy_dataset(n: usize) -> Vec<ConditionedImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        (0..n)
            .map(|_| ConditionedImage {
                image: Image::new(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                cond: random_cond(&mut rng, 6),
            })
            .collect()
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let (params, _) = train_denoiser(&toy_dataset(4), &sched, small_topology(), &cfg).unwrap();
        assert_eq!(params, DenoiserParams::init(small_topology(), 4));
    }

    #[test]
    fn training_is_deterministic() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            batch_size: 20,
            seed: 8,
            ..TrainConfig::default()
        };
        let data = toy_dataset(16);
        let (a, ra) = train_denoiser(&data, &sched, small_topology(), &cfg).unwrap();
        let (b, rb) = train_denoiser(&data, &sched, small_topology(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_ne!(a, DenoiserParams::init(small_topology(), 8));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        assert!(matches!(
            train_denoiser(&[], &sched, small_topology(), &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_unit_guidance_is_unguided() {
        let sched = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let params = DenoiserParams::init(small_topology(), 2);
        let null = ConditionEmbedding::null_text(6);
        let a = generate(&params, &sched, 5, &null, 1.0, 42).unwrap();
        let b = generate(&params, &sched, 5, &null, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.timestep, 0);

        // Unguided reference sampler.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise: Vec<f32> = (0..16).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let mut z = Latent::new(4, 4, noise, 20).unwrap();
        for (t, prev) in [(20, 16), (16, 12), (12, 8), (8, 4), (4, 0)] {
            let eps = denoiser_forward(&params, &z, t, &null).unwrap();
            z = ddim_transition(&z, &eps, t, prev, &sched).unwrap();
        }
        assert_eq!(a, z);

        let c = generate_with(&params, &sched, SamplerKind::DdpmAncestral, 5, &null, 3.0, 42).unwrap();
        assert_eq!(c, generate_with(&params, &sched, SamplerKind::DdpmAncestral, 5, &null, 3.0, 42).unwrap());
        assert!(generate(&params, &sched, 0, &null, 1.0, 1).is_err());
    }
}
