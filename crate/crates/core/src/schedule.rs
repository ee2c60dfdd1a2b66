//! Noise schedules and the closed-form DDIM update rules.
//!
//! `alpha_bar[t]` is the cumulative product of `1 - beta_s` for `s = 1..=t`.
//! Deterministic DDIM sampling and DDIM inversion are the same affine map
//! between two timesteps, run in opposite directions:
//!
//! ```text
//! z_to = sqrt(a_to / a_from) * z_from
//!      + sqrt(a_to) * (sqrt(1/a_to - 1) - sqrt(1/a_from - 1)) * eps
//! ```

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::{check_len, Latent};

/// Default guidance scale used by Stable Diffusion.
pub const DEFAULT_GUIDANCE: f32 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    total_steps: usize,
    alpha_bar: Vec<f32>,
}

/// Linear beta schedule from `beta_start` to `beta_end` over `total_steps`.
pub fn make_linear_schedule(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if total_steps < 1 {
        return Err(Error::Config("total_steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(total_steps + 1);
    alpha_bar.push(1.0f32);
    let mut running = 1.0f64;
    for s in 1..=total_steps {
        let beta = if total_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (s - 1) as f64 / (total_steps - 1) as f64
        };
        running *= 1.0 - beta;
        alpha_bar.push(running as f32);
    }
    let sched = NoiseSchedule {
        total_steps,
        alpha_bar,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit cumulative alphas, validating the
    /// monotonicity invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<f32>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let sched = Self {
            total_steps: alpha_bar.len() - 1,
            alpha_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be exactly 1".into()));
        }
        for (t, pair) in self.alpha_bar.windows(2).enumerate() {
            if !(pair[1] > 0.0 && pair[1] < pair[0]) {
                return Err(Error::Config(format!(
                    "alpha_bar must be positive and strictly decreasing (t={})",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn alpha_bar(&self) -> &[f32] {
        &self.alpha_bar
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha_bar[t]
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            Err(Error::StepIndex {
                step: t,
                min: 0,
                max: self.total_steps,
            })
        } else {
            Ok(())
        }
    }

    /// Coefficients `(a, b)` of the DDIM map `z_to = a * z_from + b * eps`.
    pub fn transition_coefficients(&self, from: usize, to: usize) -> Result<(f32, f32)> {
        self.check_index(from)?;
        self.check_index(to)?;
        let a_from = self.alpha_bar[from] as f64;
        let a_to = self.alpha_bar[to] as f64;
        let scale = (a_to / a_from).sqrt();
        // sqrt(a) * sqrt(1/a - 1) == sqrt(1 - a); this form avoids the large
        // intermediates near the end of the schedule.
        let noise = (1.0 - a_to).sqrt() - scale * (1.0 - a_from).sqrt();
        Ok((scale as f32, noise as f32))
    }

    /// Timesteps `0, s, 2s, ..., steps*s` visited by a strided trajectory.
    /// A `stride` of `None` spreads `steps` uniformly over the schedule.
    pub fn strided_timesteps(&self, steps: usize, stride: Option<usize>) -> Result<Vec<usize>> {
        if steps == 0 {
            return Ok(vec![0]);
        }
        let stride = stride.unwrap_or(self.total_steps / steps);
        if stride == 0 || steps * stride > self.total_steps {
            return Err(Error::Config(format!(
                "{steps} steps of stride {stride} do not fit a {}-step schedule",
                self.total_steps
            )));
        }
        Ok((0..=steps).map(|k| k * stride).collect())
    }
}

/// DDIM move from timestep `from` to timestep `to` with a fixed noise estimate.
pub fn ddim_transition(
    z: &Latent,
    eps: &[f32],
    from: usize,
    to: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    check_len(z.len(), eps.len())?;
    let (a, b) = sched.transition_coefficients(from, to)?;
    let data = z
        .data
        .iter()
        .zip(eps)
        .map(|(&zv, &ev)| a * zv + b * ev)
        .collect();
    Ok(Latent {
        height: z.height,
        width: z.width,
        data,
        timestep: to,
    })
}

/// One DDIM denoising step `z_t -> z_{t-1}`.
pub fn ddim_sample_step(z_t: &Latent, eps: &[f32], t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    if t < 1 || t > sched.total_steps() {
        return Err(Error::StepIndex {
            step: t,
            min: 1,
            max: sched.total_steps(),
        });
    }
    ddim_transition(z_t, eps, t, t - 1, sched)
}

/// One DDIM inversion step `z_t -> z_{t+1}`.
pub fn ddim_invert_step(z_t: &Latent, eps: &[f32], t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    if t + 1 > sched.total_steps() {
        return Err(Error::StepIndex {
            step: t,
            min: 0,
            max: sched.total_steps() - 1,
        });
    }
    ddim_transition(z_t, eps, t, t + 1, sched)
}

/// Classifier-free guidance: `w * eps_cond + (1 - w) * eps_uncond`.
pub fn cfg_predict(eps_cond: &[f32], eps_uncond: &[f32], w: f32) -> Result<Vec<f32>> {
    check_len(eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| w * c + (1.0 - w) * u)
        .collect())
}

/// Latents `z_0 .. z_T` produced by DDIM inversion of one clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Latent>,
}

impl Trajectory {
    pub fn start(&self) -> &Latent {
        &self.latents[0]
    }

    pub fn end(&self) -> &Latent {
        self.latents.last().expect("trajectory is never empty")
    }

    /// Number of transitions (the trajectory holds one more latent).
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }
}

/// Inverts `z_0` for `steps` transitions using the unguided conditional
/// prediction. Timesteps are strided as in [`NoiseSchedule::strided_timesteps`].
pub fn invert_trajectory<P: NoisePredictor + ?Sized>(
    z_0: &Latent,
    denoiser: &P,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    steps: usize,
    stride: Option<usize>,
) -> Result<Trajectory> {
    if z_0.timestep != 0 {
        return Err(Error::Contract(format!(
            "inversion starts from z_0, got a latent tagged t={}",
            z_0.timestep
        )));
    }
    if steps > sched.total_steps() {
        return Err(Error::StepIndex {
            step: steps,
            min: 0,
            max: sched.total_steps(),
        });
    }
    let timesteps = sched.strided_timesteps(steps, stride)?;
    let mut latents = Vec::with_capacity(timesteps.len());
    latents.push(z_0.clone());
    for pair in timesteps.windows(2) {
        let current = latents.last().expect("seeded with z_0");
        let eps = denoiser.predict(current, pair[0], cond)?;
        let next = ddim_transition(current, &eps, pair[0], pair[1], sched)?;
        latents.push(next);
    }
    Ok(Trajectory { latents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f32, t: usize) -> Latent {
        Latent::new(1, 1, vec![v], t).unwrap()
    }

    fn two_point(a_prev: f32, a_t: f32) -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, a_prev, a_t]).unwrap()
    }

    #[test]
    fn linear_schedule_examples() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[1.0, 0.5]);
        let s = make_linear_schedule(2, 0.1, 0.3).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert!((s.alpha_bar()[1] - 0.9).abs() < 1e-7);
        assert!((s.alpha_bar()[2] - 0.63).abs() < 1e-7);
    }

    #[test]
    fn linear_schedule_rejects_bad_ranges() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn sample_step_examples() {
        // alpha_{t-1} == alpha_t collapses the map to the identity; the
        // schedule invariant forbids that, so check the coefficients directly.
        let s = two_point(0.8, 0.5);
        let z = scalar(1.0, 2);
        let out = ddim_sample_step(&z, &[0.0], 2, &s).unwrap();
        assert!((out.data[0] - 1.264_911).abs() < 1e-5);
        assert_eq!(out.timestep, 1);
        let out = ddim_sample_step(&z, &[0.1], 2, &s).unwrap();
        assert!((out.data[0] - 1.220_190).abs() < 1e-5);
    }

    #[test]
    fn equal_alphas_are_identity() {
        let z = scalar(0.37, 1);
        let a = 0.6f64;
        let scale = (a / a).sqrt();
        let noise = (1.0 - a).sqrt() - scale * (1.0 - a).sqrt();
        assert_eq!(scale, 1.0);
        assert_eq!(noise, 0.0);
        assert_eq!(z.data[0] * scale as f32, z.data[0]);
    }

    #[test]
    fn invert_step_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let z0 = scalar(1.0, 0);
        let z1 = ddim_invert_step(&z0, &[0.0], 0, &s).unwrap();
        assert!((z1.data[0] - 0.707_107).abs() < 1e-6);
        let z1 = ddim_invert_step(&z0, &[1.0], 0, &s).unwrap();
        assert!((z1.data[0] - 1.414_214).abs() < 1e-6);
        assert_eq!(z1.timestep, 1);
    }

    #[test]
    fn step_index_errors() {
        let s = two_point(0.8, 0.5);
        assert!(matches!(
            ddim_sample_step(&scalar(1.0, 0), &[0.0], 0, &s),
            Err(Error::StepIndex { .. })
        ));
        assert!(matches!(
            ddim_invert_step(&scalar(1.0, 2), &[0.0], 2, &s),
            Err(Error::StepIndex { .. })
        ));
        assert!(matches!(
            ddim_sample_step(&scalar(1.0, 2), &[0.0, 1.0], 2, &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cfg_examples() {
        let c = [2.0, -1.0];
        let u = [1.0, 3.0];
        assert_eq!(cfg_predict(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_predict(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_predict(&[2.0], &[1.0], DEFAULT_GUIDANCE).unwrap(), vec![8.5]);
        assert!(cfg_predict(&c, &[1.0], 2.0).is_err());
    }

    #[test]
    fn strided_timesteps() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        assert_eq!(s.strided_timesteps(1, None).unwrap(), vec![0, 100]);
        assert_eq!(s.strided_timesteps(3, None).unwrap(), vec![0, 33, 66, 99]);
        assert_eq!(s.strided_timesteps(2, Some(5)).unwrap(), vec![0, 5, 10]);
        assert_eq!(s.strided_timesteps(0, None).unwrap(), vec![0]);
        assert!(s.strided_timesteps(2, Some(60)).is_err());
    }

    proptest! {
        #[test]
        fn schedules_are_monotone(steps in 1usize..300, start in 1e-5f64..0.05, span in 0.0f64..0.4) {
            let end = (start + span).min(0.999);
            let s = make_linear_schedule(steps, start, end).unwrap();
            prop_assert_eq!(s.alpha_bar()[0], 1.0);
            for w in s.alpha_bar().windows(2) {
                prop_assert!(w[1] > 0.0 && w[1] < w[0]);
            }
        }

        #[test]
        fn cfg_is_affine(values in proptest::collection::vec(-5.0f32..5.0, 1..16), w in -10.0f32..10.0) {
            let out = cfg_predict(&values, &values, w).unwrap();
            for (o, v) in out.iter().zip(&values) {
                prop_assert!((o - v).abs() <= 1e-5 * (1.0 + w.abs()) * (1.0 + v.abs()));
            }
        }
    }
}
