//! Linear β noise schedule and deterministic DDIM stepping in both directions.
//!
//! Step indices run from `0` (cleanest, `ᾱ_0` close to one) to
//! `num_steps - 1` (noisiest). Sampling walks `t = num_steps-1 → 0` with
//! [`ddim_step`]; inversion walks the other way with [`ddim_invert_step`].

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

pub const DEFAULT_NUM_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced between `beta_start` and `beta_end`, both inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::config(format!(
                "num_steps must be >= 2, got {num_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let span = beta_end - beta_start;
        let last = (num_steps - 1) as f64;
        let betas = (0..num_steps)
            .map(|i| {
                if i == num_steps - 1 {
                    beta_end
                } else {
                    beta_start + span * i as f64 / last
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config("schedule needs at least two steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("betas must be non-decreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_NUM_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Moves a latent from noise level `ᾱ_from` to `ᾱ_to` along the
/// deterministic DDIM path implied by `eps`.
fn transport(x: &LatentGrid, eps: &LatentGrid, ab_from: f64, ab_to: f64) -> LatentGrid {
    let mut out = eps.clone();
    transport_into(x, &mut out, ab_from, ab_to);
    out
}

/// [`transport`] writing over `eps`.
fn transport_into(x: &LatentGrid, eps: &mut LatentGrid, ab_from: f64, ab_to: f64) {
    let sa_from = ab_from.sqrt();
    let sn_from = (1.0 - ab_from).sqrt();
    let sa_to = ab_to.sqrt();
    let sn_to = (1.0 - ab_to).sqrt();
    for (e, &x) in eps.data_mut().iter_mut().zip(x.data()) {
        let x0 = (x - sn_from * *e) / sa_from;
        *e = sa_to * x0 + sn_to * *e;
    }
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(eps_hat, "predict_x0")?;
    if t >= schedule.num_steps() {
        return Err(Error::contract(format!("step {t} outside schedule")));
    }
    Ok(transport(x_t, eps_hat, schedule.alpha_bar(t), 1.0))
}

/// One deterministic DDIM sampling step, `x_t → x_{t−1}`.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(eps_hat, "ddim_step")?;
    if t == 0 || t >= schedule.num_steps() {
        return Err(Error::contract(format!(
            "ddim_step needs 1 <= t < {}, got {t}",
            schedule.num_steps()
        )));
    }
    Ok(transport(
        x_t,
        eps_hat,
        schedule.alpha_bar(t),
        schedule.alpha_bar(t - 1),
    ))
}

/// Sampling step that reuses the storage of `eps_hat`: [`ddim_step`] for
/// `t >= 1` and [`predict_x0`] at `t = 0`.
pub fn sample_step(
    x_t: &LatentGrid,
    mut eps_hat: LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(&eps_hat, "sample_step")?;
    if t >= schedule.num_steps() {
        return Err(Error::contract(format!("step {t} outside schedule")));
    }
    let ab_to = if t == 0 {
        1.0
    } else {
        schedule.alpha_bar(t - 1)
    };
    transport_into(x_t, &mut eps_hat, schedule.alpha_bar(t), ab_to);
    Ok(eps_hat)
}

/// One DDIM inversion step, `x_t → x_{t+1}`; the mirror of [`ddim_step`].
pub fn ddim_invert_step(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(eps_hat, "ddim_invert_step")?;
    if t + 2 > schedule.num_steps() {
        return Err(Error::contract(format!(
            "ddim_invert_step needs t <= {}, got {t}",
            schedule.num_steps() - 2
        )));
    }
    Ok(transport(
        x_t,
        eps_hat,
        schedule.alpha_bar(t),
        schedule.alpha_bar(t + 1),
    ))
}

/// Inversion step that evaluates ε at the destination: starting from the
/// explicit step, `x_{t+1}` is refined `refinements` times through
/// `x_{t+1} = invert(x_t, ε(x_{t+1}, t+1))`. At the fixed point a sampling
/// step with the same ε lands back on `x_t`.
pub fn implicit_invert_step<F>(
    x_t: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    refinements: usize,
    eps_fn: &mut F,
) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    let mut next = ddim_invert_step(x_t, &eps_fn(x_t, t)?, t, schedule)?;
    for _ in 0..refinements {
        next = ddim_invert_step(x_t, &eps_fn(&next, t + 1)?, t, schedule)?;
    }
    Ok(next)
}

/// Full inversion from step 0 to the noisiest step.
pub fn invert<F>(
    x0: &LatentGrid,
    schedule: &NoiseSchedule,
    refinements: usize,
    mut eps_fn: F,
) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    let mut x = x0.clone();
    for t in 0..schedule.num_steps() - 1 {
        x = implicit_invert_step(&x, t, schedule, refinements, &mut eps_fn)?;
    }
    Ok(x)
}

/// Full deterministic sampling from the noisiest step down to step 0.
pub fn sample<F>(x_last: &LatentGrid, schedule: &NoiseSchedule, mut eps_fn: F) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    let mut x = x_last.clone();
    for t in (1..schedule.num_steps()).rev() {
        x = ddim_step(&x, &eps_fn(&x, t)?, t, schedule)?;
    }
    Ok(x)
}
