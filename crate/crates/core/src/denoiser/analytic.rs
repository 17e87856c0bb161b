//! Exact ε-prediction for Gaussian-mixture data.
//!
//! For data `x₀ ~ Σ_k w_k N(μ_k, σ_k² I)` and `x_t = √ᾱ x₀ + √(1−ᾱ) ε`, the
//! posterior over components is
//! `γ_k ∝ w_k N(x_t; √ᾱ μ_k, (ᾱσ_k² + 1 − ᾱ) I)` and the per-component
//! posterior mean is `m_k = (√ᾱ σ_k² x_t + (1−ᾱ) μ_k) / (ᾱσ_k² + 1 − ᾱ)`.
//! The optimal predictor is then `ε* = (x_t − √ᾱ Σ_k γ_k m_k) / √(1−ᾱ)`.
//!
//! [`JointMixtureDenoiser`] extends this to pairs of frames that share one
//! component assignment, which couples the two frames the same way a
//! cross-frame attention block does: each frame's posterior depends on the
//! other's evidence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::condition::{Condition, Structural, TEXT_DIM};
use super::{ConditionedDenoiser, PairDenoiser, PairRequest, Taps};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: LatentGrid,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("mixture needs at least one component"));
        }
        let shape = components[0].mean.shape();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::contract(format!(
                    "component {k} weight {} must be > 0",
                    c.weight
                )));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::contract(format!(
                    "component {k} variance {} must be > 0",
                    c.variance
                )));
            }
            if c.mean.shape() != shape {
                return Err(Error::contract(format!(
                    "component {k} mean has mismatched shape"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn single(mean: LatentGrid, variance: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    /// Equal-weight mixture over `means` with a shared variance.
    pub fn uniform(means: Vec<LatentGrid>, variance: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        let comps: Vec<MixtureComponent> = means
            .into_iter()
            .map(|mean| MixtureComponent {
                weight: w,
                mean,
                variance,
            })
            .collect();
        Self::new(comps)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }

    /// Draws `x₀` from the mixture.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> LatentGrid {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let sd = c.variance.sqrt();
        c.mean
            .map(|m| m + sd * Distribution::<f64>::sample(&StandardNormal, rng))
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Analytic denoiser over a Gaussian mixture with condition handling.
///
/// A text condition `c` shifts every component mean by `Σ_i c_i B_i` for a
/// fixed seeded basis `B`; a structural condition reweights components,
/// either directly ([`Structural::Reweight`]) or by the log-likelihood of a
/// guidance map under each component mean ([`Structural::Map`]).
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    mixture: GaussianMixture,
    text_basis: Vec<LatentGrid>,
    map_temperature: f64,
}

impl AnalyticDenoiser {
    pub const DEFAULT_TEXT_SCALE: f64 = 0.25;

    pub fn new(mixture: GaussianMixture, seed: u64) -> Self {
        let (c, h, w) = mixture.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = Self::DEFAULT_TEXT_SCALE / (TEXT_DIM as f64).sqrt();
        let text_basis = (0..TEXT_DIM)
            .map(|_| {
                LatentGrid::from_fn(c, h, w, |_, _, _| {
                    scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                })
            })
            .collect();
        Self {
            mixture,
            text_basis,
            map_temperature: 1.0,
        }
    }

    pub fn with_text_basis(mut self, basis: Vec<LatentGrid>) -> Result<Self> {
        if basis.len() != TEXT_DIM || basis.iter().any(|b| b.shape() != self.mixture.shape()) {
            return Err(Error::contract(
                "text basis must hold TEXT_DIM latent-shaped fields",
            ));
        }
        self.text_basis = basis;
        Ok(self)
    }

    pub fn with_map_temperature(mut self, temperature: f64) -> Self {
        assert!(temperature > 0.0);
        self.map_temperature = temperature;
        self
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    fn text_offset(&self, cond: &Condition) -> Result<Option<LatentGrid>> {
        if cond.text.is_none() {
            return Ok(None);
        }
        let v = cond.text_vector()?;
        let mut out = LatentGrid::zeros(
            self.text_basis[0].channels(),
            self.text_basis[0].height(),
            self.text_basis[0].width(),
        );
        for (ci, basis) in v.iter().zip(&self.text_basis) {
            if *ci != 0.0 {
                for (o, b) in out.data_mut().iter_mut().zip(basis.data()) {
                    *o += ci * b;
                }
            }
        }
        Ok(Some(out))
    }

    fn structural_log_bias(&self, cond: &Condition) -> Result<Vec<f64>> {
        let comps = self.mixture.components();
        match &cond.structural {
            None => Ok(vec![0.0; comps.len()]),
            Some(Structural::Reweight(r)) => {
                if r.len() != comps.len() || r.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::contract(format!(
                        "reweighting needs {} non-negative factors",
                        comps.len()
                    )));
                }
                if r.iter().all(|v| *v == 0.0) {
                    return Err(Error::contract("reweighting excludes every component"));
                }
                Ok(r.iter().map(|v| v.ln()).collect())
            }
            Some(Structural::Map(map)) => {
                if map.shape() != self.mixture.shape() {
                    return Err(Error::contract(
                        "structural map shape differs from the mixture",
                    ));
                }
                Ok(comps
                    .iter()
                    .map(|c| {
                        -map.data()
                            .iter()
                            .zip(c.mean.data())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            / (2.0 * self.map_temperature)
                    })
                    .collect())
            }
        }
    }

    /// Posterior means `E[x₀ | x_t]` for frames sharing one component draw.
    pub fn joint_posterior_mean(
        &self,
        frames: &[(&LatentGrid, &Condition)],
        alpha_bar: f64,
    ) -> Result<Vec<LatentGrid>> {
        let comps = self.mixture.components();
        let shape = self.mixture.shape();
        let sa = alpha_bar.sqrt();
        let noise = 1.0 - alpha_bar;

        let mut offsets = Vec::with_capacity(frames.len());
        for (x, cond) in frames {
            if x.shape() != shape {
                return Err(Error::contract(format!(
                    "latent shape {:?} does not match mixture {:?}",
                    x.shape(),
                    shape
                )));
            }
            offsets.push(self.text_offset(cond)?);
        }

        let mut log_post: Vec<f64> = comps.iter().map(|c| c.weight.ln()).collect();
        for ((x, cond), offset) in frames.iter().zip(&offsets) {
            let bias = self.structural_log_bias(cond)?;
            let n = x.len() as f64;
            for (k, c) in comps.iter().enumerate() {
                let var = alpha_bar * c.variance + noise;
                let mut sq = 0.0;
                for (i, (&xv, &mv)) in x.data().iter().zip(c.mean.data()).enumerate() {
                    let m = mv + offset.as_ref().map_or(0.0, |o| o.data()[i]);
                    let d = xv - sa * m;
                    sq += d * d;
                }
                log_post[k] +=
                    bias[k] - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var);
            }
        }
        let norm = log_sum_exp(&log_post);
        if !norm.is_finite() {
            return Err(Error::contract(
                "no mixture component has positive posterior mass",
            ));
        }
        let gammas: Vec<f64> = log_post.iter().map(|l| (l - norm).exp()).collect();

        let mut out = Vec::with_capacity(frames.len());
        for ((x, _), offset) in frames.iter().zip(&offsets) {
            let mut mean = LatentGrid::zeros(shape.0, shape.1, shape.2);
            for (c, &g) in comps.iter().zip(&gammas) {
                if g == 0.0 {
                    continue;
                }
                let var = alpha_bar * c.variance + noise;
                let wx = sa * c.variance / var;
                let wm = noise / var;
                for (i, (o, (&xv, &mv))) in mean
                    .data_mut()
                    .iter_mut()
                    .zip(x.data().iter().zip(c.mean.data()))
                    .enumerate()
                {
                    let m = mv + offset.as_ref().map_or(0.0, |off| off.data()[i]);
                    *o += g * (wx * xv + wm * m);
                }
            }
            out.push(mean);
        }
        Ok(out)
    }

    pub fn posterior_mean(
        &self,
        x_t: &LatentGrid,
        alpha_bar: f64,
        cond: &Condition,
    ) -> Result<LatentGrid> {
        Ok(self
            .joint_posterior_mean(&[(x_t, cond)], alpha_bar)?
            .remove(0))
    }

    /// `ε*(x_t, t)` at an arbitrary noise level.
    pub fn eps_at(&self, x_t: &LatentGrid, alpha_bar: f64, cond: &Condition) -> Result<LatentGrid> {
        let mean = self.posterior_mean(x_t, alpha_bar, cond)?;
        Ok(eps_from_mean(x_t, &mean, alpha_bar))
    }

    /// `ε*(x_t, t)` for the schedule's noise level at step `t`.
    pub fn analytic_eps(
        &self,
        x_t: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cond: &Condition,
    ) -> Result<LatentGrid> {
        self.eps_at(x_t, step_alpha_bar(t, schedule)?, cond)
    }
}

fn step_alpha_bar(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    if t >= schedule.num_steps() {
        return Err(Error::contract(format!("step {t} outside schedule")));
    }
    Ok(schedule.alpha_bar(t))
}

fn eps_from_mean(x_t: &LatentGrid, mean: &LatentGrid, alpha_bar: f64) -> LatentGrid {
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    x_t.zip_map(mean, |x, m| (x - sa * m) / sn)
}

/// Pair denoiser whose frames share a mixture component.
#[derive(Debug, Clone)]
pub struct JointMixtureDenoiser {
    inner: AnalyticDenoiser,
}

impl JointMixtureDenoiser {
    pub fn new(inner: AnalyticDenoiser) -> Self {
        Self { inner }
    }

    pub fn analytic(&self) -> &AnalyticDenoiser {
        &self.inner
    }
}

impl PairDenoiser for JointMixtureDenoiser {
    fn eps_pair(
        &self,
        req: &PairRequest<'_>,
        t: usize,
        schedule: &NoiseSchedule,
        _taps: Taps<'_>,
    ) -> Result<[LatentGrid; 2]> {
        req.latents[0].ensure_same_shape(req.latents[1], "pair latents")?;
        let ab = step_alpha_bar(t, schedule)?;
        let means = self.inner.joint_posterior_mean(
            &[
                (req.latents[0], req.conds[0]),
                (req.latents[1], req.conds[1]),
            ],
            ab,
        )?;
        let mut it = means
            .iter()
            .zip(req.latents)
            .map(|(m, x)| eps_from_mean(x, m, ab));
        let first = it.next().expect("two frames");
        let second = it.next().expect("two frames");
        Ok([first, second])
    }
}

/// Interpolation denoiser for the analytic setting: each frame's prior is a
/// narrow Gaussian around the conditioning anchor, shifted by the control
/// residual. Text conditions are ignored.
#[derive(Debug, Clone, Copy)]
pub struct AnchorPrior {
    pub variance: f64,
}

impl Default for AnchorPrior {
    fn default() -> Self {
        Self { variance: 1e-6 }
    }
}

impl AnchorPrior {
    /// Calls `put(k, ε̂_k)` for every element.
    fn eps_each(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        control: Option<&LatentGrid>,
        mut put: impl FnMut(usize, f64),
    ) -> Result<()> {
        x_t.ensure_same_shape(anchor, "anchor prior")?;
        if let Some(r) = control {
            r.ensure_same_shape(anchor, "control residual")?;
        }
        let ab = step_alpha_bar(t, schedule)?;
        let var = ab * self.variance + (1.0 - ab);
        let sa = ab.sqrt();
        let sn = (1.0 - ab).sqrt();
        let wx = sa * self.variance / var;
        let wm = (1.0 - ab) / var;
        for (k, (&x, &a)) in x_t.data().iter().zip(anchor.data()).enumerate() {
            let m = match control {
                Some(r) => a + r.data()[k],
                None => a,
            };
            let post = wx * x + wm * m;
            put(k, (x - sa * post) / sn);
        }
        Ok(())
    }
}

impl ConditionedDenoiser for AnchorPrior {
    fn control_shape(&self, latent: (usize, usize, usize)) -> (usize, usize, usize) {
        latent
    }

    fn eps_conditioned(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        _cond: &Condition,
        control: Option<&LatentGrid>,
    ) -> Result<LatentGrid> {
        let (c, h, w) = x_t.shape();
        let mut out = LatentGrid::zeros(c, h, w);
        let data = out.data_mut();
        self.eps_each(x_t, anchor, t, schedule, control, |k, e| data[k] = e)?;
        Ok(out)
    }

    fn accumulate_eps(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        _cond: &Condition,
        control: Option<&LatentGrid>,
        weight: f64,
        out: &mut LatentGrid,
    ) -> Result<()> {
        out.ensure_same_shape(x_t, "guidance")?;
        let data = out.data_mut();
        self.eps_each(x_t, anchor, t, schedule, control, |k, e| {
            data[k] += weight * e
        })
    }
}
