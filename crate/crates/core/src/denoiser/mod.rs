//! ε-predictors and the guidance combiner.
//!
//! Two families implement [`PairDenoiser`]: the analytic
//! [`JointMixtureDenoiser`] used as an exact oracle, and the seeded toy
//! [`PairNet`] that carries bidirectional attention and feature taps.
//! Interpolation uses the [`ConditionedDenoiser`] view, where a frame is
//! denoised against a clean conditioning anchor.

pub mod analytic;
pub mod attention;
pub mod condition;
pub mod guidance;
pub mod pairnet;

use std::collections::BTreeMap;

pub use analytic::{
    AnalyticDenoiser, AnchorPrior, GaussianMixture, JointMixtureDenoiser, MixtureComponent,
};
pub use attention::{bidir_attention, AttentionWeights, TokenMatrix};
pub use condition::{Condition, GuidanceConfig, Structural, TEXT_DIM};
pub use guidance::{guided_eps, guided_pair_eps};
pub use pairnet::{PairNet, PairNetConfig};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapKind {
    AttentionKv,
    ConvActivation,
}

impl TapKind {
    pub fn code(self) -> u32 {
        match self {
            TapKind::AttentionKv => 0,
            TapKind::ConvActivation => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(TapKind::AttentionKv),
            1 => Some(TapKind::ConvActivation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapKey {
    pub layer: u32,
    pub kind: TapKind,
}

/// Features tapped from one pair evaluation at one timestep, per frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairFeatures {
    entries: BTreeMap<TapKey, [Vec<f64>; 2]>,
}

impl PairFeatures {
    pub fn insert(&mut self, key: TapKey, frame: usize, values: Vec<f64>) {
        let slot = self.entries.entry(key).or_default();
        slot[frame] = values;
    }

    pub fn get(&self, key: TapKey, frame: usize) -> Option<&[f64]> {
        self.entries
            .get(&key)
            .map(|v| v[frame].as_slice())
            .filter(|v| !v.is_empty())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TapKey, &[Vec<f64>; 2])> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, [a, b])| (*k, [b.clone(), a.clone()]))
                .collect(),
        }
    }
}

/// Which recorded features replace the locally computed ones.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub features: &'a PairFeatures,
    pub attention: bool,
    pub conv: bool,
    /// Reported in errors when a tap is missing.
    pub timestep: usize,
}

impl<'a> Injection<'a> {
    pub fn lookup(&self, key: TapKey, frame: usize) -> Result<Option<&'a [f64]>> {
        let active = match key.kind {
            TapKind::AttentionKv => self.attention,
            TapKind::ConvActivation => self.conv,
        };
        if !active {
            return Ok(None);
        }
        match self.features.get(key, frame) {
            Some(v) => Ok(Some(v)),
            None => Err(Error::contract(format!(
                "missing injected feature for layer {} ({:?}) at timestep {}",
                key.layer, key.kind, self.timestep
            ))),
        }
    }
}

pub enum Taps<'a> {
    None,
    Capture(&'a mut PairFeatures),
    Inject(Injection<'a>),
}

/// Inputs of one pair evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PairRequest<'a> {
    pub latents: [&'a LatentGrid; 2],
    pub conds: [&'a Condition; 2],
    pub controls: [Option<&'a LatentGrid>; 2],
}

impl<'a> PairRequest<'a> {
    pub fn new(latents: [&'a LatentGrid; 2], conds: [&'a Condition; 2]) -> Self {
        Self {
            latents,
            conds,
            controls: [None, None],
        }
    }
}

/// ε-prediction for a pair of frames denoised jointly.
pub trait PairDenoiser: Send + Sync {
    fn eps_pair(
        &self,
        req: &PairRequest<'_>,
        t: usize,
        schedule: &NoiseSchedule,
        taps: Taps<'_>,
    ) -> Result<[LatentGrid; 2]>;
}

/// ε-prediction for a frame conditioned on a clean anchor frame.
pub trait ConditionedDenoiser: Send + Sync {
    /// Shape of the control residual accepted for a latent of `latent` shape.
    fn control_shape(&self, latent: (usize, usize, usize)) -> (usize, usize, usize);

    fn eps_conditioned(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cond: &Condition,
        control: Option<&LatentGrid>,
    ) -> Result<LatentGrid>;

    /// Adds `weight · ε̂` to `out`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_eps(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cond: &Condition,
        control: Option<&LatentGrid>,
        weight: f64,
        out: &mut LatentGrid,
    ) -> Result<()> {
        let eps = self.eps_conditioned(x_t, anchor, t, schedule, cond, control)?;
        out.ensure_same_shape(&eps, "guidance")?;
        for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
            *o += weight * e;
        }
        Ok(())
    }
}
