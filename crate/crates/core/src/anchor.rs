//! Anchor selection, pairwise inversion with feature capture, and
//! pairwise editing with feature injection, guidance and cross-pair fusion.
//!
//! Anchors `f_0 … f_M` form the `M` overlapping pairs `(f_p, f_{p+1})`. The
//! state of a run keeps both copies of every interior anchor, one per pair
//! containing it. With fusion enabled the copies are replaced by their mean
//! after every step, so they stay equal; the ablation lets them drift apart
//! and only averages them at the end.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::denoiser::{
    guided_pair_eps, Condition, GuidanceConfig, Injection, PairDenoiser, PairFeatures, PairRequest,
    Structural, Taps,
};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::{ddim_invert_step, ddim_step, NoiseSchedule};

pub const DEFAULT_INTERVAL: usize = 24;

/// Indices of the anchor frames within the source video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    indices: Vec<usize>,
    interval: usize,
}

impl AnchorSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.indices.len() - 1
    }

    /// `(start, end)` frame indices of each segment between anchors.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }
}

/// Every `interval`-th frame, plus the last frame when it is not on the grid.
pub fn sample_anchors(num_frames: usize, interval: usize) -> Result<AnchorSet> {
    if num_frames < 2 {
        return Err(Error::contract(format!(
            "need at least 2 frames, got {num_frames}"
        )));
    }
    if interval == 0 {
        return Err(Error::contract("anchor interval must be positive"));
    }
    let last = num_frames - 1;
    let mut indices: Vec<usize> = (0..=last).step_by(interval).collect();
    if *indices.last().expect("non-empty") != last {
        indices.push(last);
    }
    Ok(AnchorSet { indices, interval })
}

/// Fractions of the editing trajectory, counted from the noisiest step,
/// during which inverted features replace the computed ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionConfig {
    pub attn_ratio: f64,
    pub conv_ratio: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            attn_ratio: 0.44,
            conv_ratio: 0.65,
        }
    }
}

impl InjectionConfig {
    pub fn new(attn_ratio: f64, conv_ratio: f64) -> Result<Self> {
        let cfg = Self {
            attn_ratio,
            conv_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disabled() -> Self {
        Self {
            attn_ratio: 0.0,
            conv_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("attn_ratio", self.attn_ratio),
            ("conv_ratio", self.conv_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }

    pub fn attn_steps(&self, num_steps: usize) -> usize {
        (self.attn_ratio * num_steps as f64).round() as usize
    }

    pub fn conv_steps(&self, num_steps: usize) -> usize {
        (self.conv_ratio * num_steps as f64).round() as usize
    }

    /// Whether attention and conv injection are active when denoising
    /// from step `t`.
    pub fn active_at(&self, t: usize, num_steps: usize) -> (bool, bool) {
        let from_noisiest = num_steps - 1 - t;
        (
            from_noisiest < self.attn_steps(num_steps),
            from_noisiest < self.conv_steps(num_steps),
        )
    }
}

/// Features captured during inversion, keyed by `(pair, timestep)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    num_pairs: usize,
    num_steps: usize,
    entries: BTreeMap<(usize, usize), PairFeatures>,
}

impl FeatureCache {
    pub fn new(num_pairs: usize, num_steps: usize) -> Self {
        Self {
            num_pairs,
            num_steps,
            entries: BTreeMap::new(),
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn insert(&mut self, pair: usize, timestep: usize, features: PairFeatures) {
        self.entries.insert((pair, timestep), features);
    }

    pub fn get(&self, pair: usize, timestep: usize) -> Option<&PairFeatures> {
        self.entries.get(&(pair, timestep))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &PairFeatures)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-pair latents; interior anchors appear once in each of their pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pairs: Vec<[LatentGrid; 2]>,
}

impl PairState {
    pub fn from_anchors(anchors: &[LatentGrid]) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::contract(format!(
                "need at least 2 anchors, got {}",
                anchors.len()
            )));
        }
        for a in &anchors[1..] {
            a.ensure_same_shape(&anchors[0], "anchor latents")?;
        }
        Ok(Self {
            pairs: anchors
                .windows(2)
                .map(|w| [w[0].clone(), w[1].clone()])
                .collect(),
        })
    }

    pub fn from_pairs(pairs: Vec<[LatentGrid; 2]>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("pair state needs at least one pair"));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[[LatentGrid; 2]] {
        &self.pairs
    }

    pub fn num_anchors(&self) -> usize {
        self.pairs.len() + 1
    }

    /// One latent per anchor; interior copies are averaged.
    pub fn anchors(&self) -> Vec<LatentGrid> {
        fuse_shared(&self.pairs, self.num_anchors()).expect("consistent by construction")
    }
}

/// Cross-pair fusion: every interior anchor becomes the mean of its copy in
/// the left pair and its copy in the right pair; endpoints pass through.
pub fn fuse_shared(
    pair_outputs: &[[LatentGrid; 2]],
    num_anchors: usize,
) -> Result<Vec<LatentGrid>> {
    if pair_outputs.is_empty() || num_anchors != pair_outputs.len() + 1 {
        return Err(Error::contract(format!(
            "{} anchors cannot be covered by {} pairs",
            num_anchors,
            pair_outputs.len()
        )));
    }
    let mut out = Vec::with_capacity(num_anchors);
    out.push(pair_outputs[0][0].clone());
    for w in pair_outputs.windows(2) {
        let (left, right) = (&w[0][1], &w[1][0]);
        left.ensure_same_shape(right, "shared anchor")?;
        out.push(left.zip_map(right, |a, b| 0.5 * (a + b)));
    }
    out.push(pair_outputs[pair_outputs.len() - 1][1].clone());
    Ok(out)
}

fn fused_state(pairs: Vec<[LatentGrid; 2]>, fusion: bool) -> Result<Vec<[LatentGrid; 2]>> {
    if !fusion || pairs.len() < 2 {
        return Ok(pairs);
    }
    let anchors = fuse_shared(&pairs, pairs.len() + 1)?;
    Ok(anchors
        .windows(2)
        .map(|w| [w[0].clone(), w[1].clone()])
        .collect())
}

/// Where a joint structural condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JointSource {
    /// No structural condition.
    #[default]
    None,
    /// Each frame is conditioned on a map of its own source frame.
    SourceFrame,
}

impl std::str::FromStr for JointSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(JointSource::None),
            "source" => Ok(JointSource::SourceFrame),
            other => Err(Error::config(format!(
                "unknown joint source {other:?} (expected none or source)"
            ))),
        }
    }
}

impl std::fmt::Display for JointSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JointSource::None => "none",
            JointSource::SourceFrame => "source",
        })
    }
}

/// Per-anchor conditions from a text condition and a structural source.
pub fn anchor_conditions(
    text: Option<&[f64]>,
    joint: JointSource,
    sources: &[LatentGrid],
) -> Vec<Condition> {
    sources
        .iter()
        .map(|src| frame_condition(text, joint, &Arc::new(src.clone())))
        .collect()
}

/// Condition of a single frame; the structural map shares `source`.
pub fn frame_condition(
    text: Option<&[f64]>,
    joint: JointSource,
    source: &Arc<LatentGrid>,
) -> Condition {
    Condition {
        text: text.map(<[f64]>::to_vec),
        structural: match joint {
            JointSource::None => None,
            JointSource::SourceFrame => Some(Structural::Map(Arc::clone(source))),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOptions {
    /// Average shared anchors across pairs after every step.
    pub fusion: bool,
    /// Fixed-point refinements per inversion step.
    pub refinements: usize,
    /// Record features during inversion.
    pub capture: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            fusion: true,
            refinements: 6,
            capture: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Invert,
    Edit,
}

/// State after one step of either pass.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub phase: Phase,
    /// Step index the latents now sit at.
    pub timestep: usize,
    /// Pair outputs before fusion.
    pub pair_outputs: &'a [[LatentGrid; 2]],
    /// Per-anchor latents after fusion (or copy means without fusion).
    pub anchors: &'a [LatentGrid],
}

impl StepEvent<'_> {
    /// Largest element-wise disagreement between the two copies of any
    /// shared anchor, before fusion.
    pub fn max_disagreement(&self) -> f64 {
        self.pair_outputs
            .windows(2)
            .map(|w| w[0][1].max_abs_diff(&w[1][0]))
            .fold(0.0, f64::max)
    }

    pub fn log_line(&self) -> String {
        let phase = match self.phase {
            Phase::Invert => "invert",
            Phase::Edit => "edit",
        };
        format!(
            "{phase} t={} disagreement={:.6e} spread={:.6e}",
            self.timestep,
            self.max_disagreement(),
            anchor_spread(self.anchors)
        )
    }
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepEvent<'_>);

fn notify(
    observer: &mut Option<Observer<'_>>,
    phase: Phase,
    timestep: usize,
    raw: &[[LatentGrid; 2]],
    state: &[[LatentGrid; 2]],
) {
    if let Some(obs) = observer.as_mut() {
        let anchors = fuse_shared(state, state.len() + 1).expect("consistent state");
        obs(&StepEvent {
            phase,
            timestep,
            pair_outputs: raw,
            anchors: &anchors,
        });
    }
}

/// Element-wise variance across anchors, averaged over elements.
pub fn anchor_spread(anchors: &[LatentGrid]) -> f64 {
    let Some(first) = anchors.first() else {
        return 0.0;
    };
    let n = anchors.len() as f64;
    let per_element: Vec<f64> = (0..first.len())
        .map(|i| {
            let mu = anchors.iter().map(|a| a.data()[i]).sum::<f64>() / n;
            anchors
                .iter()
                .map(|a| (a.data()[i] - mu).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    crate::latent::pairwise_sum(&per_element) / per_element.len() as f64
}

fn pair_conditions<'c>(
    conds: &'c [Condition],
    num_anchors: usize,
) -> Result<impl Fn(usize) -> [&'c Condition; 2] + Sync + 'c> {
    if conds.len() != 1 && conds.len() != num_anchors {
        return Err(Error::contract(format!(
            "expected 1 or {num_anchors} conditions, got {}",
            conds.len()
        )));
    }
    Ok(move |p: usize| {
        if conds.len() == 1 {
            [&conds[0], &conds[0]]
        } else {
            [&conds[p], &conds[p + 1]]
        }
    })
}

/// Pairwise DDIM inversion of the anchors to the noisiest step.
///
/// Each step evaluates the pair denoiser at the destination step and refines
/// the destination latents as a fixed point, with fusion applied inside the
/// iteration. `conds` holds one condition for all anchors or one per anchor.
/// Features from the final evaluation at each step are stored under the
/// step they were computed at.
pub fn invert_anchors(
    anchors: &[LatentGrid],
    conds: &[Condition],
    schedule: &NoiseSchedule,
    denoiser: &dyn PairDenoiser,
    opts: &StageOptions,
    mut observer: Option<Observer<'_>>,
) -> Result<(PairState, FeatureCache)> {
    let mut state = PairState::from_anchors(anchors)?;
    let cond_of = pair_conditions(conds, anchors.len())?;
    let n = schedule.num_steps();
    let mut cache = FeatureCache::new(state.pairs.len(), n);

    let eval = |pairs: &[[LatentGrid; 2]],
                t: usize,
                capture: bool|
     -> Result<Vec<([LatentGrid; 2], PairFeatures)>> {
        pairs
            .par_iter()
            .enumerate()
            .map(|(p, pair)| {
                let req = PairRequest::new([&pair[0], &pair[1]], cond_of(p));
                let mut feats = PairFeatures::default();
                let taps = if capture {
                    Taps::Capture(&mut feats)
                } else {
                    Taps::None
                };
                Ok((denoiser.eps_pair(&req, t, schedule, taps)?, feats))
            })
            .collect()
    };
    let invert_from = |from: &[[LatentGrid; 2]],
                       eps: &[([LatentGrid; 2], PairFeatures)],
                       t: usize|
     -> Result<Vec<[LatentGrid; 2]>> {
        from.iter()
            .zip(eps)
            .map(|(x, (e, _))| {
                Ok([
                    ddim_invert_step(&x[0], &e[0], t, schedule)?,
                    ddim_invert_step(&x[1], &e[1], t, schedule)?,
                ])
            })
            .collect()
    };

    for t in 0..n - 1 {
        let eps = eval(&state.pairs, t, false)?;
        let mut raw = invert_from(&state.pairs, &eps, t)?;
        let mut next = fused_state(raw.clone(), opts.fusion)?;
        let rounds = opts.refinements.max(usize::from(opts.capture));
        for k in 0..rounds {
            let last = k + 1 == rounds;
            let eps = eval(&next, t + 1, opts.capture && last)?;
            if last && opts.capture {
                for (p, (_, feats)) in eps.iter().enumerate() {
                    cache.insert(p, t + 1, feats.clone());
                }
            }
            if k < opts.refinements {
                raw = invert_from(&state.pairs, &eps, t)?;
                next = fused_state(raw.clone(), opts.fusion)?;
            }
        }
        state.pairs = next;
        notify(&mut observer, Phase::Invert, t + 1, &raw, &state.pairs);
    }
    Ok((state, cache))
}

/// Pairwise guided editing from the inverted state down to step 0.
#[allow(clippy::too_many_arguments)]
pub fn edit_anchors(
    inverted: &PairState,
    cache: &FeatureCache,
    conds: &[Condition],
    guidance: &GuidanceConfig,
    injection: &InjectionConfig,
    schedule: &NoiseSchedule,
    denoiser: &dyn PairDenoiser,
    opts: &StageOptions,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<LatentGrid>> {
    guidance.validate()?;
    injection.validate()?;
    let n = schedule.num_steps();
    let num_pairs = inverted.pairs.len();
    let cond_of = pair_conditions(conds, num_pairs + 1)?;
    let injecting = injection.attn_steps(n) > 0 || injection.conv_steps(n) > 0;
    if injecting && (cache.num_pairs() != num_pairs || cache.num_steps() != n) {
        return Err(Error::contract(format!(
            "feature cache covers {} pairs over {} steps, run needs {num_pairs} pairs over {n} steps",
            cache.num_pairs(),
            cache.num_steps()
        )));
    }

    let mut pairs = inverted.pairs.clone();
    for t in (1..n).rev() {
        let (attn, conv) = injection.active_at(t, n);
        let raw: Vec<[LatentGrid; 2]> = pairs
            .par_iter()
            .enumerate()
            .map(|(p, x)| {
                let features = if attn || conv {
                    Some(cache.get(p, t).ok_or_else(|| {
                        Error::contract(format!(
                            "feature cache has no entry for pair {p} at timestep {t}"
                        ))
                    })?)
                } else {
                    None
                };
                let e = guided_pair_eps(cond_of(p), guidance, |c| {
                    let req = PairRequest::new([&x[0], &x[1]], c);
                    let taps = match features {
                        Some(features) => Taps::Inject(Injection {
                            features,
                            attention: attn,
                            conv,
                            timestep: t,
                        }),
                        None => Taps::None,
                    };
                    denoiser.eps_pair(&req, t, schedule, taps)
                })?;
                Ok([
                    ddim_step(&x[0], &e[0], t, schedule)?,
                    ddim_step(&x[1], &e[1], t, schedule)?,
                ])
            })
            .collect::<Result<_>>()?;
        pairs = fused_state(raw.clone(), opts.fusion)?;
        notify(&mut observer, Phase::Edit, t - 1, &raw, &pairs);
    }
    fuse_shared(&pairs, num_pairs + 1)
}
