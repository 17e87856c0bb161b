//! End-to-end editing: anchors are edited jointly, then every segment
//! between consecutive anchors is interpolated and streamed out in order.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::anchor::{
    anchor_conditions, edit_anchors, invert_anchors, sample_anchors, InjectionConfig, JointSource,
    StageOptions, StepEvent, DEFAULT_INTERVAL,
};
use crate::denoiser::{
    AnalyticDenoiser, AnchorPrior, ConditionedDenoiser, GaussianMixture, GuidanceConfig,
    JointMixtureDenoiser, PairDenoiser, PairNet, PairNetConfig, TEXT_DIM,
};
use crate::error::{Error, Result};
use crate::fixtures::Fixture;
use crate::interp::{
    interpolate_segment_with, ControlEncoder, ControlParams, InterpSettings, SegmentJob,
};
use crate::io::{FrameSink, FrameSource};
use crate::latent::LatentGrid;
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_NUM_STEPS};
use crate::vision::{CannyParams, FlowParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorModel {
    /// Gaussian mixture centred on the source anchors.
    Analytic,
    /// Seeded pair network.
    PairNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpModel {
    /// Narrow Gaussian around the conditioning anchor.
    Prior,
    /// The pair network's anchor-conditioned view.
    PairNet,
}

/// Every tunable of a run. Keys of the `key=value` form match field names.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub s_t: f64,
    pub s_j: f64,
    pub attn_ratio: f64,
    pub conv_ratio: f64,
    pub control_strength: f64,
    pub canny_sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub flow_lambda: f64,
    pub flow_iters: usize,
    pub refinements: usize,
    pub fusion: bool,
    pub joint: JointSource,
    pub inv_text: Option<Vec<f64>>,
    pub edit_text: Option<Vec<f64>>,
    pub denoiser: AnchorModel,
    pub interp: InterpModel,
    /// Variance of each component of the analytic anchor model.
    pub mixture_variance: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub model_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let canny = CannyParams::default();
        let flow = FlowParams::default();
        let inj = InjectionConfig::default();
        let g = GuidanceConfig::default();
        Self {
            k: DEFAULT_INTERVAL,
            steps: DEFAULT_NUM_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            s_t: g.s_text,
            s_j: g.s_joint,
            attn_ratio: inj.attn_ratio,
            conv_ratio: inj.conv_ratio,
            control_strength: 1.0,
            canny_sigma: canny.sigma,
            canny_low: canny.low,
            canny_high: canny.high,
            flow_lambda: flow.lambda,
            flow_iters: flow.iters,
            refinements: StageOptions::default().refinements,
            fusion: true,
            joint: JointSource::SourceFrame,
            inv_text: None,
            edit_text: None,
            denoiser: AnchorModel::PairNet,
            interp: InterpModel::Prior,
            mixture_variance: 0.01,
            width: 64,
            height: 64,
            seed: 0,
            model_seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_text(key: &str, value: &str) -> Result<Option<Vec<f64>>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(None);
    }
    let v = value
        .split(',')
        .map(|s| parse_num::<f64>(key, s))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != TEXT_DIM {
        return Err(Error::config(format!(
            "{key} needs {TEXT_DIM} comma-separated values, got {}",
            v.len()
        )));
    }
    Ok(Some(v))
}

fn text_repr(v: &Option<Vec<f64>>) -> String {
    match v {
        None => "none".into(),
        Some(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 26] = [
        "k",
        "steps",
        "beta_start",
        "beta_end",
        "s_t",
        "s_j",
        "attn_ratio",
        "conv_ratio",
        "control_strength",
        "canny_sigma",
        "canny_low",
        "canny_high",
        "flow_lambda",
        "flow_iters",
        "refinements",
        "fusion",
        "joint",
        "inv_text",
        "edit_text",
        "denoiser",
        "interp",
        "mixture_variance",
        "width",
        "height",
        "seed",
        "model_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "k" => self.k = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "s_t" => self.s_t = parse_num(key, v)?,
            "s_j" => self.s_j = parse_num(key, v)?,
            "attn_ratio" => self.attn_ratio = parse_num(key, v)?,
            "conv_ratio" => self.conv_ratio = parse_num(key, v)?,
            "control_strength" => self.control_strength = parse_num(key, v)?,
            "canny_sigma" => self.canny_sigma = parse_num(key, v)?,
            "canny_low" => self.canny_low = parse_num(key, v)?,
            "canny_high" => self.canny_high = parse_num(key, v)?,
            "flow_lambda" => self.flow_lambda = parse_num(key, v)?,
            "flow_iters" => self.flow_iters = parse_num(key, v)?,
            "refinements" => self.refinements = parse_num(key, v)?,
            "fusion" => self.fusion = parse_num(key, v)?,
            "joint" => self.joint = v.parse()?,
            "inv_text" => self.inv_text = parse_text(key, v)?,
            "edit_text" => self.edit_text = parse_text(key, v)?,
            "denoiser" => {
                self.denoiser = match v {
                    "analytic" => AnchorModel::Analytic,
                    "pairnet" => AnchorModel::PairNet,
                    _ => {
                        return Err(Error::config(format!(
                            "unknown denoiser {v:?} (expected analytic or pairnet)"
                        )))
                    }
                }
            }
            "interp" => {
                self.interp = match v {
                    "prior" => InterpModel::Prior,
                    "pairnet" => InterpModel::PairNet,
                    _ => {
                        return Err(Error::config(format!(
                            "unknown interpolation model {v:?} (expected prior or pairnet)"
                        )))
                    }
                }
            }
            "mixture_variance" => self.mixture_variance = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "model_seed" => self.model_seed = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "k" => self.k.to_string(),
            "steps" => self.steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "s_t" => self.s_t.to_string(),
            "s_j" => self.s_j.to_string(),
            "attn_ratio" => self.attn_ratio.to_string(),
            "conv_ratio" => self.conv_ratio.to_string(),
            "control_strength" => self.control_strength.to_string(),
            "canny_sigma" => self.canny_sigma.to_string(),
            "canny_low" => self.canny_low.to_string(),
            "canny_high" => self.canny_high.to_string(),
            "flow_lambda" => self.flow_lambda.to_string(),
            "flow_iters" => self.flow_iters.to_string(),
            "refinements" => self.refinements.to_string(),
            "fusion" => self.fusion.to_string(),
            "joint" => self.joint.to_string(),
            "inv_text" => text_repr(&self.inv_text),
            "edit_text" => text_repr(&self.edit_text),
            "denoiser" => match self.denoiser {
                AnchorModel::Analytic => "analytic".into(),
                AnchorModel::PairNet => "pairnet".into(),
            },
            "interp" => match self.interp {
                InterpModel::Prior => "prior".into(),
                InterpModel::PairNet => "pairnet".into(),
            },
            "mixture_variance" => self.mixture_variance.to_string(),
            "width" => self.width.to_string(),
            "height" => self.height.to_string(),
            "seed" => self.seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k}={}", self.get(k).expect("known key")).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        self.schedule()?;
        self.guidance()?;
        self.injection()?;
        self.canny().validate()?;
        self.flow().validate()?;
        if !(self.control_strength >= 0.0 && self.control_strength.is_finite()) {
            return Err(Error::config("control_strength must be finite and >= 0"));
        }
        if !(self.mixture_variance > 0.0 && self.mixture_variance.is_finite()) {
            return Err(Error::config("mixture_variance must be > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width and height must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.s_t, self.s_j)
    }

    pub fn injection(&self) -> Result<InjectionConfig> {
        InjectionConfig::new(self.attn_ratio, self.conv_ratio)
    }

    pub fn canny(&self) -> CannyParams {
        CannyParams {
            sigma: self.canny_sigma,
            low: self.canny_low,
            high: self.canny_high,
        }
    }

    pub fn flow(&self) -> FlowParams {
        FlowParams {
            lambda: self.flow_lambda,
            iters: self.flow_iters,
        }
    }

    pub fn stage_options(&self) -> StageOptions {
        StageOptions {
            fusion: self.fusion,
            refinements: self.refinements,
            capture: true,
        }
    }

    pub fn pairnet(&self) -> PairNet {
        PairNet::seeded(PairNetConfig {
            seed: self.model_seed,
            ..PairNetConfig::default()
        })
    }

    /// Anchor-stage denoiser for the given source anchors.
    pub fn anchor_model(&self, anchors: &[LatentGrid]) -> Result<Box<dyn PairDenoiser>> {
        Ok(match self.denoiser {
            AnchorModel::PairNet => Box::new(self.pairnet()),
            AnchorModel::Analytic => {
                let mix = GaussianMixture::uniform(anchors.to_vec(), self.mixture_variance)?;
                Box::new(JointMixtureDenoiser::new(AnalyticDenoiser::new(
                    mix,
                    self.model_seed,
                )))
            }
        })
    }

    pub fn interp_model(&self) -> Box<dyn ConditionedDenoiser> {
        match self.interp {
            InterpModel::Prior => Box::new(AnchorPrior::default()),
            InterpModel::PairNet => Box::new(self.pairnet()),
        }
    }
}

/// Random access to source frames.
pub trait FrameReader: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self, index: usize) -> Result<LatentGrid>;
}

/// Ordered output of frames.
pub trait FrameWriter {
    fn push(&mut self, frame: &LatentGrid) -> Result<()>;
}

impl FrameReader for [LatentGrid] {
    fn len(&self) -> usize {
        <[LatentGrid]>::len(self)
    }

    fn read(&self, index: usize) -> Result<LatentGrid> {
        self.get(index).cloned().ok_or_else(|| {
            Error::contract(format!(
                "frame {index} outside sequence of {}",
                <[LatentGrid]>::len(self)
            ))
        })
    }
}

impl FrameReader for FrameSource {
    fn len(&self) -> usize {
        FrameSource::len(self)
    }

    fn read(&self, index: usize) -> Result<LatentGrid> {
        FrameSource::read(self, index)
    }
}

impl FrameReader for Fixture {
    fn len(&self) -> usize {
        Fixture::len(self)
    }

    fn read(&self, index: usize) -> Result<LatentGrid> {
        if index >= Fixture::len(self) {
            return Err(Error::contract(format!(
                "frame {index} outside fixture of {}",
                Fixture::len(self)
            )));
        }
        Ok(self.frame(index))
    }
}

impl FrameWriter for Vec<LatentGrid> {
    fn push(&mut self, frame: &LatentGrid) -> Result<()> {
        Vec::push(self, frame.clone());
        Ok(())
    }
}

impl FrameWriter for FrameSink {
    fn push(&mut self, frame: &LatentGrid) -> Result<()> {
        FrameSink::push(self, frame)
    }
}

/// Hooks into a running pipeline. All methods default to no-ops.
pub trait PipelineObserver {
    /// Whether [`PipelineObserver::anchor_step`] should be called; building
    /// the event costs a copy of every anchor latent.
    fn wants_anchor_steps(&self) -> bool {
        false
    }

    fn anchor_step(&mut self, _event: &StepEvent<'_>) {}

    /// Called once, after the anchor stage has released its working memory.
    fn interpolation_started(&mut self) {}

    fn segment_done(&mut self, _segment: usize, _frames: usize, _elapsed: Duration) {}
}

pub struct NoObserver;

impl PipelineObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub frames: usize,
    pub anchors: Vec<usize>,
    pub anchor_time: Duration,
    pub interp_time: Duration,
}

fn segment_seed(seed: u64, segment: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((segment as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Edited anchor latents for a source video.
pub fn run_anchor_stage(
    source: &dyn FrameReader,
    cfg: &PipelineConfig,
    observer: &mut dyn PipelineObserver,
) -> Result<(Vec<usize>, Vec<LatentGrid>)> {
    cfg.validate()?;
    let anchors =
        sample_anchors(source.len(), cfg.k).map_err(|e| e.in_stage("anchor sampling", None))?;
    let originals = anchors
        .indices()
        .iter()
        .map(|&i| source.read(i))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("read", None))?;
    let schedule = cfg.schedule()?;
    let model = cfg.anchor_model(&originals)?;
    let inv = anchor_conditions(cfg.inv_text.as_deref(), cfg.joint, &originals);
    let edit = anchor_conditions(cfg.edit_text.as_deref(), cfg.joint, &originals);
    let opts = cfg.stage_options();

    let wants = observer.wants_anchor_steps();
    let mut hook = |e: &StepEvent<'_>| observer.anchor_step(e);
    let (state, cache) = invert_anchors(
        &originals,
        &inv,
        &schedule,
        model.as_ref(),
        &opts,
        wants.then_some(&mut hook as _),
    )
    .map_err(|e| e.in_stage("invert", None))?;
    let edited = edit_anchors(
        &state,
        &cache,
        &edit,
        &cfg.guidance()?,
        &cfg.injection()?,
        &schedule,
        model.as_ref(),
        &opts,
        wants.then_some(&mut hook as _),
    )
    .map_err(|e| e.in_stage("edit", None))?;
    Ok((anchors.indices().to_vec(), edited))
}

/// Interpolates every segment and streams the full sequence to `sink`.
pub fn run_interpolation(
    source: &dyn FrameReader,
    anchor_indices: &[usize],
    edited: &[LatentGrid],
    cfg: &PipelineConfig,
    sink: &mut dyn FrameWriter,
    observer: &mut dyn PipelineObserver,
) -> Result<usize> {
    if anchor_indices.len() != edited.len() || anchor_indices.len() < 2 {
        return Err(Error::contract(format!(
            "{} anchor indices for {} edited anchors",
            anchor_indices.len(),
            edited.len()
        )));
    }
    if anchor_indices[0] != 0 || anchor_indices[anchor_indices.len() - 1] + 1 != source.len() {
        return Err(Error::contract(
            "anchors must cover the first and last frame",
        ));
    }
    let schedule = cfg.schedule()?;
    let model = cfg.interp_model();
    let shape = model.control_shape(edited[0].shape());
    let encoder = ControlEncoder::seeded(
        shape.0,
        ControlEncoder::DEFAULT_HIDDEN,
        cfg.model_seed ^ 0xc0_17_e0,
    );
    let settings = InterpSettings {
        text: cfg.edit_text.as_deref(),
        joint: cfg.joint,
        guidance: cfg.guidance()?,
        controls: ControlParams {
            canny: cfg.canny(),
            flow: cfg.flow(),
        },
        control_strength: cfg.control_strength,
    };

    let mut written = 0;
    sink.push(&edited[0])?;
    written += 1;
    for (s, w) in anchor_indices.windows(2).enumerate() {
        let started = Instant::now();
        let (a, b) = (w[0], w[1]);
        let mut interior = 0;
        let result = (|| {
            let originals = (a..=b)
                .map(|i| source.read(i))
                .collect::<Result<Vec<_>>>()?;
            let job = SegmentJob::new(
                edited[s].clone(),
                edited[s + 1].clone(),
                originals,
                segment_seed(cfg.seed, s),
            )?;
            interpolate_segment_with(
                &job,
                &schedule,
                model.as_ref(),
                &encoder,
                &settings,
                &mut |f| {
                    interior += 1;
                    sink.push(&f)
                },
            )
        })();
        result.map_err(|e| e.in_stage("interpolate", Some(s)))?;
        sink.push(&edited[s + 1])?;
        written += interior + 1;
        observer.segment_done(s, interior, started.elapsed());
    }
    Ok(written)
}

/// Full two-stage run from `source` to `sink`.
pub fn run_pipeline(
    source: &dyn FrameReader,
    cfg: &PipelineConfig,
    sink: &mut dyn FrameWriter,
    observer: &mut dyn PipelineObserver,
) -> Result<PipelineSummary> {
    let t0 = Instant::now();
    let (indices, edited) = run_anchor_stage(source, cfg, observer)?;
    let anchor_time = t0.elapsed();
    observer.interpolation_started();
    let t1 = Instant::now();
    let frames = run_interpolation(source, &indices, &edited, cfg, sink, observer)?;
    Ok(PipelineSummary {
        frames,
        anchors: indices,
        anchor_time,
        interp_time: t1.elapsed(),
    })
}
