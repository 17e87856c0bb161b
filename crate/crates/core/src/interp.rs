//! Bidirectional interpolation between consecutive edited anchors.
//!
//! Every interior frame of a segment starts from its own seeded noise and is denoised twice
//! per step, once conditioned on the start anchor (forward branch) and once
//! on the end anchor (reverse branch). The two results are blended with
//! weight `(L−j)/L` on the forward side and both branches continue from the
//! blend. A frame's trajectory depends only on its own latent, the anchors
//! and its controls, so frames are processed independently and in parallel.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::anchor::{frame_condition, JointSource};
use crate::denoiser::{
    guidance::guidance_variants, Condition, ConditionedDenoiser, GuidanceConfig,
};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::{sample_step, NoiseSchedule};
use crate::vision::{canny, optical_flow, CannyParams, EdgeMap, FlowField, FlowParams, GrayImage};

/// Vision settings used to derive controls from source frames.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlParams {
    pub canny: CannyParams,
    pub flow: FlowParams,
}

/// Edge map and incoming flow for each frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStack {
    pub edges: Vec<EdgeMap>,
    pub flows: Vec<FlowField>,
    pub strength: f64,
}

impl ControlStack {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Edge map of `frames[j]` and the flow from `frames[j-1]` to `frames[j]`
/// (zero for the first frame).
pub fn frame_controls(
    frames: &[LatentGrid],
    j: usize,
    params: &ControlParams,
) -> Result<(EdgeMap, FlowField)> {
    let gray = GrayImage::from_frame(&frames[j]);
    let edges = canny(&gray, &params.canny)?;
    let flow = if j == 0 {
        FlowField::zeros(gray.width(), gray.height())
    } else {
        optical_flow(&GrayImage::from_frame(&frames[j - 1]), &gray, &params.flow)?
    };
    Ok((edges, flow))
}

pub fn encode_controls(
    frames: &[LatentGrid],
    params: &ControlParams,
    strength: f64,
) -> Result<ControlStack> {
    if frames.len() < 2 {
        return Err(Error::contract(format!(
            "control encoding needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    check_strength(strength)?;
    let per_frame: Vec<(EdgeMap, FlowField)> = (0..frames.len())
        .into_par_iter()
        .map(|j| frame_controls(frames, j, params))
        .collect::<Result<_>>()?;
    let (edges, flows) = per_frame.into_iter().unzip();
    Ok(ControlStack {
        edges,
        flows,
        strength,
    })
}

fn check_strength(strength: f64) -> Result<()> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::config(format!(
            "control strength must be finite and >= 0, got {strength}"
        )));
    }
    Ok(())
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Bias-free 3x3 convolution with zero padding over the input `planes`,
/// channel-major output.
fn conv3x3(planes: &[&[f64]], h: usize, w: usize, weights: &[f64], cout: usize) -> Vec<f64> {
    let n = h * w;
    let cin = planes.len();
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let plane = &mut out[o * n..(o + 1) * n];
        for (i, src) in planes.iter().enumerate() {
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weights[((o * cin + i) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let row = &src[yy as usize * w..(yy as usize + 1) * w];
                        for x in 0..w {
                            let xx = x as isize + kx as isize - 1;
                            if xx >= 0 && xx < w as isize {
                                plane[y * w + x] += k * row[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `a += silu(conv3x3(a))` row by row, keeping copies of only the input
/// rows already overwritten.
fn residual_conv3x3(a: &mut [f64], c: usize, h: usize, w: usize, weights: &[f64]) {
    let n = h * w;
    let mut prev = vec![0.0; c * w];
    let mut cur = vec![0.0; c * w];
    let mut out = vec![0.0; c * w];
    for y in 0..h {
        for i in 0..c {
            cur[i * w..(i + 1) * w].copy_from_slice(&a[i * n + y * w..i * n + (y + 1) * w]);
        }
        out.fill(0.0);
        for o in 0..c {
            let orow = &mut out[o * w..(o + 1) * w];
            for i in 0..c {
                for ky in 0..3 {
                    let src = match ky {
                        0 if y > 0 => &prev[i * w..(i + 1) * w],
                        1 => &cur[i * w..(i + 1) * w],
                        2 if y + 1 < h => &a[i * n + (y + 1) * w..i * n + (y + 2) * w],
                        _ => continue,
                    };
                    for kx in 0..3 {
                        let k = weights[((o * c + i) * 3 + ky) * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        for (x, v) in orow.iter_mut().enumerate() {
                            let xx = x as isize + kx as isize - 1;
                            if xx >= 0 && xx < w as isize {
                                *v += k * src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        for o in 0..c {
            for (v, d) in a[o * n + y * w..o * n + (y + 1) * w]
                .iter_mut()
                .zip(&out[o * w..(o + 1) * w])
            {
                *v += silu(*d);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
}

fn avg_pool(input: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (fy, fx) = (h / oh, w / ow);
    let scale = 1.0 / (fy * fx) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * oh + y / fy) * ow + x / fx] += input[(ch * h + y) * w + x];
            }
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    out
}

fn seeded(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v as f64 * scale
        })
        .collect()
}

/// Five-layer residual conv encoder; the first layer runs at full
/// resolution, the rest on the pooled grid.
#[derive(Debug, Clone, PartialEq)]
struct ConvEncoder {
    in_channels: usize,
    layers: Vec<Vec<f64>>,
}

impl ConvEncoder {
    const DEPTH: usize = 5;

    fn seeded(in_channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = vec![seeded(
            hidden * in_channels * 9,
            (1.0 / (in_channels * 9) as f64).sqrt(),
            rng,
        )];
        for _ in 1..Self::DEPTH {
            layers.push(seeded(
                hidden * hidden * 9,
                (1.0 / (hidden * 9) as f64).sqrt(),
                rng,
            ));
        }
        Self {
            in_channels,
            layers,
        }
    }

    fn forward(
        &self,
        planes: &[&[f64]],
        h: usize,
        w: usize,
        hidden: usize,
        oh: usize,
        ow: usize,
    ) -> Vec<f64> {
        debug_assert_eq!(planes.len(), self.in_channels);
        let mut a: Vec<f64> = conv3x3(planes, h, w, &self.layers[0], hidden)
            .into_iter()
            .map(silu)
            .collect();
        if (oh, ow) != (h, w) {
            a = avg_pool(&a, hidden, h, w, oh, ow);
        }
        for layer in &self.layers[1..] {
            residual_conv3x3(&mut a, hidden, oh, ow, layer);
        }
        a
    }
}

/// Edge and flow encoders followed by a per-position three-layer MLP over
/// their concatenated features. No biases, so all-zero controls map to an
/// all-zero residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEncoder {
    hidden: usize,
    out_channels: usize,
    edge: ConvEncoder,
    flow: ConvEncoder,
    mlp: [Vec<f64>; 3],
}

impl ControlEncoder {
    pub const DEFAULT_HIDDEN: usize = 4;
    /// Scale of the output layer; small so that controls steer rather than
    /// override the denoiser.
    pub const OUTPUT_GAIN: f64 = 1e-3;

    pub fn seeded(out_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edge = ConvEncoder::seeded(1, hidden, &mut rng);
        let flow = ConvEncoder::seeded(2, hidden, &mut rng);
        let width = 2 * hidden;
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        let mlp = [
            seeded(width * width, inv(width), &mut rng),
            seeded(width * width, inv(width), &mut rng),
            seeded(
                out_channels * width,
                Self::OUTPUT_GAIN * inv(width),
                &mut rng,
            ),
        ];
        Self {
            hidden,
            out_channels,
            edge,
            flow,
            mlp,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Unscaled residual of shape `shape` for one frame's controls.
    pub fn encode(
        &self,
        edges: &EdgeMap,
        flow: &FlowField,
        shape: (usize, usize, usize),
    ) -> Result<LatentGrid> {
        let features = self.edge_features(edges, shape)?;
        self.encode_flow(&features, flow)
    }

    /// Edge-encoder output, reusable for every flow paired with the same
    /// edge map.
    pub fn edge_features(
        &self,
        edges: &EdgeMap,
        shape: (usize, usize, usize),
    ) -> Result<EdgeFeatures> {
        let (oc, oh, ow) = shape;
        let (h, w) = (edges.height, edges.width);
        if oc != self.out_channels {
            return Err(Error::contract(format!(
                "control encoder emits {} channels, denoiser expects {oc}",
                self.out_channels
            )));
        }
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return Err(Error::contract(format!(
                "control map {w}x{h} cannot be pooled to the {ow}x{oh} feature grid"
            )));
        }
        let edge_in: Vec<f64> = edges.data.iter().map(|&e| e as f64).collect();
        Ok(EdgeFeatures {
            data: self.edge.forward(&[&edge_in], h, w, self.hidden, oh, ow),
            map: (h, w),
            shape,
        })
    }

    /// Unscaled residual from precomputed edge features and a flow field.
    pub fn encode_flow(&self, features: &EdgeFeatures, flow: &FlowField) -> Result<LatentGrid> {
        let (oc, oh, ow) = features.shape;
        let (h, w) = features.map;
        if features.data.len() != self.hidden * oh * ow {
            return Err(Error::contract(
                "edge features come from a different encoder",
            ));
        }
        if flow.width != w || flow.height != h {
            return Err(Error::contract("edge map and flow field differ in size"));
        }
        let d = self.hidden;
        let fe = &features.data;
        let ff = self.flow.forward(&[&flow.u, &flow.v], h, w, d, oh, ow);

        let n = oh * ow;
        let width = 2 * d;
        let mut out = LatentGrid::zeros(oc, oh, ow);
        let mut a = vec![0.0; width];
        let mut b = vec![0.0; width];
        for k in 0..n {
            for c in 0..d {
                a[c] = fe[c * n + k];
                a[d + c] = ff[c * n + k];
            }
            for (o, v) in b.iter_mut().enumerate() {
                *v = silu(
                    self.mlp[0][o * width..(o + 1) * width]
                        .iter()
                        .zip(&a)
                        .map(|(p, q)| p * q)
                        .sum(),
                );
            }
            for (o, v) in a.iter_mut().enumerate() {
                *v = silu(
                    self.mlp[1][o * width..(o + 1) * width]
                        .iter()
                        .zip(&b)
                        .map(|(p, q)| p * q)
                        .sum(),
                );
            }
            for o in 0..oc {
                let v: f64 = self.mlp[2][o * width..(o + 1) * width]
                    .iter()
                    .zip(&a)
                    .map(|(p, q)| p * q)
                    .sum();
                out.data_mut()[o * n + k] = v;
            }
        }
        Ok(out)
    }
}

/// Edge-encoder features of one edge map; see [`ControlEncoder::edge_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    data: Vec<f64>,
    map: (usize, usize),
    shape: (usize, usize, usize),
}

/// Residual for frame `j` of a stack, scaled by its strength. `None` when
/// the strength is zero, so that the denoiser sees no control at all.
pub fn control_residual(
    stack: &ControlStack,
    j: usize,
    encoder: &ControlEncoder,
    shape: (usize, usize, usize),
) -> Result<Option<LatentGrid>> {
    check_strength(stack.strength)?;
    if j >= stack.len() {
        return Err(Error::contract(format!(
            "frame {j} outside control stack of {}",
            stack.len()
        )));
    }
    if stack.strength == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        encoder
            .encode(&stack.edges[j], &stack.flows[j], shape)?
            .scale(stack.strength),
    ))
}

/// One segment between consecutive edited anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentJob {
    start: LatentGrid,
    end: LatentGrid,
    originals: Vec<Arc<LatentGrid>>,
    noise_seeds: Vec<u64>,
}

impl SegmentJob {
    /// `originals` covers both anchors; noise for frame `j` is drawn from a
    /// seed derived from `seed` and `j`.
    pub fn new(
        start: LatentGrid,
        end: LatentGrid,
        originals: Vec<LatentGrid>,
        seed: u64,
    ) -> Result<Self> {
        if originals.len() < 2 {
            return Err(Error::contract(format!(
                "segment needs at least its two anchor frames, got {}",
                originals.len()
            )));
        }
        start.ensure_same_shape(&end, "segment anchors")?;
        for o in &originals {
            o.ensure_same_shape(&start, "segment frames")?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_seeds = (0..originals.len())
            .map(|_| rand::Rng::gen(&mut rng))
            .collect();
        Ok(Self {
            start,
            end,
            originals: originals.into_iter().map(Arc::new).collect(),
            noise_seeds,
        })
    }

    /// Segment length `L`: the number of frame steps between the anchors.
    pub fn len(&self) -> usize {
        self.originals.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> &LatentGrid {
        &self.start
    }

    pub fn end(&self) -> &LatentGrid {
        &self.end
    }

    pub fn originals(&self) -> &[Arc<LatentGrid>] {
        &self.originals
    }

    /// The same segment traversed backwards, noise included.
    pub fn reversed(&self) -> Self {
        let mut originals = self.originals.clone();
        originals.reverse();
        let mut noise_seeds = self.noise_seeds.clone();
        noise_seeds.reverse();
        Self {
            start: self.end.clone(),
            end: self.start.clone(),
            originals,
            noise_seeds,
        }
    }

    /// Initial noise of frame `j`.
    pub fn noise(&self, j: usize) -> LatentGrid {
        let (c, h, w) = self.start.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seeds[j]);
        LatentGrid::from_fn(c, h, w, |_, _, _| StandardNormal.sample(&mut rng))
    }
}

/// Forward-branch weight of frame `j`; the reverse branch gets `j/L`.
pub fn blend_weights(j: usize, len: usize) -> (f64, f64) {
    ((len - j) as f64 / len as f64, j as f64 / len as f64)
}

/// Per-frame blend `w_f·forward + w_r·reverse`.
pub fn blend(forward: &LatentGrid, reverse: &LatentGrid, j: usize, len: usize) -> LatentGrid {
    let (wf, wr) = blend_weights(j, len);
    forward.zip_map(reverse, |a, b| wf * a + wr * b)
}

/// Settings shared by every segment.
#[derive(Debug, Clone)]
pub struct InterpSettings<'a> {
    pub text: Option<&'a [f64]>,
    pub joint: JointSource,
    pub guidance: GuidanceConfig,
    pub controls: ControlParams,
    pub control_strength: f64,
}

impl Default for InterpSettings<'_> {
    fn default() -> Self {
        Self {
            text: None,
            joint: JointSource::None,
            guidance: GuidanceConfig::default(),
            controls: ControlParams::default(),
            control_strength: 1.0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conditioned_eps(
    denoiser: &dyn ConditionedDenoiser,
    x: &LatentGrid,
    anchor: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    cond: &Condition,
    guidance: &GuidanceConfig,
    control: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    let eval = |c: &Condition| denoiser.eps_conditioned(x, anchor, t, schedule, c, control);
    if cond.text.is_none() && cond.structural.is_none() {
        // all three guidance variants coincide
        return eval(cond);
    }
    // Accumulates the guidance combination in place, evaluating each
    // distinct variant once.
    let [null_text, full, null_joint] = guidance_variants(cond);
    let (a, b, c) = (
        1.0 - guidance.s_text,
        guidance.s_text + guidance.s_joint,
        guidance.s_joint,
    );
    let mut out = eval(&null_text)?;
    let e_full = if full == null_text {
        None
    } else {
        Some(eval(&full)?)
    };
    if let Some(f) = &e_full {
        out.ensure_same_shape(f, "guidance")?;
    }
    if null_joint == full {
        let f = e_full.unwrap_or_else(|| out.clone());
        for (o, f) in out.data_mut().iter_mut().zip(f.data()) {
            *o = a * *o + b * f - c * f;
        }
        return Ok(out);
    }
    match &e_full {
        Some(f) => out
            .data_mut()
            .iter_mut()
            .zip(f.data())
            .for_each(|(o, f)| *o = a * *o + b * f),
        None => out.data_mut().iter_mut().for_each(|o| *o = a * *o + b * *o),
    }
    drop(e_full);
    denoiser.accumulate_eps(x, anchor, t, schedule, &null_joint, control, -c, &mut out)?;
    Ok(out)
}

struct Branch<'a> {
    anchor: &'a LatentGrid,
    control: Option<LatentGrid>,
}

/// Interior frames `1 … L−1` of a segment.
pub fn interpolate_segment(
    job: &SegmentJob,
    schedule: &NoiseSchedule,
    denoiser: &dyn ConditionedDenoiser,
    encoder: &ControlEncoder,
    settings: &InterpSettings<'_>,
) -> Result<Vec<LatentGrid>> {
    let mut out = Vec::with_capacity(job.len().saturating_sub(1));
    interpolate_segment_with(job, schedule, denoiser, encoder, settings, &mut |z| {
        out.push(z);
        Ok(())
    })?;
    Ok(out)
}

/// Streaming form of [`interpolate_segment`]: frames are handed to `emit`
/// in order, and at most one frame per worker thread is held at a time.
pub fn interpolate_segment_with(
    job: &SegmentJob,
    schedule: &NoiseSchedule,
    denoiser: &dyn ConditionedDenoiser,
    encoder: &ControlEncoder,
    settings: &InterpSettings<'_>,
    emit: &mut dyn FnMut(LatentGrid) -> Result<()>,
) -> Result<()> {
    let len = job.len();
    if len == 0 {
        return Err(Error::contract("segment has zero length"));
    }
    settings.guidance.validate()?;
    check_strength(settings.control_strength)?;
    let shape = denoiser.control_shape(job.start.shape());
    let chunk = rayon::current_num_threads().max(1);
    let mut j = 1;
    while j < len {
        let upto = (j + chunk).min(len);
        let frames: Vec<LatentGrid> = (j..upto)
            .into_par_iter()
            .map(|j| interior_frame(job, j, schedule, denoiser, encoder, settings, shape))
            .collect::<Result<_>>()?;
        for z in frames {
            emit(z)?;
        }
        j = upto;
    }
    Ok(())
}

fn interior_frame(
    job: &SegmentJob,
    j: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn ConditionedDenoiser,
    encoder: &ControlEncoder,
    settings: &InterpSettings<'_>,
    shape: (usize, usize, usize),
) -> Result<LatentGrid> {
    let len = job.len();
    let originals = &job.originals;
    // The reverse branch walks the segment backwards, so its incoming flow
    // comes from frame j+1. Edges are shared.
    let (forward_control, reverse_control) = if settings.control_strength == 0.0 {
        (None, None)
    } else {
        let gray = GrayImage::from_frame(&originals[j]);
        let flows = [&originals[j - 1], &originals[j + 1]].map(|neighbour| {
            optical_flow(
                &GrayImage::from_frame(neighbour),
                &gray,
                &settings.controls.flow,
            )
        });
        let features = encoder.edge_features(&canny(&gray, &settings.controls.canny)?, shape)?;
        drop(gray);
        let [f, r] = flows.map(|flow| -> Result<Option<LatentGrid>> {
            let mut residual = encoder.encode_flow(&features, &flow?)?;
            residual
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= settings.control_strength);
            Ok(Some(residual))
        });
        (f?, r?)
    };
    let cond = frame_condition(settings.text, settings.joint, &originals[j]);
    let forward = Branch {
        anchor: &job.start,
        control: forward_control,
    };
    let reverse = Branch {
        anchor: &job.end,
        control: reverse_control,
    };
    let step = |b: &Branch<'_>, x: &LatentGrid, t: usize| -> Result<LatentGrid> {
        let eps = conditioned_eps(
            denoiser,
            x,
            b.anchor,
            t,
            schedule,
            &cond,
            &settings.guidance,
            b.control.as_ref(),
        )?;
        sample_step(x, eps, t, schedule)
    };
    let (wf, wr) = blend_weights(j, len);
    let mut z = job.noise(j);
    for t in (0..schedule.num_steps()).rev() {
        let mut f = step(&forward, &z, t)?;
        let r = step(&reverse, &z, t)?;
        drop(z);
        for (a, b) in f.data_mut().iter_mut().zip(r.data()) {
            *a = wf * *a + wr * b;
        }
        z = f;
    }
    Ok(z)
}
