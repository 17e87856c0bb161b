//! Consistency and quality metrics over frame sequences.
//!
//! Similarities are cosine similarities of frame embeddings; everything
//! except entropy is reported scaled by 100. Reductions use pairwise
//! summation so results do not depend on thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::{pairwise_sum, LatentGrid};
use crate::vision::{canny, optical_flow, warp, warp_flow, CannyParams, FlowParams, GrayImage};

/// Frame distance used by the long-range similarities.
pub const LONG_RANGE_GAP: usize = 24;

/// Maps frames to unit-norm vectors of a fixed dimension.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;

    /// Embedding of `frame`, which sits at position `index` of its sequence.
    fn embed(&self, index: usize, frame: &LatentGrid) -> Result<Vec<f64>>;

    /// Whether frame embeddings share a space with prompt embeddings.
    fn supports_text(&self) -> bool {
        false
    }
}

/// 8x8 mean-pooled grayscale followed by an 8-bin magnitude-weighted
/// gradient orientation histogram, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedder;

impl ToyEmbedder {
    pub const GRID: usize = 8;
    pub const BINS: usize = 8;
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        Self::GRID * Self::GRID + Self::BINS
    }

    fn embed(&self, _index: usize, frame: &LatentGrid) -> Result<Vec<f64>> {
        let g = GrayImage::from_frame(frame);
        let (w, h) = (g.width(), g.height());
        let n = Self::GRID;
        if w < n || h < n {
            return Err(Error::contract(format!(
                "toy embedder needs at least {n}x{n} frames, got {w}x{h}"
            )));
        }
        let mut v = vec![0.0; self.dim()];
        let mut counts = vec![0usize; n * n];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * n / h) * n + x * n / w;
                v[cell] += g.at(x, y);
                counts[cell] += 1;
            }
        }
        for (s, c) in v.iter_mut().zip(&counts) {
            *s /= *c as f64;
        }
        let sector = std::f64::consts::TAU / Self::BINS as f64;
        let scale = 1.0 / (w * h) as f64;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = 0.5 * (g.at_clamped(x + 1, y) - g.at_clamped(x - 1, y));
                let gy = 0.5 * (g.at_clamped(x, y + 1) - g.at_clamped(x, y - 1));
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let bin =
                    (((gy.atan2(gx) + std::f64::consts::PI) / sector) as usize).min(Self::BINS - 1);
                v[n * n + bin] += mag * scale;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            // black frame: same direction as any other flat frame
            v[..n * n].fill(1.0 / n as f64);
        } else {
            v.iter_mut().for_each(|a| *a /= norm);
        }
        Ok(v)
    }
}

/// Precomputed per-frame vectors, looked up by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbedder {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl ExternalEmbedder {
    /// Vectors are normalized on load; zero vectors are rejected.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::contract("external embeddings are empty"));
        }
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != dim {
                    return Err(Error::contract(format!(
                        "embedding {i} has dimension {}, expected {dim}",
                        v.len()
                    )));
                }
                unit(v).ok_or_else(|| Error::contract(format!("embedding {i} is zero")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, index: usize, _frame: &LatentGrid) -> Result<Vec<f64>> {
        self.vectors.get(index).cloned().ok_or_else(|| {
            Error::contract(format!(
                "no external embedding for frame {index} (have {})",
                self.vectors.len()
            ))
        })
    }

    fn supports_text(&self) -> bool {
        true
    }
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|a| *a /= norm);
    Some(v)
}

/// Cosine similarity, clamped to `[-1, 1]`; exactly 1 for equal vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

pub fn embed_all(frames: &[LatentGrid], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| embedder.embed(i, f))
        .collect()
}

fn need(frames: usize, min: usize, what: &str) -> Result<()> {
    if frames < min {
        return Err(Error::contract(format!(
            "{what} needs at least {min} frames, got {frames}"
        )));
    }
    Ok(())
}

/// Mean similarity of frames `LONG_RANGE_GAP` apart, ×100.
pub fn sim_star_from(emb: &[Vec<f64>]) -> Result<f64> {
    need(emb.len(), LONG_RANGE_GAP + 1, "long-range similarity")?;
    let v: Vec<f64> = (0..emb.len() - LONG_RANGE_GAP)
        .map(|i| cosine(&emb[i], &emb[i + LONG_RANGE_GAP]))
        .collect();
    Ok(100.0 * mean(&v))
}

/// Mean similarity of every `LONG_RANGE_GAP`-th frame to the first, ×100.
pub fn sim_dagger_from(emb: &[Vec<f64>]) -> Result<f64> {
    need(emb.len(), LONG_RANGE_GAP + 1, "first-frame similarity")?;
    let v: Vec<f64> = (LONG_RANGE_GAP..emb.len())
        .step_by(LONG_RANGE_GAP)
        .map(|i| cosine(&emb[i], &emb[0]))
        .collect();
    Ok(100.0 * mean(&v))
}

/// Mean similarity of adjacent frames, ×100.
pub fn sim_adjacent_from(emb: &[Vec<f64>]) -> Result<f64> {
    need(emb.len(), 2, "adjacent similarity")?;
    let v: Vec<f64> = emb.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    Ok(100.0 * mean(&v))
}

pub fn sim_star(frames: &[LatentGrid], embedder: &dyn Embedder) -> Result<f64> {
    need(frames.len(), LONG_RANGE_GAP + 1, "long-range similarity")?;
    sim_star_from(&embed_all(frames, embedder)?)
}

pub fn sim_dagger(frames: &[LatentGrid], embedder: &dyn Embedder) -> Result<f64> {
    need(frames.len(), LONG_RANGE_GAP + 1, "first-frame similarity")?;
    let picked: Vec<LatentGrid> = frames.iter().step_by(LONG_RANGE_GAP).cloned().collect();
    let emb = picked
        .par_iter()
        .enumerate()
        .map(|(k, f)| embedder.embed(k * LONG_RANGE_GAP, f))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<f64> = emb[1..].iter().map(|e| cosine(e, &emb[0])).collect();
    Ok(100.0 * mean(&v))
}

pub fn sim_adjacent(frames: &[LatentGrid], embedder: &dyn Embedder) -> Result<f64> {
    need(frames.len(), 2, "adjacent similarity")?;
    sim_adjacent_from(&embed_all(frames, embedder)?)
}

fn check_pairs(original: &[LatentGrid], edited: &[LatentGrid]) -> Result<()> {
    if original.len() != edited.len() {
        return Err(Error::contract(format!(
            "original has {} frames, edited has {}",
            original.len(),
            edited.len()
        )));
    }
    for (i, (o, e)) in original.iter().zip(edited).enumerate() {
        if o.shape() != e.shape() {
            return Err(Error::contract(format!(
                "frame {i}: shapes {:?} and {:?} differ",
                o.shape(),
                e.shape()
            )));
        }
    }
    Ok(())
}

/// Mean masked L1 residual of the edited video under flow computed on the
/// original, ×100. Pixels are kept where the backward warp stays inside the
/// frame and forward and backward flow agree within one pixel.
pub fn warp_error(
    original: &[LatentGrid],
    edited: &[LatentGrid],
    params: &FlowParams,
) -> Result<f64> {
    check_pairs(original, edited)?;
    need(original.len(), 2, "warp error")?;
    let per_pair: Vec<Option<f64>> = (0..original.len() - 1)
        .into_par_iter()
        .map(|i| {
            let a = GrayImage::from_frame(&original[i]);
            let b = GrayImage::from_frame(&original[i + 1]);
            let fwd = optical_flow(&a, &b, params)?;
            let bwd = optical_flow(&b, &a, params)?;
            let (warped, valid) = warp(&edited[i + 1], &fwd)?;
            let (bwd_at, bwd_valid) = warp_flow(&bwd, &fwd);
            let (c, h, w) = edited[i].shape();
            let mut diffs = Vec::new();
            for p in 0..h * w {
                let du = fwd.u[p] + bwd_at.u[p];
                let dv = fwd.v[p] + bwd_at.v[p];
                if !(valid[p] && bwd_valid[p] && du.hypot(dv) < 1.0) {
                    continue;
                }
                for ch in 0..c {
                    diffs.push(
                        (warped.data()[ch * h * w + p] - edited[i].data()[ch * h * w + p]).abs(),
                    );
                }
            }
            if diffs.is_empty() {
                log::warn!(
                    "warp error: no consistent pixels between frames {i} and {}, skipped",
                    i + 1
                );
                return Ok(None);
            }
            Ok(Some(mean(&diffs)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = per_pair.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::contract(
            "warp error: every frame pair has an empty mask",
        ));
    }
    Ok(100.0 * mean(&kept))
}

/// Mean fraction of pixels whose edge label differs, ×100.
pub fn canny_error(
    original: &[LatentGrid],
    edited: &[LatentGrid],
    params: &CannyParams,
) -> Result<f64> {
    check_pairs(original, edited)?;
    need(original.len(), 1, "canny error")?;
    let per_frame: Vec<f64> = original
        .par_iter()
        .zip(edited)
        .map(|(o, e)| {
            let a = canny(&GrayImage::from_frame(o), params)?;
            let b = canny(&GrayImage::from_frame(e), params)?;
            let diff = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
            Ok(diff as f64 / a.data.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * mean(&per_frame))
}

/// Shannon entropy in bits of the 256-bin grayscale histogram.
pub fn entropy(frame: &LatentGrid) -> f64 {
    let g = GrayImage::from_frame(frame);
    let mut hist = [0usize; 256];
    for &v in g.data() {
        hist[(v * 255.0).round() as usize] += 1;
    }
    let n = g.data().len() as f64;
    let terms: Vec<f64> = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .collect();
    pairwise_sum(&terms).max(0.0)
}

pub fn entropy_mean(frames: &[LatentGrid]) -> Result<f64> {
    need(frames.len(), 1, "entropy")?;
    let v: Vec<f64> = frames.par_iter().map(entropy).collect();
    Ok(mean(&v))
}

/// Mean similarity between each frame and a prompt embedding, ×100.
pub fn text_sim(frames: &[LatentGrid], prompt: &[f64], embedder: &dyn Embedder) -> Result<f64> {
    if !embedder.supports_text() {
        return Err(Error::Unsupported(
            "text similarity needs an embedder with a text space".into(),
        ));
    }
    if prompt.len() != embedder.dim() {
        return Err(Error::contract(format!(
            "prompt embedding has dimension {}, embedder has {}",
            prompt.len(),
            embedder.dim()
        )));
    }
    need(frames.len(), 1, "text similarity")?;
    let emb = embed_all(frames, embedder)?;
    let v: Vec<f64> = emb.iter().map(|e| cosine(e, prompt)).collect();
    Ok(100.0 * mean(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricParams {
    pub canny: CannyParams,
    pub flow: FlowParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub frames: usize,
    /// `None` for sequences shorter than `LONG_RANGE_GAP + 1` frames.
    pub sim_star: Option<f64>,
    pub sim_dagger: Option<f64>,
    pub sim_adjacent: f64,
    pub warp_error: f64,
    pub canny_error: f64,
    pub entropy_mean: f64,
    pub text_sim: Option<f64>,
}

impl MetricsReport {
    /// Similarities and entropy on `edited`; warp and edge errors against
    /// `original`.
    pub fn compute(
        original: &[LatentGrid],
        edited: &[LatentGrid],
        embedder: &dyn Embedder,
        params: &MetricParams,
        prompt: Option<&[f64]>,
    ) -> Result<Self> {
        check_pairs(original, edited)?;
        need(edited.len(), 2, "metrics report")?;
        let emb = embed_all(edited, embedder)?;
        let long = emb.len() > LONG_RANGE_GAP;
        Ok(Self {
            frames: edited.len(),
            sim_star: if long {
                Some(sim_star_from(&emb)?)
            } else {
                None
            },
            sim_dagger: if long {
                Some(sim_dagger_from(&emb)?)
            } else {
                None
            },
            sim_adjacent: sim_adjacent_from(&emb)?,
            warp_error: warp_error(original, edited, &params.flow)?,
            canny_error: canny_error(original, edited, &params.canny)?,
            entropy_mean: entropy_mean(edited)?,
            text_sim: prompt.map(|p| text_sim(edited, p, embedder)).transpose()?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_key_values(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        format!(
            "frames={}\nsim_star={}\nsim_dagger={}\nsim_adjacent={}\nwarp_error={}\ncanny_error={}\nentropy_mean={}\ntext_sim={}\n",
            self.frames,
            opt(self.sim_star),
            opt(self.sim_dagger),
            self.sim_adjacent,
            self.warp_error,
            self.canny_error,
            self.entropy_mean,
            opt(self.text_sim)
        )
    }
}
