//! Seeded toy pair network with bidirectional attention and feature taps.
//!
//! Per frame:
//!
//! ```text
//! patch conv → SiLU → residual conv (tap 1) → + text bias
//!   → self-attention ⊕ bidirectional attention (K/V tap 2) → + control
//!   → residual conv (tap 3) → transposed patch conv → ε
//! ```
//!
//! All token-level work happens on a `hidden x (H/P) x (W/P)` grid. The
//! output adds the standard-normal-prior term `√(1−ᾱ_t)·x_t`, so the network
//! predicts a correction on top of the unit-Gaussian optimum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attention::{fused_attention, AttentionWeights, Qkv, TokenMatrix};
use super::condition::{Condition, Structural, TEXT_DIM};
use super::{ConditionedDenoiser, Injection, PairDenoiser, PairRequest, TapKey, TapKind, Taps};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;

pub const TIME_DIM: usize = 8;

pub const TAP_CONV_IN: TapKey = TapKey {
    layer: 1,
    kind: TapKind::ConvActivation,
};
pub const TAP_ATTN: TapKey = TapKey {
    layer: 2,
    kind: TapKind::AttentionKv,
};
pub const TAP_CONV_OUT: TapKey = TapKey {
    layer: 3,
    kind: TapKind::ConvActivation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairNetConfig {
    pub latent_channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PairNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            patch: 8,
            hidden: 8,
            seed: 0,
        }
    }
}

/// A weight tensor and its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn seeded(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = dims.iter().product();
        let scale = (1.0 / fan_in as f64).sqrt() as f32;
        let data = (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(rng);
                (v * scale) as f64
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairNet {
    cfg: PairNetConfig,
    patch_embed: Tensor,
    map_embed: Tensor,
    time_proj: Tensor,
    text_proj: Tensor,
    conv_in: Tensor,
    attention: AttentionWeights,
    conv_out: Tensor,
    unpatch: Tensor,
}

struct FrameState {
    x_shape: (usize, usize, usize),
    u: Vec<f64>,
    qkv: Qkv,
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

impl PairNet {
    pub fn seeded(cfg: PairNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, p, d) = (cfg.latent_channels, cfg.patch, cfg.hidden);
        let patch_in = c * p * p;
        let patch_embed = Tensor::seeded(&[d, patch_in], patch_in, &mut rng);
        let map_embed = Tensor::seeded(&[d, patch_in], patch_in, &mut rng);
        let time_proj = Tensor::seeded(&[d, TIME_DIM], TIME_DIM, &mut rng);
        let text_proj = Tensor::seeded(&[d, TEXT_DIM], TEXT_DIM, &mut rng);
        let conv_in = Tensor::seeded(&[d, d, 3, 3], d * 9, &mut rng);
        let attention = AttentionWeights::seeded(d, cfg.seed ^ 0x5eed_a77e);
        let conv_out = Tensor::seeded(&[d, d, 3, 3], d * 9, &mut rng);
        let unpatch = Tensor::seeded(&[patch_in, d], d, &mut rng);
        Self {
            cfg,
            patch_embed,
            map_embed,
            time_proj,
            text_proj,
            conv_in,
            attention,
            conv_out,
            unpatch,
        }
    }

    pub fn config(&self) -> PairNetConfig {
        self.cfg
    }

    pub fn attention(&self) -> &AttentionWeights {
        &self.attention
    }

    /// Weight tensors in their persistence order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let d = self.cfg.hidden;
        let att = |w: &Vec<f64>| Tensor {
            dims: vec![d, d],
            data: w.clone(),
        };
        vec![
            self.patch_embed.clone(),
            self.map_embed.clone(),
            self.time_proj.clone(),
            self.text_proj.clone(),
            self.conv_in.clone(),
            att(&self.attention.w_q),
            att(&self.attention.w_k),
            att(&self.attention.w_v),
            att(&self.attention.w_o),
            self.conv_out.clone(),
            self.unpatch.clone(),
        ]
    }

    pub fn from_tensors(latent_channels: usize, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 11 {
            return Err(Error::contract(format!(
                "pair network needs 11 tensors, got {}",
                tensors.len()
            )));
        }
        let d = tensors[0].dims.first().copied().unwrap_or(0);
        let patch_in = tensors[0].dims.get(1).copied().unwrap_or(0);
        let channels = latent_channels.max(1);
        let patch = ((patch_in / channels) as f64).sqrt().round() as usize;
        if d == 0 || patch == 0 || channels * patch * patch != patch_in {
            return Err(Error::contract(format!(
                "patch input width {patch_in} does not fit {latent_channels} channels"
            )));
        }
        let expect: [Vec<usize>; 11] = [
            vec![d, patch_in],
            vec![d, patch_in],
            vec![d, TIME_DIM],
            vec![d, TEXT_DIM],
            vec![d, d, 3, 3],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d, 3, 3],
            vec![patch_in, d],
        ];
        for (i, (t, e)) in tensors.iter().zip(&expect).enumerate() {
            if &t.dims != e || t.data.len() != e.iter().product::<usize>() {
                return Err(Error::contract(format!(
                    "tensor {i} has dims {:?}, expected {e:?}",
                    t.dims
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_embed = next();
        let map_embed = next();
        let time_proj = next();
        let text_proj = next();
        let conv_in = next();
        let attention = AttentionWeights {
            dim: d,
            w_q: next().data,
            w_k: next().data,
            w_v: next().data,
            w_o: next().data,
        };
        let conv_out = next();
        let unpatch = next();
        Ok(Self {
            cfg: PairNetConfig {
                latent_channels: channels,
                patch,
                hidden: d,
                seed,
            },
            patch_embed,
            map_embed,
            time_proj,
            text_proj,
            conv_in,
            attention,
            conv_out,
            unpatch,
        })
    }

    /// Token grid `(hidden, H/P, W/P)` for a latent shape.
    pub fn feature_shape(&self, latent: (usize, usize, usize)) -> (usize, usize, usize) {
        (
            self.cfg.hidden,
            latent.1 / self.cfg.patch,
            latent.2 / self.cfg.patch,
        )
    }

    fn check_latent(&self, x: &LatentGrid) -> Result<()> {
        let p = self.cfg.patch;
        if x.channels() != self.cfg.latent_channels
            || !x.height().is_multiple_of(p)
            || !x.width().is_multiple_of(p)
        {
            return Err(Error::contract(format!(
                "pair network expects {} channels and sides divisible by {p}, got {:?}",
                self.cfg.latent_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    fn patchify(&self, w: &Tensor, x: &LatentGrid, out: &mut [f64]) {
        let (c, h, wd) = x.shape();
        let p = self.cfg.patch;
        let d = self.cfg.hidden;
        let (th, tw) = (h / p, wd / p);
        let patch_in = c * p * p;
        let mut patch = vec![0.0; patch_in];
        for ty in 0..th {
            for tx in 0..tw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            patch[(ch * p + py) * p + px] = x.at(ch, ty * p + py, tx * p + px);
                        }
                    }
                }
                let tok = ty * tw + tx;
                for o in 0..d {
                    let row = &w.data[o * patch_in..(o + 1) * patch_in];
                    out[o * th * tw + tok] +=
                        row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    /// Residual 3x3 conv on the token grid: `a + SiLU(conv(a))`.
    fn residual_conv(&self, w: &Tensor, a: &[f64], th: usize, tw: usize) -> Vec<f64> {
        let d = self.cfg.hidden;
        let n = th * tw;
        let mut out = a.to_vec();
        for o in 0..d {
            for y in 0..th {
                for x in 0..tw {
                    let mut acc = 0.0;
                    for i in 0..d {
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= th as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= tw as isize {
                                    continue;
                                }
                                acc += w.data[((o * d + i) * 3 + ky) * 3 + kx]
                                    * a[i * n + yy as usize * tw + xx as usize];
                            }
                        }
                    }
                    out[o * n + y * tw + x] += silu(acc);
                }
            }
        }
        out
    }

    fn time_embedding(t: usize) -> [f64; TIME_DIM] {
        let mut e = [0.0; TIME_DIM];
        for k in 0..TIME_DIM / 2 {
            let f = 0.25f64.powi(k as i32);
            e[2 * k] = (t as f64 * f).sin();
            e[2 * k + 1] = (t as f64 * f).cos();
        }
        e
    }

    fn encode(
        &self,
        x: &LatentGrid,
        cond: &Condition,
        t: usize,
        frame: usize,
        taps: &mut Taps<'_>,
    ) -> Result<FrameState> {
        self.check_latent(x)?;
        let d = self.cfg.hidden;
        let (_, th, tw) = self.feature_shape(x.shape());
        let n = th * tw;

        let mut pre = vec![0.0; d * n];
        self.patchify(&self.patch_embed, x, &mut pre);
        match &cond.structural {
            None => {}
            Some(Structural::Map(map)) => {
                map.ensure_same_shape(x, "structural map")?;
                self.patchify(&self.map_embed, map, &mut pre);
            }
            Some(Structural::Reweight(_)) => {
                return Err(Error::contract(
                    "pair network accepts only map-valued structural conditions",
                ));
            }
        }
        let temb = Self::time_embedding(t);
        for o in 0..d {
            let bias: f64 = self.time_proj.data[o * TIME_DIM..(o + 1) * TIME_DIM]
                .iter()
                .zip(&temb)
                .map(|(a, b)| a * b)
                .sum();
            for v in &mut pre[o * n..(o + 1) * n] {
                *v = silu(*v + bias);
            }
        }

        let c1 = match self.tap(taps, TAP_CONV_IN, frame)? {
            Some(v) => check_len(v, d * n)?.to_vec(),
            None => self.residual_conv(&self.conv_in, &pre, th, tw),
        };
        if let Taps::Capture(f) = taps {
            f.insert(TAP_CONV_IN, frame, c1.clone());
        }

        let text = cond.text_vector()?;
        let mut u = c1;
        for o in 0..d {
            let bias: f64 = self.text_proj.data[o * TEXT_DIM..(o + 1) * TEXT_DIM]
                .iter()
                .zip(&text)
                .map(|(a, b)| a * b)
                .sum();
            for v in &mut u[o * n..(o + 1) * n] {
                *v += bias;
            }
        }

        // channel-major grid -> token-major matrix
        let mut tokens = vec![0.0; n * d];
        for o in 0..d {
            for k in 0..n {
                tokens[k * d + o] = u[o * n + k];
            }
        }
        let mut qkv = self.attention.project(&TokenMatrix::new(n, d, tokens)?)?;
        if let Some(kv) = self.tap(taps, TAP_ATTN, frame)? {
            let kv = check_len(kv, 2 * n * d)?;
            qkv.k.copy_from_slice(&kv[..n * d]);
            qkv.v.copy_from_slice(&kv[n * d..]);
        }
        if let Taps::Capture(f) = taps {
            let mut kv = qkv.k.clone();
            kv.extend_from_slice(&qkv.v);
            f.insert(TAP_ATTN, frame, kv);
        }
        Ok(FrameState {
            x_shape: x.shape(),
            u,
            qkv,
        })
    }

    fn tap<'a>(&self, taps: &Taps<'a>, key: TapKey, frame: usize) -> Result<Option<&'a [f64]>> {
        match taps {
            Taps::Inject(inj) => Injection::lookup(inj, key, frame),
            _ => Ok(None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        state: &FrameState,
        partner: &Qkv,
        x: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        control: Option<&LatentGrid>,
        frame: usize,
        taps: &mut Taps<'_>,
    ) -> Result<LatentGrid> {
        let d = self.cfg.hidden;
        let (_, th, tw) = self.feature_shape(state.x_shape);
        let n = th * tw;
        let z_new = fused_attention(&state.qkv, partner);
        let projected = self.attention.output(&z_new, n);
        let mut h = state.u.clone();
        for k in 0..n {
            for o in 0..d {
                h[o * n + k] += projected[k * d + o];
            }
        }
        if let Some(r) = control {
            if r.shape() != (d, th, tw) {
                return Err(Error::contract(format!(
                    "control residual shape {:?} does not match feature map {:?}",
                    r.shape(),
                    (d, th, tw)
                )));
            }
            for (hv, rv) in h.iter_mut().zip(r.data()) {
                *hv += rv;
            }
        }

        let c2 = match self.tap(taps, TAP_CONV_OUT, frame)? {
            Some(v) => check_len(v, d * n)?.to_vec(),
            None => self.residual_conv(&self.conv_out, &h, th, tw),
        };
        if let Taps::Capture(f) = taps {
            f.insert(TAP_CONV_OUT, frame, c2.clone());
        }

        let (c, hgt, wd) = state.x_shape;
        let p = self.cfg.patch;
        let patch_in = c * p * p;
        let prior = (1.0 - schedule.alpha_bar(t)).sqrt();
        let mut eps = x.scale(prior);
        let mut feat = vec![0.0; d];
        for ty in 0..th {
            for tx in 0..tw {
                let tok = ty * tw + tx;
                for (o, f) in feat.iter_mut().enumerate() {
                    *f = c2[o * n + tok];
                }
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let row = &self.unpatch.data[((ch * p + py) * p + px) * d..][..d];
                            let v: f64 = row.iter().zip(&feat).map(|(a, b)| a * b).sum();
                            let (yy, xx) = (ty * p + py, tx * p + px);
                            debug_assert!(yy < hgt && xx < wd);
                            let cur = eps.at(ch, yy, xx);
                            eps.set(ch, yy, xx, cur + v);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(patch_in, self.unpatch.dims[0]);
        Ok(eps)
    }

    /// Full pair forward; `want` selects which outputs are decoded.
    fn forward(
        &self,
        req: &PairRequest<'_>,
        t: usize,
        schedule: &NoiseSchedule,
        mut taps: Taps<'_>,
        want: [bool; 2],
    ) -> Result<[Option<LatentGrid>; 2]> {
        req.latents[0].ensure_same_shape(req.latents[1], "pair latents")?;
        if t >= schedule.num_steps() {
            return Err(Error::contract(format!("step {t} outside schedule")));
        }
        let s0 = self.encode(req.latents[0], req.conds[0], t, 0, &mut taps)?;
        let s1 = self.encode(req.latents[1], req.conds[1], t, 1, &mut taps)?;
        let e0 = if want[0] {
            Some(self.decode(
                &s0,
                &s1.qkv,
                req.latents[0],
                t,
                schedule,
                req.controls[0],
                0,
                &mut taps,
            )?)
        } else {
            None
        };
        let e1 = if want[1] {
            Some(self.decode(
                &s1,
                &s0.qkv,
                req.latents[1],
                t,
                schedule,
                req.controls[1],
                1,
                &mut taps,
            )?)
        } else {
            None
        };
        Ok([e0, e1])
    }
}

fn check_len(v: &[f64], n: usize) -> Result<&[f64]> {
    if v.len() == n {
        Ok(v)
    } else {
        Err(Error::contract(format!(
            "injected feature has {} values, expected {n}",
            v.len()
        )))
    }
}

impl PairDenoiser for PairNet {
    fn eps_pair(
        &self,
        req: &PairRequest<'_>,
        t: usize,
        schedule: &NoiseSchedule,
        taps: Taps<'_>,
    ) -> Result<[LatentGrid; 2]> {
        let [a, b] = self.forward(req, t, schedule, taps, [true, true])?;
        Ok([a.expect("requested"), b.expect("requested")])
    }
}

impl ConditionedDenoiser for PairNet {
    fn control_shape(&self, latent: (usize, usize, usize)) -> (usize, usize, usize) {
        self.feature_shape(latent)
    }

    fn eps_conditioned(
        &self,
        x_t: &LatentGrid,
        anchor: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cond: &Condition,
        control: Option<&LatentGrid>,
    ) -> Result<LatentGrid> {
        let req = PairRequest {
            latents: [anchor, x_t],
            conds: [cond, cond],
            controls: [None, control],
        };
        let [_, e] = self.forward(&req, t, schedule, Taps::None, [false, true])?;
        Ok(e.expect("requested"))
    }
}
