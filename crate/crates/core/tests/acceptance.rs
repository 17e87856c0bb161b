//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use anchorsync::anchor::{
    anchor_conditions, anchor_spread, edit_anchors, invert_anchors, InjectionConfig, JointSource,
    StageOptions, StepEvent,
};
use anchorsync::denoiser::attention::cross_outputs;
use anchorsync::denoiser::{
    bidir_attention, guided_eps, AnalyticDenoiser, AnchorPrior, AttentionWeights, Condition,
    GaussianMixture, GuidanceConfig, JointMixtureDenoiser, MixtureComponent, PairNet,
    PairNetConfig, Structural, TokenMatrix, TEXT_DIM,
};
use anchorsync::fixtures::{Fixture, FixtureKind};
use anchorsync::interp::{blend, interpolate_segment, ControlEncoder, InterpSettings, SegmentJob};
use anchorsync::metrics::{
    canny_error, cosine, entropy, sim_adjacent, sim_dagger, sim_star, text_sim, warp_error,
    Embedder, ExternalEmbedder, ToyEmbedder,
};
use anchorsync::pipeline::{
    run_anchor_stage, run_interpolation, FrameWriter, PipelineConfig, PipelineObserver,
};
use anchorsync::schedule::{invert, sample, NoiseSchedule};
use anchorsync::vision::{
    canny, optical_flow, warp, CannyParams, FlowField, FlowParams, GrayImage,
};
use anchorsync::{LatentGrid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct CountingAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn random_latent(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    LatentGrid::from_fn(c, h, w, |_, _, _| gaussian(rng))
}

// 1. DDIM roundtrip

fn roundtrip_error(steps: usize, den: &AnalyticDenoiser, latents: &[LatentGrid]) -> Result<f64> {
    let schedule = NoiseSchedule::linear(steps, 1e-4, 0.02)?;
    let null = Condition::null();
    let mut worst: f64 = 0.0;
    for x0 in latents {
        let mut eps = |x: &LatentGrid, t: usize| den.analytic_eps(x, t, &schedule, &null);
        let noised = invert(x0, &schedule, StageOptions::default().refinements, &mut eps)?;
        let back = sample(&noised, &schedule, &mut eps)?;
        worst = worst.max(back.max_abs_diff(x0));
    }
    Ok(worst)
}

fn criterion_1() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let comps = (0..3)
        .map(|_| MixtureComponent {
            weight: 1.0 / 3.0,
            mean: random_latent(4, 8, 8, &mut rng),
            variance: 1.0,
        })
        .collect();
    let mix = GaussianMixture::new(comps)?;
    // latents are draws from the modelled distribution
    let latents: Vec<LatentGrid> = (0..100).map(|_| mix.sample(&mut rng)).collect();
    let den = AnalyticDenoiser::new(mix, 2);
    let started = Instant::now();
    let e50 = roundtrip_error(50, &den, &latents)?;
    let e200 = roundtrip_error(200, &den, &latents)?;
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        e50 <= 1e-3 && e200 <= 1e-4 && secs < 10.0,
        format!("max err {e50:.2e} @50 (<=1e-3), {e200:.2e} @200 (<=1e-4), {secs:.2}s (<10s)"),
    ))
}

// 2. Analytic posterior against Monte Carlo

fn criterion_2() -> Result<Outcome> {
    let mix = GaussianMixture::new(vec![
        MixtureComponent {
            weight: 0.5,
            mean: LatentGrid::filled(1, 1, 1, 2.0),
            variance: 0.25,
        },
        MixtureComponent {
            weight: 0.5,
            mean: LatentGrid::filled(1, 1, 1, -2.0),
            variance: 0.25,
        },
    ])?;
    let den = AnalyticDenoiser::new(mix, 0);
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut points = vec![(0.3, None)];
    while points.len() < 10 {
        points.push((rng.gen_range(-2.5..2.5), Some(rng.gen_range(0..50))));
    }
    const SAMPLES: usize = 10_000_000;
    let mut worst_z: f64 = 0.0;
    for (x, t) in points {
        let ab = match t {
            None => 0.4,
            Some(t) => schedule.alpha_bar(t),
        };
        let exact = den
            .posterior_mean(&LatentGrid::filled(1, 1, 1, x), ab, &Condition::null())?
            .data()[0];
        // self-normalized importance sampling from the prior
        let (mut sw, mut swx, mut samples) = (0.0, 0.0, Vec::with_capacity(SAMPLES));
        for _ in 0..SAMPLES {
            let mu = if rng.gen::<bool>() { 2.0 } else { -2.0 };
            let x0 = mu + 0.5 * gaussian(&mut rng);
            let d = x - ab.sqrt() * x0;
            let w = (-d * d / (2.0 * (1.0 - ab))).exp();
            sw += w;
            swx += w * x0;
            samples.push((w, x0));
        }
        let est = swx / sw;
        let var: f64 = samples
            .iter()
            .map(|(w, x0)| w * w * (x0 - est) * (x0 - est))
            .sum::<f64>()
            / (sw * sw);
        let se = var.sqrt();
        worst_z = worst_z.max((est - exact).abs() / se);
    }
    Ok(outcome(
        worst_z <= 3.0,
        format!("worst deviation {worst_z:.2} standard errors (<=3) over 10 points"),
    ))
}

// 3. Guidance algebra

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_latent(2, 4, 4, &mut rng);
    let u = random_latent(2, 4, 4, &mut rng);
    let v = random_latent(2, 4, 4, &mut rng);
    let eps = |c: &Condition| -> Result<LatentGrid> {
        let a = if c.text.is_some() { 1.0 } else { 0.0 };
        let b = if c.structural.is_some() { 1.0 } else { 0.0 };
        Ok(LatentGrid::from_fn(2, 4, 4, |ch, yy, xx| {
            x.at(ch, yy, xx) + a * u.at(ch, yy, xx) + b * v.at(ch, yy, xx)
        }))
    };
    let full =
        Condition::text(vec![1.0; TEXT_DIM]).with_structural(Structural::Reweight(vec![1.0]));
    let mut worst: f64 = 0.0;
    for s_t in [0.0, 0.5, 1.0, 2.5, 6.0, 7.5] {
        for s_j in [0.0, 0.3, 0.8, 1.0, 2.0] {
            let g = guided_eps(&full, &GuidanceConfig::new(s_t, s_j)?, eps)?;
            // e(∅,c_J) + s_T·u + s_J·v with e(∅,c_J) = x + v
            let expected = LatentGrid::from_fn(2, 4, 4, |ch, yy, xx| {
                let (xv, uv, vv) = (x.at(ch, yy, xx), u.at(ch, yy, xx), v.at(ch, yy, xx));
                xv + vv + s_t * uv + s_j * vv
            });
            worst = worst.max(g.max_abs_diff(&expected));
        }
    }
    let telescoped = guided_eps(&full, &GuidanceConfig::new(1.0, 0.0)?, eps)? == eps(&full)?;
    let unguided =
        guided_eps(&full, &GuidanceConfig::new(0.0, 0.0)?, eps)? == eps(&full.without_text())?;
    Ok(outcome(
        worst <= 1e-12 && telescoped && unguided,
        format!("max deviation {worst:.1e} (<=1e-12) incl. (6.0, 0.8); (1,0) exact: {telescoped}; (0,0) exact: {unguided}"),
    ))
}

// 4. Bidirectional attention

fn tokens(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenMatrix {
    TokenMatrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Dense double-loop attention of every query row of `zq` over keys and
/// values of `zkv`.
fn dense_attention(w: &AttentionWeights, zq: &TokenMatrix, zkv: &TokenMatrix) -> Vec<Vec<f64>> {
    let d = w.dim;
    let proj = |m: &[f64], row: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|o| (0..d).map(|i| m[o * d + i] * row[i]).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..zq.tokens).map(|i| proj(&w.w_q, zq.row(i))).collect();
    let k: Vec<Vec<f64>> = (0..zkv.tokens).map(|i| proj(&w.w_k, zkv.row(i))).collect();
    let v: Vec<Vec<f64>> = (0..zkv.tokens).map(|i| proj(&w.w_v, zkv.row(i))).collect();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            (0..d)
                .map(|c| {
                    logits
                        .iter()
                        .zip(&v)
                        .map(|(l, vj)| l.exp() / z * vj[c])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut swaps_ok = 0;
    for s in 0..1000 {
        let d = 4 + s % 5;
        let w = AttentionWeights::seeded(d, s as u64);
        let (n_i, n_j) = (1 + s % 6, 1 + (s / 6) % 6);
        let (zi, zj) = (tokens(n_i, d, &mut rng), tokens(n_j, d, &mut rng));
        let (a_i, a_j) = bidir_attention(&zi, &zj, &w)?;
        let (b_j, b_i) = bidir_attention(&zj, &zi, &w)?;
        if a_i == b_i && a_j == b_j {
            swaps_ok += 1;
        }
    }

    let w = AttentionWeights::seeded(8, 44);
    let (zi, zj) = (tokens(4, 8, &mut rng), tokens(4, 8, &mut rng));
    let (ni, nj) = bidir_attention(&zi, &zj, &w)?;
    let mut dense_err: f64 = 0.0;
    for (z_new, own, other) in [(&ni, &zi, &zj), (&nj, &zj, &zi)] {
        let s = dense_attention(&w, own, own);
        let c = dense_attention(&w, own, other);
        for t in 0..4 {
            for k in 0..8 {
                dense_err = dense_err.max((z_new.row(t)[k] - (s[t][k] + c[t][k])).abs());
            }
        }
    }

    let (zi, zj) = (tokens(1, 8, &mut rng), tokens(1, 8, &mut rng));
    let (out_i, out_j) = cross_outputs(&zi, &zj, &w)?;
    let single = out_i.data == w.project(&zj)?.v && out_j.data == w.project(&zi)?.v;
    Ok(outcome(
        swaps_ok == 1000 && dense_err <= 1e-6 && single,
        format!("swap-equivariant {swaps_ok}/1000; 4-token dense error {dense_err:.1e} (<=1e-6); single token returns partner V: {single}"),
    ))
}

// 5. Cross-pair fusion

fn fusion_run(
    anchors: &[LatentGrid],
    den: &JointMixtureDenoiser,
    edit_text: &[f64],
    fusion: bool,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<LatentGrid>)> {
    let opts = StageOptions {
        fusion,
        refinements: 2,
        capture: false,
    };
    let mut spreads = Vec::new();
    let mut record = |e: &StepEvent<'_>| spreads.push(anchor_spread(e.anchors));
    let inv = anchor_conditions(None, JointSource::None, anchors);
    let (state, cache) = invert_anchors(anchors, &inv, schedule, den, &opts, Some(&mut record))?;
    let edit = anchor_conditions(Some(edit_text), JointSource::None, anchors);
    let out = edit_anchors(
        &state,
        &cache,
        &edit,
        &GuidanceConfig::default(),
        &InjectionConfig::disabled(),
        schedule,
        den,
        &opts,
        Some(&mut record),
    )?;
    Ok((spreads, out))
}

fn adjacent_embedding_distance(frames: &[LatentGrid]) -> Result<f64> {
    let emb: Vec<Vec<f64>> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| ToyEmbedder.embed(i, &f.to_frame()))
        .collect::<Result<_>>()?;
    Ok(emb
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / (emb.len() - 1) as f64)
}

fn criterion_5() -> Result<Outcome> {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let (mut seeds_spread, mut seeds_distance, mut worst_frac) = (0, 0, 1.0f64);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        // five overlapping modes around a shared base frame
        let base = Fixture::new(FixtureKind::Static, 1, 16, 16, 77 + seed)?.frame(0);
        let modes: Vec<LatentGrid> = (0..5)
            .map(|i| {
                let f = Fixture::new(FixtureKind::Static, 1, 16, 16, 1000 * seed + i)?.frame(0);
                Ok(base.zip_map(&f, |b, x| b + 0.1 * (x - b)))
            })
            .collect::<Result<_>>()?;
        let anchors: Vec<LatentGrid> = modes
            .iter()
            .map(|m| m.map(|v| v + 0.02 * gaussian(&mut rng)))
            .collect();
        let den = JointMixtureDenoiser::new(AnalyticDenoiser::new(
            GaussianMixture::uniform(modes, 0.2)?,
            seed,
        ));
        let text: Vec<f64> = (0..TEXT_DIM).map(|_| gaussian(&mut rng)).collect();
        let (fused_spread, fused) = fusion_run(&anchors, &den, &text, true, &schedule)?;
        let (plain_spread, plain) = fusion_run(&anchors, &den, &text, false, &schedule)?;
        let held = fused_spread
            .iter()
            .zip(&plain_spread)
            .filter(|(f, p)| f <= p)
            .count();
        let frac = held as f64 / fused_spread.len() as f64;
        worst_frac = worst_frac.min(frac);
        if frac >= 0.9 {
            seeds_spread += 1;
        }
        if adjacent_embedding_distance(&fused)? < adjacent_embedding_distance(&plain)? {
            seeds_distance += 1;
        }
    }
    Ok(outcome(
        seeds_spread == 10 && seeds_distance == 10,
        format!(
            "spread not above no-fusion at >=90% of steps on {seeds_spread}/10 seeds (worst {:.0}%); lower inter-anchor distance on {seeds_distance}/10",
            100.0 * worst_frac
        ),
    ))
}

// 6. Feature injection

fn criterion_6() -> Result<Outcome> {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let opts = StageOptions::default();
    let mut closer = 0;
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let fx = Fixture::new(FixtureKind::TranslatingShapes, 25, 32, 32, 600 + seed)?;
        let anchors = vec![fx.frame(0), fx.frame(12), fx.frame(24)];
        let net = PairNet::seeded(PairNetConfig {
            seed,
            ..PairNetConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text: Vec<f64> = (0..TEXT_DIM).map(|_| gaussian(&mut rng)).collect();
        let inv = anchor_conditions(None, JointSource::SourceFrame, &anchors);
        let edit = anchor_conditions(Some(&text), JointSource::SourceFrame, &anchors);
        let (state, cache) = invert_anchors(&anchors, &inv, &schedule, &net, &opts, None)?;
        let distance = |inj: InjectionConfig| -> Result<f64> {
            let out = edit_anchors(
                &state,
                &cache,
                &edit,
                &GuidanceConfig::default(),
                &inj,
                &schedule,
                &net,
                &opts,
                None,
            )?;
            let mut total = 0.0;
            for (i, (o, a)) in out.iter().zip(&anchors).enumerate() {
                let (eo, ea) = (
                    ToyEmbedder.embed(i, &o.to_frame())?,
                    ToyEmbedder.embed(i, a)?,
                );
                total += eo
                    .iter()
                    .zip(&ea)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
            Ok(total / anchors.len() as f64)
        };
        let full = distance(InjectionConfig::new(1.0, 1.0)?)?;
        let none = distance(InjectionConfig::new(0.0, 0.0)?)?;
        if full < none {
            closer += 1;
        }
        gaps.push(none - full);
    }
    let inj = InjectionConfig::default();
    let active = (0..50).filter(|&t| inj.active_at(t, 50).0).count();
    let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(outcome(
        closer == 10 && active == 22 && inj.attn_steps(50) == 22,
        format!("injected edits closer on {closer}/10 seeds (smallest margin {min_gap:.3e}); ratio 0.44 @50 steps active on {active} steps"),
    ))
}

// 7. Interpolation endpoints

struct Collect(Vec<LatentGrid>);

impl FrameWriter for Collect {
    fn push(&mut self, frame: &LatentGrid) -> Result<()> {
        self.0.push(frame.clone());
        Ok(())
    }
}

struct Quiet;

impl PipelineObserver for Quiet {}

fn criterion_7() -> Result<Outcome> {
    let fx = Fixture::new(FixtureKind::TranslatingShapes, 21, 32, 32, 7)?;
    let cfg = PipelineConfig::from_text("k=8\nsteps=12\nrefinements=2")?;
    let (indices, edited) = run_anchor_stage(&fx, &cfg, &mut Quiet)?;
    let mut out = Collect(Vec::new());
    run_interpolation(&fx, &indices, &edited, &cfg, &mut out, &mut Quiet)?;
    let exact = out.0.len() == 21 && indices.iter().zip(&edited).all(|(&i, e)| out.0[i] == *e);

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut mid_err: f64 = 0.0;
    for len in [2, 4, 8, 24] {
        let (f, r) = (
            random_latent(3, 8, 8, &mut rng),
            random_latent(3, 8, 8, &mut rng),
        );
        let mean = f.zip_map(&r, |a, b| 0.5 * (a + b));
        mid_err = mid_err.max(blend(&f, &r, len / 2, len).max_abs_diff(&mean));
    }

    let still = Fixture::new(FixtureKind::Static, 25, 32, 32, 71)?;
    let anchor = still.frame(0);
    let job = SegmentJob::new(anchor.clone(), anchor.clone(), still.frames(), 72)?;
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let prior = AnchorPrior::default();
    let encoder = ControlEncoder::seeded(3, ControlEncoder::DEFAULT_HIDDEN, 73);
    let frames = interpolate_segment(
        &job,
        &schedule,
        &prior,
        &encoder,
        &InterpSettings::default(),
    )?;
    let static_dev = frames
        .iter()
        .map(|f| f.max_abs_diff(&anchor))
        .fold(0.0, f64::max);
    Ok(outcome(
        exact && mid_err <= 1e-12 && static_dev <= 1e-2,
        format!("anchors bit-identical in output: {exact}; midpoint error {mid_err:.1e} (<=1e-12); static deviation {static_dev:.2e} (<=1e-2)"),
    ))
}

// 8. Vision oracles

/// Straightforward Canny written independently of the library: dense 2-D
/// Gaussian, 3x3 Sobel masks, direction sectors and breadth-first hysteresis.
fn reference_canny(img: &GrayImage, p: &CannyParams) -> Vec<u8> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let px = |x: isize, y: isize| img.data()[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let r = (3.0 * p.sigma).ceil() as isize;
    let g1: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * p.sigma * p.sigma)).exp())
        .collect();
    let s1: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s1).collect();
    // horizontal then vertical, matching the separable evaluation order
    let mut tmp = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = (-r..=r).map(|k| g1[(k + r) as usize] * px(x + k, y)).sum();
        }
    }
    let mut blur = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            blur[(y * w + x) as usize] = (-r..=r)
                .map(|k| g1[(k + r) as usize] * tmp[((y + k).clamp(0, h - 1) * w + x) as usize])
                .sum();
        }
    }
    let b = |x: isize, y: isize| blur[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let n = (w * h) as usize;
    let (mut gx, mut gy, mut mag) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            gx[i] = (b(x + 1, y - 1) - b(x - 1, y - 1))
                + 2.0 * (b(x + 1, y) - b(x - 1, y))
                + (b(x + 1, y + 1) - b(x - 1, y + 1));
            gy[i] = (b(x - 1, y + 1) - b(x - 1, y - 1))
                + 2.0 * (b(x, y + 1) - b(x, y - 1))
                + (b(x + 1, y + 1) - b(x + 1, y - 1));
            mag[i] = (gx[i].hypot(gy[i]) * 1e9).round() / 1e9;
        }
    }
    let mut nms = vec![0.0; n];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = (y * w + x) as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let deg = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy) = if !(22.5..157.5).contains(&deg) {
                (1, 0)
            } else if deg < 67.5 {
                (1, 1)
            } else if deg < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let ahead = mag[((y + dy) * w + x + dx) as usize];
            let behind = mag[((y - dy) * w + x - dx) as usize];
            if mag[i] > behind && mag[i] >= ahead {
                nms[i] = mag[i];
            }
        }
    }
    let mut edges = vec![0u8; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| nms[i] >= p.high).collect();
    for &i in &queue {
        edges[i] = 1;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i as isize % w, i as isize / w);
        for ny in (y - 1).max(0)..=(y + 1).min(h - 1) {
            for nx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                let k = (ny * w + nx) as usize;
                if edges[k] == 0 && nms[k] >= p.low {
                    edges[k] = 1;
                    queue.push_back(k);
                }
            }
        }
    }
    edges
}

fn synthetic_image(kind: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = (rng.gen_range(24..48), rng.gen_range(24..48));
    let (a, b) = (rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0));
    let (cx, cy, rad) = (
        rng.gen_range(8.0..16.0),
        rng.gen_range(8.0..16.0),
        rng.gen_range(4.0..10.0),
    );
    let col = rng.gen_range(6..w - 6);
    let freq = rng.gen_range(3.0..9.0);
    let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-0.05..0.05)).collect();
    GrayImage::from_fn(w, h, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let v = match kind % 5 {
            0 => {
                if x >= col {
                    b
                } else {
                    a
                }
            }
            1 => {
                if (xf - cx).hypot(yf - cy) <= rad {
                    b
                } else {
                    a
                }
            }
            2 => {
                if ((x / 6) + (y / 6)) % 2 == 0 {
                    b
                } else {
                    a
                }
            }
            3 => 0.5 + 0.4 * (xf / freq).sin() * (yf / freq).cos(),
            _ => {
                (if (xf - cx).abs().max((yf - cy).abs()) <= rad {
                    b
                } else {
                    a
                }) + noise[y * w + x]
            }
        };
        v.clamp(0.0, 1.0)
    })
}

fn texture(x: f64, y: f64) -> f64 {
    use std::f64::consts::TAU;
    0.5 + 0.2 * (TAU * x / 11.0).sin() + 0.2 * (TAU * y / 9.0).cos() * (TAU * (x + y) / 17.0).sin()
}

fn criterion_8() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = CannyParams::default();
    let mut matching = 0;
    for k in 0..20 {
        let img = synthetic_image(k, &mut rng);
        if canny(&img, &params)?.data == reference_canny(&img, &params) {
            matching += 1;
        }
    }

    let a = GrayImage::from_fn(64, 64, |x, y| texture(x as f64, y as f64));
    let b = GrayImage::from_fn(64, 64, |x, y| texture(x as f64 - 1.0, y as f64));
    let flow = optical_flow(&a, &b, &FlowParams::default())?;
    let (mut su, mut sv, mut cnt) = (0.0, 0.0, 0.0);
    for y in 8..56 {
        for x in 8..56 {
            let (u, v) = flow.at(x, y);
            su += u;
            sv += v;
            cnt += 1.0;
        }
    }
    let flow_err = (su / cnt - 1.0).hypot(sv / cnt);

    let frame = random_latent(3, 17, 23, &mut rng);
    let (warped, mask) = warp(&frame, &FlowField::zeros(23, 17))?;
    let identity = warped == frame && mask.iter().all(|&m| m);
    Ok(outcome(
        matching == 20 && flow_err <= 0.25 && identity,
        format!("canny matches reference on {matching}/20 images; mean interior flow error {flow_err:.3} px (<=0.25); zero-flow warp identity: {identity}"),
    ))
}

// 9. Metrics

fn loop_sim(emb: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(i, j) in pairs {
        let dot: f64 = (0..emb[i].len()).map(|k| emb[i][k] * emb[j][k]).sum();
        let ni: f64 = (0..emb[i].len())
            .map(|k| emb[i][k] * emb[i][k])
            .sum::<f64>()
            .sqrt();
        let nj: f64 = (0..emb[j].len())
            .map(|k| emb[j][k] * emb[j][k])
            .sum::<f64>()
            .sqrt();
        total += dot / (ni * nj);
    }
    100.0 * total / pairs.len() as f64
}

fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some(
        (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
            + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]),
    )
}

fn loop_warp_error(orig: &[LatentGrid], edit: &[LatentGrid], params: &FlowParams) -> Result<f64> {
    let mut per_pair = Vec::new();
    for i in 0..orig.len() - 1 {
        let (a, b) = (
            GrayImage::from_frame(&orig[i]),
            GrayImage::from_frame(&orig[i + 1]),
        );
        let f = optical_flow(&a, &b, params)?;
        let bk = optical_flow(&b, &a, params)?;
        let (c, h, w) = edit[i].shape();
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (sx, sy) = (x as f64 + f.u[p], y as f64 + f.v[p]);
                let (Some(bu), Some(bv)) =
                    (bilinear(&bk.u, w, h, sx, sy), bilinear(&bk.v, w, h, sx, sy))
                else {
                    continue;
                };
                if (f.u[p] + bu).hypot(f.v[p] + bv) >= 1.0 {
                    continue;
                }
                for ch in 0..c {
                    let warped = bilinear(edit[i + 1].plane(ch), w, h, sx, sy).expect("inside");
                    sum += (warped - edit[i].at(ch, y, x)).abs();
                    count += 1;
                }
            }
        }
        if count > 0 {
            per_pair.push(sum / count as f64);
        }
    }
    Ok(100.0 * per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

fn loop_entropy(frame: &LatentGrid) -> f64 {
    let g = GrayImage::from_frame(frame);
    let mut hist = vec![0.0; 256];
    for &v in g.data() {
        hist[(v * 255.0).round() as usize] += 1.0;
    }
    let n = g.data().len() as f64;
    hist.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).log2())
        .sum::<f64>()
        .max(0.0)
}

fn gray_frame(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> LatentGrid {
    LatentGrid::from_fn(3, h, w, |_, y, x| f(x, y))
}

fn criterion_9() -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // exact values
    check(
        entropy(&gray_frame(16, 16, |_, _| 0.3)) == 0.0,
        "entropy constant",
    );
    check(
        entropy(&gray_frame(
            16,
            16,
            |x, _| if x % 2 == 0 { 0.0 } else { 1.0 },
        )) == 1.0,
        "entropy two levels",
    );
    check(
        entropy(&gray_frame(16, 16, |x, y| (y * 16 + x) as f64 / 255.0)) == 8.0,
        "entropy 256 levels",
    );
    let still = Fixture::new(FixtureKind::Static, 30, 32, 32, 9)?.frames();
    check(
        sim_star(&still, &ToyEmbedder)? == 100.0,
        "sim_star identical",
    );
    check(
        sim_dagger(&still, &ToyEmbedder)? == 100.0,
        "sim_dagger identical",
    );
    check(
        sim_adjacent(&still, &ToyEmbedder)? == 100.0,
        "sim_adjacent identical",
    );
    let mut basis = vec![vec![0.0; 4]; 49];
    for (i, v) in basis.iter_mut().enumerate() {
        v[usize::from(i > 0)] = 1.0;
    }
    let ext = ExternalEmbedder::new(basis)?;
    let blank49: Vec<LatentGrid> = (0..49).map(|_| LatentGrid::zeros(3, 8, 8)).collect();
    check(sim_dagger(&blank49, &ext)? == 0.0, "sim_dagger orthogonal");
    let ortho = ExternalEmbedder::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    check(
        sim_adjacent(&blank49[..2], &ortho)? == 0.0,
        "sim_adjacent orthogonal",
    );
    check(
        warp_error(&still, &still, &FlowParams::default())? == 0.0,
        "warp error static",
    );
    check(
        canny_error(&still, &still, &CannyParams::default())? == 0.0,
        "canny error static",
    );

    // loop oracles on random fixtures
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let orig = Fixture::new(FixtureKind::TranslatingShapes, 50, 32, 32, 90 + seed)?.frames();
        let edit: Vec<LatentGrid> = orig
            .iter()
            .map(|f| f.map(|v| (v + 0.05 * gaussian(&mut rng)).clamp(0.0, 1.0)))
            .collect();
        let emb: Vec<Vec<f64>> = edit
            .iter()
            .enumerate()
            .map(|(i, f)| ToyEmbedder.embed(i, f))
            .collect::<Result<_>>()?;
        let star: Vec<(usize, usize)> = (0..edit.len() - 24).map(|i| (i, i + 24)).collect();
        let dagger: Vec<(usize, usize)> =
            (1..=(edit.len() - 1) / 24).map(|k| (24 * k, 0)).collect();
        let adjacent: Vec<(usize, usize)> = (0..edit.len() - 1).map(|i| (i, i + 1)).collect();
        worst = worst.max((sim_star(&edit, &ToyEmbedder)? - loop_sim(&emb, &star)).abs());
        worst = worst.max((sim_dagger(&edit, &ToyEmbedder)? - loop_sim(&emb, &dagger)).abs());
        worst = worst.max((sim_adjacent(&edit, &ToyEmbedder)? - loop_sim(&emb, &adjacent)).abs());

        let short = &orig[..6];
        let short_edit = &edit[..6];
        let params = FlowParams::default();
        worst = worst.max(
            (warp_error(short, short_edit, &params)?
                - loop_warp_error(short, short_edit, &params)?)
            .abs(),
        );

        let cp = CannyParams::default();
        let mut canny_loop = 0.0;
        for (o, e) in short.iter().zip(short_edit) {
            let (a, b) = (
                canny(&GrayImage::from_frame(o), &cp)?,
                canny(&GrayImage::from_frame(e), &cp)?,
            );
            let mut diff = 0.0;
            for y in 0..a.height {
                for x in 0..a.width {
                    diff += f64::from(a.at(x, y) != b.at(x, y));
                }
            }
            canny_loop += diff / (a.width * a.height) as f64;
        }
        canny_loop *= 100.0 / short.len() as f64;
        worst = worst.max((canny_error(short, short_edit, &cp)? - canny_loop).abs());

        for f in &edit[..5] {
            worst = worst.max((entropy(f) - loop_entropy(f)).abs());
        }

        let vectors: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| gaussian(&mut rng)).collect())
            .collect();
        let ext = ExternalEmbedder::new(vectors.clone())?;
        let prompt: Vec<f64> = (0..6).map(|_| gaussian(&mut rng)).collect();
        let mut all = vectors.clone();
        all.push(prompt.clone());
        let text_loop = loop_sim(&all, &(0..10).map(|i| (i, 10)).collect::<Vec<_>>());
        worst = worst.max((text_sim(&blank49[..10], &prompt, &ext)? - text_loop).abs());
        worst = worst.max((cosine(&vectors[0], &vectors[0]) - 1.0).abs());
    }
    check(worst <= 1e-9, "loop oracles");
    Ok(outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("exact values hold; worst loop-oracle deviation {worst:.1e} (<=1e-9)")
        } else {
            format!(
                "failed: {} (worst loop-oracle deviation {worst:.1e})",
                failures.join(", ")
            )
        },
    ))
}

// 10. Long video

struct Hashes(Vec<u64>);

impl FrameWriter for Hashes {
    fn push(&mut self, frame: &LatentGrid) -> Result<()> {
        let mut h = DefaultHasher::new();
        for v in frame.data() {
            v.to_bits().hash(&mut h);
        }
        self.0.push(h.finish());
        Ok(())
    }
}

#[derive(Default)]
struct MemoryProbe {
    baseline: usize,
}

impl PipelineObserver for MemoryProbe {
    fn interpolation_started(&mut self) {
        self.baseline = reset_peak();
    }
}

fn long_run(
    threads: usize,
    fx: &Fixture,
    cfg: &PipelineConfig,
) -> Result<(Vec<u64>, usize, Duration)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| {
        let started = Instant::now();
        let mut sink = Hashes(Vec::with_capacity(fx.len()));
        let mut probe = MemoryProbe::default();
        let (indices, edited) = run_anchor_stage(fx, cfg, &mut probe)?;
        probe.interpolation_started();
        run_interpolation(fx, &indices, &edited, cfg, &mut sink, &mut probe)?;
        let peak = PEAK.load(Ordering::Relaxed).saturating_sub(probe.baseline);
        Ok((sink.0, peak, started.elapsed()))
    })
}

fn criterion_10() -> Result<Outcome> {
    let fx = Fixture::new(FixtureKind::TranslatingShapes, 1500, 64, 64, 10)?;
    let cfg = PipelineConfig::from_text("k=24\nsteps=50")?;
    let block = 25 * 3 * 64 * 64 * std::mem::size_of::<f64>();
    let (one, peak_one, time_one) = long_run(1, &fx, &cfg)?;
    let (eight, peak_eight, time_eight) = long_run(8, &fx, &cfg)?;
    let peak = peak_one.max(peak_eight);
    let identical = one == eight && one.len() == 1500;
    let slowest = time_one.max(time_eight);
    Ok(outcome(
        identical && peak <= 3 * block && slowest <= Duration::from_secs(15 * 60),
        format!(
            "{} frames; bit-identical across 1 and 8 threads: {identical}; runtime {:.0}s / {:.0}s (<=900s); interpolation peak {:.2} MB (<= {:.2} MB)",
            one.len(),
            time_one.as_secs_f64(),
            time_eight.as_secs_f64(),
            peak as f64 / 1e6,
            3.0 * block as f64 / 1e6
        ),
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    type Criterion = (&'static str, fn() -> Result<Outcome>);
    let criteria: [Criterion; 10] = [
        ("DDIM roundtrip", criterion_1),
        ("analytic posterior vs Monte Carlo", criterion_2),
        ("guidance algebra", criterion_3),
        ("bidirectional attention", criterion_4),
        ("cross-pair fusion", criterion_5),
        ("feature injection", criterion_6),
        ("interpolation endpoints", criterion_7),
        ("vision oracles", criterion_8),
        ("metric suite", criterion_9),
        ("long-video scale", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let result = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
