use anchorsync::anchor::{anchor_conditions, JointSource};
use anchorsync::denoiser::{
    guided_eps, AnchorPrior, ConditionedDenoiser, GuidanceConfig, PairNet, PairNetConfig, TEXT_DIM,
};
use anchorsync::interp::{
    blend, blend_weights, frame_controls, interpolate_segment, interpolate_segment_with,
    ControlEncoder, ControlParams, InterpSettings, SegmentJob,
};
use anchorsync::schedule::{ddim_step, predict_x0};
use anchorsync::{LatentGrid, NoiseSchedule, Result};
use proptest::prelude::*;

fn textured(shift: f64, channels: usize) -> LatentGrid {
    use std::f64::consts::TAU;
    LatentGrid::from_fn(channels, 16, 16, |c, y, x| {
        let (x, y) = (x as f64 - shift, y as f64);
        0.5 + 0.2 * (TAU * x / 7.0 + c as f64).sin()
            + 0.2 * (TAU * y / 5.0).cos() * (TAU * (x + y) / 11.0).sin()
    })
}

fn job(len: usize, channels: usize, seed: u64) -> SegmentJob {
    let frames: Vec<LatentGrid> = (0..=len)
        .map(|k| textured(k as f64 * 0.7, channels))
        .collect();
    let end = frames[len].map(|v| 1.0 - v);
    SegmentJob::new(frames[0].clone(), end, frames, seed).unwrap()
}

/// Straightforward per-frame trajectories: guided ε for each branch, one
/// DDIM step each, blend.
fn reference(
    job: &SegmentJob,
    s: &NoiseSchedule,
    model: &dyn ConditionedDenoiser,
    encoder: &ControlEncoder,
    settings: &InterpSettings<'_>,
) -> Result<Vec<LatentGrid>> {
    let len = job.len();
    let originals: Vec<LatentGrid> = job.originals().iter().map(|f| (**f).clone()).collect();
    let reversed: Vec<LatentGrid> = originals.iter().rev().cloned().collect();
    let conds = anchor_conditions(settings.text, settings.joint, &originals);
    let shape = model.control_shape(job.start().shape());
    let residual = |frames: &[LatentGrid], j: usize| -> Result<LatentGrid> {
        let (edges, flow) = frame_controls(frames, j, &settings.controls)?;
        Ok(encoder
            .encode(&edges, &flow, shape)?
            .scale(settings.control_strength))
    };
    let mut out = Vec::new();
    for (j, cond) in conds.iter().enumerate().take(len).skip(1) {
        let branches = [
            (job.start(), residual(&originals, j)?),
            (job.end(), residual(&reversed, len - j)?),
        ];
        let mut z = job.noise(j);
        for t in (0..s.num_steps()).rev() {
            let mut next = Vec::new();
            for (anchor, control) in &branches {
                let eps = guided_eps(cond, &settings.guidance, |c| {
                    model.eps_conditioned(&z, anchor, t, s, c, Some(control))
                })?;
                next.push(if t == 0 {
                    predict_x0(&z, &eps, 0, s)?
                } else {
                    ddim_step(&z, &eps, t, s)?
                });
            }
            z = blend(&next[0], &next[1], j, len);
        }
        out.push(z);
    }
    Ok(out)
}

#[test]
fn segment_matches_reference_trajectories() {
    let s = NoiseSchedule::linear(6, 1e-3, 0.05).unwrap();
    let net = PairNet::seeded(PairNetConfig {
        latent_channels: 2,
        patch: 4,
        hidden: 6,
        seed: 3,
    });
    let encoder = ControlEncoder::seeded(
        net.control_shape((2, 16, 16)).0,
        ControlEncoder::DEFAULT_HIDDEN,
        9,
    );
    let text = [0.7; TEXT_DIM];
    let job = job(5, 2, 21);
    for (text, joint) in [
        (Some(&text[..]), JointSource::SourceFrame),
        (None, JointSource::SourceFrame),
        (Some(&text[..]), JointSource::None),
    ] {
        let settings = InterpSettings {
            text,
            joint,
            guidance: GuidanceConfig::default(),
            controls: ControlParams::default(),
            control_strength: 0.8,
        };
        let got = interpolate_segment(&job, &s, &net, &encoder, &settings).unwrap();
        assert_eq!(got, reference(&job, &s, &net, &encoder, &settings).unwrap());
    }
}

#[test]
fn streaming_and_thread_count_do_not_change_frames() {
    let s = NoiseSchedule::linear(8, 1e-3, 0.05).unwrap();
    let encoder = ControlEncoder::seeded(3, 4, 2);
    let job = job(9, 3, 4);
    let settings = InterpSettings {
        joint: JointSource::SourceFrame,
        ..InterpSettings::default()
    };
    let collected =
        interpolate_segment(&job, &s, &AnchorPrior::default(), &encoder, &settings).unwrap();
    for threads in [1, 3] {
        let mut streamed = Vec::new();
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                interpolate_segment_with(
                    &job,
                    &s,
                    &AnchorPrior::default(),
                    &encoder,
                    &settings,
                    &mut |z| {
                        streamed.push(z);
                        Ok(())
                    },
                )
                .unwrap()
            });
        assert_eq!(streamed, collected);
    }
}

#[test]
fn reversed_segment_gives_reversed_frames() {
    let s = NoiseSchedule::linear(6, 1e-3, 0.05).unwrap();
    let net = PairNet::seeded(PairNetConfig {
        latent_channels: 3,
        patch: 4,
        hidden: 4,
        seed: 1,
    });
    let encoder = ControlEncoder::seeded(net.control_shape((3, 16, 16)).0, 4, 5);
    let text = vec![0.2; TEXT_DIM];
    let settings = InterpSettings {
        text: Some(&text),
        joint: JointSource::SourceFrame,
        ..InterpSettings::default()
    };
    let job = job(6, 3, 8);
    let fwd = interpolate_segment(&job, &s, &net, &encoder, &settings).unwrap();
    let mut back = interpolate_segment(&job.reversed(), &s, &net, &encoder, &settings).unwrap();
    back.reverse();
    assert_eq!(fwd, back);
}

proptest! {
    #[test]
    fn blend_stays_between_branches(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        len in 1usize..30,
        j in 0usize..30,
    ) {
        let j = j % (len + 1);
        let (wf, wr) = blend_weights(j, len);
        prop_assert!((wf + wr - 1.0).abs() <= 1e-15);
        let fa = LatentGrid::from_vec(1, 2, 4, a).unwrap();
        let fb = LatentGrid::from_vec(1, 2, 4, b).unwrap();
        let out = blend(&fa, &fb, j, len);
        for k in 0..8 {
            let (lo, hi) = (fa.data()[k].min(fb.data()[k]), fa.data()[k].max(fb.data()[k]));
            let v = out.data()[k];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
