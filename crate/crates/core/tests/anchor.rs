use anchorsync::anchor::{
    anchor_conditions, edit_anchors, fuse_shared, invert_anchors, sample_anchors, InjectionConfig,
    JointSource, StageOptions,
};
use anchorsync::denoiser::{Condition, GuidanceConfig, PairNet, PairNetConfig, TEXT_DIM};
use anchorsync::{LatentGrid, NoiseSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn anchor_sampling_counts() {
    assert_eq!(sample_anchors(25, 24).unwrap().indices(), &[0, 24]);
    assert_eq!(sample_anchors(30, 24).unwrap().indices(), &[0, 24, 29]);
    assert_eq!(sample_anchors(49, 24).unwrap().indices(), &[0, 24, 48]);
    let set = sample_anchors(1500, 24).unwrap();
    assert_eq!(set.len(), 64);
    assert_eq!(set.num_pairs(), 63);
    assert!(set.segments().all(|(a, b)| b > a && b - a <= 24));
    assert!(sample_anchors(1, 24).is_err());
}

#[test]
fn injection_window_length() {
    let inj = InjectionConfig::default();
    let active = (0..50).filter(|&t| inj.active_at(t, 50).0).count();
    assert_eq!(active, 22);
    assert!(inj.active_at(49, 50).0 && !inj.active_at(0, 50).0);
    assert!(InjectionConfig::new(1.2, 0.5).is_err());
}

#[test]
fn stages_are_identical_across_thread_counts() {
    let anchors: Vec<LatentGrid> = (0..5).map(random).collect();
    let net = PairNet::seeded(PairNetConfig {
        latent_channels: 3,
        patch: 4,
        hidden: 6,
        seed: 2,
    });
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let text = vec![0.4; TEXT_DIM];
    let inv = anchor_conditions(None, JointSource::SourceFrame, &anchors);
    let edit = anchor_conditions(Some(&text), JointSource::SourceFrame, &anchors);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let opts = StageOptions::default();
                let (state, cache) = invert_anchors(&anchors, &inv, &s, &net, &opts, None).unwrap();
                let g = GuidanceConfig::default();
                edit_anchors(
                    &state,
                    &cache,
                    &edit,
                    &g,
                    &InjectionConfig::default(),
                    &s,
                    &net,
                    &opts,
                    None,
                )
                .unwrap()
            })
    };
    let one = run(1);
    assert_eq!(one.len(), 5);
    assert_eq!(one, run(4));
}

#[test]
fn mismatched_conditions_are_rejected() {
    let anchors: Vec<LatentGrid> = (0..3).map(random).collect();
    let net = PairNet::seeded(PairNetConfig {
        latent_channels: 3,
        patch: 4,
        hidden: 4,
        seed: 0,
    });
    let s = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
    let conds = vec![Condition::null(); 2];
    assert!(invert_anchors(&anchors, &conds, &s, &net, &StageOptions::default(), None).is_err());
}

proptest! {
    #[test]
    fn fusion_matches_serial_reference(n in 2usize..9, seed in 0u64..1000) {
        let pairs: Vec<[LatentGrid; 2]> = (0..n as u64 - 1).map(|p| [random(seed + 2 * p), random(seed + 2 * p + 1)]).collect();
        let fused = fuse_shared(&pairs, n).unwrap();
        prop_assert_eq!(fused.len(), n);
        prop_assert_eq!(&fused[0], &pairs[0][0]);
        prop_assert_eq!(&fused[n - 1], &pairs[n - 2][1]);
        for a in 1..n - 1 {
            let (l, r) = (&pairs[a - 1][1], &pairs[a][0]);
            for k in 0..l.len() {
                prop_assert_eq!(fused[a].data()[k], 0.5 * (l.data()[k] + r.data()[k]));
            }
        }
        prop_assert!(fuse_shared(&pairs, n + 1).is_err());
    }
}
