use kpfc_core::dataset::{make_windows, normalize_frame, DEGENERATE_SCALE};
use kpfc_core::rng::{self, Domain};
use kpfc_core::synthgen::*;
use kpfc_core::Error;
use proptest::prelude::*;

#[test]
fn still_spec_repeats_the_base_pose() {
    let clip = generate_clip(&BehaviorSpec::still(0, BASE_SKELETON), 90, 1, "s").unwrap();
    assert_eq!(clip.len(), 90);
    let base = BASE_SKELETON.map(|p| p.map(|v| v as f32));
    assert!(clip.frames.iter().all(|f| *f == base));
}

#[test]
fn clips_are_seed_deterministic() {
    let mut r = rng::stream(0, Domain::Test, 0);
    let spec = sample_spec(1, Flavor::Pretrain, &mut r).unwrap();
    let a = generate_clip(&spec, 120, 5, "a").unwrap();
    let b = generate_clip(&spec, 120, 5, "a").unwrap();
    let c = generate_clip(&spec, 120, 6, "a").unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn single_oscillator_spans_twice_its_amplitude() {
    let mut spec = BehaviorSpec::still(2, BASE_SKELETON);
    // 2 Hz over 90 frames covers six periods, hitting both peaks at t = 3.75 + 15k.
    spec.joints[9] = Oscillator {
        amplitude: [0.25, 0.0],
        frequency: 2.0,
        phase: [0.0, 0.0],
    };
    let clip = generate_clip(&spec, 90, 0, "osc").unwrap();
    let xs: Vec<f64> = clip.frames.iter().map(|f| f[9][0] as f64).collect();
    let range =
        xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
    assert!((range - 0.5).abs() < 0.5 * 0.02, "range {range}");
    for j in (0..17).filter(|&j| j != 9) {
        assert!(clip.frames.iter().all(|f| f[j] == clip.frames[0][j]));
    }
}

#[test]
fn out_of_range_frequency_is_rejected() {
    for f in [0.0, 15.0, 20.0, -1.0, f64::NAN] {
        let mut spec = BehaviorSpec::still(0, BASE_SKELETON);
        spec.joints[3].frequency = f;
        assert!(matches!(
            generate_clip(&spec, 90, 0, "x"),
            Err(Error::Parameter(_))
        ));
    }
    let mut spec = BehaviorSpec::still(0, BASE_SKELETON);
    spec.joints[0].amplitude[1] = -0.1;
    assert!(generate_clip(&spec, 90, 0, "x").is_err());
    assert!(generate_clip(&BehaviorSpec::still(3, BASE_SKELETON), 90, 0, "x").is_err());
}

#[test]
fn nine_thousand_tier_is_balanced() {
    let corpus = generate_corpus(CorpusTier::T9K, 0).unwrap();
    assert_eq!(corpus.len(), 9_000);
    for b in 0..BEHAVIORS {
        assert_eq!(corpus.iter().filter(|c| c.behavior == b).count(), 3_000);
    }
    for c in &corpus {
        assert_eq!(make_windows(&c.clip, 60, 30, 1).unwrap().len(), 1);
    }
    let ids: std::collections::BTreeSet<_> = corpus.iter().map(|c| &c.clip.clip_id).collect();
    assert_eq!(ids.len(), corpus.len());
}

#[test]
fn tier_sizes() {
    assert_eq!(CorpusTier::T45K.clips(), 45_000);
    assert_eq!(CorpusTier::T90K.clips(), 90_000);
    assert_eq!("45k".parse::<CorpusTier>().unwrap(), CorpusTier::T45K);
    assert!("10k".parse::<CorpusTier>().is_err());
}

#[test]
fn sets_depend_on_seed_only() {
    let set = SetSpec {
        flavor: Flavor::Pretrain,
        clips: 7,
        length: 90,
        prefix: "t".into(),
    };
    let a = generate_set(&set, 3).unwrap();
    assert_eq!(a, generate_set(&set, 3).unwrap());
    assert_ne!(a, generate_set(&set, 4).unwrap());
    let longer = generate_set(
        &SetSpec {
            clips: 10,
            ..set.clone()
        },
        3,
    )
    .unwrap();
    assert_eq!(a[..], longer[..7]);
    for b in 0..BEHAVIORS {
        let n = a.iter().filter(|c| c.behavior == b).count();
        assert!(n.abs_diff(7 / 3) <= 1);
    }
    assert!(generate_set(&SetSpec { length: 89, ..set }, 3).is_err());
}

#[test]
fn real_like_differs_from_pretrain() {
    let real = generate_real_like(30, 120, 1).unwrap();
    assert!(real
        .iter()
        .all(|c| c.clip.len() == 120 && c.clip.clip_id.starts_with("real-")));
    let synth = generate_set(
        &SetSpec {
            flavor: Flavor::Pretrain,
            clips: 30,
            length: 120,
            prefix: "s".into(),
        },
        1,
    )
    .unwrap();
    let speed = |set: &[LabeledClip]| {
        let mut total = 0.0;
        for c in set {
            for w in c.clip.frames.windows(2) {
                let (a, b) = (
                    normalize_frame(&w[0]).unwrap(),
                    normalize_frame(&w[1]).unwrap(),
                );
                total += a
                    .frame
                    .iter()
                    .flatten()
                    .zip(b.frame.iter().flatten())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f32>();
            }
        }
        total
    };
    assert!(speed(&real) > 1.2 * speed(&synth));
}

fn arb_oscillator() -> impl Strategy<Value = Oscillator> {
    (
        0.0f64..0.3,
        0.0f64..0.3,
        0.05f64..14.9,
        0.0f64..6.3,
        0.0f64..6.3,
    )
        .prop_map(|(ax, ay, f, px, py)| Oscillator {
            amplitude: [ax, ay],
            frequency: f,
            phase: [px, py],
        })
}

fn arb_spec() -> impl Strategy<Value = BehaviorSpec> {
    (
        0usize..3,
        proptest::collection::vec(arb_oscillator(), 17),
        arb_oscillator(),
        0.0f64..0.02,
    )
        .prop_map(|(behavior, joints, sway, noise_sigma)| BehaviorSpec {
            behavior,
            base: BASE_SKELETON,
            joints: joints.try_into().unwrap(),
            sway,
            noise_sigma,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn motion_is_temporally_smooth(spec in arb_spec(), seed in any::<u64>()) {
        let clip = generate_clip(&spec, 90, seed, "p").unwrap();
        let sway = spec.sway.max_step();
        for pair in clip.frames.windows(2) {
            for j in 0..17 {
                let osc = spec.joints[j].max_step();
                for c in 0..2 {
                    let step = (pair[1][j][c] as f64 - pair[0][j][c] as f64).abs();
                    let bound = osc[c] + sway[c] + 2.0 * NOISE_CLIP_SIGMAS * spec.noise_sigma;
                    prop_assert!(step <= bound + 1e-6, "joint {} axis {}: {} > {}", j, c, step, bound);
                }
            }
        }
    }

    #[test]
    fn generated_frames_are_never_degenerate(spec in arb_spec(), seed in any::<u64>()) {
        let clip = generate_clip(&spec, 90, seed, "p").unwrap();
        for f in &clip.frames {
            let n = normalize_frame(f).unwrap();
            let radius = f.iter().map(|p| (p[0] as f64 - n.centroid[0]).hypot(p[1] as f64 - n.centroid[1]) ).fold(0.0, f64::max);
            prop_assert!(radius >= DEGENERATE_SCALE);
        }
    }
}
