//! Procedural motion corpora: sinusoidal joint oscillators over a COCO-17
//! skeleton, with per-behavior parameter priors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Frame, Keypoints, MotionClip, DEFAULT_FPS};
use crate::error::{param_err, Error, Result};
use crate::models::{JOINTS, T_IN, T_OUT};
use crate::rng::{self, Domain};

pub const BEHAVIORS: usize = 3;
pub const BEHAVIOR_NAMES: [&str; BEHAVIORS] = ["enthusiastic", "laughing", "happy to see you"];

/// Upper frequency bound, the Nyquist rate at 30 FPS.
pub const MAX_FREQUENCY: f64 = 15.0;

/// Shortest generated clip; exactly one default window fits.
pub const MIN_CLIP_LEN: usize = T_IN + T_OUT;

/// Noise draws beyond this many sigmas are redrawn.
pub const NOISE_CLIP_SIGMAS: f64 = 3.0;

/// COCO keypoint order, upright skeleton roughly one unit tall, y pointing down.
pub const BASE_SKELETON: Keypoints<f64> = [
    [0.0, -0.46],   // nose
    [0.03, -0.49],  // left eye
    [-0.03, -0.49], // right eye
    [0.07, -0.47],  // left ear
    [-0.07, -0.47], // right ear
    [0.17, -0.32],  // left shoulder
    [-0.17, -0.32], // right shoulder
    [0.22, -0.10],  // left elbow
    [-0.22, -0.10], // right elbow
    [0.24, 0.10],   // left wrist
    [-0.24, 0.10],  // right wrist
    [0.11, 0.05],   // left hip
    [-0.11, 0.05],  // right hip
    [0.12, 0.28],   // left knee
    [-0.12, 0.28],  // right knee
    [0.13, 0.52],   // left ankle
    [-0.13, 0.52],  // right ankle
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oscillator {
    /// Per-axis amplitude.
    pub amplitude: [f64; 2],
    /// Hz.
    pub frequency: f64,
    /// Per-axis phase in radians.
    pub phase: [f64; 2],
}

impl Oscillator {
    pub const REST: Oscillator = Oscillator {
        amplitude: [0.0; 2],
        frequency: 1.0,
        phase: [0.0; 2],
    };

    fn at(&self, t: f64) -> [f64; 2] {
        let w = TAU * self.frequency * t / DEFAULT_FPS;
        [
            self.amplitude[0] * libm::sin(w + self.phase[0]),
            self.amplitude[1] * libm::sin(w + self.phase[1]),
        ]
    }

    /// Largest per-axis change between consecutive frames.
    pub fn max_step(&self) -> [f64; 2] {
        let w = TAU * self.frequency / DEFAULT_FPS;
        [self.amplitude[0] * w, self.amplitude[1] * w]
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency < MAX_FREQUENCY) {
            return Err(param_err!(
                "{what} frequency {} Hz is outside (0, {MAX_FREQUENCY})",
                self.frequency
            ));
        }
        if !self
            .amplitude
            .iter()
            .chain(&self.phase)
            .all(|v| v.is_finite())
            || self.amplitude.iter().any(|&a| a < 0.0)
        {
            return Err(param_err!(
                "{what} amplitudes must be finite and non-negative"
            ));
        }
        Ok(())
    }
}

/// Generator parameters for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSpec {
    pub behavior: usize,
    pub base: Keypoints<f64>,
    pub joints: [Oscillator; JOINTS],
    /// Whole-body sway added to every joint.
    pub sway: Oscillator,
    pub noise_sigma: f64,
}

impl BehaviorSpec {
    /// Motionless, noiseless pose.
    pub fn still(behavior: usize, base: Keypoints<f64>) -> Self {
        Self {
            behavior,
            base,
            joints: [Oscillator::REST; JOINTS],
            sway: Oscillator::REST,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.behavior >= BEHAVIORS {
            return Err(param_err!(
                "behavior {} is not one of 0..{BEHAVIORS}",
                self.behavior
            ));
        }
        if !self.base.iter().flatten().all(|v| v.is_finite()) {
            return Err(param_err!("base skeleton must be finite"));
        }
        for (j, osc) in self.joints.iter().enumerate() {
            osc.validate(&format!("joint {j}"))?;
        }
        self.sway.validate("sway")?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(param_err!("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Render `length` frames of `spec`; noise comes from `seed`.
pub fn generate_clip(
    spec: &BehaviorSpec,
    length: usize,
    seed: u64,
    clip_id: impl Into<String>,
) -> Result<MotionClip> {
    spec.validate()?;
    if length == 0 {
        return Err(param_err!("clip length must be positive"));
    }
    let mut rng = rng::stream(seed, Domain::Synth, 0);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).map_err(|e| param_err!("noise: {e}")))
        .transpose()?;
    let mut jitter = || match &noise {
        Some(n) => loop {
            let v: f64 = n.sample(&mut rng);
            if libm::fabs(v) <= NOISE_CLIP_SIGMAS * spec.noise_sigma {
                break v;
            }
        },
        None => 0.0,
    };
    let frames: Vec<Frame> = (0..length)
        .map(|t| {
            let t = t as f64;
            let sway = spec.sway.at(t);
            core::array::from_fn(|j| {
                let osc = spec.joints[j].at(t);
                core::array::from_fn(|c| (spec.base[j][c] + osc[c] + sway[c] + jitter()) as f32)
            })
        })
        .collect();
    MotionClip::new(clip_id, frames)
}

/// Which parameter priors to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// The pretraining corpus.
    Pretrain,
    /// Shifted frequency and amplitude priors with heavier noise.
    RealLike,
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
    Center,
}

/// Body part index (head, shoulders, arms, hips, legs) and side of a COCO joint.
fn joint_part(joint: usize) -> (usize, Side) {
    let group = match joint {
        0..=4 => 0,
        5 | 6 => 1,
        7..=10 => 2,
        11 | 12 => 3,
        _ => 4,
    };
    let side = match joint {
        0 => Side::Center,
        j if j % 2 == 1 => Side::Left,
        _ => Side::Right,
    };
    (group, side)
}

/// Relative joint activity per behavior and axis.
fn joint_weight(behavior: usize, joint: usize) -> [f64; 2] {
    let (group, side) = joint_part(joint);
    let table = [
        [0.5, 0.6, 1.0, 0.4, 0.5],
        [1.0, 0.8, 0.5, 0.5, 0.3],
        [0.4, 0.4, 0.5, 0.3, 0.3],
    ];
    let w = table[behavior][group];
    match behavior {
        0 => [w, w],
        1 => [0.4 * w, w],
        _ if group == 2 && side == Side::Right => [1.2, 0.5],
        _ => [w, 0.4 * w],
    }
}

/// Per-behavior phase pattern across the body: alternating arms, an
/// in-phase bob, and a right-hand wave.
fn phase_template(behavior: usize, joint: usize) -> [f64; 2] {
    use core::f64::consts::{FRAC_PI_2, PI};
    let (group, side) = joint_part(joint);
    match behavior {
        0 => {
            let offset = if side == Side::Right { PI } else { 0.0 };
            [offset, offset + FRAC_PI_2]
        }
        1 => [FRAC_PI_2, 0.0],
        _ => {
            let lead = if group == 2 && side == Side::Right {
                0.0
            } else {
                FRAC_PI_2
            };
            [lead, lead + FRAC_PI_2]
        }
    }
}

struct Prior {
    frequency: (f64, f64),
    amplitude: (f64, f64),
    sway_amplitude: (f64, f64),
    noise_sigma: (f64, f64),
    body_scale: (f64, f64),
}

fn prior(behavior: usize, flavor: Flavor) -> Prior {
    let frequency = [(1.6, 1.9), (2.8, 3.2), (1.0, 1.2)][behavior];
    let amplitude = [(0.22, 0.45), (0.14, 0.28), (0.18, 0.36)][behavior];
    match flavor {
        Flavor::Pretrain => Prior {
            frequency,
            amplitude,
            sway_amplitude: (0.0, 0.03),
            noise_sigma: (0.001, 0.004),
            body_scale: (0.9, 1.1),
        },
        Flavor::RealLike => Prior {
            frequency: (frequency.0 * 1.15, frequency.1 * 1.3),
            amplitude: (amplitude.0 * 1.1, amplitude.1 * 1.3),
            sway_amplitude: (0.01, 0.05),
            noise_sigma: (0.004, 0.008),
            body_scale: (0.8, 1.2),
        },
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draw a spec for `behavior` from the priors of `flavor`.
pub fn sample_spec(behavior: usize, flavor: Flavor, rng: &mut impl Rng) -> Result<BehaviorSpec> {
    if behavior >= BEHAVIORS {
        return Err(param_err!(
            "behavior {behavior} is not one of 0..{BEHAVIORS}"
        ));
    }
    let p = prior(behavior, flavor);
    let scale = uniform(rng, p.body_scale);
    let origin = [uniform(rng, (-0.5, 0.5)), uniform(rng, (-0.5, 0.5))];
    let base = BASE_SKELETON.map(|[x, y]| [x * scale + origin[0], y * scale + origin[1]]);
    let tempo = uniform(rng, p.frequency);
    let level = uniform(rng, p.amplitude) * scale;
    let start = uniform(rng, (0.0, TAU));
    let joints = core::array::from_fn(|j| {
        let w = joint_weight(behavior, j);
        let phase = phase_template(behavior, j);
        Oscillator {
            amplitude: core::array::from_fn(|c| level * w[c] * uniform(rng, (0.8, 1.2))),
            frequency: tempo,
            phase: core::array::from_fn(|c| start + phase[c] + uniform(rng, (-0.25, 0.25))),
        }
    });
    let sway = Oscillator {
        amplitude: [
            uniform(rng, p.sway_amplitude),
            uniform(rng, p.sway_amplitude) * 0.5,
        ],
        frequency: uniform(rng, (0.2, 0.6)),
        phase: [uniform(rng, (0.0, TAU)), uniform(rng, (0.0, TAU))],
    };
    let spec = BehaviorSpec {
        behavior,
        base,
        joints,
        sway,
        noise_sigma: uniform(rng, p.noise_sigma),
    };
    spec.validate()?;
    Ok(spec)
}

/// Pretraining corpus sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusTier {
    T9K,
    T45K,
    T90K,
}

impl CorpusTier {
    pub fn clips(self) -> usize {
        match self {
            CorpusTier::T9K => 9_000,
            CorpusTier::T45K => 45_000,
            CorpusTier::T90K => 90_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorpusTier::T9K => "9k",
            CorpusTier::T45K => "45k",
            CorpusTier::T90K => "90k",
        }
    }
}

impl fmt::Display for CorpusTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "9k" | "9000" => Ok(CorpusTier::T9K),
            "45k" | "45000" => Ok(CorpusTier::T45K),
            "90k" | "90000" => Ok(CorpusTier::T90K),
            _ => Err(param_err!("unknown tier {s:?}; expected 9k, 45k or 90k")),
        }
    }
}

/// A generated clip and its behavior label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: MotionClip,
    pub behavior: usize,
}

/// Generation request for [`generate_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetSpec {
    pub flavor: Flavor,
    pub clips: usize,
    /// Frames per clip, at least [`MIN_CLIP_LEN`].
    pub length: usize,
    pub prefix: String,
}

/// `clips` labeled clips, behaviors cycling `0, 1, 2, ...`.
///
/// Clip `i` draws from its own counter-addressed stream, so any subset can
/// be regenerated independently.
pub fn generate_set(set: &SetSpec, seed: u64) -> Result<Vec<LabeledClip>> {
    if set.length < MIN_CLIP_LEN {
        return Err(param_err!(
            "clip length {} is below {MIN_CLIP_LEN}",
            set.length
        ));
    }
    let domain_tag = match set.flavor {
        Flavor::Pretrain => 0u64,
        Flavor::RealLike => 1u64 << 40,
    };
    (0..set.clips)
        .map(|i| {
            let behavior = i % BEHAVIORS;
            let mut rng = rng::stream(seed, Domain::SynthCorpus, domain_tag | i as u64);
            let spec = sample_spec(behavior, set.flavor, &mut rng)?;
            let clip_seed: u64 = rng.random();
            let clip = generate_clip(
                &spec,
                set.length,
                clip_seed,
                format!("{}{i:06}", set.prefix),
            )?;
            Ok(LabeledClip { clip, behavior })
        })
        .collect()
}

/// Pretraining corpus of `tier.clips()` clips of [`MIN_CLIP_LEN`] frames.
pub fn generate_corpus(tier: CorpusTier, seed: u64) -> Result<Vec<LabeledClip>> {
    generate_set(
        &SetSpec {
            flavor: Flavor::Pretrain,
            clips: tier.clips(),
            length: MIN_CLIP_LEN,
            prefix: format!("synth{}-", tier.name()),
        },
        seed,
    )
}

/// Target-domain stand-in: `clips` clips of `length` frames.
pub fn generate_real_like(clips: usize, length: usize, seed: u64) -> Result<Vec<LabeledClip>> {
    generate_set(
        &SetSpec {
            flavor: Flavor::RealLike,
            clips,
            length,
            prefix: "real-".into(),
        },
        seed,
    )
}
