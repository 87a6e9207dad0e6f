//! Keypoint clips, per-frame normalization, sliding windows and splits.
//!
//! Every frame is centered on its keypoint mean and divided by its largest
//! keypoint radius. Target frames use their own centroid and scale, so a model
//! forecasts shape dynamics; world-frame reconstruction needs the stored
//! [`DenormParams`].

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{dim_err, param_err, Error, Result};
use crate::models::{COORDS, JOINTS, T_IN, T_OUT};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 17 `(x, y)` keypoints.
pub type Keypoints<T> = [[T; COORDS]; JOINTS];
pub type Frame = Keypoints<f32>;

pub const DEFAULT_FPS: f64 = 30.0;

/// Frames with a maximum radius below this keep scale 1.
pub const DEGENERATE_SCALE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl MotionClip {
    pub fn new(clip_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let clip = Self {
            clip_id: clip_id.into(),
            frames,
            fps: DEFAULT_FPS,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(param_err!("clip {} has no frames", self.clip_id));
        }
        if let Some(i) = self.frames.iter().position(|f| !frame_is_finite(f)) {
            return Err(Error::Numeric(alloc::format!(
                "clip {} frame {i} has a non-finite coordinate",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn frame_is_finite<T: Scalar>(f: &Keypoints<T>) -> bool {
    f.iter().flatten().all(|v| v.is_finite())
}

/// A normalized frame and the transform that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized<T> {
    pub frame: Keypoints<T>,
    pub centroid: [f64; 2],
    pub scale: f64,
}

/// Center on the keypoint mean and divide by the largest radius.
///
/// Arithmetic runs in `f64` whatever `T` is.
pub fn normalize_frame<T: Scalar>(frame: &Keypoints<T>) -> Result<Normalized<T>> {
    if !frame_is_finite(frame) {
        return Err(Error::Numeric("frame has a non-finite coordinate".into()));
    }
    let p = frame.map(|[x, y]| [x.to_f64_lossy(), y.to_f64_lossy()]);
    let n = JOINTS as f64;
    let cx = p.iter().map(|q| q[0]).sum::<f64>() / n;
    let cy = p.iter().map(|q| q[1]).sum::<f64>() / n;
    let centered = p.map(|[x, y]| [x - cx, y - cy]);
    let radius = centered
        .iter()
        .map(|[x, y]| libm::hypot(*x, *y))
        .fold(0.0, f64::max);
    let scale = if radius < DEGENERATE_SCALE {
        1.0
    } else {
        radius
    };
    Ok(Normalized {
        frame: centered.map(|[x, y]| [T::from_f64_lossy(x / scale), T::from_f64_lossy(y / scale)]),
        centroid: [cx, cy],
        scale,
    })
}

/// Inverse of [`normalize_frame`]: `p * scale + centroid`.
pub fn denormalize_frame<T: Scalar>(
    frame: &Keypoints<T>,
    centroid: [f64; 2],
    scale: f64,
) -> Result<Keypoints<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(param_err!(
            "denormalization scale must be positive, got {scale}"
        ));
    }
    Ok(frame.map(|[x, y]| {
        [
            T::from_f64_lossy(x.to_f64_lossy() * scale + centroid[0]),
            T::from_f64_lossy(y.to_f64_lossy() * scale + centroid[1]),
        ]
    }))
}

/// Per-frame centroids and scales of a window, inputs first.
#[derive(Debug, Clone, PartialEq)]
pub struct DenormParams {
    pub centroids: Vec<[f64; 2]>,
    pub scales: Vec<f64>,
}

impl DenormParams {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Vec<Frame>,
    pub target: Vec<Frame>,
    pub denorm: DenormParams,
    pub clip_id: String,
    pub start: usize,
}

impl Window {
    /// Centroid and scale of the last observed frame.
    pub fn anchor(&self) -> ([f64; 2], f64) {
        let i = self.input.len() - 1;
        (self.denorm.centroids[i], self.denorm.scales[i])
    }
}

/// `max(0, floor((len - t_in - t_out) / step) + 1)`.
pub fn window_count(len: usize, t_in: usize, t_out: usize, step: usize) -> usize {
    assert!(step > 0, "window step must be positive");
    let span = t_in + t_out;
    if len < span {
        0
    } else {
        (len - span) / step + 1
    }
}

/// Sliding windows at starts `0, step, 2*step, ...`. Short clips give none.
pub fn make_windows(
    clip: &MotionClip,
    t_in: usize,
    t_out: usize,
    step: usize,
) -> Result<Vec<Window>> {
    if step == 0 {
        return Err(param_err!("window step must be positive"));
    }
    if t_in == 0 || t_out == 0 {
        return Err(param_err!(
            "window lengths must be positive, got {t_in}/{t_out}"
        ));
    }
    let count = window_count(clip.len(), t_in, t_out, step);
    if count == 0 {
        return Ok(Vec::new());
    }
    let normalized = clip
        .frames
        .iter()
        .map(normalize_frame)
        .collect::<Result<Vec<_>>>()?;
    let windows = (0..count)
        .map(|w| {
            let start = w * step;
            let span = &normalized[start..start + t_in + t_out];
            Window {
                input: span[..t_in].iter().map(|n| n.frame).collect(),
                target: span[t_in..].iter().map(|n| n.frame).collect(),
                denorm: DenormParams {
                    centroids: span.iter().map(|n| n.centroid).collect(),
                    scales: span.iter().map(|n| n.scale).collect(),
                },
                clip_id: clip.clip_id.clone(),
                start,
            }
        })
        .collect();
    Ok(windows)
}

/// Windows of every clip with the default 60/30 lengths, in clip order.
pub fn windows_for_clips(clips: &[MotionClip], step: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for clip in clips {
        out.extend(make_windows(clip, T_IN, T_OUT, step)?);
    }
    Ok(out)
}

/// `ceil(n * fraction)`, reading products within rounding of an integer as
/// that integer (`10 * 0.7` gives 7, not 8).
pub fn train_size(n: usize, fraction: f64) -> usize {
    let x = n as f64 * fraction;
    let r = libm::round(x);
    let k = if libm::fabs(x - r) <= 1e-9 * r.max(1.0) {
        r
    } else {
        libm::ceil(x)
    };
    (k as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(param_err!(
            "train fraction must lie in (0, 1), got {fraction}"
        ))
    }
}

/// Seeded shuffle, then the first `ceil(n * fraction)` items train.
pub fn split<T>(mut items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    check_fraction(fraction)?;
    items.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let test = items.split_off(train_size(items.len(), fraction));
    Ok((items, test))
}

/// Split whole clips so no clip contributes to both sides.
///
/// Clip ids are shuffled and split like [`split`]; windows keep their order.
pub fn split_by_clip(
    windows: Vec<Window>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Window>, Vec<Window>)> {
    check_fraction(fraction)?;
    let mut seen = BTreeSet::new();
    let mut ids: Vec<String> = Vec::new();
    for w in &windows {
        if seen.insert(w.clip_id.as_str()) {
            ids.push(w.clip_id.clone());
        }
    }
    ids.shuffle(&mut rng::stream(seed, Domain::Split, 1));
    let cut = train_size(ids.len(), fraction);
    let train_ids: BTreeSet<&str> = ids[..cut].iter().map(String::as_str).collect();
    Ok(windows
        .into_iter()
        .partition(|w| train_ids.contains(w.clip_id.as_str())))
}

fn frames_tensor<'a, T: Scalar>(
    frames: impl Iterator<Item = &'a [Frame]>,
    batch: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(batch * len * JOINTS * COORDS);
    for f in frames {
        if f.len() != len {
            return Err(dim_err!("window has {} frames, expected {len}", f.len()));
        }
        data.extend(
            f.iter()
                .flatten()
                .flatten()
                .map(|&v| T::from_f64_lossy(v as f64)),
        );
    }
    Tensor::new(&[batch, len, JOINTS, COORDS], data)
}

/// Stack windows into `[B, t_in, 17, 2]` inputs and `[B, t_out, 17, 2]` targets.
pub fn batch_tensors<T: Scalar>(windows: &[&Window]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = windows
        .first()
        .ok_or_else(|| param_err!("cannot batch zero windows"))?;
    let b = windows.len();
    let x = frames_tensor(
        windows.iter().map(|w| w.input.as_slice()),
        b,
        first.input.len(),
    )?;
    let y = frames_tensor(
        windows.iter().map(|w| w.target.as_slice()),
        b,
        first.target.len(),
    )?;
    Ok((x, y))
}

/// Convert a `[t, 17, 2]` slice of a tensor back into frames.
pub fn tensor_frames<T: Scalar>(data: &[T]) -> Result<Vec<Frame>> {
    let per = JOINTS * COORDS;
    if data.len() % per != 0 {
        return Err(dim_err!("{} values do not form whole frames", data.len()));
    }
    Ok(data
        .chunks_exact(per)
        .map(|c| {
            core::array::from_fn(|j| {
                [
                    c[2 * j].to_f64_lossy() as f32,
                    c[2 * j + 1].to_f64_lossy() as f32,
                ]
            })
        })
        .collect())
}
