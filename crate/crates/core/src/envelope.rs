//! Keep-out boxes and clearance over a denormalized forecast.

use alloc::vec::Vec;

use crate::dataset::{denormalize_frame, Keypoints};
use crate::error::{param_err, Result};
use crate::scalar::Scalar;

/// Axis-aligned extent.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Aabb {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|c| self.min[c] <= p[c] && p[c] <= self.max[c])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    fn merge(self, other: Aabb) -> Aabb {
        Aabb {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeepOutBox {
    /// 1-based position in the horizon.
    pub frame_index: usize,
    pub bounds: Aabb,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub boxes: Vec<KeepOutBox>,
    /// `None` for an empty forecast.
    pub union: Option<Aabb>,
}

/// Per-frame bounding boxes of the keypoints inflated by `margin`, and their union.
pub fn keepout_boxes<T: Scalar>(forecast: &[Keypoints<T>], margin: f64) -> Result<Envelope> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(param_err!(
            "margin must be a finite value >= 0, got {margin}"
        ));
    }
    let boxes: Vec<KeepOutBox> = forecast
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let mut b = Aabb {
                min: [f64::INFINITY; 2],
                max: [f64::NEG_INFINITY; 2],
            };
            for p in frame {
                for (c, v) in p.iter().enumerate() {
                    let v = v.to_f64_lossy();
                    b.min[c] = b.min[c].min(v - margin);
                    b.max[c] = b.max[c].max(v + margin);
                }
            }
            KeepOutBox {
                frame_index: i + 1,
                bounds: b,
                margin,
            }
        })
        .collect();
    let union = boxes.iter().map(|b| b.bounds).reduce(Aabb::merge);
    Ok(Envelope { boxes, union })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub distance: f64,
    /// 1-based, like [`KeepOutBox::frame_index`].
    pub frame_index: usize,
    pub joint_index: usize,
}

/// Closest predicted keypoint to `point`; the first `(frame, joint)` wins ties.
/// `None` for an empty forecast.
pub fn min_clearance<T: Scalar>(forecast: &[Keypoints<T>], point: [f64; 2]) -> Option<Clearance> {
    let mut best: Option<Clearance> = None;
    for (f, frame) in forecast.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            let d = libm::hypot(
                p[0].to_f64_lossy() - point[0],
                p[1].to_f64_lossy() - point[1],
            );
            if best.map_or(true, |b| d < b.distance) {
                best = Some(Clearance {
                    distance: d,
                    frame_index: f + 1,
                    joint_index: j,
                });
            }
        }
    }
    best
}

/// World-frame forecast from normalized predictions, holding the last
/// observed centroid and scale over the whole horizon.
pub fn to_world<T: Scalar>(
    normalized: &[Keypoints<T>],
    centroid: [f64; 2],
    scale: f64,
) -> Result<Vec<Keypoints<T>>> {
    normalized
        .iter()
        .map(|f| denormalize_frame(f, centroid, scale))
        .collect()
}
