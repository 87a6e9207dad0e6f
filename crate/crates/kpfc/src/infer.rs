//! Forecasting from raw keypoint frames.

use std::collections::{HashMap, VecDeque};

use kpfc_core::dataset::{normalize_frame, Frame, Normalized};
use kpfc_core::envelope::to_world;
use kpfc_core::models::{Hyper, Model, COORDS, JOINTS, T_IN, T_OUT};
use kpfc_core::{Mode, Tensor};

use crate::clips::FrameRecord;
use crate::error::{KpfcError, Result};
use crate::report::ForecastRecord;

/// Checkpoints used on keypoint files must have the standard window shape.
pub fn check_standard_shape(hyper: &Hyper) -> Result<()> {
    let std = Hyper::default();
    if (hyper.t_in, hyper.t_out, hyper.joints, hyper.coords)
        != (std.t_in, std.t_out, std.joints, std.coords)
    {
        return Err(KpfcError::Format(format!(
            "model expects {} frames of {} joints -> {} frames; keypoint files need {T_IN} x {JOINTS} -> {T_OUT}",
            hyper.t_in, hyper.joints, hyper.t_out
        )));
    }
    Ok(())
}

/// World-frame forecast from the last [`T_IN`] normalized frames, anchored
/// at the final frame's centroid and scale.
pub fn forecast_world(model: &mut Model<f32>, observed: &[Normalized<f32>]) -> Result<Vec<Frame>> {
    if observed.len() != T_IN {
        return Err(kpfc_core::Error::Dimension(format!(
            "need {T_IN} frames, got {}",
            observed.len()
        ))
        .into());
    }
    model.set_mode(Mode::Eval);
    let data: Vec<f32> = observed
        .iter()
        .flat_map(|n| n.frame.iter().flatten().copied())
        .collect();
    let x = Tensor::new(&[1, T_IN, JOINTS, COORDS], data)?;
    let y = model.forward(&x)?;
    let frames: Vec<Frame> = y
        .data()
        .chunks_exact(JOINTS * COORDS)
        .map(|c| core::array::from_fn(|j| [c[2 * j], c[2 * j + 1]]))
        .collect();
    let anchor = &observed[T_IN - 1];
    Ok(to_world(&frames, anchor.centroid, anchor.scale)?)
}

pub fn normalize_all(frames: &[Frame]) -> Result<Vec<Normalized<f32>>> {
    Ok(frames
        .iter()
        .map(normalize_frame)
        .collect::<Result<_, _>>()?)
}

struct ClipBuffer {
    next: u64,
    frames: VecDeque<Normalized<f32>>,
}

/// Per-clip sliding buffers over an interleaved frame stream.
pub struct Streamer<'m> {
    model: &'m mut Model<f32>,
    clips: HashMap<String, ClipBuffer>,
}

impl<'m> Streamer<'m> {
    pub fn new(model: &'m mut Model<f32>) -> Result<Self> {
        check_standard_shape(model.hyper())?;
        Ok(Self {
            model,
            clips: HashMap::new(),
        })
    }

    /// Consume one frame; frames of a clip must arrive in order without gaps.
    pub fn push(&mut self, rec: &FrameRecord, line: usize) -> Result<Option<ForecastRecord>> {
        let frame = rec.to_frame(line)?;
        let buf = self.clips.entry(rec.clip_id.clone()).or_insert(ClipBuffer {
            next: rec.frame,
            frames: VecDeque::with_capacity(T_IN + 1),
        });
        if rec.frame != buf.next {
            return Err(KpfcError::Gap {
                clip_id: rec.clip_id.clone(),
                expected: buf.next,
                found: rec.frame,
            });
        }
        buf.next += 1;
        buf.frames.push_back(normalize_frame(&frame)?);
        if buf.frames.len() > T_IN {
            buf.frames.pop_front();
        }
        if buf.frames.len() < T_IN {
            return Ok(None);
        }
        let observed: Vec<Normalized<f32>> = buf.frames.iter().cloned().collect();
        let forecast = forecast_world(self.model, &observed)?;
        Ok(Some(ForecastRecord {
            clip_id: rec.clip_id.clone(),
            frame: rec.frame,
            forecast: forecast
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|p| [f64::from(p[0]), f64::from(p[1])])
                        .collect()
                })
                .collect(),
        }))
    }
}
