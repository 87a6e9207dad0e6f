//! JSON Lines keypoint clips and behavior-label sidecars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kpfc_core::dataset::{Frame, MotionClip};
use kpfc_core::models::JOINTS;
use kpfc_core::synthgen::LabeledClip;
use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::error::{KpfcError, Result};

pub const CLIPS_FILE: &str = "clips.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

/// One line of a clip file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub clip_id: String,
    pub frame: u64,
    pub kp: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub clip_id: String,
    pub behavior: usize,
}

fn json_error(e: serde_json::Error, line: usize) -> KpfcError {
    let msg = e.to_string();
    match e.classify() {
        Category::Data => KpfcError::Schema { line, msg },
        _ => KpfcError::Parse { line, msg },
    }
}

/// Parse one line; `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<FrameRecord> {
    let rec: FrameRecord = serde_json::from_str(text).map_err(|e| json_error(e, line))?;
    if rec.kp.len() != JOINTS {
        return Err(KpfcError::Schema {
            line,
            msg: format!("expected {JOINTS} keypoints, found {}", rec.kp.len()),
        });
    }
    Ok(rec)
}

impl FrameRecord {
    /// Keypoints narrowed to `f32`; out-of-range values are a schema error.
    pub fn to_frame(&self, line: usize) -> Result<Frame> {
        let mut f = [[0.0f32; 2]; JOINTS];
        for (dst, src) in f.iter_mut().zip(&self.kp) {
            for c in 0..2 {
                dst[c] = src[c] as f32;
                if !dst[c].is_finite() {
                    return Err(KpfcError::Schema {
                        line,
                        msg: format!("coordinate {} does not fit in f32", src[c]),
                    });
                }
            }
        }
        Ok(f)
    }

    pub fn from_frame(clip_id: &str, frame: u64, kp: &Frame) -> Self {
        Self {
            clip_id: clip_id.to_owned(),
            frame,
            kp: kp
                .iter()
                .map(|p| [f64::from(p[0]), f64::from(p[1])])
                .collect(),
        }
    }
}

/// Borrowed form for writing; `f32` keeps the text short and still
/// round-trips exactly.
#[derive(Serialize)]
struct FrameOut<'a> {
    clip_id: &'a str,
    frame: u64,
    kp: &'a Frame,
}

/// Iterate the non-blank lines of a reader with 1-based line numbers.
pub fn records<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, FrameRecord)>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Err(e) => Some(Err(KpfcError::io(path, e))),
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(parse_record(&text, i + 1).map(|r| (i + 1, r))),
        })
}

/// Group frames by clip (ordered by id) and sort each clip by frame index,
/// which must then be contiguous.
pub fn read_clips<R: BufRead>(reader: R, path: &Path) -> Result<Vec<MotionClip>> {
    let mut grouped: BTreeMap<String, Vec<(u64, Frame)>> = BTreeMap::new();
    for item in records(reader, path) {
        let (line, rec) = item?;
        let frame = rec.to_frame(line)?;
        grouped
            .entry(rec.clip_id)
            .or_default()
            .push((rec.frame, frame));
    }
    grouped
        .into_iter()
        .map(|(clip_id, mut frames)| {
            frames.sort_by_key(|f| f.0);
            let first = frames[0].0;
            for (k, f) in frames.iter().enumerate() {
                if f.0 != first + k as u64 {
                    return Err(KpfcError::Gap {
                        clip_id,
                        expected: first + k as u64,
                        found: f.0,
                    });
                }
            }
            Ok(MotionClip::new(
                clip_id,
                frames.into_iter().map(|f| f.1).collect(),
            )?)
        })
        .collect()
}

/// A clip file, or the clip file inside a data directory.
pub fn clip_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CLIPS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_clips(path: &Path) -> Result<Vec<MotionClip>> {
    let path = clip_path(path);
    let file = File::open(&path).map_err(|e| KpfcError::io(&path, e))?;
    read_clips(BufReader::new(file), &path)
}

pub fn write_clips<'a, W: Write>(
    out: W,
    clips: impl IntoIterator<Item = &'a MotionClip>,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for clip in clips {
        for (i, f) in clip.frames.iter().enumerate() {
            let rec = FrameOut {
                clip_id: &clip.clip_id,
                frame: i as u64,
                kp: f,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

pub fn write_labels<W: Write>(out: W, clips: &[LabeledClip]) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for c in clips {
        let rec = LabelRecord {
            clip_id: c.clip.clip_id.clone(),
            behavior: c.behavior,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = File::open(path).map_err(|e| KpfcError::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let text = line.map_err(|e| KpfcError::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        labels.push(serde_json::from_str(&text).map_err(|e| json_error(e, i + 1))?);
    }
    Ok(labels)
}
