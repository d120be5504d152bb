//! Raw tracking recordings: parsing, validation, and resampling.
//!
//! A recording is a CSV stream of timestamped poses for the HMD and both
//! controllers (21 scalar features per frame plus the timestamp). Parsing
//! re-normalizes near-unit quaternions; resampling is strided decimation so
//! every output frame is a genuine device sample.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geom::{Quat, Vec3};

/// Canonical recording columns, in order: timestamp + 3 joints x 7.
pub const CANONICAL_COLUMNS: [&str; 22] = [
    "timestamp",
    "hmd_pos_x",
    "hmd_pos_y",
    "hmd_pos_z",
    "hmd_rot_x",
    "hmd_rot_y",
    "hmd_rot_z",
    "hmd_rot_w",
    "left_pos_x",
    "left_pos_y",
    "left_pos_z",
    "left_rot_x",
    "left_rot_y",
    "left_rot_z",
    "left_rot_w",
    "right_pos_x",
    "right_pos_y",
    "right_pos_z",
    "right_rot_x",
    "right_rot_y",
    "right_rot_z",
    "right_rot_w",
];

/// Quaternion norm deviations up to this bound are silently re-normalized on
/// ingest; larger ones are preserved and surface as validation findings.
pub const QUAT_RENORM_TOLERANCE: f64 = 1e-3;

/// Position + orientation of one tracked joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: [0.0, 0.0, 0.0],
        orientation: Quat::IDENTITY,
    };

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && [
                self.orientation.x,
                self.orientation.y,
                self.orientation.z,
                self.orientation.w,
            ]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One tracking frame: timestamp plus HMD and both controller poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawFrame {
    pub timestamp: f64,
    pub hmd: Pose,
    pub controller_left: Pose,
    pub controller_right: Pose,
}

impl RawFrame {
    pub fn poses(&self) -> [&Pose; 3] {
        [&self.hmd, &self.controller_left, &self.controller_right]
    }
}

/// A parsed recording: ordered frames at a nominal frame rate.
#[derive(Clone, Debug)]
pub struct RawSequence {
    pub user_id: String,
    pub session_id: String,
    pub fps: u32,
    pub frames: Vec<RawFrame>,
}

impl RawSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Maps the canonical column names onto a source file's header names.
///
/// Each line is `canonical = source`; canonical names without an entry are
/// looked up under their own name, so a mapping file only has to list the
/// columns that actually differ.
#[derive(Clone, Debug, Default)]
pub struct ColumnMapping {
    map: HashMap<String, String>,
}

impl ColumnMapping {
    pub fn parse(text: &str) -> Result<ColumnMapping> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `canonical = source`, got {line:?}"),
            })?;
            let key = key.trim();
            if !CANONICAL_COLUMNS.contains(&key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown canonical column {key:?}"),
                });
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(ColumnMapping { map })
    }

    fn source_name<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.map.get(canonical).map_or(canonical, String::as_str)
    }
}

/// Parses a canonical recording CSV. Frame rate is inferred from the median
/// timestamp spacing unless `fps_override` is given.
pub fn parse_recording<R: BufRead>(
    input: R,
    user_id: &str,
    session_id: &str,
) -> Result<RawSequence> {
    parse_recording_mapped(input, user_id, session_id, &ColumnMapping::default(), None)
}

pub fn parse_recording_mapped<R: BufRead>(
    input: R,
    user_id: &str,
    session_id: &str,
    mapping: &ColumnMapping,
    fps_override: Option<u32>,
) -> Result<RawSequence> {
    let mut lines = input.lines().enumerate();

    let (header_line_no, header) = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "empty input, expected header row".into(),
                })
            }
        }
    };

    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut indices = [0usize; 22];
    for (slot, canonical) in CANONICAL_COLUMNS.iter().enumerate() {
        let wanted = mapping.source_name(canonical);
        indices[slot] = names
            .iter()
            .position(|n| *n == wanted)
            .ok_or_else(|| Error::Parse {
                line: header_line_no,
                msg: format!("missing column {wanted:?} (for {canonical:?})"),
            })?;
    }
    let width = names.len();

    let mut frames = Vec::new();
    let mut prev_ts = f64::NEG_INFINITY;
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {width} columns, got {}", fields.len()),
            });
        }
        let mut values = [0.0f64; 22];
        for (slot, idx) in indices.iter().enumerate() {
            values[slot] = fields[*idx].parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!(
                    "non-numeric value {:?} in column {:?}",
                    fields[*idx], CANONICAL_COLUMNS[slot]
                ),
            })?;
        }
        let timestamp = values[0];
        if timestamp < prev_ts {
            return Err(Error::Validation(format!(
                "non-monotone timestamp at line {line_no}: {timestamp} after {prev_ts}"
            )));
        }
        prev_ts = timestamp;
        let frame = RawFrame {
            timestamp,
            hmd: pose_from(&values[1..8], line_no)?,
            controller_left: pose_from(&values[8..15], line_no)?,
            controller_right: pose_from(&values[15..22], line_no)?,
        };
        frames.push(frame);
    }

    let fps = match fps_override {
        Some(f) => f,
        None => infer_fps(&frames)?,
    };
    Ok(RawSequence {
        user_id: user_id.to_string(),
        session_id: session_id.to_string(),
        fps,
        frames,
    })
}

fn pose_from(v: &[f64], line_no: usize) -> Result<Pose> {
    let q = Quat::new(v[3], v[4], v[5], v[6]);
    let n = q.norm();
    if !n.is_finite() || n < 1e-9 {
        return Err(Error::Validation(format!(
            "zero-norm quaternion at line {line_no}"
        )));
    }
    // Small float32-rounding deviations are fixed here; large ones stay
    // visible so validate_sequence can report them.
    let orientation = if (n - 1.0).abs() <= QUAT_RENORM_TOLERANCE {
        q.normalized()
    } else {
        q
    };
    Ok(Pose {
        position: [v[0], v[1], v[2]],
        orientation,
    })
}

fn infer_fps(frames: &[RawFrame]) -> Result<u32> {
    if frames.len() < 2 {
        // Single-frame files carry no spacing information; assume the
        // canonical capture rate.
        return Ok(90);
    }
    let mut deltas: Vec<f64> = frames.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    deltas.sort_by(f64::total_cmp);
    let median = deltas[deltas.len() / 2];
    if median <= 0.0 || !median.is_finite() {
        return Err(Error::Validation(
            "cannot infer frame rate from timestamps; supply fps explicitly".into(),
        ));
    }
    let fps = (1.0 / median).round();
    if fps < 1.0 || fps > 100_000.0 {
        return Err(Error::Validation(format!(
            "implausible inferred frame rate {fps}"
        )));
    }
    Ok(fps as u32)
}

/// Writes a sequence back out as canonical CSV. Values are emitted at
/// binary32 precision, which is what tracking exports carry.
pub fn serialize_recording<W: Write>(seq: &RawSequence, out: &mut W) -> Result<()> {
    writeln!(out, "{}", CANONICAL_COLUMNS.join(","))?;
    let mut line = String::with_capacity(256);
    for frame in &seq.frames {
        line.clear();
        push_f32(&mut line, frame.timestamp, true);
        for pose in [&frame.hmd, &frame.controller_left, &frame.controller_right] {
            for v in pose.position {
                push_f32(&mut line, v, false);
            }
            for v in [
                pose.orientation.x,
                pose.orientation.y,
                pose.orientation.z,
                pose.orientation.w,
            ] {
                push_f32(&mut line, v, false);
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn push_f32(line: &mut String, v: f64, first: bool) {
    use std::fmt::Write as _;
    if !first {
        line.push(',');
    }
    let _ = write!(line, "{}", v as f32);
}

/// Decimates a sequence to `target_fps` by keeping every k-th frame.
pub fn resample(seq: &RawSequence, target_fps: u32) -> Result<RawSequence> {
    if seq.is_empty() {
        return Err(Error::Validation("cannot resample an empty sequence".into()));
    }
    if target_fps == 0 || target_fps > seq.fps || seq.fps % target_fps != 0 {
        return Err(Error::UnsupportedRate(format!(
            "target fps {target_fps} must evenly divide source fps {}",
            seq.fps
        )));
    }
    let factor = (seq.fps / target_fps) as usize;
    let frames: Vec<RawFrame> = seq.frames.iter().copied().step_by(factor).collect();
    Ok(RawSequence {
        user_id: seq.user_id.clone(),
        session_id: seq.session_id.clone(),
        fps: target_fps,
        frames,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FindingKind {
    NonFinite,
    TimestampRegression,
    QuaternionNorm,
    FrameGap,
}

#[derive(Clone, Debug)]
pub struct Finding {
    pub frame: usize,
    pub kind: FindingKind,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Report-only scan for non-finite values, timestamp regressions, quaternion
/// norm deviations beyond 1e-3, and frame gaps over 3x the nominal interval.
pub fn validate_sequence(seq: &RawSequence) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nominal = 1.0 / f64::from(seq.fps.max(1));
    for (i, frame) in seq.frames.iter().enumerate() {
        if !frame.timestamp.is_finite() || frame.poses().iter().any(|p| !p.is_finite()) {
            report.findings.push(Finding {
                frame: i,
                kind: FindingKind::NonFinite,
                message: format!("non-finite value at frame {i}"),
            });
        }
        for (joint, pose) in ["hmd", "left", "right"].iter().zip(frame.poses()) {
            let dev = (pose.orientation.norm() - 1.0).abs();
            if dev.is_finite() && dev > QUAT_RENORM_TOLERANCE {
                report.findings.push(Finding {
                    frame: i,
                    kind: FindingKind::QuaternionNorm,
                    message: format!("{joint} quaternion norm off by {dev:.2e} at frame {i}"),
                });
            }
        }
        if i > 0 {
            let dt = frame.timestamp - seq.frames[i - 1].timestamp;
            if dt < 0.0 {
                report.findings.push(Finding {
                    frame: i,
                    kind: FindingKind::TimestampRegression,
                    message: format!("timestamp goes backwards at frame {i} (dt {dt:.6})"),
                });
            } else if dt > 3.0 * nominal {
                report.findings.push(Finding {
                    frame: i,
                    kind: FindingKind::FrameGap,
                    message: format!("gap of {dt:.4}s before frame {i} (nominal {nominal:.4}s)"),
                });
            }
        }
    }
    report
}
