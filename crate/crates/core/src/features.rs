//! Body-relative acceleration features and model-input windows.
//!
//! The encoding chain is BR -> BRV -> BRA: poses are re-referenced to the
//! head (position and yaw removed), then differenced twice. Each BR row has
//! 18 features: 7 per controller plus the HMD's residual pitch/roll
//! quaternion.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::geom::{self, Quat};
use crate::motion::{resample, RawSequence};

pub const FEATURE_DIM: usize = 18;

/// Column names of the feature dump CSV, in row order.
pub const FEATURE_COLUMNS: [&str; FEATURE_DIM] = [
    "lc_px", "lc_py", "lc_pz", "lc_rx", "lc_ry", "lc_rz", "lc_rw", "rc_px", "rc_py", "rc_pz",
    "rc_rx", "rc_ry", "rc_rz", "rc_rw", "hmd_rx", "hmd_ry", "hmd_rz", "hmd_rw",
];

/// Starting column of each quaternion block within a feature row.
const QUAT_BLOCKS: [usize; 3] = [3, 10, 14];

/// Forward vectors closer than this to vertical reuse the previous yaw.
const YAW_DEGENERACY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// Body-relative poses.
    Br,
    /// First differences (velocities).
    Brv,
    /// Second differences (accelerations).
    Bra,
}

impl Encoding {
    fn next(self) -> Option<Encoding> {
        match self {
            Encoding::Br => Some(Encoding::Brv),
            Encoding::Brv => Some(Encoding::Bra),
            Encoding::Bra => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Encoding::Br => "BR",
            Encoding::Brv => "BRV",
            Encoding::Bra => "BRA",
        }
    }
}

/// A preprocessed sequence of 18-feature rows.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub user_id: String,
    pub session_id: String,
    pub fps: u32,
    pub encoding: Encoding,
    pub rows: Array2<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Contiguous sub-sequence of `len` rows starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> FeatureSequence {
        FeatureSequence {
            user_id: self.user_id.clone(),
            session_id: self.session_id.clone(),
            fps: self.fps,
            encoding: self.encoding,
            rows: self.rows.slice(s![start..start + len, ..]).to_owned(),
        }
    }
}

/// Fixed-length slice of a feature sequence; the model input unit.
#[derive(Clone, Debug)]
pub struct FeatureWindow {
    pub user_id: String,
    /// Frame index of the window start within its source sequence.
    pub offset: usize,
    pub values: Array2<f64>,
}

/// Re-references all poses to the head: positions and yaw are removed, the
/// HMD keeps only its residual pitch/roll rotation.
pub fn to_body_relative(seq: &RawSequence) -> FeatureSequence {
    let mut rows = Array2::zeros((seq.len(), FEATURE_DIM));
    let mut prev_yaw = 0.0;
    for (i, frame) in seq.frames.iter().enumerate() {
        let yaw = geom::yaw_of(&frame.hmd.orientation, YAW_DEGENERACY_EPS, prev_yaw);
        prev_yaw = yaw;
        let inv_yaw = Quat::about_y(-yaw);
        let mut row = rows.row_mut(i);
        for (block, controller) in [(0, &frame.controller_left), (7, &frame.controller_right)] {
            let rel = inv_yaw.rotate(geom::sub(controller.position, frame.hmd.position));
            let rot = inv_yaw.mul(&controller.orientation);
            row[block] = rel[0];
            row[block + 1] = rel[1];
            row[block + 2] = rel[2];
            row[block + 3] = rot.x;
            row[block + 4] = rot.y;
            row[block + 5] = rot.z;
            row[block + 6] = rot.w;
        }
        let residual = inv_yaw.mul(&frame.hmd.orientation);
        row[14] = residual.x;
        row[15] = residual.y;
        row[16] = residual.z;
        row[17] = residual.w;
    }
    // pin the double-cover: anchor each quaternion block's first frame to a
    // canonical sign, then chain the rest. Without the anchor a global yaw
    // that wraps past +-pi would negate whole quaternion columns.
    anchor_quaternion_signs(&mut rows);
    canonicalize_quaternion_signs(&mut rows);
    FeatureSequence {
        user_id: seq.user_id.clone(),
        session_id: seq.session_id.clone(),
        fps: seq.fps,
        encoding: Encoding::Br,
        rows,
    }
}

fn anchor_quaternion_signs(rows: &mut Array2<f64>) {
    if rows.nrows() == 0 {
        return;
    }
    for base in QUAT_BLOCKS {
        // first non-negligible component in (w, z, y, x) priority decides
        let order = [base + 3, base + 2, base + 1, base];
        let mut sign = 1.0;
        for c in order {
            let v = rows[[0, c]];
            if v.abs() > 1e-9 {
                sign = v.signum();
                break;
            }
        }
        if sign < 0.0 {
            for c in 0..4 {
                rows[[0, base + c]] = -rows[[0, base + c]];
            }
        }
    }
}

/// Componentwise first differences; advances the encoding tag.
///
/// On BR input the quaternion blocks are sign-canonicalized first (each
/// frame's quaternion is flipped so its dot product with the previous frame
/// is non-negative), which removes the double-cover's spurious +-2 jumps.
pub fn differentiate(seq: &FeatureSequence) -> Result<FeatureSequence> {
    let encoding = seq.encoding.next().ok_or_else(|| {
        Error::Validation("cannot differentiate beyond the BRA encoding".into())
    })?;
    let n = seq.len();
    if n < 2 {
        return Err(Error::InsufficientLength { required: 2, actual: n });
    }
    let mut source = seq.rows.clone();
    if seq.encoding == Encoding::Br {
        canonicalize_quaternion_signs(&mut source);
    }
    let mut rows = Array2::zeros((n - 1, seq.rows.ncols()));
    for i in 0..n - 1 {
        let next = source.row(i + 1);
        let cur = source.row(i);
        let mut out = rows.row_mut(i);
        for c in 0..source.ncols() {
            out[c] = next[c] - cur[c];
        }
    }
    Ok(FeatureSequence {
        user_id: seq.user_id.clone(),
        session_id: seq.session_id.clone(),
        fps: seq.fps,
        encoding,
        rows,
    })
}

fn canonicalize_quaternion_signs(rows: &mut Array2<f64>) {
    for base in QUAT_BLOCKS {
        for i in 1..rows.nrows() {
            let dot: f64 = (0..4)
                .map(|c| rows[[i, base + c]] * rows[[i - 1, base + c]])
                .sum();
            if dot < 0.0 {
                for c in 0..4 {
                    rows[[i, base + c]] = -rows[[i, base + c]];
                }
            }
        }
    }
}

/// Full preprocessing: resample, re-reference to the head, difference twice.
pub fn encode_bra(seq: &RawSequence, target_fps: u32) -> Result<FeatureSequence> {
    let resampled = resample(seq, target_fps)?;
    let br = to_body_relative(&resampled);
    let brv = differentiate(&br)?;
    differentiate(&brv)
}

/// Start offsets of all sliding windows: floor((L - W)/stride) + 1 of them.
pub fn window_offsets(len: usize, window_len: usize, stride: usize) -> Vec<usize> {
    if window_len == 0 || stride == 0 || len < window_len {
        return Vec::new();
    }
    (0..=len - window_len).step_by(stride).collect()
}

/// Cuts fixed-length windows from a sequence. Short sequences yield an
/// empty list.
pub fn extract_windows(
    seq: &FeatureSequence,
    window_len: usize,
    stride: usize,
) -> Vec<FeatureWindow> {
    window_offsets(seq.len(), window_len, stride)
        .into_iter()
        .map(|offset| FeatureWindow {
            user_id: seq.user_id.clone(),
            offset,
            values: seq.rows.slice(s![offset..offset + window_len, ..]).to_owned(),
        })
        .collect()
}

/// Writes the debug feature dump: header plus one CSV row per frame.
pub fn write_feature_csv<W: Write>(rows: ArrayView2<f64>, out: &mut W) -> Result<()> {
    writeln!(out, "{}", FEATURE_COLUMNS.join(","))?;
    let mut line = String::with_capacity(256);
    for row in rows.rows() {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            use std::fmt::Write as _;
            let _ = write!(line, "{v}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::motion::{Pose, RawFrame};
    use proptest::prelude::*;

    fn arb_sequence() -> impl Strategy<Value = RawSequence> {
        (1usize..200, prop::sample::select(vec![1u32, 2, 3, 5, 6, 9, 15, 18, 30, 45, 90]))
            .prop_map(|(len, fps)| {
                let frames = (0..len)
                    .map(|i| RawFrame {
                        timestamp: i as f64 / f64::from(fps),
                        hmd: Pose {
                            position: [i as f64, 1.7, -(i as f64)],
                            orientation: Quat::IDENTITY,
                        },
                        controller_left: Pose::IDENTITY,
                        controller_right: Pose::IDENTITY,
                    })
                    .collect();
                RawSequence { user_id: "u".into(), session_id: "1".into(), fps, frames }
            })
    }

    proptest! {
        #[test]
        fn resample_is_idempotent_and_never_fabricates(seq in arb_sequence()) {
            let divisors: Vec<u32> = (1..=seq.fps).filter(|d| seq.fps % d == 0).collect();
            for target in divisors {
                let once = resample(&seq, target).unwrap();
                prop_assert_eq!(once.len(), seq.len().div_ceil((seq.fps / target) as usize));
                // every output frame is one of the input frames
                for f in &once.frames {
                    prop_assert!(seq.frames.iter().any(|g| g == f));
                }
                let twice = resample(&once, target).unwrap();
                prop_assert_eq!(once.len(), twice.len());
                for (a, b) in once.frames.iter().zip(&twice.frames) {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn window_count_formula_holds(len in 0usize..400, w in 1usize..40, s in 1usize..10) {
            let offsets = window_offsets(len, w, s);
            let expected = if len >= w { (len - w) / s + 1 } else { 0 };
            prop_assert_eq!(offsets.len(), expected);
            for (i, o) in offsets.iter().enumerate() {
                prop_assert_eq!(*o, i * s);
                prop_assert!(o + w <= len);
            }
        }
    }
}
