//! Motion clips in the padded `T x J x 9` joint-token layout.
//!
//! Per frame, joint row 0 (the floating base) holds
//! `[r0(3), p0(3), v0(3)]`: axis-angle orientation, global position in
//! meters, and linear velocity. Every other joint row holds
//! `[q, p(3), v(3), 0, 0]`: the 1-D joint angle in radians, global joint
//! position, linear velocity, and two zero pad lanes. Padded frames and
//! joints are all-zero and flagged invalid in the masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature lanes per joint token.
pub const LANES: usize = 9;

/// Default padded frame count.
pub const DEFAULT_T_MAX: usize = 60;

/// Default padded joint count.
pub const DEFAULT_J_MAX: usize = 40;

const CLIP_VERSION: &str = "gdream-clip-v1";

/// A padded motion tensor with validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    data: Vec<f64>,
    t_max: usize,
    j_max: usize,
    frame_valid: Vec<bool>,
    joint_valid: Vec<bool>,
    fps: f64,
    skeleton_id: String,
}

impl MotionClip {
    /// All-zero clip with the first `t_used` frames and `j_used` joints valid.
    pub fn new(
        t_max: usize,
        j_max: usize,
        t_used: usize,
        j_used: usize,
        fps: f64,
        skeleton_id: impl Into<String>,
    ) -> Result<Self> {
        if t_used > t_max || j_used > j_max {
            return Err(Error::Shape(format!(
                "used extent {t_used}x{j_used} exceeds padded extent {t_max}x{j_max}"
            )));
        }
        Ok(Self {
            data: vec![0.0; t_max * j_max * LANES],
            t_max,
            j_max,
            frame_valid: (0..t_max).map(|t| t < t_used).collect(),
            joint_valid: (0..j_max).map(|j| j < j_used).collect(),
            fps,
            skeleton_id: skeleton_id.into(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn skeleton_id(&self) -> &str {
        &self.skeleton_id
    }

    pub fn frame_valid(&self) -> &[bool] {
        &self.frame_valid
    }

    pub fn joint_valid(&self) -> &[bool] {
        &self.joint_valid
    }

    /// Number of leading valid frames.
    pub fn frames_used(&self) -> usize {
        self.frame_valid.iter().take_while(|&&v| v).count()
    }

    /// Number of leading valid joints.
    pub fn joints_used(&self) -> usize {
        self.joint_valid.iter().take_while(|&&v| v).count()
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize, lane: usize) -> f64 {
        self.data[(t * self.j_max + j) * LANES + lane]
    }

    #[inline]
    pub fn set(&mut self, t: usize, j: usize, lane: usize, v: f64) {
        self.data[(t * self.j_max + j) * LANES + lane] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Base axis-angle orientation at frame `t`.
    pub fn base_rotation(&self, t: usize) -> [f64; 3] {
        [self.get(t, 0, 0), self.get(t, 0, 1), self.get(t, 0, 2)]
    }

    /// Base position at frame `t`.
    pub fn base_position(&self, t: usize) -> [f64; 3] {
        [self.get(t, 0, 3), self.get(t, 0, 4), self.get(t, 0, 5)]
    }

    /// Angle of non-base joint `j` at frame `t`.
    pub fn joint_angle(&self, t: usize, j: usize) -> f64 {
        debug_assert!(j > 0);
        self.get(t, j, 0)
    }

    /// Stored global position of joint `j` at frame `t` (position lanes).
    pub fn stored_position(&self, t: usize, j: usize) -> [f64; 3] {
        let off = if j == 0 { 3 } else { 1 };
        [self.get(t, j, off), self.get(t, j, off + 1), self.get(t, j, off + 2)]
    }

    /// Stored linear velocity of joint `j` at frame `t` (velocity lanes).
    pub fn stored_velocity(&self, t: usize, j: usize) -> [f64; 3] {
        let off = if j == 0 { 6 } else { 4 };
        [self.get(t, j, off), self.get(t, j, off + 1), self.get(t, j, off + 2)]
    }

    pub fn set_stored_position(&mut self, t: usize, j: usize, p: [f64; 3]) {
        let off = if j == 0 { 3 } else { 1 };
        for c in 0..3 {
            self.set(t, j, off + c, p[c]);
        }
    }

    pub fn set_stored_velocity(&mut self, t: usize, j: usize, v: [f64; 3]) {
        let off = if j == 0 { 6 } else { 4 };
        for c in 0..3 {
            self.set(t, j, off + c, v[c]);
        }
    }

    /// Check the padding contract: invalid positions and pad lanes are zero.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.t_max * self.j_max * LANES {
            return Err(Error::Shape("clip buffer does not match declared shape".into()));
        }
        if self.frame_valid.len() != self.t_max || self.joint_valid.len() != self.j_max {
            return Err(Error::Shape("mask lengths do not match declared shape".into()));
        }
        for t in 0..self.t_max {
            for j in 0..self.j_max {
                let valid = self.frame_valid[t] && self.joint_valid[j];
                for lane in 0..LANES {
                    let v = self.get(t, j, lane);
                    if !valid && v != 0.0 {
                        return Err(Error::Shape(format!(
                            "padded position ({t},{j},{lane}) holds nonzero {v}"
                        )));
                    }
                    if valid && j > 0 && lane >= 7 && v != 0.0 {
                        return Err(Error::Shape(format!(
                            "pad lane {lane} of joint {j} at frame {t} holds nonzero {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ClipFile {
            version: CLIP_VERSION.to_string(),
            t_max: self.t_max,
            j_max: self.j_max,
            fps: self.fps,
            skeleton_id: self.skeleton_id.clone(),
            data: self.data.clone(),
            frame_valid: self.frame_valid.clone(),
            joint_valid: self.joint_valid.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ClipFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("clip file {}: {e}", path.display())))?;
        if file.version != CLIP_VERSION {
            return Err(Error::Format(format!(
                "clip version '{}' does not match expected '{CLIP_VERSION}'",
                file.version
            )));
        }
        if file.data.len() != file.t_max * file.j_max * LANES {
            return Err(Error::Format("clip data length does not match header".into()));
        }
        if file.frame_valid.len() != file.t_max || file.joint_valid.len() != file.j_max {
            return Err(Error::Format("clip mask length does not match header".into()));
        }
        Ok(Self {
            data: file.data,
            t_max: file.t_max,
            j_max: file.j_max,
            frame_valid: file.frame_valid,
            joint_valid: file.joint_valid,
            fps: file.fps,
            skeleton_id: file.skeleton_id,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClipFile {
    version: String,
    t_max: usize,
    j_max: usize,
    fps: f64,
    skeleton_id: String,
    data: Vec<f64>,
    frame_valid: Vec<bool>,
    joint_valid: Vec<bool>,
}

// ---------------------------------------------------------------------------
// Raw motion and preprocessing
// ---------------------------------------------------------------------------

/// One source frame before preprocessing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawFrame {
    pub base_rotation: [f64; 3],
    pub base_position: [f64; 3],
    /// Angles of the non-base joints, in graph order.
    pub joint_angles: Vec<f64>,
    /// Global positions of every joint including the base.
    pub positions: Vec<[f64; 3]>,
}

/// A source motion at its native frame rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMotion {
    pub fps: f64,
    pub skeleton_id: String,
    pub frames: Vec<RawFrame>,
}

/// Frame-difference velocities: `v_k = (p_k - p_{k-1}) * fps`, with
/// `v_0 = v_1`. A single frame yields zero velocity.
pub fn compute_velocities(positions: &[[f64; 3]], fps: f64) -> Vec<[f64; 3]> {
    let n = positions.len();
    let mut out = vec![[0.0; 3]; n];
    for k in 1..n {
        for c in 0..3 {
            out[k][c] = (positions[k][c] - positions[k - 1][c]) * fps;
        }
    }
    if n >= 2 {
        out[0] = out[1];
    }
    out
}

/// Downsample to `target_fps`, cut into non-overlapping `clip_len`-frame
/// windows, rebase each window's starting base position to the origin in
/// the horizontal plane, and recompute velocities.
///
/// Inputs shorter than one window produce an empty list.
pub fn preprocess_clip(
    raw: &RawMotion,
    target_fps: f64,
    clip_len: usize,
    pad_t: usize,
    pad_j: usize,
) -> Result<Vec<MotionClip>> {
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be positive".into()));
    }
    if target_fps <= 0.0 || raw.fps <= 0.0 {
        return Err(Error::Config("frame rates must be positive".into()));
    }
    let ratio = raw.fps / target_fps;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "source rate {} is not an integer multiple of target rate {}",
            raw.fps, target_fps
        )));
    }
    let stride = stride as usize;
    let joint_count = raw
        .frames
        .first()
        .map(|f| f.positions.len())
        .unwrap_or(0);
    for (idx, frame) in raw.frames.iter().enumerate() {
        if frame.positions.len() != joint_count || frame.joint_angles.len() + 1 != joint_count {
            return Err(Error::Shape(format!(
                "frame {idx} has inconsistent joint counts"
            )));
        }
    }
    if clip_len > pad_t || joint_count > pad_j {
        return Err(Error::Shape(format!(
            "clip extent {clip_len}x{joint_count} exceeds padding {pad_t}x{pad_j}"
        )));
    }

    let sampled: Vec<&RawFrame> = raw.frames.iter().step_by(stride).collect();
    let mut clips = Vec::new();
    for window in sampled.chunks_exact(clip_len) {
        let offset = {
            let p0 = window[0].base_position;
            [p0[0], p0[1], 0.0] // keep height
        };
        let mut clip = MotionClip::new(
            pad_t,
            pad_j,
            clip_len,
            joint_count,
            target_fps,
            raw.skeleton_id.clone(),
        )?;
        // Rebased positions per joint, then velocities from the rebased track.
        for j in 0..joint_count {
            let track: Vec<[f64; 3]> = window
                .iter()
                .map(|f| {
                    [
                        f.positions[j][0] - offset[0],
                        f.positions[j][1] - offset[1],
                        f.positions[j][2] - offset[2],
                    ]
                })
                .collect();
            let velocities = compute_velocities(&track, target_fps);
            for (t, frame) in window.iter().enumerate() {
                if j == 0 {
                    for c in 0..3 {
                        clip.set(t, 0, c, frame.base_rotation[c]);
                    }
                } else {
                    clip.set(t, j, 0, frame.joint_angles[j - 1]);
                }
                clip.set_stored_position(t, j, track[t]);
                clip.set_stored_velocity(t, j, velocities[t]);
            }
        }
        clips.push(clip);
    }
    Ok(clips)
}
