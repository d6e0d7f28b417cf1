//! Forward kinematics over skeleton graphs and body-size scaling.
//!
//! Rotations use the axis-angle exponential map; positions propagate
//! root-first as `P_j = P_parent + R_parent * link_vector_j` with
//! `R_j = R_parent * rot(axis_j, q_j)`. Only joint origins are tracked.
//! [`diff`] re-expresses the same recursion as tape ops so guidance and
//! training can differentiate through it.

use crate::error::{Error, Result};
use crate::motion::MotionClip;
use crate::skeleton::{KeyLabel, Semantic, Side, SkeletonGraph};
use crate::tensor::{rot_coeffs, skew3};

/// Pose of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    /// Base orientation as an axis-angle vector.
    pub base_rotation: [f64; 3],
    /// Base position in meters.
    pub base_position: [f64; 3],
    /// Angles of the non-base joints, radians, in graph order.
    pub joint_angles: Vec<f64>,
}

impl PoseState {
    pub fn zeros(joint_count: usize) -> Self {
        Self {
            base_rotation: [0.0; 3],
            base_position: [0.0; 3],
            joint_angles: vec![0.0; joint_count.saturating_sub(1)],
        }
    }

    /// Extract the pose fields of frame `t` from a clip.
    pub fn from_clip(clip: &MotionClip, t: usize) -> Self {
        let j_used = clip.joints_used();
        Self {
            base_rotation: clip.base_rotation(t),
            base_position: clip.base_position(t),
            joint_angles: (1..j_used).map(|j| clip.joint_angle(t, j)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base_rotation.iter().all(|v| v.is_finite())
            && self.base_position.iter().all(|v| v.is_finite())
            && self.joint_angles.iter().all(|v| v.is_finite())
    }
}

/// Rotation matrix (row-major 3x3) about a unit axis.
pub fn rot_axis_angle(axis: [f64; 3], angle: f64) -> Result<[f64; 9]> {
    if !(axis.iter().all(|v| v.is_finite()) && angle.is_finite()) {
        return Err(Error::Numeric("non-finite axis-angle input".into()));
    }
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("rotation axis has norm {norm}, expected 1")));
    }
    Ok(rot_from_vector([axis[0] * angle, axis[1] * angle, axis[2] * angle]))
}

/// Rotation matrix of an (unnormalized) axis-angle vector, smooth at zero.
pub fn rot_from_vector(r: [f64; 3]) -> [f64; 9] {
    let s = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b) = rot_coeffs(s);
    let k = skew3(r);
    let mut out = [0.0; 9];
    // I + a*K + b*K^2
    for i in 0..3 {
        for j in 0..3 {
            let mut k2 = 0.0;
            for m in 0..3 {
                k2 += k[i * 3 + m] * k[m * 3 + j];
            }
            out[i * 3 + j] = if i == j { 1.0 } else { 0.0 } + a * k[i * 3 + j] + b * k2;
        }
    }
    out
}

fn mat_mul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a[i * 3 + k] * b[k * 3 + j];
            }
            out[i * 3 + j] = acc;
        }
    }
    out
}

fn mat_apply3(m: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Global joint positions of one posed frame.
pub fn fk_frame(pose: &PoseState, g: &SkeletonGraph) -> Result<Vec<[f64; 3]>> {
    let j = g.joint_count();
    if pose.joint_angles.len() + 1 != j {
        return Err(Error::Shape(format!(
            "pose has {} joint angles for a {}-joint skeleton",
            pose.joint_angles.len(),
            j
        )));
    }
    if !pose.is_finite() {
        return Err(Error::Numeric("non-finite pose".into()));
    }
    let mut rot_world = vec![[0.0; 9]; j];
    let mut positions = vec![[0.0; 3]; j];
    rot_world[0] = rot_from_vector(pose.base_rotation);
    positions[0] = pose.base_position;
    for idx in g.topo_order() {
        let parent = g.parent_index[idx] as usize;
        let local = rot_from_vector([
            g.axes[idx][0] * pose.joint_angles[idx - 1],
            g.axes[idx][1] * pose.joint_angles[idx - 1],
            g.axes[idx][2] * pose.joint_angles[idx - 1],
        ]);
        let offset = mat_apply3(&rot_world[parent], g.link_vectors[idx]);
        positions[idx] = [
            positions[parent][0] + offset[0],
            positions[parent][1] + offset[1],
            positions[parent][2] + offset[2],
        ];
        rot_world[idx] = mat_mul3(&rot_world[parent], &local);
    }
    Ok(positions)
}

/// Global joint positions for a sequence of posed frames: `[T][J]`.
pub fn forward_kinematics(poses: &[PoseState], g: &SkeletonGraph) -> Result<Vec<Vec<[f64; 3]>>> {
    poses.iter().map(|p| fk_frame(p, g)).collect()
}

/// FK positions for every valid frame of a clip, reading the pose lanes.
pub fn fk_from_clip(clip: &MotionClip, g: &SkeletonGraph) -> Result<Vec<Vec<[f64; 3]>>> {
    if clip.joints_used() != g.joint_count() {
        return Err(Error::Shape(format!(
            "clip has {} joints, skeleton has {}",
            clip.joints_used(),
            g.joint_count()
        )));
    }
    (0..clip.frames_used())
        .map(|t| fk_frame(&PoseState::from_clip(clip, t), g))
        .collect()
}

// ---------------------------------------------------------------------------
// Leg length and reference scaling
// ---------------------------------------------------------------------------

/// Sum of link lengths along an explicit hip -> knee -> ankle chain.
pub fn leg_length_chain(g: &SkeletonGraph, hip: usize, knee: usize, ankle: usize) -> Result<f64> {
    let mut total = 0.0;
    for (from, to) in [(knee, hip), (ankle, knee)] {
        let mut cur = from;
        let mut hops = 0;
        while cur != to {
            if cur == 0 || g.parent_index[cur] < 0 {
                return Err(Error::Config(format!(
                    "joint {to} is not an ancestor of joint {from}"
                )));
            }
            let v = g.link_vectors[cur];
            total += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            cur = g.parent_index[cur] as usize;
            hops += 1;
            if hops > g.joint_count() {
                return Err(Error::Structure("cycle while walking leg chain".into()));
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Config("leg chain has zero length".into()));
    }
    Ok(total)
}

/// Body-size metric: link lengths along the first complete
/// hip -> knee -> ankle key-joint chain (left side preferred).
pub fn leg_length(g: &SkeletonGraph) -> Result<f64> {
    for side in [Side::Left, Side::Center, Side::Right] {
        let hip = g.key_joint(KeyLabel::new(side, Semantic::Hip));
        let knee = g.key_joint(KeyLabel::new(side, Semantic::Knee));
        let ankle = g.key_joint(KeyLabel::new(side, Semantic::Ankle));
        if let (Some(h), Some(k), Some(a)) = (hip, knee, ankle) {
            return leg_length_chain(g, h, k, a);
        }
    }
    Err(Error::Config(
        "no side has hip, knee, and ankle key joints for the leg-length metric".into(),
    ))
}

/// Ratio of target to reference leg lengths.
pub fn scale_factor(target: &SkeletonGraph, reference: &SkeletonGraph) -> Result<f64> {
    Ok(leg_length(target)? / leg_length(reference)?)
}

/// Reference joint positions scaled by alpha: `[T][J]` over valid frames.
pub fn scaled_reference_positions(clip: &MotionClip, alpha: f64) -> Result<Vec<Vec<[f64; 3]>>> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("scale factor {alpha} must be positive")));
    }
    Ok((0..clip.frames_used())
        .map(|t| {
            (0..clip.joints_used())
                .map(|j| {
                    let p = clip.stored_position(t, j);
                    [p[0] * alpha, p[1] * alpha, p[2] * alpha]
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Differentiable FK over the tape
// ---------------------------------------------------------------------------

pub mod diff {
    //! Forward kinematics recorded on the autodiff tape, batched over
    //! frames: each joint contributes a `T x 9` world-rotation node and a
    //! `T x 3` position node.

    use std::rc::Rc;

    use super::SkeletonGraph;
    use crate::tensor::tape::{Tape, Var};
    use crate::tensor::{skew3, Tensor};

    /// Per-frame pose variables feeding the FK graph.
    pub struct PoseVars {
        /// `T x 3` base axis-angle rows.
        pub base_rotation: Var,
        /// `T x 3` base position rows.
        pub base_position: Var,
        /// One `T x 1` angle column per non-base joint.
        pub joint_angles: Vec<Var>,
    }

    /// FK outputs per joint.
    pub struct FkVars {
        /// `T x 3` world position per joint.
        pub positions: Vec<Var>,
        /// `T x 9` world rotation per joint.
        pub rotations: Vec<Var>,
    }

    /// Rotation rows `T x 9` for a varying axis-angle vector `r: T x 3`.
    pub fn rotation_rows(tape: &mut Tape, r: Var) -> Var {
        let frames = tape.value(r).rows();
        let r2 = tape.mul(r, r);
        let s = tape.sum_cols(r2);
        let a = tape.rot_coeff_a(s);
        let b = tape.rot_coeff_b(s);
        let k = tape.skew3(r);
        let k2 = tape.batch_matmul3(k, k);
        let ka = tape.mul_col_broadcast(k, a);
        let kb = tape.mul_col_broadcast(k2, b);
        let eye = tape.constant(identity_rows(frames));
        let partial = tape.add(eye, ka);
        tape.add(partial, kb)
    }

    /// Rotation rows `T x 9` about a constant unit axis with per-frame angles.
    pub fn rotation_rows_fixed_axis(tape: &mut Tape, angles: Var, axis: [f64; 3]) -> Var {
        let frames = tape.value(angles).rows();
        let k = skew3(axis);
        let mut k2 = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for m in 0..3 {
                    acc += k[i * 3 + m] * k[m * 3 + j];
                }
                k2[i * 3 + j] = acc;
            }
        }
        let sin = tape.sin(angles);
        let cos = tape.cos(angles);
        let neg_cos = tape.scale(cos, -1.0);
        let one_minus_cos = tape.add_scalar(neg_cos, 1.0);
        let term_a = tape.outer_col(sin, Rc::new(k.to_vec()));
        let term_b = tape.outer_col(one_minus_cos, Rc::new(k2.to_vec()));
        let eye = tape.constant(identity_rows(frames));
        let partial = tape.add(eye, term_a);
        tape.add(partial, term_b)
    }

    /// Record the full FK recursion; differentiable in every pose field.
    pub fn fk_tape(tape: &mut Tape, g: &SkeletonGraph, pose: &PoseVars) -> FkVars {
        let frames = tape.value(pose.base_position).rows();
        assert_eq!(pose.joint_angles.len() + 1, g.joint_count());
        let mut rotations = Vec::with_capacity(g.joint_count());
        let mut positions = Vec::with_capacity(g.joint_count());
        rotations.push(rotation_rows(tape, pose.base_rotation));
        positions.push(pose.base_position);
        for idx in g.topo_order() {
            let parent = g.parent_index[idx] as usize;
            let local = rotation_rows_fixed_axis(tape, pose.joint_angles[idx - 1], g.axes[idx]);
            let world = tape.batch_matmul3(rotations[parent], local);
            let link = tape.constant(tile_row(g.link_vectors[idx], frames));
            let offset = tape.batch_matvec3(rotations[parent], link);
            let position = tape.add(positions[parent], offset);
            rotations.push(world);
            positions.push(position);
        }
        FkVars { positions, rotations }
    }

    fn identity_rows(frames: usize) -> Tensor {
        let row = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        Tensor::from_fn(frames, 9, |_, j| row[j])
    }

    fn tile_row(v: [f64; 3], frames: usize) -> Tensor {
        Tensor::from_fn(frames, 3, |_, j| v[j])
    }
}
