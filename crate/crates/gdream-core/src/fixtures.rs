//! Synthetic desk-scale embodiments and procedural reference motions.
//!
//! Stand-ins for real robot assets: small skeletons with annotated key
//! joints and smooth self-consistent motion clips (position and velocity
//! lanes derived from the pose lanes by forward kinematics). Used by the
//! test suites and the CLI walkthrough.

use std::collections::BTreeMap;

use rand::Rng;

use crate::kinematics::{fk_frame, PoseState};
use crate::motion::{compute_velocities, MotionClip};
use crate::rng::rng_from_seed;
use crate::skeleton::{KeyLabel, Semantic, Side, SkeletonGraph};

/// Single leg hanging from the base: hip, knee, ankle, toe. J = 5.
pub fn leg_chain() -> SkeletonGraph {
    let mut key = BTreeMap::new();
    key.insert(KeyLabel::center(Semantic::Hip), 1);
    key.insert(KeyLabel::center(Semantic::Knee), 2);
    key.insert(KeyLabel::center(Semantic::Ankle), 3);
    key.insert(KeyLabel::center(Semantic::Toe), 4);
    SkeletonGraph::new(
        vec!["base".into(), "hip".into(), "knee".into(), "ankle".into(), "toe".into()],
        vec![-1, 0, 1, 2, 3],
        vec![
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ],
        vec![
            [0.0; 3],
            [0.0, 0.08, -0.12],
            [0.0, 0.0, -0.38],
            [0.02, 0.0, -0.40],
            [0.11, 0.0, -0.06],
        ],
        key,
    )
    .expect("fixture is valid")
}

/// Two legs and no arms. J = 9.
pub fn biped() -> SkeletonGraph {
    let mut names = vec!["base".to_string()];
    let mut parents = vec![-1i64];
    let mut axes = vec![[0.0; 3]];
    let mut links = vec![[0.0; 3]];
    let mut key = BTreeMap::new();
    for (side, sign) in [(Side::Left, 1.0), (Side::Right, -1.0)] {
        let hip = names.len();
        for (name, parent, axis, link) in [
            ("hip", 0i64, [1.0, 0.0, 0.0], [0.0, 0.09 * sign, -0.1]),
            ("knee", hip as i64, [0.0, 1.0, 0.0], [0.0, 0.0, -0.35]),
            ("ankle", hip as i64 + 1, [0.0, 1.0, 0.0], [0.0, 0.0, -0.36]),
            ("toe", hip as i64 + 2, [0.0, 1.0, 0.0], [0.1, 0.0, -0.05]),
        ] {
            names.push(format!(
                "{}_{name}",
                if side == Side::Left { "left" } else { "right" }
            ));
            parents.push(parent);
            axes.push(axis);
            links.push(link);
        }
        key.insert(KeyLabel::new(side, Semantic::Hip), hip as i64);
        key.insert(KeyLabel::new(side, Semantic::Knee), hip as i64 + 1);
        key.insert(KeyLabel::new(side, Semantic::Ankle), hip as i64 + 2);
        key.insert(KeyLabel::new(side, Semantic::Toe), hip as i64 + 3);
    }
    SkeletonGraph::new(names, parents, axes, links, key).expect("fixture is valid")
}

/// Two legs and two arms. J = 15.
pub fn humanoid() -> SkeletonGraph {
    let base = biped();
    let mut names = base.joint_names.clone();
    let mut parents = base.parent_index.clone();
    let mut axes = base.axes.clone();
    let mut links = base.link_vectors.clone();
    let mut key = base.key_joints.clone();
    for (side, sign) in [(Side::Left, 1.0), (Side::Right, -1.0)] {
        let shoulder = names.len();
        for (name, parent, axis, link) in [
            ("shoulder", 0i64, [1.0, 0.0, 0.0], [0.0, 0.18 * sign, 0.35]),
            ("elbow", shoulder as i64, [0.0, 1.0, 0.0], [0.0, 0.0, -0.26]),
            ("hand", shoulder as i64 + 1, [0.0, 1.0, 0.0], [0.0, 0.0, -0.24]),
        ] {
            names.push(format!(
                "{}_{name}",
                if side == Side::Left { "left" } else { "right" }
            ));
            parents.push(parent);
            axes.push(axis);
            links.push(link);
        }
        key.insert(KeyLabel::new(side, Semantic::Shoulder), shoulder as i64);
        key.insert(KeyLabel::new(side, Semantic::Elbow), shoulder as i64 + 1);
        key.insert(KeyLabel::new(side, Semantic::Hand), shoulder as i64 + 2);
    }
    SkeletonGraph::new(names, parents, axes, links, key).expect("fixture is valid")
}

/// Copy of a skeleton with every link vector scaled by `factor`.
pub fn scaled_copy(g: &SkeletonGraph, factor: f64) -> SkeletonGraph {
    let mut out = g.clone();
    for link in out.link_vectors.iter_mut().skip(1) {
        for c in link.iter_mut() {
            *c *= factor;
        }
    }
    out
}

/// Smooth procedural motion for a skeleton: sinusoidal joint swings over
/// a slowly drifting base. Position and velocity lanes are filled from
/// forward kinematics of the pose lanes, so the clip is self-consistent.
#[allow(clippy::too_many_arguments)]
pub fn swing_motion(
    g: &SkeletonGraph,
    frames: usize,
    fps: f64,
    seed: u64,
    pad_t: usize,
    pad_j: usize,
    skeleton_id: &str,
) -> MotionClip {
    let j = g.joint_count();
    let mut rng = rng_from_seed(seed);
    let amplitudes: Vec<f64> = (1..j).map(|_| rng.random_range(0.15..0.6)).collect();
    let phases: Vec<f64> = (1..j).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let rates: Vec<f64> = (1..j).map(|_| rng.random_range(0.5..1.5)).collect();
    let forward_speed = rng.random_range(0.2..0.6);
    let yaw_wiggle = rng.random_range(0.0..0.15);

    let mut poses = Vec::with_capacity(frames);
    for t in 0..frames {
        let phase = t as f64 / fps;
        poses.push(PoseState {
            base_rotation: [0.0, 0.0, yaw_wiggle * (1.3 * phase).sin()],
            base_position: [forward_speed * phase, 0.0, 0.85],
            joint_angles: (0..j - 1)
                .map(|k| amplitudes[k] * (std::f64::consts::TAU * rates[k] * phase + phases[k]).sin())
                .collect(),
        });
    }

    let mut clip = MotionClip::new(pad_t, pad_j, frames, j, fps, skeleton_id)
        .expect("fixture dimensions are valid");
    let positions: Vec<Vec<[f64; 3]>> = poses
        .iter()
        .map(|p| fk_frame(p, g).expect("fixture pose is valid"))
        .collect();
    for joint in 0..j {
        let track: Vec<[f64; 3]> = positions.iter().map(|f| f[joint]).collect();
        let velocities = compute_velocities(&track, fps);
        for t in 0..frames {
            if joint == 0 {
                for c in 0..3 {
                    clip.set(t, 0, c, poses[t].base_rotation[c]);
                }
            } else {
                clip.set(t, joint, 0, poses[t].joint_angles[joint - 1]);
            }
            clip.set_stored_position(t, joint, track[t]);
            clip.set_stored_velocity(t, joint, velocities[t]);
        }
    }
    clip
}

/// A constant (frozen) motion holding one posed frame for `frames` frames.
#[allow(clippy::too_many_arguments)]
pub fn constant_motion(
    g: &SkeletonGraph,
    frames: usize,
    fps: f64,
    seed: u64,
    pad_t: usize,
    pad_j: usize,
    skeleton_id: &str,
) -> MotionClip {
    let j = g.joint_count();
    let mut rng = rng_from_seed(seed);
    let pose = PoseState {
        base_rotation: [0.0, 0.0, rng.random_range(-0.4..0.4)],
        base_position: [0.0, 0.0, 0.85],
        joint_angles: (0..j - 1).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let frame_positions = fk_frame(&pose, g).expect("fixture pose is valid");
    let mut clip = MotionClip::new(pad_t, pad_j, frames, j, fps, skeleton_id)
        .expect("fixture dimensions are valid");
    for t in 0..frames {
        for joint in 0..j {
            if joint == 0 {
                for c in 0..3 {
                    clip.set(t, 0, c, pose.base_rotation[c]);
                }
            } else {
                clip.set(t, joint, 0, pose.joint_angles[joint - 1]);
            }
            clip.set_stored_position(t, joint, frame_positions[joint]);
            clip.set_stored_velocity(t, joint, [0.0; 3]);
        }
    }
    clip
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance;
    use crate::skeleton::build_joint_map;

    #[test]
    fn fixtures_validate() {
        leg_chain().validate().unwrap();
        biped().validate().unwrap();
        humanoid().validate().unwrap();
    }

    #[test]
    fn humanoid_and_biped_share_lower_body() {
        let map = build_joint_map(&humanoid(), &biped());
        assert_eq!(map.len(), 8); // 4 per leg, both sides
    }

    #[test]
    fn swing_motion_is_self_consistent() {
        let g = leg_chain();
        let clip = swing_motion(&g, 12, 30.0, 4, 12, 5, "leg");
        clip.validate().unwrap();
        // Stored positions equal FK of pose lanes, so the consistency
        // energy term vanishes.
        let cst = guidance::loss_cst(&clip, &g, 1.0).unwrap();
        assert!(cst < 1e-20, "cst = {cst}");
    }
}
