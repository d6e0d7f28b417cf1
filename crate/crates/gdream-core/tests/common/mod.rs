//! Shared helpers for the integration suites: an independent brute-force
//! forward-kinematics oracle and random skeleton/pose generators.
//!
//! The oracle never touches the crate's kinematics internals: it builds
//! its own rotation matrices and re-derives every joint's global
//! transform by walking the path from the root, so agreement with the
//! library is a genuine two-route check.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use gdream_core::kinematics::PoseState;
use gdream_core::skeleton::{KeyLabel, Semantic, Side, SkeletonGraph};

/// Row-major 3x3 times column vector.
fn matvec(m: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

fn matmul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] =
                a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    out
}

/// Axis-angle rotation via the explicit cosine/sine expansion
/// (independent of the library's coefficient form).
fn rot(axis_angle: [f64; 3]) -> [f64; 9] {
    let theta = (axis_angle[0] * axis_angle[0]
        + axis_angle[1] * axis_angle[1]
        + axis_angle[2] * axis_angle[2])
        .sqrt();
    if theta < 1e-300 {
        return [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    }
    let (x, y, z) = (
        axis_angle[0] / theta,
        axis_angle[1] / theta,
        axis_angle[2] / theta,
    );
    let c = theta.cos();
    let s = theta.sin();
    let t = 1.0 - c;
    [
        c + x * x * t,
        x * y * t - z * s,
        x * z * t + y * s,
        x * y * t + z * s,
        c + y * y * t,
        y * z * t - x * s,
        x * z * t - y * s,
        y * z * t + x * s,
        c + z * z * t,
    ]
}

/// Global position of every joint, re-deriving each joint's transform
/// from the root along its parent path.
pub fn fk_oracle(pose: &PoseState, g: &SkeletonGraph) -> Vec<[f64; 3]> {
    let joints = g.joint_count();
    let mut out = Vec::with_capacity(joints);
    for j in 0..joints {
        // Path root -> j.
        let mut path = vec![j];
        let mut cur = j;
        while g.parent_index[cur] >= 0 {
            cur = g.parent_index[cur] as usize;
            path.push(cur);
        }
        path.reverse();

        let mut rotation = rot(pose.base_rotation);
        let mut position = pose.base_position;
        for &node in path.iter().skip(1) {
            let step = matvec(&rotation, g.link_vectors[node]);
            position = [position[0] + step[0], position[1] + step[1], position[2] + step[2]];
            let local = rot([
                g.axes[node][0] * pose.joint_angles[node - 1],
                g.axes[node][1] * pose.joint_angles[node - 1],
                g.axes[node][2] * pose.joint_angles[node - 1],
            ]);
            rotation = matmul3(&rotation, &local);
        }
        out.push(position);
    }
    out
}

fn random_unit(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = f64::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 0.1 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Random kinematic tree with up to `max_joints` joints (at least 2) and
/// key joints assigned so leg-length and correspondence machinery works.
pub fn random_tree(rng: &mut ChaCha12Rng, max_joints: usize) -> SkeletonGraph {
    let joints = rng.random_range(2..=max_joints.max(2));
    let mut names = vec!["base".to_string()];
    let mut parents = vec![-1i64];
    let mut axes = vec![[0.0; 3]];
    let mut links = vec![[0.0; 3]];
    for j in 1..joints {
        names.push(format!("j{j}"));
        parents.push(rng.random_range(0..j) as i64);
        axes.push(random_unit(rng));
        links.push([
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ]);
    }
    SkeletonGraph::new(names, parents, axes, links, BTreeMap::new()).expect("random tree is valid")
}

/// All side-qualified labels, used to name synthetic correspondences.
pub fn label_pool() -> Vec<KeyLabel> {
    let mut labels = Vec::new();
    for side in [Side::Center, Side::Left, Side::Right] {
        for semantic in Semantic::ALL {
            labels.push(KeyLabel::new(side, semantic));
        }
    }
    labels
}

/// Random pose for a graph.
pub fn random_pose(rng: &mut ChaCha12Rng, g: &SkeletonGraph) -> PoseState {
    PoseState {
        base_rotation: [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ],
        base_position: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
        joint_angles: (1..g.joint_count())
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect(),
    }
}
