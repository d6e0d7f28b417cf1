//! The kinematic energy guiding the diffusion model, its gradient, and a
//! learning-free direct-optimization baseline.
//!
//! The energy over a predicted motion `X̂` for target skeleton `g` against
//! a scaled reference has four terms:
//!
//! - keypoint tracking: squared distance between FK of `X̂` and the
//!   alpha-scaled reference positions at corresponding key joints,
//! - forward-kinematics consistency: squared distance between FK of the
//!   pose lanes and the stored position lanes,
//! - velocity tracking: squared distance between frame differences of FK
//!   positions and of scaled reference positions at corresponding joints,
//! - regularization: smoothed norms of joint angles and FK frame deltas.
//!
//! The guidance contribution to the training objective is
//! `lambda * (sum of the four terms)`.
//!
//! Everything exists twice: as plain `f64` evaluation (the reporting and
//! oracle path) and as tape ops (the gradient path). Both walk terms in
//! the same order, so their values agree bit-for-bit.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, diff, fk_from_clip, scaled_reference_positions, PoseState};
use crate::motion::{compute_velocities, MotionClip};
use crate::skeleton::{JointMap, SkeletonGraph};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing constant inside the regularizer's norms, keeping them
/// differentiable at zero.
pub const NORM_EPS: f64 = 1e-8;

/// Term weights and the guidance scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub w_similar: f64,
    pub w_cst: f64,
    pub w_vel: f64,
    pub w_norm: f64,
    pub lambda: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { w_similar: 100.0, w_cst: 1.0, w_vel: 900.0, w_norm: 1.0, lambda: 1e4 }
    }
}

/// The four energy terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub similar: f64,
    pub cst: f64,
    pub vel: f64,
    pub norm: f64,
    pub total: f64,
}

fn check_shapes(
    pred: &MotionClip,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
) -> Result<()> {
    if pred.joints_used() != g.joint_count() {
        return Err(Error::Shape(format!(
            "prediction has {} joints, target skeleton has {}",
            pred.joints_used(),
            g.joint_count()
        )));
    }
    if map.target_joint_count() != g.joint_count() {
        return Err(Error::Shape(format!(
            "joint map targets {} joints, skeleton has {}",
            map.target_joint_count(),
            g.joint_count()
        )));
    }
    if map.source_joint_count() != reference.joints_used() {
        return Err(Error::Shape(format!(
            "joint map sources {} joints, reference has {}",
            map.source_joint_count(),
            reference.joints_used()
        )));
    }
    if pred.frames_used() != reference.frames_used() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, reference has {}",
            pred.frames_used(),
            reference.frames_used()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plain evaluation
// ---------------------------------------------------------------------------

/// Keypoint tracking term.
pub fn loss_similar(
    pred: &MotionClip,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    w_similar: f64,
) -> Result<f64> {
    check_shapes(pred, g, reference, map)?;
    if map.is_empty() {
        log::warn!("similarity loss over an empty joint map is identically zero");
        return Ok(0.0);
    }
    let fk = fk_from_clip(pred, g)?;
    let scaled = scaled_reference_positions(reference, alpha)?;
    Ok(similar_sum(&fk, &scaled, map) * w_similar)
}

fn similar_sum(fk: &[Vec<[f64; 3]>], scaled: &[Vec<[f64; 3]>], map: &JointMap) -> f64 {
    let mut acc = 0.0;
    for pair in map.pairs() {
        let mut pair_acc = 0.0;
        for t in 0..fk.len() {
            let p = fk[t][pair.dst];
            let r = scaled[t][pair.src];
            for c in 0..3 {
                let d = p[c] - r[c];
                pair_acc += d * d;
            }
        }
        acc += pair_acc;
    }
    acc
}

/// Forward-kinematics consistency term over every joint.
pub fn loss_cst(pred: &MotionClip, g: &SkeletonGraph, w_cst: f64) -> Result<f64> {
    if pred.joints_used() != g.joint_count() {
        return Err(Error::Shape(format!(
            "prediction has {} joints, skeleton has {}",
            pred.joints_used(),
            g.joint_count()
        )));
    }
    let fk = fk_from_clip(pred, g)?;
    Ok(cst_sum(pred, &fk) * w_cst)
}

fn cst_sum(pred: &MotionClip, fk: &[Vec<[f64; 3]>]) -> f64 {
    let mut acc = 0.0;
    for j in 0..pred.joints_used() {
        let mut joint_acc = 0.0;
        for (t, frame) in fk.iter().enumerate() {
            let stored = pred.stored_position(t, j);
            for c in 0..3 {
                let d = frame[j][c] - stored[c];
                joint_acc += d * d;
            }
        }
        acc += joint_acc;
    }
    acc
}

/// Key-joint velocity tracking term (frame differences, no dt division).
pub fn loss_vel(
    pred: &MotionClip,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    w_vel: f64,
) -> Result<f64> {
    check_shapes(pred, g, reference, map)?;
    if pred.frames_used() < 2 || map.is_empty() {
        return Ok(0.0);
    }
    let fk = fk_from_clip(pred, g)?;
    let scaled = scaled_reference_positions(reference, alpha)?;
    Ok(vel_sum(&fk, &scaled, map) * w_vel)
}

fn vel_sum(fk: &[Vec<[f64; 3]>], scaled: &[Vec<[f64; 3]>], map: &JointMap) -> f64 {
    let mut acc = 0.0;
    for pair in map.pairs() {
        let mut pair_acc = 0.0;
        for t in 1..fk.len() {
            for c in 0..3 {
                let dp = fk[t][pair.dst][c] - fk[t - 1][pair.dst][c];
                let dr = scaled[t][pair.src][c] - scaled[t - 1][pair.src][c];
                let d = dp - dr;
                pair_acc += d * d;
            }
        }
        acc += pair_acc;
    }
    acc
}

/// Regularization: smoothed absolute joint angles plus smoothed norms of
/// FK frame deltas across all joints.
pub fn loss_norm(pred: &MotionClip, g: &SkeletonGraph, w_norm: f64, eps: f64) -> Result<f64> {
    if pred.joints_used() != g.joint_count() {
        return Err(Error::Shape(format!(
            "prediction has {} joints, skeleton has {}",
            pred.joints_used(),
            g.joint_count()
        )));
    }
    let fk = fk_from_clip(pred, g)?;
    Ok(norm_sum(pred, &fk, eps) * w_norm)
}

fn norm_sum(pred: &MotionClip, fk: &[Vec<[f64; 3]>], eps: f64) -> f64 {
    let frames = fk.len();
    let joints = pred.joints_used();
    let mut acc = 0.0;
    for j in 1..joints {
        let mut joint_acc = 0.0;
        for t in 0..frames {
            let q = pred.joint_angle(t, j);
            joint_acc += (q * q + eps * eps).sqrt();
        }
        acc += joint_acc;
    }
    if frames >= 2 {
        for j in 0..joints {
            let mut joint_acc = 0.0;
            for t in 1..frames {
                let mut sq = eps * eps;
                for c in 0..3 {
                    let d = fk[t][j][c] - fk[t - 1][j][c];
                    sq += d * d;
                }
                joint_acc += sq.sqrt();
            }
            acc += joint_acc;
        }
    }
    acc
}

/// All four terms of the kinematic energy, evaluated once.
pub fn f_kin_energy(
    pred: &MotionClip,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    weights: &GuidanceWeights,
) -> Result<EnergyBreakdown> {
    check_shapes(pred, g, reference, map)?;
    let fk = fk_from_clip(pred, g)?;
    let scaled = scaled_reference_positions(reference, alpha)?;

    let similar = similar_sum(&fk, &scaled, map) * weights.w_similar;
    let cst = cst_sum(pred, &fk) * weights.w_cst;
    let vel = if fk.len() >= 2 { vel_sum(&fk, &scaled, map) * weights.w_vel } else { 0.0 };
    let norm = norm_sum(pred, &fk, NORM_EPS) * weights.w_norm;
    let total = similar + cst + vel + norm;
    Ok(EnergyBreakdown { similar, cst, vel, norm, total })
}

// ---------------------------------------------------------------------------
// Tape evaluation
// ---------------------------------------------------------------------------

/// Energy terms as tape nodes.
pub struct EnergyVars {
    pub similar: Var,
    pub cst: Var,
    pub vel: Var,
    pub norm: Var,
    pub total: Var,
}

/// Record the energy of a flattened `(T*J) x 9` prediction grid whose
/// rows follow `t * joint_count + j`. The grid must be fully valid
/// (trimmed of padding) and in physical units.
#[allow(clippy::too_many_arguments)]
pub fn energy_from_grid(
    tape: &mut Tape,
    grid: Var,
    frames: usize,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    weights: &GuidanceWeights,
) -> Result<EnergyVars> {
    let joints = g.joint_count();
    let gv = tape.value(grid);
    if gv.rows() != frames * joints || gv.cols() != crate::motion::LANES {
        return Err(Error::Shape(format!(
            "grid is {}x{}, expected {}x{}",
            gv.rows(),
            gv.cols(),
            frames * joints,
            crate::motion::LANES
        )));
    }
    if reference.frames_used() != frames {
        return Err(Error::Shape(format!(
            "reference has {} frames, grid has {frames}",
            reference.frames_used()
        )));
    }
    if map.target_joint_count() != joints || map.source_joint_count() != reference.joints_used() {
        return Err(Error::Shape("joint map does not match the skeleton pair".into()));
    }

    // Split the grid into pose fields and stored positions.
    let base_rows: Rc<Vec<usize>> = Rc::new((0..frames).map(|t| t * joints).collect());
    let base_all = tape.gather_rows(grid, base_rows);
    let base_rotation = tape.slice_cols(base_all, 0, 3);
    let base_position = tape.slice_cols(base_all, 3, 3);
    let mut joint_angles = Vec::with_capacity(joints.saturating_sub(1));
    let mut stored_positions = vec![base_position];
    for j in 1..joints {
        let rows: Rc<Vec<usize>> = Rc::new((0..frames).map(|t| t * joints + j).collect());
        let all = tape.gather_rows(grid, rows);
        joint_angles.push(tape.slice_cols(all, 0, 1));
        stored_positions.push(tape.slice_cols(all, 1, 3));
    }

    let fk = diff::fk_tape(
        tape,
        g,
        &diff::PoseVars { base_rotation, base_position, joint_angles: joint_angles.clone() },
    );

    let scaled = scaled_reference_positions(reference, alpha)?;
    let similar = similar_tape(tape, &fk.positions, &scaled, map, weights.w_similar);
    let cst = cst_tape(tape, &fk.positions, &stored_positions, weights.w_cst);
    let vel = vel_tape(tape, &fk.positions, &scaled, map, weights.w_vel, frames);
    let norm = norm_tape(tape, &joint_angles, &fk.positions, weights.w_norm, frames);
    let st = tape.add(similar, cst);
    let sv = tape.add(st, vel);
    let total = tape.add(sv, norm);
    Ok(EnergyVars { similar, cst, vel, norm, total })
}

fn scaled_rows(tape: &mut Tape, scaled: &[Vec<[f64; 3]>], joint: usize) -> Var {
    let t = Tensor::from_fn(scaled.len(), 3, |frame, c| scaled[frame][joint][c]);
    tape.constant(t)
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, v),
        None => v,
    })
}

fn similar_tape(
    tape: &mut Tape,
    fk_positions: &[Var],
    scaled: &[Vec<[f64; 3]>],
    map: &JointMap,
    w: f64,
) -> Var {
    let mut acc: Option<Var> = None;
    for pair in map.pairs() {
        let target = scaled_rows(tape, scaled, pair.src);
        let diff = tape.sub(fk_positions[pair.dst], target);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        acc = accumulate(tape, acc, s);
    }
    match acc {
        Some(a) => tape.scale(a, w),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn cst_tape(tape: &mut Tape, fk_positions: &[Var], stored: &[Var], w: f64) -> Var {
    let mut acc: Option<Var> = None;
    for (fk, st) in fk_positions.iter().zip(stored) {
        let diff = tape.sub(*fk, *st);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        acc = accumulate(tape, acc, s);
    }
    let total = acc.expect("at least the base joint exists");
    tape.scale(total, w)
}

fn frame_delta(tape: &mut Tape, x: Var, frames: usize) -> Var {
    let hi: Rc<Vec<usize>> = Rc::new((1..frames).collect());
    let lo: Rc<Vec<usize>> = Rc::new((0..frames - 1).collect());
    let a = tape.gather_rows(x, hi);
    let b = tape.gather_rows(x, lo);
    tape.sub(a, b)
}

fn vel_tape(
    tape: &mut Tape,
    fk_positions: &[Var],
    scaled: &[Vec<[f64; 3]>],
    map: &JointMap,
    w: f64,
    frames: usize,
) -> Var {
    if frames < 2 || map.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut acc: Option<Var> = None;
    for pair in map.pairs() {
        let dp = frame_delta(tape, fk_positions[pair.dst], frames);
        let target = Tensor::from_fn(frames - 1, 3, |t, c| {
            scaled[t + 1][pair.src][c] - scaled[t][pair.src][c]
        });
        let dr = tape.constant(target);
        let diff = tape.sub(dp, dr);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        acc = accumulate(tape, acc, s);
    }
    let total = acc.expect("map is nonempty");
    tape.scale(total, w)
}

fn norm_tape(
    tape: &mut Tape,
    joint_angles: &[Var],
    fk_positions: &[Var],
    w: f64,
    frames: usize,
) -> Var {
    let mut acc: Option<Var> = None;
    for &q in joint_angles {
        let sq = tape.mul(q, q);
        let shifted = tape.add_scalar(sq, NORM_EPS * NORM_EPS);
        let root = tape.sqrt(shifted);
        let s = tape.sum(root);
        acc = accumulate(tape, acc, s);
    }
    if frames >= 2 {
        for &p in fk_positions {
            let d = frame_delta(tape, p, frames);
            let sq = tape.mul(d, d);
            let row = tape.sum_cols(sq);
            let shifted = tape.add_scalar(row, NORM_EPS * NORM_EPS);
            let root = tape.sqrt(shifted);
            let s = tape.sum(root);
            acc = accumulate(tape, acc, s);
        }
    }
    let total = acc.expect("at least one regularized quantity");
    tape.scale(total, w)
}

// ---------------------------------------------------------------------------
// Direct optimization baseline
// ---------------------------------------------------------------------------

/// Gradient descent on pose variables with backtracking line search.
///
/// Initialization: zero pose with the base following the scaled reference
/// base positions. The returned clip has its position and velocity lanes
/// rewritten from forward kinematics, so its consistency term is zero.
/// The optimization is fully deterministic.
#[allow(clippy::too_many_arguments)]
pub fn direct_optimize(
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    weights: &GuidanceWeights,
    steps: usize,
    step_size: f64,
    target_id: &str,
) -> Result<MotionClip> {
    if !(step_size > 0.0) {
        return Err(Error::Config(format!("step size {step_size} must be positive")));
    }
    if map.target_joint_count() != g.joint_count()
        || map.source_joint_count() != reference.joints_used()
    {
        return Err(Error::Shape("joint map does not match the skeleton pair".into()));
    }
    let frames = reference.frames_used();
    let joints = g.joint_count();
    if frames == 0 {
        return Err(Error::Shape("reference has no valid frames".into()));
    }

    let scaled = scaled_reference_positions(reference, alpha)?;

    let mut base_rotation = Tensor::zeros(frames, 3);
    let mut base_position = Tensor::from_fn(frames, 3, |t, c| scaled[t][0][c]);
    let mut angles = vec![Tensor::zeros(frames, 1); joints - 1];

    let eval = |br: &Tensor, bp: &Tensor, qs: &[Tensor]| -> Result<f64> {
        let poses: Vec<PoseState> = (0..frames)
            .map(|t| PoseState {
                base_rotation: [br.get(t, 0), br.get(t, 1), br.get(t, 2)],
                base_position: [bp.get(t, 0), bp.get(t, 1), bp.get(t, 2)],
                joint_angles: qs.iter().map(|q| q.get(t, 0)).collect(),
            })
            .collect();
        let fk = kinematics::forward_kinematics(&poses, g)?;
        let similar = similar_sum(&fk, &scaled, map) * weights.w_similar;
        let vel = if frames >= 2 { vel_sum(&fk, &scaled, map) * weights.w_vel } else { 0.0 };
        let mut norm = 0.0;
        for q in qs {
            for t in 0..frames {
                let v = q.get(t, 0);
                norm += (v * v + NORM_EPS * NORM_EPS).sqrt();
            }
        }
        for j in 0..joints {
            for t in 1..frames {
                let mut sq = NORM_EPS * NORM_EPS;
                for c in 0..3 {
                    let d = fk[t][j][c] - fk[t - 1][j][c];
                    sq += d * d;
                }
                norm += sq.sqrt();
            }
        }
        Ok(similar + vel + norm * weights.w_norm)
    };

    let mut energy = eval(&base_rotation, &base_position, &angles)?;
    let mut eta = step_size;
    let mut consecutive_failures = 0usize;
    // Previous iterate and gradient for the Barzilai-Borwein step estimate.
    let mut prev: Option<(Tensor, Tensor, Vec<Tensor>, Tensor, Tensor, Vec<Tensor>)> = None;

    for _ in 0..steps {
        let mut tape = Tape::new();
        let br = tape.leaf(base_rotation.clone());
        let bp = tape.leaf(base_position.clone());
        let qs: Vec<Var> = angles.iter().map(|q| tape.leaf(q.clone())).collect();
        let fk = diff::fk_tape(
            &mut tape,
            g,
            &diff::PoseVars { base_rotation: br, base_position: bp, joint_angles: qs.clone() },
        );
        let similar = similar_tape(&mut tape, &fk.positions, &scaled, map, weights.w_similar);
        let vel = vel_tape(&mut tape, &fk.positions, &scaled, map, weights.w_vel, frames);
        let norm = norm_tape(&mut tape, &qs, &fk.positions, weights.w_norm, frames);
        let sv = tape.add(similar, vel);
        let total = tape.add(sv, norm);
        let grads = tape.backward(total);

        let g_br = grads.get_or_zeros(br, frames, 3);
        let g_bp = grads.get_or_zeros(bp, frames, 3);
        let g_qs: Vec<Tensor> = qs.iter().map(|&q| grads.get_or_zeros(q, frames, 1)).collect();
        let grad_norm_sq =
            g_br.dot(&g_br) + g_bp.dot(&g_bp) + g_qs.iter().map(|t| t.dot(t)).sum::<f64>();
        if grad_norm_sq == 0.0 {
            break;
        }

        // Barzilai-Borwein step estimate from the previous iterate, used
        // as the line-search starting point. Armijo backtracking below
        // keeps every accepted step a strict descent step.
        if let Some((pbr, pbp, pqs, pg_br, pg_bp, pg_qs)) = &prev {
            let mut sy = 0.0;
            let mut yy = 0.0;
            let mut blocks: Vec<(&Tensor, &Tensor, &Tensor, &Tensor)> = vec![
                (&base_rotation, pbr, &g_br, pg_br),
                (&base_position, pbp, &g_bp, pg_bp),
            ];
            for ((q, pq), (gq, pgq)) in
                angles.iter().zip(pqs).zip(g_qs.iter().zip(pg_qs))
            {
                blocks.push((q, pq, gq, pgq));
            }
            for (x, px, gx, pgx) in blocks {
                for k in 0..x.len() {
                    let s = x.as_slice()[k] - px.as_slice()[k];
                    let y = gx.as_slice()[k] - pgx.as_slice()[k];
                    sy += s * y;
                    yy += y * y;
                }
            }
            if sy > 0.0 && yy > 0.0 {
                eta = (sy / yy).clamp(step_size * 1e-3, step_size * 1e6);
            }
        }
        prev = Some((
            base_rotation.clone(),
            base_position.clone(),
            angles.clone(),
            g_br.clone(),
            g_bp.clone(),
            g_qs.clone(),
        ));

        // Backtracking Armijo line search; only descent steps are taken.
        let mut accepted = false;
        let mut trial_eta = eta;
        for _ in 0..40 {
            let trial_br = base_rotation.add(&g_br.scale(-trial_eta));
            let trial_bp = base_position.add(&g_bp.scale(-trial_eta));
            let trial_qs: Vec<Tensor> = angles
                .iter()
                .zip(&g_qs)
                .map(|(q, gq)| q.add(&gq.scale(-trial_eta)))
                .collect();
            let trial_energy = eval(&trial_br, &trial_bp, &trial_qs)?;
            if trial_energy <= energy - 1e-4 * trial_eta * grad_norm_sq {
                base_rotation = trial_br;
                base_position = trial_bp;
                angles = trial_qs;
                energy = trial_energy;
                eta = trial_eta;
                accepted = true;
                break;
            }
            trial_eta *= 0.5;
        }
        if accepted {
            consecutive_failures = 0;
        } else {
            consecutive_failures += 1;
            eta = trial_eta;
            if consecutive_failures >= 50 {
                return Err(Error::Optimization(format!(
                    "no descent step found for 50 consecutive iterations at energy {energy}"
                )));
            }
        }
    }

    let poses: Vec<PoseState> = (0..frames)
        .map(|t| PoseState {
            base_rotation: [
                base_rotation.get(t, 0),
                base_rotation.get(t, 1),
                base_rotation.get(t, 2),
            ],
            base_position: [
                base_position.get(t, 0),
                base_position.get(t, 1),
                base_position.get(t, 2),
            ],
            joint_angles: angles.iter().map(|q| q.get(t, 0)).collect(),
        })
        .collect();
    clip_from_poses(&poses, g, reference, target_id)
}

/// Build a clip from posed frames, filling position and velocity lanes
/// from forward kinematics so the consistency term is exactly zero.
pub fn clip_from_poses(
    poses: &[PoseState],
    g: &SkeletonGraph,
    like: &MotionClip,
    skeleton_id: &str,
) -> Result<MotionClip> {
    let frames = poses.len();
    let joints = g.joint_count();
    let j_max = like.j_max().max(joints);
    let mut clip = MotionClip::new(like.t_max(), j_max, frames, joints, like.fps(), skeleton_id)?;
    let fk = kinematics::forward_kinematics(poses, g)?;
    for j in 0..joints {
        let track: Vec<[f64; 3]> = fk.iter().map(|f| f[j]).collect();
        let velocities = compute_velocities(&track, like.fps());
        for t in 0..frames {
            if j == 0 {
                for c in 0..3 {
                    clip.set(t, 0, c, poses[t].base_rotation[c]);
                }
            } else {
                clip.set(t, j, 0, poses[t].joint_angles[j - 1]);
            }
            clip.set_stored_position(t, j, track[t]);
            clip.set_stored_velocity(t, j, velocities[t]);
        }
    }
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{leg_chain, scaled_copy, swing_motion};
    use crate::kinematics::scale_factor;
    use crate::rng::rng_from_seed;
    use crate::skeleton::{build_joint_map, JointMap, KeyLabel, MapRecord, Semantic};
    use rand::Rng;

    fn iso_pair() -> (crate::skeleton::SkeletonGraph, crate::skeleton::SkeletonGraph, JointMap) {
        let reference = leg_chain();
        let target = scaled_copy(&reference, 2.0);
        let map = build_joint_map(&reference, &target);
        (reference, target, map)
    }

    /// A prediction that tracks the scaled reference exactly: same joint
    /// angles, base scaled by alpha, lanes rewritten by FK of the target.
    fn perfect_prediction(
        reference: &MotionClip,
        target: &crate::skeleton::SkeletonGraph,
        alpha: f64,
    ) -> MotionClip {
        let poses: Vec<PoseState> = (0..reference.frames_used())
            .map(|t| {
                let mut pose = PoseState::from_clip(reference, t);
                for c in 0..3 {
                    pose.base_position[c] *= alpha;
                }
                pose
            })
            .collect();
        clip_from_poses(&poses, target, reference, "target").unwrap()
    }

    #[test]
    fn similar_is_zero_on_perfect_match() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 8, 30.0, 1, 8, 5, "ref");
        let alpha = scale_factor(&target, &reference_graph).unwrap();
        assert!((alpha - 2.0).abs() < 1e-12);
        let pred = perfect_prediction(&reference, &target, alpha);
        let loss = loss_similar(&pred, &target, &reference, &map, alpha, 100.0).unwrap();
        // The uniformly scaled skeleton posed identically lands exactly on
        // the scaled reference keypoints.
        assert!(loss < 1e-18, "similar = {loss}");
    }

    #[test]
    fn similar_formula_single_offset() {
        let g = leg_chain();
        let reference = swing_motion(&g, 1, 30.0, 2, 1, 5, "ref");
        // Pair only the base joint and offset the prediction base by 0.1 m.
        let records = vec![MapRecord {
            semantic: KeyLabel::center(Semantic::Hip),
            src_index: 0,
            dst_index: 0,
        }];
        let map = JointMap::from_records(&records, 5, 5).unwrap();
        let mut pred = perfect_prediction(&reference, &g, 1.0);
        let p = pred.base_position(0);
        pred.set(0, 0, 3, p[0] + 0.1);
        let loss = loss_similar(&pred, &g, &reference, &map, 1.0, 100.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn similar_zero_under_matched_alpha_scaling() {
        // Doubling alpha against a 2x target skeleton keeps the optimum at
        // zero: construct the prediction by FK of the scaled skeleton.
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 6, 30.0, 3, 6, 5, "ref");
        let pred = perfect_prediction(&reference, &target, 2.0);
        let loss = loss_similar(&pred, &target, &reference, &map, 2.0, 100.0).unwrap();
        assert!(loss < 1e-18);
    }

    #[test]
    fn similar_warns_zero_on_empty_map() {
        let g = leg_chain();
        let reference = swing_motion(&g, 4, 30.0, 4, 4, 5, "ref");
        let pred = perfect_prediction(&reference, &g, 1.0);
        let map = JointMap::empty(5, 5);
        assert_eq!(loss_similar(&pred, &g, &reference, &map, 1.0, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn cst_zero_when_lanes_match_fk() {
        let g = leg_chain();
        let clip = swing_motion(&g, 6, 30.0, 5, 6, 5, "x");
        assert!(loss_cst(&clip, &g, 1.0).unwrap() < 1e-20);
    }

    #[test]
    fn cst_formula_single_offset() {
        let g = leg_chain();
        let mut clip = swing_motion(&g, 1, 30.0, 6, 1, 5, "x");
        let p = clip.stored_position(0, 2);
        clip.set_stored_position(0, 2, [p[0] + 0.2, p[1], p[2]]);
        let loss = loss_cst(&clip, &g, 1.0).unwrap();
        assert!((loss - 0.04).abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn cst_zero_pose_cumulative_links() {
        let g = leg_chain();
        let poses: Vec<PoseState> = (0..3).map(|_| PoseState::zeros(5)).collect();
        let template = MotionClip::new(3, 5, 3, 5, 30.0, "x").unwrap();
        let clip = clip_from_poses(&poses, &g, &template, "x").unwrap();
        assert!(loss_cst(&clip, &g, 1.0).unwrap() < 1e-20);
        // Stored positions really are the cumulative link sums.
        let mut expect = [0.0; 3];
        for j in 1..3 {
            for c in 0..3 {
                expect[c] += g.link_vectors[j][c];
            }
        }
        assert_eq!(clip.stored_position(0, 2), expect);
    }

    #[test]
    fn vel_zero_for_static_motions() {
        let g = leg_chain();
        let reference = crate::fixtures::constant_motion(&g, 5, 30.0, 7, 5, 5, "ref");
        let pred = perfect_prediction(&reference, &g, 1.0);
        let map = build_joint_map(&g, &g);
        assert_eq!(loss_vel(&pred, &g, &reference, &map, 1.0, 900.0).unwrap(), 0.0);
    }

    #[test]
    fn vel_formula_single_delta() {
        let g = leg_chain();
        let reference = crate::fixtures::constant_motion(&g, 2, 30.0, 8, 2, 5, "ref");
        let records = vec![MapRecord {
            semantic: KeyLabel::center(Semantic::Hip),
            src_index: 0,
            dst_index: 0,
        }];
        let map = JointMap::from_records(&records, 5, 5).unwrap();
        let mut pred = perfect_prediction(&reference, &g, 1.0);
        // Move the base 0.01 m on x in frame 1 only: one pair, one frame.
        let p = pred.base_position(1);
        pred.set(1, 0, 3, p[0] + 0.01);
        let loss = loss_vel(&pred, &g, &reference, &map, 1.0, 900.0).unwrap();
        assert!((loss - 0.09).abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn vel_invariant_to_rigid_translation() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 6, 30.0, 9, 6, 5, "ref");
        let base = perfect_prediction(&reference, &target, 2.0);
        // Shift the whole trajectory by a constant offset.
        let poses: Vec<PoseState> = (0..reference.frames_used())
            .map(|t| {
                let mut pose = PoseState::from_clip(&base, t);
                pose.base_position[0] += 0.7;
                pose.base_position[2] += 0.2;
                pose
            })
            .collect();
        let shifted = clip_from_poses(&poses, &target, &reference, "target").unwrap();
        let loss = loss_vel(&shifted, &target, &reference, &map, 2.0, 900.0).unwrap();
        assert!(loss < 1e-18, "loss = {loss}");
    }

    #[test]
    fn vel_single_frame_is_zero() {
        let g = leg_chain();
        let reference = swing_motion(&g, 1, 30.0, 10, 1, 5, "ref");
        let pred = perfect_prediction(&reference, &g, 1.0);
        let map = build_joint_map(&g, &g);
        assert_eq!(loss_vel(&pred, &g, &reference, &map, 1.0, 900.0).unwrap(), 0.0);
    }

    #[test]
    fn norm_zero_case_and_single_angle() {
        let g = leg_chain();
        let poses: Vec<PoseState> = (0..4).map(|_| PoseState::zeros(5)).collect();
        let template = MotionClip::new(4, 5, 4, 5, 30.0, "x").unwrap();
        let clip = clip_from_poses(&poses, &g, &template, "x").unwrap();
        let loss = loss_norm(&clip, &g, 1.0, NORM_EPS).unwrap();
        assert!(loss < 1e-6, "loss = {loss}");

        // One angle of 0.5 rad in a single frame contributes about 0.5.
        let mut poses: Vec<PoseState> = vec![PoseState::zeros(5)];
        poses[0].joint_angles[1] = 0.5;
        let template = MotionClip::new(1, 5, 1, 5, 30.0, "x").unwrap();
        let clip = clip_from_poses(&poses, &g, &template, "x").unwrap();
        let loss = loss_norm(&clip, &g, 1.0, NORM_EPS).unwrap();
        assert!((loss - 0.5).abs() < 1e-6, "loss = {loss}");
    }

    #[test]
    fn norm_fk_delta_part_is_nonlinear_in_angles() {
        let g = leg_chain();
        let template = MotionClip::new(2, 5, 2, 5, 30.0, "x").unwrap();
        let build = |scale: f64| {
            let mut poses: Vec<PoseState> = (0..2).map(|_| PoseState::zeros(5)).collect();
            poses[1].joint_angles = vec![0.4 * scale, -0.3 * scale, 0.6 * scale, 0.2 * scale];
            clip_from_poses(&poses, &g, &template, "x").unwrap()
        };
        let single = loss_norm(&build(1.0), &g, 1.0, NORM_EPS).unwrap();
        let doubled = loss_norm(&build(2.0), &g, 1.0, NORM_EPS).unwrap();
        // Angle terms double exactly; the FK-delta terms do not, so the
        // total is not exactly twice the original.
        assert!((doubled - 2.0 * single).abs() > 1e-6);
    }

    #[test]
    fn breakdown_fields_sum_to_total() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 6, 30.0, 11, 6, 5, "ref");
        let mut pred = perfect_prediction(&reference, &target, 2.0);
        // Perturb so every term is active.
        for t in 0..pred.frames_used() {
            let v = pred.joint_angle(t, 1);
            pred.set(t, 1, 0, v + 0.05);
            let p = pred.stored_position(t, 2);
            pred.set_stored_position(t, 2, [p[0] + 0.02, p[1], p[2]]);
        }
        let weights = GuidanceWeights::default();
        let e = f_kin_energy(&pred, &target, &reference, &map, 2.0, &weights).unwrap();
        assert!(e.similar > 0.0 && e.cst > 0.0 && e.vel > 0.0 && e.norm > 0.0);
        assert_eq!(e.total, e.similar + e.cst + e.vel + e.norm);
    }

    #[test]
    fn perfect_prediction_leaves_only_norm() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 6, 30.0, 12, 6, 5, "ref");
        let pred = perfect_prediction(&reference, &target, 2.0);
        let weights = GuidanceWeights::default();
        let e = f_kin_energy(&pred, &target, &reference, &map, 2.0, &weights).unwrap();
        assert!(e.similar < 1e-15 && e.cst < 1e-15 && e.vel < 1e-15);
        assert!(e.norm > 0.0);
        assert!((e.total - e.norm).abs() < 1e-15);
    }

    #[test]
    fn tape_energy_matches_plain_energy() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 5, 30.0, 13, 5, 5, "ref");
        let mut pred = perfect_prediction(&reference, &target, 2.0);
        let mut rng = rng_from_seed(99);
        for t in 0..pred.frames_used() {
            for j in 0..pred.joints_used() {
                for lane in 0..if j == 0 { 9 } else { 7 } {
                    let v = pred.get(t, j, lane);
                    pred.set(t, j, lane, v + rng.random_range(-0.05..0.05));
                }
            }
        }
        let weights = GuidanceWeights::default();
        let plain = f_kin_energy(&pred, &target, &reference, &map, 2.0, &weights).unwrap();

        let frames = pred.frames_used();
        let joints = pred.joints_used();
        let grid = Tensor::from_fn(frames * joints, crate::motion::LANES, |row, lane| {
            pred.get(row / joints, row % joints, lane)
        });
        let mut tape = Tape::new();
        let grid_var = tape.leaf(grid);
        let energy =
            energy_from_grid(&mut tape, grid_var, frames, &target, &reference, &map, 2.0, &weights)
                .unwrap();
        assert_eq!(tape.value(energy.similar).item(), plain.similar);
        assert_eq!(tape.value(energy.cst).item(), plain.cst);
        assert_eq!(tape.value(energy.vel).item(), plain.vel);
        assert_eq!(tape.value(energy.norm).item(), plain.norm);
        assert!((tape.value(energy.total).item() - plain.total).abs() <= 1e-12 * plain.total.abs());
    }

    #[test]
    fn energy_gradient_matches_finite_differences_small() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 3, 30.0, 14, 3, 5, "ref");
        let mut pred = perfect_prediction(&reference, &target, 2.0);
        let mut rng = rng_from_seed(100);
        for t in 0..pred.frames_used() {
            for j in 0..pred.joints_used() {
                for lane in 0..if j == 0 { 9 } else { 7 } {
                    let v = pred.get(t, j, lane);
                    pred.set(t, j, lane, v + rng.random_range(-0.1..0.1));
                }
            }
        }
        let weights = GuidanceWeights::default();
        let frames = pred.frames_used();
        let joints = pred.joints_used();
        let base_grid = Tensor::from_fn(frames * joints, crate::motion::LANES, |row, lane| {
            pred.get(row / joints, row % joints, lane)
        });

        let mut tape = Tape::new();
        let grid_var = tape.leaf(base_grid.clone());
        let energy = energy_from_grid(
            &mut tape, grid_var, frames, &target, &reference, &map, 2.0, &weights,
        )
        .unwrap();
        let grads = tape.backward(energy.total);
        let analytic = grads.get_or_zeros(grid_var, base_grid.rows(), base_grid.cols());

        // Finite differences against the plain evaluator (independent path).
        let h = 1e-6;
        let eval_plain = |grid: &Tensor| {
            let mut clip = pred.clone();
            for row in 0..grid.rows() {
                for lane in 0..grid.cols() {
                    clip.set(row / joints, row % joints, lane, grid.get(row, lane));
                }
            }
            f_kin_energy(&clip, &target, &reference, &map, 2.0, &weights)
                .unwrap()
                .total
        };
        let mut checked = 0;
        for row in (0..base_grid.rows()).step_by(3) {
            for lane in 0..base_grid.cols() {
                // Pad lanes of non-base joints leave the energy unchanged; their
                // analytic and FD gradients are both zero.
                let mut plus = base_grid.clone();
                plus.set(row, lane, plus.get(row, lane) + h);
                let mut minus = base_grid.clone();
                minus.set(row, lane, minus.get(row, lane) - h);
                let fd = (eval_plain(&plus) - eval_plain(&minus)) / (2.0 * h);
                let an = analytic.get(row, lane);
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "row {row} lane {lane}: fd={fd} analytic={an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn perturbing_unmapped_joint_changes_only_cst_norm() {
        let humanoid = crate::fixtures::humanoid();
        let biped_ref = crate::fixtures::biped();
        let reference = swing_motion(&biped_ref, 5, 30.0, 15, 5, 9, "ref");
        let map = build_joint_map(&biped_ref, &humanoid);
        let alpha = scale_factor(&humanoid, &biped_ref).unwrap();
        let pred = {
            let poses: Vec<PoseState> = (0..reference.frames_used())
                .map(|t| {
                    let mut pose = PoseState::zeros(humanoid.joint_count());
                    let rp = reference.base_position(t);
                    pose.base_position = [rp[0] * alpha, rp[1] * alpha, rp[2] * alpha];
                    pose
                })
                .collect();
            clip_from_poses(&poses, &humanoid, &reference, "humanoid").unwrap()
        };
        let weights = GuidanceWeights::default();
        let before = f_kin_energy(&pred, &humanoid, &reference, &map, alpha, &weights).unwrap();

        // The left elbow is not in a biped->humanoid map.
        let elbow = humanoid
            .key_joint(crate::skeleton::KeyLabel::left(Semantic::Elbow))
            .unwrap();
        assert!(map.pairs().iter().all(|p| p.dst != elbow));
        let mut poses: Vec<PoseState> = (0..reference.frames_used())
            .map(|t| PoseState::from_clip(&pred, t))
            .collect();
        for pose in &mut poses {
            pose.joint_angles[elbow - 1] += 0.4;
        }
        let perturbed = clip_from_poses(&poses, &humanoid, &reference, "humanoid").unwrap();
        let after = f_kin_energy(&perturbed, &humanoid, &reference, &map, alpha, &weights).unwrap();

        assert!((after.similar - before.similar).abs() < 1e-12);
        assert!((after.vel - before.vel).abs() < 1e-12);
        assert!((after.norm - before.norm).abs() > 1e-6); // angle moved
    }

    #[test]
    fn losses_nonnegative_on_random_inputs() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 4, 30.0, 16, 4, 5, "ref");
        let weights = GuidanceWeights::default();
        let mut rng = rng_from_seed(500);
        for _ in 0..200 {
            let mut pred = MotionClip::new(4, 5, 4, 5, 30.0, "t").unwrap();
            for t in 0..4 {
                for j in 0..5 {
                    for lane in 0..if j == 0 { 9 } else { 7 } {
                        pred.set(t, j, lane, rng.random_range(-2.0..2.0));
                    }
                }
            }
            let e = f_kin_energy(&pred, &target, &reference, &map, 2.0, &weights).unwrap();
            assert!(e.similar >= 0.0 && e.cst >= 0.0 && e.vel >= 0.0 && e.norm >= 0.0);
            assert!(e.total >= 0.0);
        }
    }

    #[test]
    fn direct_optimize_converges_on_isomorphic_pair() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 6, 30.0, 17, 6, 5, "ref");
        // The regularizer trades keypoint accuracy for small angles and
        // short FK paths, flooring the tracking error; shrink it so the
        // exactly-feasible optimum is reachable.
        let weights = GuidanceWeights { w_norm: 0.01, ..Default::default() };
        let pred = direct_optimize(&target, &reference, &map, 2.0, &weights, 2000, 1e-3, "tgt")
            .unwrap();
        // Keypoint error per pair-frame under 1e-4 m^2.
        let similar = loss_similar(&pred, &target, &reference, &map, 2.0, 1.0).unwrap();
        let per_term = similar / (map.len() * reference.frames_used()) as f64;
        assert!(per_term < 1e-4, "per keypoint-frame similar = {per_term}");
        // Lanes rewritten from FK.
        assert!(loss_cst(&pred, &target, 1.0).unwrap() < 1e-20);
    }

    #[test]
    fn direct_optimize_empty_map_keeps_zero_angles() {
        // With no correspondences and a static reference base, the energy
        // is the regularizer alone, already minimal at the zero pose.
        let g = leg_chain();
        let reference = crate::fixtures::constant_motion(&g, 4, 30.0, 18, 4, 5, "ref");
        let map = JointMap::empty(5, 5);
        let weights = GuidanceWeights::default();
        let pred =
            direct_optimize(&g, &reference, &map, 1.0, &weights, 50, 1e-4, "tgt").unwrap();
        for t in 0..pred.frames_used() {
            for j in 1..pred.joints_used() {
                assert!(pred.joint_angle(t, j).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn direct_optimize_is_deterministic() {
        let (reference_graph, target, map) = iso_pair();
        let reference = swing_motion(&reference_graph, 4, 30.0, 19, 4, 5, "ref");
        let weights = GuidanceWeights::default();
        let a = direct_optimize(&target, &reference, &map, 2.0, &weights, 60, 1e-4, "t").unwrap();
        let b = direct_optimize(&target, &reference, &map, 2.0, &weights, 60, 1e-4, "t").unwrap();
        assert_eq!(a, b);
    }
}
