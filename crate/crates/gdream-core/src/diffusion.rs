//! Noise schedule, perturbation, the guided training objective, and the
//! sampler.
//!
//! The forward process is variance-exploding: a clean normalized motion
//! `x` is corrupted as `x + sigma * noise` with `sigma` drawn from a
//! geometric grid. The denoiser predicts the clean motion directly; the
//! training loss is the reconstruction error in normalized space plus
//! `lambda` times the kinematic energy of the de-normalized prediction.
//! Sampling runs deterministic first-order updates down the sigma grid
//! using the score implied by the clean-motion prediction,
//! `(D(x, sigma) - x) / sigma^2`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    clip_grid, denoise_with_encoded_reference, encode_reference, BoundParams, ConditionSet,
    DenoiserConfig, DropoutState, Params,
};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceWeights};
use crate::kinematics::PoseState;
use crate::motion::{MotionClip, LANES};
use crate::rng::rng_from_seed;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Per-lane normalization statistics gathered over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; LANES],
    pub std: [f64; LANES],
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: [0.0; LANES], std: [1.0; LANES] }
    }
}

impl NormStats {
    /// Per-lane mean and standard deviation over the valid region of the
    /// given clips. Lanes with (near-)zero variance keep a unit scale.
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a MotionClip>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; LANES];
        let mut sum_sq = [0.0; LANES];
        for clip in clips {
            for t in 0..clip.frames_used() {
                for j in 0..clip.joints_used() {
                    count += 1;
                    for lane in 0..LANES {
                        let v = clip.get(t, j, lane);
                        sum[lane] += v;
                        sum_sq[lane] += v * v;
                    }
                }
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mut mean = [0.0; LANES];
        let mut std = [1.0; LANES];
        for lane in 0..LANES {
            mean[lane] = sum[lane] / count as f64;
            let var = (sum_sq[lane] / count as f64 - mean[lane] * mean[lane]).max(0.0);
            let s = var.sqrt();
            std[lane] = if s < 1e-6 { 1.0 } else { s };
        }
        Self { mean, std }
    }

    /// Normalize a trimmed grid: `(x - mean) / std` per lane.
    pub fn normalize_grid(&self, grid: &Tensor) -> Tensor {
        Tensor::from_fn(grid.rows(), grid.cols(), |r, lane| {
            (grid.get(r, lane) - self.mean[lane]) / self.std[lane]
        })
    }

    /// Inverse of [`NormStats::normalize_grid`].
    pub fn denormalize_grid(&self, grid: &Tensor) -> Tensor {
        Tensor::from_fn(grid.rows(), grid.cols(), |r, lane| {
            grid.get(r, lane) * self.std[lane] + self.mean[lane]
        })
    }

    /// Tiled `rows x 9` std tensor for de-normalizing on the tape.
    pub fn std_rows(&self, rows: usize) -> Tensor {
        Tensor::from_fn(rows, LANES, |_, lane| self.std[lane])
    }

    /// Tiled `rows x 9` mean tensor for de-normalizing on the tape.
    pub fn mean_rows(&self, rows: usize) -> Tensor {
        Tensor::from_fn(rows, LANES, |_, lane| self.mean[lane])
    }
}

/// Geometric sigma grid, highest first, plus normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigmas: Vec<f64>,
    pub stats: NormStats,
}

/// Build the geometric schedule
/// `sigma_i = sigma_max * (sigma_min / sigma_max)^((i-1)/(N-1))`,
/// indexed so sampling proceeds from high to low noise.
pub fn build_schedule(steps: usize, sigma_min: f64, sigma_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(sigma_min > 0.0 && sigma_max > sigma_min) {
        return Err(Error::Config(format!(
            "need 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
        )));
    }
    let ratio = sigma_min / sigma_max;
    let sigmas = (0..steps)
        .map(|i| sigma_max * ratio.powf(i as f64 / (steps - 1) as f64))
        .collect();
    Ok(NoiseSchedule { steps, sigma_min, sigma_max, sigmas, stats: NormStats::default() })
}

impl NoiseSchedule {
    /// Sigma of the 1-based diffusion step index.
    pub fn sigma(&self, step: usize) -> f64 {
        assert!((1..=self.steps).contains(&step), "step {step} outside schedule");
        self.sigmas[step - 1]
    }

    /// Nearest 1-based step index for a sigma (table lookup).
    pub fn step_for_sigma(&self, sigma: f64) -> usize {
        let mut best = 1;
        let mut best_dist = f64::INFINITY;
        for (i, &s) in self.sigmas.iter().enumerate() {
            let d = (s - sigma).abs();
            if d < best_dist {
                best_dist = d;
                best = i + 1;
            }
        }
        best
    }

    /// Evenly spaced 1-based step indices covering the schedule from
    /// high to low noise; `count = 1` yields just the highest-noise step.
    pub fn sample_steps(&self, count: usize) -> Vec<usize> {
        assert!(count >= 1);
        if count == 1 {
            return vec![1];
        }
        (0..count)
            .map(|k| {
                let idx = (k as f64 * (self.steps - 1) as f64 / (count - 1) as f64).round();
                idx as usize + 1
            })
            .collect()
    }
}

/// Standard normal tensor drawn from a seeded stream.
pub fn noise_like(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Additive Gaussian perturbation `x + sigma * noise` of a trimmed grid.
pub fn perturb_grid(grid: &Tensor, sigma: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let noise = noise_like(grid.rows(), grid.cols(), rng);
    grid.add(&noise.scale(sigma))
}

/// Perturb only the valid region of a padded clip; padded entries stay
/// exactly zero. Deterministic per seed.
pub fn perturb_clip(clip: &MotionClip, sigma: f64, seed: u64) -> MotionClip {
    let mut rng = rng_from_seed(seed);
    let mut out = clip.clone();
    for t in 0..clip.frames_used() {
        for j in 0..clip.joints_used() {
            for lane in 0..LANES {
                let eps: f64 = rng.sample(StandardNormal);
                out.set(t, j, lane, clip.get(t, j, lane) + sigma * eps);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// One element of a training batch.
pub struct BatchItem<'a> {
    /// Index used to share reference encodings within a step.
    pub sample_index: usize,
    pub cond: ConditionSet<'a>,
    pub alpha: f64,
    /// 1-based diffusion step drawn for this item.
    pub step: usize,
    /// Standard normal noise for the valid grid region.
    pub noise: Tensor,
}

/// Reconstruction and guidance components of one training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub guidance: f64,
    pub total: f64,
}

/// Loss evaluation output; gradients are present when requested.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub grads: Option<Params>,
}

/// Evaluate the guided training objective over a batch, optionally with
/// gradients for every parameter.
///
/// Per item: the normalized reference grid is perturbed at the item's
/// sigma, denoised, and scored as `MSE(prediction, reference)` in
/// normalized space plus `lambda` times the kinematic energy of the
/// de-normalized prediction against the alpha-scaled reference. Both
/// components are averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    params: &Params,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &GuidanceWeights,
    batch: &[BatchItem],
    compute_grads: bool,
    mut dropout: DropoutState,
) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, compute_grads);

    let mut encoded_refs: HashMap<usize, crate::tensor::tape::Var> = HashMap::new();
    let mut recon_acc: Option<crate::tensor::tape::Var> = None;
    let mut guidance_acc: Option<crate::tensor::tape::Var> = None;

    for (idx, item) in batch.iter().enumerate() {
        let reference = item.cond.reference;
        let frames = reference.frames_used();
        let ref_joints = reference.joints_used();
        let target_joints = item.cond.target_graph.joint_count();
        if ref_joints != item.cond.source_graph.joint_count() {
            return Err(Error::Shape(format!(
                "batch item {idx}: reference does not match its skeleton"
            )));
        }

        let ref_grid_phys = clip_grid(reference);
        let ref_grid_norm = schedule.stats.normalize_grid(&ref_grid_phys);

        // The denoiser works at the target skeleton's extent. For
        // heterogeneous pairs the reference rows are copied over the
        // shared joint range; extra target rows start from zero.
        let common_joints = ref_joints.min(target_joints);
        let x_rows = frames * target_joints;
        let ref_as_target = Tensor::from_fn(x_rows, LANES, |row, lane| {
            let (t, j) = (row / target_joints, row % target_joints);
            if j < common_joints {
                ref_grid_norm.get(t * ref_joints + j, lane)
            } else {
                0.0
            }
        });

        if item.noise.rows() != x_rows || item.noise.cols() != LANES {
            return Err(Error::Shape(format!(
                "batch item {idx}: noise is {}x{}, expected {x_rows}x{LANES}",
                item.noise.rows(),
                item.noise.cols()
            )));
        }
        let sigma = schedule.sigma(item.step);
        let noisy = ref_as_target.add(&item.noise.scale(sigma));
        noisy.check_finite("noisy training input")?;

        let encoded = match encoded_refs.get(&item.sample_index) {
            Some(&v) => v,
            None => {
                let ref_var = tape.constant(ref_grid_norm.clone());
                let enc = encode_reference(
                    &mut tape,
                    cfg,
                    &bound,
                    ref_var,
                    frames,
                    item.cond.source_graph,
                    &mut dropout,
                )?;
                encoded_refs.insert(item.sample_index, enc);
                enc
            }
        };

        let noisy_var = tape.constant(noisy);
        let pred_norm = denoise_with_encoded_reference(
            &mut tape,
            cfg,
            &bound,
            noisy_var,
            encoded,
            frames,
            &item.cond,
            item.step,
            &mut dropout,
        )?;

        // Reconstruction MSE in normalized space; the target x is the
        // reference motion itself, compared over the joint rows both
        // skeletons share. The retargeting pull comes entirely from the
        // guidance term.
        let mse = if common_joints == target_joints {
            let target = tape.constant(ref_as_target);
            let diff = tape.sub(pred_norm, target);
            let sq = tape.mul(diff, diff);
            let sum = tape.sum(sq);
            tape.scale(sum, 1.0 / (x_rows * LANES) as f64)
        } else {
            let shared: std::rc::Rc<Vec<usize>> = std::rc::Rc::new(
                (0..frames)
                    .flat_map(|t| (0..common_joints).map(move |j| t * target_joints + j))
                    .collect(),
            );
            let n_compared = shared.len() * LANES;
            let pred_shared = tape.gather_rows(pred_norm, shared.clone());
            let target = tape.constant(Tensor::from_fn(shared.len(), LANES, |k, lane| {
                let row = shared[k];
                let (t, j) = (row / target_joints, row % target_joints);
                ref_grid_norm.get(t * ref_joints + j, lane)
            }));
            let diff = tape.sub(pred_shared, target);
            let sq = tape.mul(diff, diff);
            let sum = tape.sum(sq);
            tape.scale(sum, 1.0 / n_compared as f64)
        };
        recon_acc = Some(match recon_acc {
            Some(a) => tape.add(a, mse),
            None => mse,
        });

        // Guidance on the de-normalized prediction, in physical units.
        let std_rows = tape.constant(schedule.stats.std_rows(x_rows));
        let mean_rows = tape.constant(schedule.stats.mean_rows(x_rows));
        let scaled = tape.mul(pred_norm, std_rows);
        let pred_phys = tape.add(scaled, mean_rows);
        let energy = guidance::energy_from_grid(
            &mut tape,
            pred_phys,
            frames,
            item.cond.target_graph,
            reference,
            item.cond.map,
            item.alpha,
            weights,
        )?;
        let lam = tape.scale(energy.total, weights.lambda);
        guidance_acc = Some(match guidance_acc {
            Some(a) => tape.add(a, lam),
            None => lam,
        });
    }

    let inv_b = 1.0 / batch.len() as f64;
    let recon_sum = recon_acc.expect("nonempty batch");
    let guidance_sum = guidance_acc.expect("nonempty batch");
    let recon_mean = tape.scale(recon_sum, inv_b);
    let guidance_mean = tape.scale(guidance_sum, inv_b);
    let total = tape.add(recon_mean, guidance_mean);

    let breakdown = LossBreakdown {
        recon: tape.value(recon_mean).item(),
        guidance: tape.value(guidance_mean).item(),
        total: tape.value(total).item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss over batch of {} (samples {:?})",
            batch.len(),
            batch.iter().map(|b| b.sample_index).collect::<Vec<_>>()
        )));
    }

    let grads = if compute_grads {
        let g = tape.backward(total);
        let mut out = params.clone();
        for (name, tensor) in out.iter_mut() {
            let var = bound.var(name);
            let (rows, cols) = (tensor.rows(), tensor.cols());
            *tensor = g.get_or_zeros(var, rows, cols);
        }
        Some(out)
    } else {
        None
    };
    Ok(LossEval { breakdown, grads })
}

/// Draw a diffusion step uniformly from `[1, N]` and matching noise.
pub fn draw_step_and_noise(
    schedule: &NoiseSchedule,
    rows: usize,
    rng: &mut ChaCha12Rng,
) -> (usize, Tensor) {
    let step = rng.random_range(1..=schedule.steps);
    let noise = noise_like(rows, LANES, rng);
    (step, noise)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Options for [`sample`].
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub seed: u64,
    /// Number of sigma-grid points visited (1 = single-step prediction).
    pub steps: usize,
    /// Rewrite position and velocity lanes from FK of the pose lanes so
    /// the output is self-consistent.
    pub consistent_fk: bool,
    pub target_id: String,
}

/// Generate a retargeted motion for the condition set by deterministic
/// first-order integration down the sigma grid.
pub fn sample(
    cond: &ConditionSet,
    params: &Params,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<MotionClip> {
    let reference = cond.reference;
    let frames = reference.frames_used();
    let joints = cond.target_graph.joint_count();
    if frames == 0 || joints == 0 {
        return Err(Error::Shape("empty condition reference".into()));
    }
    if opts.steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let rows = frames * joints;

    // Encode the reference once; the encoding is input-independent.
    let ref_grid_norm = schedule.stats.normalize_grid(&clip_grid(reference));
    let encoded_ref = {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let ref_var = tape.constant(ref_grid_norm.clone());
        let enc = encode_reference(
            &mut tape,
            cfg,
            &bound,
            ref_var,
            frames,
            cond.source_graph,
            &mut DropoutState::Disabled,
        )?;
        tape.value(enc).clone()
    };

    let forward = |x: &Tensor, step: usize| -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let x_var = tape.constant(x.clone());
        let enc_var = tape.constant(encoded_ref.clone());
        let out = denoise_with_encoded_reference(
            &mut tape,
            cfg,
            &bound,
            x_var,
            enc_var,
            frames,
            cond,
            step,
            &mut DropoutState::Disabled,
        )?;
        Ok(tape.value(out).clone())
    };

    let mut rng = rng_from_seed(opts.seed);
    let plan = schedule.sample_steps(opts.steps);
    let sigma_first = schedule.sigma(plan[0]);
    let mut x = noise_like(rows, LANES, &mut rng).scale(sigma_first);
    let mut prediction = Tensor::zeros(rows, LANES);
    for (k, &step) in plan.iter().enumerate() {
        let sigma = schedule.sigma(step);
        prediction = forward(&x, step)?;
        if !prediction.is_finite() {
            return Err(Error::Sampling {
                step: k,
                msg: format!("non-finite prediction at sigma {sigma}"),
            });
        }
        if k + 1 < plan.len() {
            let sigma_next = schedule.sigma(plan[k + 1]);
            // dx/dsigma = (x - x0_hat) / sigma, integrated with Euler.
            let slope = x.sub(&prediction).scale(1.0 / sigma);
            x = x.add(&slope.scale(sigma_next - sigma));
            if !x.is_finite() {
                return Err(Error::Sampling {
                    step: k,
                    msg: format!("non-finite state after update to sigma {sigma_next}"),
                });
            }
        }
    }

    let phys = schedule.stats.denormalize_grid(&prediction);
    grid_to_clip(&phys, frames, cond, opts)
}

fn grid_to_clip(
    phys: &Tensor,
    frames: usize,
    cond: &ConditionSet,
    opts: &SampleOptions,
) -> Result<MotionClip> {
    let joints = cond.target_graph.joint_count();
    if opts.consistent_fk {
        let poses: Vec<PoseState> = (0..frames)
            .map(|t| PoseState {
                base_rotation: [
                    phys.get(t * joints, 0),
                    phys.get(t * joints, 1),
                    phys.get(t * joints, 2),
                ],
                base_position: [
                    phys.get(t * joints, 3),
                    phys.get(t * joints, 4),
                    phys.get(t * joints, 5),
                ],
                joint_angles: (1..joints).map(|j| phys.get(t * joints + j, 0)).collect(),
            })
            .collect();
        guidance::clip_from_poses(&poses, cond.target_graph, cond.reference, &opts.target_id)
    } else {
        let like = cond.reference;
        let mut clip = MotionClip::new(
            like.t_max(),
            like.j_max().max(joints),
            frames,
            joints,
            like.fps(),
            opts.target_id.clone(),
        )?;
        for t in 0..frames {
            for j in 0..joints {
                let lanes = if j == 0 { LANES } else { 7 };
                for lane in 0..lanes {
                    clip.set(t, j, lane, phys.get(t * joints + j, lane));
                }
            }
        }
        Ok(clip)
    }
}
