//! Dataset assembly, the training and adaptation loops, and evaluation.
//!
//! A training sample pairs one reference motion with one target skeleton
//! (every motion crosses every target graph, so graph-only embodiments
//! without motion data still train as targets). Training runs Adam on
//! the guided diffusion objective with per-step derived seeds, making
//! any step reproducible in isolation and checkpoint resumption exact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::checkpoint::Checkpoint;
use crate::denoiser::{ConditionSet, DenoiserConfig, DropoutState, Params};
use crate::diffusion::{draw_step_and_noise, training_loss, BatchItem, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::GuidanceWeights;
use crate::kinematics::{fk_from_clip, leg_length, scaled_reference_positions};
use crate::motion::MotionClip;
use crate::rng::{derive_seed, rng_for};
use crate::skeleton::{
    augment_correspondence, augment_skeleton, build_joint_map, AugmentPolicy, JointMap,
    SkeletonGraph,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One training pair: a reference motion and a target embodiment.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source_id: String,
    pub target_id: String,
    pub reference: MotionClip,
    pub source_graph: SkeletonGraph,
    pub target_graph: SkeletonGraph,
    pub map: JointMap,
    pub alpha: f64,
}

impl TrainSample {
    pub fn condition(&self) -> ConditionSet<'_> {
        ConditionSet {
            reference: &self.reference,
            source_graph: &self.source_graph,
            target_graph: &self.target_graph,
            map: &self.map,
        }
    }
}

/// Cross every motion with every target graph, optionally augmenting the
/// target skeleton and the correspondence per sample. The scale factor is
/// recomputed after augmentation. Deterministic for a given seed.
pub fn assemble_dataset(
    motions: &[(String, MotionClip)],
    graphs: &[(String, SkeletonGraph)],
    augment: Option<&AugmentPolicy>,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let graph_by_id: BTreeMap<&str, &SkeletonGraph> =
        graphs.iter().map(|(id, g)| (id.as_str(), g)).collect();
    let mut samples = Vec::new();
    let mut ordinal = 0u64;
    for (motion_id, clip) in motions {
        let source_graph = *graph_by_id.get(clip.skeleton_id()).ok_or_else(|| {
            Error::Config(format!(
                "motion '{motion_id}' references unknown skeleton '{}'",
                clip.skeleton_id()
            ))
        })?;
        for (target_id, target_graph) in graphs {
            let sample_seed = derive_seed(seed, ordinal);
            ordinal += 1;
            let target = match augment {
                Some(policy) => augment_skeleton(target_graph, sample_seed, policy)?,
                None => target_graph.clone(),
            };
            let map = {
                let base = build_joint_map(source_graph, &target);
                match augment {
                    Some(policy) if policy.drop_prob > 0.0 => {
                        augment_correspondence(&base, derive_seed(sample_seed, 1), policy.drop_prob)?
                    }
                    _ => base,
                }
            };
            let alpha = leg_length(&target)? / leg_length(source_graph)?;
            samples.push(TrainSample {
                source_id: clip.skeleton_id().to_string(),
                target_id: target_id.clone(),
                reference: clip.clone(),
                source_graph: source_graph.clone(),
                target_graph: target,
                map,
                alpha,
            });
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One update in place; `step` is the 1-based update count.
    pub fn update(
        &self,
        params: &mut Params,
        m: &mut Params,
        v: &mut Params,
        grads: &Params,
        step: usize,
    ) -> Result<()> {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for (name, value) in params.iter_mut() {
            let g = grads.get(name)?;
            let mut m_new = m.get(name)?.clone();
            let mut v_new = v.get(name)?.clone();
            for k in 0..value.len() {
                let gk = g.as_slice()[k];
                let mk = self.beta1 * m_new.as_slice()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v_new.as_slice()[k] + (1.0 - self.beta2) * gk * gk;
                m_new.as_mut_slice()[k] = mk;
                v_new.as_mut_slice()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                value.as_mut_slice()[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            m.set(name, m_new);
            v.set(name, v_new);
        }
        Ok(())
    }
}

fn zeros_like(params: &Params) -> Params {
    let mut out = params.clone();
    for (_, tensor) in out.iter_mut() {
        *tensor = Tensor::zeros(tensor.rows(), tensor.cols());
    }
    out
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Knobs of one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Gradient steps to take (in addition to any steps already in the
    /// starting checkpoint).
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Every how many steps to evaluate the fixed probe batch (0 = off).
    pub eval_every: usize,
    /// Every how many steps to write a checkpoint (0 = off).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only metrics log, one JSON record per line.
    pub metrics_path: Option<PathBuf>,
    /// Apply the configured dropout during training.
    pub use_dropout: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_path: None,
            use_dropout: false,
        }
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub recon_loss: f64,
    pub guidance_loss: f64,
    /// Deterministic probe-batch losses, present at eval cadence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_guidance: Option<f64>,
    /// Per-target-embodiment probe guidance, present at eval cadence.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

/// Initialize a fresh model and train it on the dataset.
pub fn train(
    dataset: &[TrainSample],
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &GuidanceWeights,
    opts: &TrainOptions,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let params = Params::init(cfg, opts.seed)?;
    let checkpoint = Checkpoint::new(cfg.clone(), schedule.clone(), params);
    train_from(checkpoint, dataset, weights, opts)
}

/// Continue training from a checkpoint for `opts.steps` further steps.
///
/// Per-step randomness derives from `(seed, absolute step index)`, so a
/// run interrupted and resumed from a checkpoint takes exactly the steps
/// the uninterrupted run would have taken.
pub fn train_from(
    mut checkpoint: Checkpoint,
    dataset: &[TrainSample],
    weights: &GuidanceWeights,
    opts: &TrainOptions,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    if opts.steps > 0 && dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let cfg = checkpoint.config.clone();
    let schedule = checkpoint.schedule.clone();
    let optimizer = Adam { learning_rate: opts.learning_rate, ..Default::default() };
    let mut m = checkpoint.opt_m.take().unwrap_or_else(|| zeros_like(&checkpoint.params));
    let mut v = checkpoint.opt_v.take().unwrap_or_else(|| zeros_like(&checkpoint.params));
    let mut records = Vec::new();

    let mut log_file = match &opts.metrics_path {
        Some(path) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?,
        ),
        None => None,
    };

    let start = checkpoint.train_step;
    for local in 0..opts.steps {
        let absolute = start + local;
        let mut rng = rng_for(opts.seed, absolute as u64);

        let mut batch = Vec::with_capacity(opts.batch_size);
        let mut sample_ids = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let sample = &dataset[idx];
            let rows = sample.reference.frames_used() * sample.target_graph.joint_count();
            let (step, noise) = draw_step_and_noise(&schedule, rows, &mut rng);
            sample_ids.push(idx);
            batch.push(BatchItem {
                sample_index: idx,
                cond: sample.condition(),
                alpha: sample.alpha,
                step,
                noise,
            });
        }

        let dropout = if opts.use_dropout && cfg.dropout > 0.0 {
            DropoutState::Enabled { prob: cfg.dropout, rng: &mut rng }
        } else {
            DropoutState::Disabled
        };
        let eval = training_loss(
            &checkpoint.params,
            &cfg,
            &schedule,
            weights,
            &batch,
            true,
            dropout,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("step {absolute}, samples {sample_ids:?}: {msg}"))
            }
            other => other,
        })?;
        let grads = eval.grads.expect("gradients were requested");
        optimizer.update(&mut checkpoint.params, &mut m, &mut v, &grads, absolute + 1)?;
        checkpoint.train_step = absolute + 1;

        let mut record = MetricsRecord {
            step: checkpoint.train_step,
            recon_loss: eval.breakdown.recon,
            guidance_loss: eval.breakdown.guidance,
            probe_recon: None,
            probe_guidance: None,
            eval: BTreeMap::new(),
        };

        let at_cadence = |every: usize| {
            every > 0 && (checkpoint.train_step.is_multiple_of(every) || local + 1 == opts.steps)
        };
        if at_cadence(opts.eval_every) {
            let probe =
                probe_losses(&checkpoint.params, &cfg, &schedule, weights, dataset, opts.seed)?;
            record.probe_recon = Some(probe.0);
            record.probe_guidance = Some(probe.1);
            record.eval = probe.2;
        }
        if at_cadence(opts.checkpoint_every) {
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let mut snapshot = checkpoint.clone();
                snapshot.opt_m = Some(m.clone());
                snapshot.opt_v = Some(v.clone());
                snapshot
                    .save(&dir.join(format!("step_{:07}.ckpt.json", checkpoint.train_step)))?;
            }
        }
        if let Some(file) = &mut log_file {
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
        records.push(record);
    }

    checkpoint.opt_m = Some(m);
    checkpoint.opt_v = Some(v);
    Ok((checkpoint, records))
}

/// Deterministic probe: loss components on a fixed batch (one item per
/// sample, fixed noise), plus per-target-embodiment guidance.
pub fn probe_losses(
    params: &Params,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &GuidanceWeights,
    dataset: &[TrainSample],
    seed: u64,
) -> Result<(f64, f64, BTreeMap<String, f64>)> {
    let mut per_embodiment: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut recon_sum = 0.0;
    let mut guidance_sum = 0.0;
    for (idx, sample) in dataset.iter().enumerate() {
        let mut rng = rng_for(seed ^ 0x5eed_0bad, idx as u64);
        let rows = sample.reference.frames_used() * sample.target_graph.joint_count();
        let (step, noise) = draw_step_and_noise(schedule, rows, &mut rng);
        let batch = [BatchItem {
            sample_index: idx,
            cond: sample.condition(),
            alpha: sample.alpha,
            step,
            noise,
        }];
        let eval =
            training_loss(params, cfg, schedule, weights, &batch, false, DropoutState::Disabled)?;
        recon_sum += eval.breakdown.recon;
        guidance_sum += eval.breakdown.guidance;
        let entry = per_embodiment.entry(sample.target_id.clone()).or_insert((0.0, 0));
        entry.0 += eval.breakdown.guidance;
        entry.1 += 1;
    }
    let n = dataset.len().max(1) as f64;
    let eval_map = per_embodiment
        .into_iter()
        .map(|(id, (sum, count))| (id, sum / count as f64))
        .collect();
    Ok((recon_sum / n, guidance_sum / n, eval_map))
}

// ---------------------------------------------------------------------------
// Adaptation
// ---------------------------------------------------------------------------

/// Continue training a checkpoint with additional target embodiments
/// folded into the dataset; the original motions and graphs stay as they
/// were.
pub fn adapt(
    base: Checkpoint,
    motions: &[(String, MotionClip)],
    graphs: &[(String, SkeletonGraph)],
    new_graphs: &[(String, SkeletonGraph)],
    augment: Option<&AugmentPolicy>,
    weights: &GuidanceWeights,
    opts: &TrainOptions,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let mut extended: Vec<(String, SkeletonGraph)> = graphs.to_vec();
    for (id, g) in new_graphs {
        if extended.iter().any(|(e, _)| e == id) {
            return Err(Error::Config(format!("embodiment '{id}' already in the dataset")));
        }
        extended.push((id.clone(), g.clone()));
    }
    let dataset = assemble_dataset(motions, &extended, augment, opts.seed)?;
    train_from(base, &dataset, weights, opts)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Positional mean squared error of the retargeted motion against the
/// alpha-scaled reference at corresponding key joints, in cm^2.
///
/// This is the reporting metric: an unweighted mean per pair-frame,
/// distinct from the weighted training sum.
pub fn evaluate_positional_mse(
    pred: &MotionClip,
    g: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::Domain(
            "positional MSE is undefined for an empty joint map".into(),
        ));
    }
    if pred.frames_used() != reference.frames_used() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, reference has {}",
            pred.frames_used(),
            reference.frames_used()
        )));
    }
    let fk = fk_from_clip(pred, g)?;
    let scaled = scaled_reference_positions(reference, alpha)?;
    let mut acc = 0.0;
    let mut terms = 0usize;
    for (t, frame) in fk.iter().enumerate() {
        for pair in map.pairs() {
            let p = frame[pair.dst];
            let r = scaled[t][pair.src];
            for c in 0..3 {
                let d = p[c] - r[c];
                acc += d * d;
            }
            terms += 1;
        }
    }
    Ok(acc / terms as f64 * 1e4)
}
