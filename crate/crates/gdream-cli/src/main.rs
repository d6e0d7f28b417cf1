//! Command-line surface for graph-conditioned diffusion motion
//! retargeting: URDF parsing, dataset assembly, training, adaptation,
//! sampling, the direct-optimization baseline, evaluation, and reports.
//!
//! Log level comes from the `GDREAM_LOG` environment variable.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use gdream_core::denoiser::checkpoint::Checkpoint;
use gdream_core::diffusion::{build_schedule, sample, NoiseSchedule, NormStats, SampleOptions};
use gdream_core::guidance::direct_optimize;
use gdream_core::motion::MotionClip;
use gdream_core::pipeline::{self, assemble_dataset, evaluate_positional_mse, TrainOptions};
use gdream_core::skeleton::urdf::{parse_urdf, parse_urdf_with_key_joints};
use gdream_core::skeleton::{build_joint_map, JointMap, SkeletonGraph};

use config::{resolve, RunConfig, World};
use report::{EvalRow, Report};

#[derive(Parser)]
#[command(
    name = "gdream",
    about = "Graph-conditioned diffusion motion retargeting across robot skeletons",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a URDF file into a skeleton graph JSON file.
    ParseUrdf {
        /// Input URDF file.
        urdf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar JSON mapping key-joint labels to joint names,
        /// e.g. {"left_hip": "left_hip_pitch"}.
        #[arg(long)]
        key_joints: Option<PathBuf>,
    },
    /// Assemble the training dataset and write its manifest.
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from scratch and write the final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue training a checkpoint with new target embodiments.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a retargeted motion from a trained checkpoint.
    Retarget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Sampling steps down the sigma grid.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Retarget by direct energy minimization (no learning).
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimizer iterations.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score retargeted clips against their references.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for per-item evaluation.
        #[arg(long)]
        device_threads: Option<usize>,
    },
    /// Emit the metric table and trajectory plots into a directory.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        device_threads: Option<usize>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GDREAM_LOG")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ParseUrdf { urdf, out, key_joints } => cmd_parse_urdf(&urdf, &out, key_joints),
        Command::BuildDataset { config, out, seed } => cmd_build_dataset(&config, &out, seed),
        Command::Train { config, out, steps, seed } => cmd_train(&config, &out, steps, seed),
        Command::Adapt { config, checkpoint, out, steps, seed } => {
            cmd_adapt(&config, &checkpoint, &out, steps, seed)
        }
        Command::Retarget { config, checkpoint, out, seed, steps } => {
            cmd_retarget(&config, &checkpoint, &out, seed, steps)
        }
        Command::Baseline { config, out, steps } => cmd_baseline(&config, &out, steps),
        Command::Evaluate { config, out, device_threads } => {
            cmd_evaluate(&config, &out, device_threads)
        }
        Command::Report { config, out, device_threads } => {
            cmd_report(&config, &out, device_threads)
        }
    }
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn cmd_parse_urdf(urdf: &Path, out: &Path, key_joints: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(urdf)
        .with_context(|| format!("reading URDF {}", urdf.display()))?;
    let graph = match key_joints {
        Some(path) => {
            let sidecar = std::fs::read_to_string(&path)
                .with_context(|| format!("reading key-joint sidecar {}", path.display()))?;
            let mapping: BTreeMap<String, String> =
                serde_json::from_str(&sidecar).context("parsing key-joint sidecar")?;
            parse_urdf_with_key_joints(&text, &mapping)?
        }
        None => parse_urdf(&text)?,
    };
    graph.save(out)?;
    log::info!(
        "parsed {} joints from {} into {}",
        graph.joint_count(),
        urdf.display(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ManifestEntry {
    source: String,
    target: String,
    frames: usize,
    alpha: f64,
    correspondences: usize,
}

fn cmd_build_dataset(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let world = cfg.load_world(&base_dir(config_path))?;
    let seed = seed.unwrap_or(cfg.seed);
    let dataset = assemble_dataset(&world.motions, &world.graphs, cfg.augmentation.as_ref(), seed)?;
    let manifest: Vec<ManifestEntry> = dataset
        .iter()
        .map(|s| ManifestEntry {
            source: s.source_id.clone(),
            target: s.target_id.clone(),
            frames: s.reference.frames_used(),
            alpha: s.alpha,
            correspondences: s.map.len(),
        })
        .collect();
    std::fs::write(out, serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote manifest with {} samples to {}", manifest.len(), out.display());
    Ok(())
}

fn schedule_with_stats(cfg: &RunConfig, world: &World) -> Result<NoiseSchedule> {
    let mut schedule =
        build_schedule(cfg.schedule.steps, cfg.schedule.sigma_min, cfg.schedule.sigma_max)?;
    schedule.stats = NormStats::from_clips(world.motions.iter().map(|(_, c)| c));
    Ok(schedule)
}

fn train_options(cfg: &RunConfig, base: &Path, steps: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed,
        eval_every: cfg.train.eval_every,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: cfg.paths.checkpoint_dir.as_ref().map(|p| resolve(base, p)),
        metrics_path: cfg.paths.metrics_log.as_ref().map(|p| resolve(base, p)),
        use_dropout: cfg.train.use_dropout,
    }
}

fn cmd_train(config_path: &Path, out: &Path, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = base_dir(config_path);
    let world = cfg.load_world(&base)?;
    let dataset = assemble_dataset(
        &world.motions,
        &world.graphs,
        cfg.augmentation.as_ref(),
        seed.unwrap_or(cfg.seed),
    )?;
    let schedule = schedule_with_stats(&cfg, &world)?;
    let opts = train_options(&cfg, &base, steps.unwrap_or(cfg.train.steps), seed.unwrap_or(cfg.seed));
    let (checkpoint, records) =
        pipeline::train(&dataset, &cfg.denoiser, &schedule, &cfg.weights, &opts)?;
    checkpoint.save(out)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} steps (recon {:.4e}, guidance {:.4e}); checkpoint at {}",
            checkpoint.train_step,
            last.recon_loss,
            last.guidance_loss,
            out.display()
        );
    } else {
        println!("initialized checkpoint at {}", out.display());
    }
    Ok(())
}

fn cmd_adapt(
    config_path: &Path,
    checkpoint_path: &Path,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = base_dir(config_path);
    let world = cfg.load_world(&base)?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    if checkpoint.config != cfg.denoiser {
        bail!(
            "checkpoint architecture does not match the config (checkpoint {:?})",
            checkpoint.config
        );
    }
    let adapt_cfg = cfg
        .adapt
        .as_ref()
        .ok_or_else(|| anyhow!("config has no 'adapt' section"))?;
    let mut new_graphs = Vec::new();
    for (id, path) in &adapt_cfg.new_graphs {
        let g = SkeletonGraph::load(&resolve(&base, path))
            .with_context(|| format!("loading adaptation graph '{id}'"))?;
        new_graphs.push((id.clone(), g));
    }
    let opts = train_options(&cfg, &base, steps.unwrap_or(cfg.train.steps), seed.unwrap_or(cfg.seed));
    let (adapted, _) = pipeline::adapt(
        checkpoint,
        &world.motions,
        &world.graphs,
        &new_graphs,
        cfg.augmentation.as_ref(),
        &cfg.weights,
        &opts,
    )?;
    adapted.save(out)?;
    println!(
        "adapted with {} new embodiment(s) to step {}; checkpoint at {}",
        new_graphs.len(),
        adapted.train_step,
        out.display()
    );
    Ok(())
}

/// Resolve the (reference motion, source graph, target graph, map, alpha)
/// tuple named by the retarget section.
fn retarget_pair<'w>(
    cfg: &RunConfig,
    world: &'w World,
) -> Result<(&'w MotionClip, &'w SkeletonGraph, &'w SkeletonGraph, JointMap, f64, String)> {
    let rc = cfg
        .retarget
        .as_ref()
        .ok_or_else(|| anyhow!("config has no 'retarget' section"))?;
    let (_, reference) = world
        .motions
        .iter()
        .find(|(id, _)| *id == rc.motion)
        .ok_or_else(|| anyhow!("unknown motion '{}'", rc.motion))?;
    let (_, source) = world
        .graphs
        .iter()
        .find(|(id, _)| *id == reference.skeleton_id())
        .ok_or_else(|| anyhow!("motion skeleton '{}' not in graphs", reference.skeleton_id()))?;
    let (_, target) = world
        .graphs
        .iter()
        .find(|(id, _)| *id == rc.target)
        .ok_or_else(|| anyhow!("unknown target embodiment '{}'", rc.target))?;
    let map = build_joint_map(source, target);
    let alpha = gdream_core::kinematics::scale_factor(target, source)?;
    Ok((reference, source, target, map, alpha, rc.target.clone()))
}

fn cmd_retarget(
    config_path: &Path,
    checkpoint_path: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let world = cfg.load_world(&base_dir(config_path))?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let (reference, source, target, map, _alpha, target_id) = retarget_pair(&cfg, &world)?;
    let rc = cfg.retarget.as_ref().expect("validated above");
    let cond = gdream_core::denoiser::ConditionSet {
        reference,
        source_graph: source,
        target_graph: target,
        map: &map,
    };
    let opts = SampleOptions {
        seed: seed.unwrap_or(cfg.seed),
        steps: steps.unwrap_or(rc.sample_steps),
        consistent_fk: rc.consistent_fk,
        target_id,
    };
    let clip = sample(&cond, &checkpoint.params, &checkpoint.config, &checkpoint.schedule, &opts)?;
    clip.save(out)?;
    println!("retargeted '{}' onto '{}' -> {}", rc.motion, rc.target, out.display());
    Ok(())
}

fn cmd_baseline(config_path: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let world = cfg.load_world(&base_dir(config_path))?;
    let (reference, _, target, map, alpha, target_id) = retarget_pair(&cfg, &world)?;
    let clip = direct_optimize(
        target,
        reference,
        &map,
        alpha,
        &cfg.weights,
        steps.unwrap_or(cfg.baseline.steps),
        cfg.baseline.step_size,
        &target_id,
    )?;
    clip.save(out)?;
    println!(
        "direct-optimized baseline for '{}' -> {}",
        cfg.retarget.as_ref().expect("validated").target,
        out.display()
    );
    Ok(())
}

fn eval_rows(cfg: &RunConfig, base: &Path, world: &World, threads: Option<usize>) -> Result<Vec<EvalRow>> {
    if cfg.evaluate.is_empty() {
        bail!("config has no 'evaluate' items");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    let rows: Result<Vec<EvalRow>> = pool.install(|| {
        cfg.evaluate
            .par_iter()
            .map(|item| {
                let pred = MotionClip::load(&resolve(base, &item.clip))
                    .with_context(|| format!("loading clip for '{}'", item.label))?;
                let (_, reference) = world
                    .motions
                    .iter()
                    .find(|(id, _)| *id == item.motion)
                    .ok_or_else(|| anyhow!("unknown motion '{}'", item.motion))?;
                let (_, source) = world
                    .graphs
                    .iter()
                    .find(|(id, _)| *id == reference.skeleton_id())
                    .ok_or_else(|| {
                        anyhow!("motion skeleton '{}' not in graphs", reference.skeleton_id())
                    })?;
                let (_, target) = world
                    .graphs
                    .iter()
                    .find(|(id, _)| *id == item.target)
                    .ok_or_else(|| anyhow!("unknown target '{}'", item.target))?;
                let map = build_joint_map(source, target);
                let alpha = gdream_core::kinematics::scale_factor(target, source)?;
                let mse = evaluate_positional_mse(&pred, target, reference, &map, alpha)?;
                Ok(EvalRow {
                    label: item.label.clone(),
                    target: item.target.clone(),
                    motion: item.motion.clone(),
                    positional_mse_cm2: mse,
                })
            })
            .collect()
    });
    rows
}

fn cmd_evaluate(config_path: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = base_dir(config_path);
    let world = cfg.load_world(&base)?;
    let rows = eval_rows(&cfg, &base, &world, threads)?;
    let report = Report::from_rows(rows);
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_report(config_path: &Path, out_dir: &Path, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = base_dir(config_path);
    let world = cfg.load_world(&base)?;
    let rows = eval_rows(&cfg, &base, &world, threads)?;
    let report = Report::from_rows(rows);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out_dir.join("report.txt"), report.render_text())?;

    for item in &cfg.evaluate {
        let pred = MotionClip::load(&resolve(&base, &item.clip))?;
        let (_, reference) = world
            .motions
            .iter()
            .find(|(id, _)| *id == item.motion)
            .ok_or_else(|| anyhow!("unknown motion '{}'", item.motion))?;
        let (_, source) = world
            .graphs
            .iter()
            .find(|(id, _)| *id == reference.skeleton_id())
            .ok_or_else(|| anyhow!("motion skeleton missing"))?;
        let (_, target) = world
            .graphs
            .iter()
            .find(|(id, _)| *id == item.target)
            .ok_or_else(|| anyhow!("unknown target '{}'", item.target))?;
        let map = build_joint_map(source, target);
        let alpha = gdream_core::kinematics::scale_factor(target, source)?;
        let plot_path = out_dir.join(format!("trajectory_{}.svg", item.label));
        report::plot_trajectories(
            &plot_path,
            &pred,
            target,
            reference,
            &map,
            alpha,
            &format!("{} on {}", item.motion, item.target),
        )?;
    }
    println!("report written to {}", out_dir.display());
    print!("{}", report.render_text());
    Ok(())
}
