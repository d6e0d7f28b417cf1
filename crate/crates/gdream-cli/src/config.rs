//! Run configuration: file paths, model and schedule hyperparameters,
//! guidance weights, augmentation policy, and per-subcommand sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gdream_core::denoiser::DenoiserConfig;
use gdream_core::guidance::GuidanceWeights;
use gdream_core::motion::MotionClip;
use gdream_core::skeleton::{AugmentPolicy, SkeletonGraph};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "GuidanceWeights::default")]
    pub weights: GuidanceWeights,
    /// Link-length and correspondence augmentation; absent = off.
    #[serde(default)]
    pub augmentation: Option<AugmentPolicy>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub retarget: Option<RetargetConfig>,
    #[serde(default)]
    pub adapt: Option<AdaptConfig>,
    #[serde(default)]
    pub evaluate: Vec<EvaluateItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    /// Embodiment id -> skeleton graph JSON file.
    pub graphs: BTreeMap<String, PathBuf>,
    /// Named reference motions.
    #[serde(default)]
    pub motions: Vec<MotionEntry>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub metrics_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionEntry {
    pub id: String,
    pub clip: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, sigma_min: 0.01, sigma_max: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub use_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-4,
            eval_every: 100,
            checkpoint_every: 10_000,
            use_dropout: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { steps: 800, step_size: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetConfig {
    /// Reference motion id from `paths.motions`.
    pub motion: String,
    /// Target embodiment id from `paths.graphs`.
    pub target: String,
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "default_true")]
    pub consistent_fk: bool,
}

fn default_sample_steps() -> usize {
    50
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Additional embodiment id -> graph JSON file.
    pub new_graphs: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateItem {
    /// Column label in reports.
    pub label: String,
    /// Retargeted clip file to score.
    pub clip: PathBuf,
    /// Reference motion id and target embodiment id.
    pub motion: String,
    pub target: String,
}

/// Loaded-and-resolved world: graphs and motions read off disk.
pub struct World {
    pub graphs: Vec<(String, SkeletonGraph)>,
    pub motions: Vec<(String, MotionClip)>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Check that every referenced input exists.
    fn validate(&self, base: &Path) -> Result<()> {
        let check = |p: &Path, what: &str| -> Result<()> {
            let resolved = resolve(base, p);
            if !resolved.exists() {
                bail!("{what} '{}' does not exist", resolved.display());
            }
            Ok(())
        };
        for (id, p) in &self.paths.graphs {
            check(p, &format!("graph '{id}'"))?;
        }
        for m in &self.paths.motions {
            check(&m.clip, &format!("motion '{}'", m.id))?;
        }
        if let Some(adapt) = &self.adapt {
            for (id, p) in &adapt.new_graphs {
                check(p, &format!("adaptation graph '{id}'"))?;
            }
        }
        self.denoiser.validate()?;
        Ok(())
    }

    /// Read all graphs and motions referenced by the config.
    pub fn load_world(&self, base: &Path) -> Result<World> {
        let mut graphs = Vec::new();
        for (id, path) in &self.paths.graphs {
            let g = SkeletonGraph::load(&resolve(base, path))
                .with_context(|| format!("loading graph '{id}'"))?;
            graphs.push((id.clone(), g));
        }
        let mut motions = Vec::new();
        for entry in &self.paths.motions {
            let clip = MotionClip::load(&resolve(base, &entry.clip))
                .with_context(|| format!("loading motion '{}'", entry.id))?;
            motions.push((entry.id.clone(), clip));
        }
        Ok(World { graphs, motions })
    }
}

/// Paths in a config resolve relative to the config file's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
