//! Generate a small synthetic world for the CLI walkthrough: two leg
//! skeletons (one with doubled links), a procedural reference motion,
//! and a ready-to-run config file.
//!
//! Usage: cargo run -p gdream-cli --example make_demo_world -- <dir>

use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".to_string());
    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir)?;

    let source = gdream_core::fixtures::leg_chain();
    let target = gdream_core::fixtures::scaled_copy(&source, 2.0);
    source.save(&dir.join("leg.json"))?;
    target.save(&dir.join("leg2x.json"))?;

    let motion = gdream_core::fixtures::swing_motion(&source, 16, 30.0, 42, 16, 8, "leg");
    motion.save(&dir.join("walk.json"))?;

    let config = serde_json::json!({
        "seed": 7,
        "paths": {
            "graphs": { "leg": "leg.json", "leg2x": "leg2x.json" },
            "motions": [ { "id": "walk", "clip": "walk.json" } ],
            "metrics_log": "metrics.jsonl"
        },
        "denoiser": {
            "latent_dim": 32, "heads": 4, "layers": 2, "ffn_dim": 64,
            "dropout": 0.0, "temporal_window": 9, "t_max": 16, "j_max": 8
        },
        "schedule": { "steps": 100, "sigma_min": 0.01, "sigma_max": 10.0 },
        "train": {
            "steps": 3000, "batch_size": 4, "learning_rate": 0.002,
            "eval_every": 100, "checkpoint_every": 0, "use_dropout": false
        },
        "baseline": { "steps": 800, "step_size": 0.001 },
        "retarget": { "motion": "walk", "target": "leg2x", "sample_steps": 30 },
        "evaluate": [
            { "label": "diffusion", "clip": "retargeted.json", "motion": "walk", "target": "leg2x" },
            { "label": "baseline", "clip": "baseline.json", "motion": "walk", "target": "leg2x" }
        ]
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;

    println!("demo world written to {}", dir.display());
    println!("next: gdream train --config {}/config.json --out {}/model.ckpt.json", dir.display(), dir.display());
    Ok(())
}
