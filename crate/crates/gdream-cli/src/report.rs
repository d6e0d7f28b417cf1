//! Evaluation reports: the per-embodiment metric table and static
//! trajectory overlay plots (scaled reference vs retargeted key joints).

use std::path::Path;

use anyhow::{Context, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use gdream_core::kinematics::{fk_from_clip, scaled_reference_positions};
use gdream_core::motion::MotionClip;
use gdream_core::skeleton::{JointMap, SkeletonGraph};

/// One scored retargeting output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub target: String,
    pub motion: String,
    pub positional_mse_cm2: f64,
}

/// Full report payload: rows plus a per-embodiment table keyed as
/// `table[target][label] = MSE`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<EvalRow>,
    pub table: std::collections::BTreeMap<String, std::collections::BTreeMap<String, f64>>,
}

impl Report {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut table: std::collections::BTreeMap<
            String,
            std::collections::BTreeMap<String, f64>,
        > = Default::default();
        for row in &rows {
            table
                .entry(row.target.clone())
                .or_default()
                .insert(row.label.clone(), row.positional_mse_cm2);
        }
        Self { rows, table }
    }

    /// Plain-text table, one row per embodiment.
    pub fn render_text(&self) -> String {
        let mut labels: Vec<&String> = self.rows.iter().map(|r| &r.label).collect();
        labels.sort();
        labels.dedup();
        let mut out = String::from("positional MSE / cm^2\n");
        out.push_str(&format!("{:<16}", "embodiment"));
        for label in &labels {
            out.push_str(&format!("{label:>14}"));
        }
        out.push('\n');
        for (target, by_label) in &self.table {
            out.push_str(&format!("{target:<16}"));
            for label in &labels {
                match by_label.get(label.as_str()) {
                    Some(v) => out.push_str(&format!("{v:>14.2}")),
                    None => out.push_str(&format!("{:>14}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Write an SVG overlaying the scaled reference key-joint trajectories
/// with the retargeted prediction's FK trajectories, one panel per axis.
pub fn plot_trajectories(
    path: &Path,
    pred: &MotionClip,
    target: &SkeletonGraph,
    reference: &MotionClip,
    map: &JointMap,
    alpha: f64,
    title: &str,
) -> Result<()> {
    let fk = fk_from_clip(pred, target).context("forward kinematics of the prediction")?;
    let scaled = scaled_reference_positions(reference, alpha)?;
    let frames = fk.len().min(scaled.len());

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in 0..frames {
        for pair in map.pairs() {
            for c in 0..3 {
                lo = lo.min(fk[t][pair.dst][c]).min(scaled[t][pair.src][c]);
                hi = hi.max(fk[t][pair.dst][c]).max(scaled[t][pair.src][c]);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    let pad = 0.05 * (hi - lo).max(0.1);
    let (lo, hi) = (lo - pad, hi + pad);

    let root = SVGBackend::new(path, (900, 960)).into_drawing_area();
    root.fill(&WHITE)?;
    let (title_area, body) = root.split_vertically(40);
    title_area.draw_text(
        &format!("{title} (solid: scaled reference, dashed: retargeted)"),
        &("sans-serif", 20).into_text_style(&title_area),
        (20, 10),
    )?;
    let panels = body.split_evenly((3, 1));
    for (axis, panel) in panels.iter().enumerate() {
        let axis_name = ["x", "y", "z"][axis];
        let mut chart = ChartBuilder::on(panel)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .caption(format!("{axis_name} / m"), ("sans-serif", 16))
            .build_cartesian_2d(0f64..(frames.max(2) - 1) as f64, lo..hi)?;
        chart.configure_mesh().x_desc("frame").disable_mesh().draw()?;
        for (k, pair) in map.pairs().iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart.draw_series(LineSeries::new(
                (0..frames).map(|t| (t as f64, scaled[t][pair.src][axis])),
                color.stroke_width(2),
            ))?;
            chart.draw_series(DashedLineSeries::new(
                (0..frames).map(|t| (t as f64, fk[t][pair.dst][axis])),
                4,
                3,
                color.stroke_width(1),
            ))?;
        }
    }
    root.present()?;
    Ok(())
}
