//! Post-run metrics: volumetric removal, post-cut surface error, lumen
//! reopening and detector box overlap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::RunRecord;
use crate::geometry::{bbox_iou, BoundingBox2D, Label};
use crate::phantom::SceneState;
use crate::surface::PolySurface;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("initial volume must be positive, got {0}")]
    NoInitialVolume(f64),
    #[error("no char voxels; post-cut RMSE is undefined")]
    NoChar,
    #[error("nominal diameter must be positive, got {0}")]
    BadDiameter(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Lumen reopening strictly above this percentage counts as success.
pub const SUCCESS_LUMEN_PCT: f64 = 50.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 when fewer than two samples.
    pub std: f64,
    pub n: usize,
    pub std_defined: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub trachea: ClassIou,
    pub tumor: ClassIou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcedureMetrics {
    pub removal_pct: f64,
    pub postcut_rmse_mm: Option<f64>,
    pub lumen_pct: f64,
    pub perforated: bool,
    pub success: bool,
    pub iou: IouStats,
}

pub fn removal_percent(initial_volume: f64, removed_volume: f64) -> Result<f64> {
    if !(initial_volume > 0.0) {
        return Err(EvalError::NoInitialVolume(initial_volume));
    }
    Ok(100.0 * removed_volume / initial_volume)
}

/// RMS height of the char voxel centers above the goal surface (the fitted
/// trachea raised by `clearance`).
pub fn postcut_rmse(scene: &SceneState, goal: &PolySurface, clearance: f64) -> Result<f64> {
    let char_points = scene.char_centroids();
    if char_points.is_empty() {
        return Err(EvalError::NoChar);
    }
    let ss: f64 = char_points
        .iter()
        .map(|p| {
            let d = p.z - (goal.evaluate(p.x, p.y) + clearance);
            d * d
        })
        .sum();
    Ok((ss / char_points.len() as f64).sqrt())
}

/// Smallest free aperture over all Y layers of the tumor grid, as a
/// percentage of `nominal_diameter`. A layer's obstruction is the tallest
/// column of remaining tumor voxels in it.
pub fn lumen_reopening(scene: &SceneState, nominal_diameter: f64) -> Result<f64> {
    if !(nominal_diameter > 0.0) {
        return Err(EvalError::BadDiameter(nominal_diameter));
    }
    let g = scene.tumor();
    let [nx, ny, nz] = g.dims();
    let mut worst = 0usize;
    for j in 0..ny {
        for i in 0..nx {
            let column = (0..nz).filter(|&k| g.occupied(g.index(i, j, k))).count();
            worst = worst.max(column);
        }
    }
    let obstruction = worst as f64 * g.resolution();
    Ok((100.0 * (nominal_diameter - obstruction) / nominal_diameter).max(0.0))
}

pub fn is_success(lumen_pct: f64) -> bool {
    lumen_pct > SUCCESS_LUMEN_PCT
}

fn class_stats(values: &[f64]) -> ClassIou {
    let n = values.len();
    if n == 0 {
        return ClassIou::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, std_defined) = if n >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var.sqrt(), true)
    } else {
        (0.0, false)
    };
    ClassIou { mean: Some(mean), std, n, std_defined }
}

/// Per-class IoU of detector boxes against ground truth, one sample per
/// detection in which both exist.
pub fn iou_stats(detections: &[(Vec<BoundingBox2D>, Vec<BoundingBox2D>)]) -> IouStats {
    let per_class = |class: Label| -> Vec<f64> {
        detections
            .iter()
            .filter_map(|(boxes, truth)| {
                let b = boxes.iter().find(|b| b.class == class)?;
                let t = truth.iter().find(|t| t.class == class)?;
                Some(bbox_iou(b, t))
            })
            .collect()
    };
    IouStats { trachea: class_stats(&per_class(Label::Trachea)), tumor: class_stats(&per_class(Label::Tumor)) }
}

pub fn iou_stats_for_run(record: &RunRecord) -> IouStats {
    iou_stats(&record.detections())
}

pub fn compute_metrics(
    scene: &SceneState,
    goal: Option<&PolySurface>,
    clearance: f64,
    detections: &[(Vec<BoundingBox2D>, Vec<BoundingBox2D>)],
    perforated: bool,
) -> ProcedureMetrics {
    let removal_pct = removal_percent(scene.initial_volume(), scene.removed_volume()).unwrap_or(0.0);
    let postcut_rmse_mm = goal.and_then(|g| postcut_rmse(scene, g, clearance).ok());
    let lumen_pct = lumen_reopening(scene, scene.nominal_diameter()).unwrap_or(0.0);
    ProcedureMetrics {
        removal_pct,
        postcut_rmse_mm,
        lumen_pct,
        perforated,
        success: is_success(lumen_pct),
        iou: iou_stats(detections),
    }
}

/// Fixed-order, human-readable summary.
pub fn format_table(m: &ProcedureMetrics) -> String {
    let opt = |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |x| format!("{x:.digits$}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<22}{:>12}", "metric", "value");
    let _ = writeln!(out, "{:<22}{:>12.2}", "removal_pct", m.removal_pct);
    let _ = writeln!(out, "{:<22}{:>12}", "postcut_rmse_mm", opt(m.postcut_rmse_mm, 3));
    let _ = writeln!(out, "{:<22}{:>12.2}", "lumen_pct", m.lumen_pct);
    let _ = writeln!(out, "{:<22}{:>12}", "perforated", m.perforated);
    let _ = writeln!(out, "{:<22}{:>12}", "success", m.success);
    for (name, c) in [("trachea", m.iou.trachea), ("tumor", m.iou.tumor)] {
        let _ = writeln!(out, "{:<22}{:>12}", format!("iou_{name}_mean"), opt(c.mean, 3));
        let _ = writeln!(out, "{:<22}{:>12.3}", format!("iou_{name}_std"), c.std);
    }
    out
}
