//! Synthetic box detector over ground-truth labels, box-restricted masks,
//! and the depth-to-cloud segmentation step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project_depth_to_cloud, subtract_cloud, BinaryMask, BoundingBox2D, BoxSource, GeometryError, Label,
    PointCloud,
};
use crate::phantom::{LabelImage, Snapshot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("no trachea box available; supervisor boxes required")]
    MissingTrachea,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SegmentationError>;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.70;
pub const DETECTABLE: [Label; 2] = [Label::Trachea, Label::Tumor];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub trachea: f64,
    pub tumor: f64,
}

impl PerClass {
    pub fn get(&self, class: Label) -> f64 {
        match class {
            Label::Tumor => self.tumor,
            _ => self.trachea,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub score_threshold: f64,
    /// Standard deviation of the per-edge Gaussian box jitter, pixels.
    pub jitter_sigma_px: f64,
    /// Scores of successful detections are uniform in [score_min, score_max].
    pub score_min: f64,
    pub score_max: f64,
    pub failure_probability: PerClass,
    /// Classes whose detection fails unconditionally.
    pub forced_failures: Vec<Label>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            jitter_sigma_px: 1.0,
            score_min: 0.80,
            score_max: 0.99,
            failure_probability: PerClass::default(),
            forced_failures: Vec::new(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SegmentationError::Config(m.into()));
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return bad("score threshold must be in (0, 1]");
        }
        if !(self.jitter_sigma_px >= 0.0 && self.jitter_sigma_px.is_finite()) {
            return bad("jitter sigma must be non-negative");
        }
        if !(0.0 <= self.score_min && self.score_min <= self.score_max && self.score_max <= 1.0) {
            return bad("score range must satisfy 0 <= min <= max <= 1");
        }
        let p = self.failure_probability;
        if !((0.0..=1.0).contains(&p.trachea) && (0.0..=1.0).contains(&p.tumor)) {
            return bad("failure probabilities must be in [0, 1]");
        }
        Ok(())
    }
}

/// Tight half-open box around every pixel of `class`, or `None` if absent.
pub fn ground_truth_box(labels: &LabelImage, class: Label) -> Option<BoundingBox2D> {
    let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
    for v in 0..labels.height() {
        for u in 0..labels.width() {
            if labels.get(u, v) == class {
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u + 1);
                v1 = v1.max(v + 1);
            }
        }
    }
    (u0 != usize::MAX).then_some(BoundingBox2D {
        class,
        u_min: u0 as f64,
        v_min: v0 as f64,
        u_max: u1 as f64,
        v_max: v1 as f64,
        cls_score: 1.0,
        source: BoxSource::Auto,
    })
}

pub fn ground_truth_boxes(labels: &LabelImage) -> Vec<BoundingBox2D> {
    DETECTABLE.iter().filter_map(|c| ground_truth_box(labels, *c)).collect()
}

/// Clamps a box into the image keeping at least one pixel of extent.
fn clamp_box(mut b: BoundingBox2D, width: f64, height: f64) -> BoundingBox2D {
    b.u_min = b.u_min.clamp(0.0, width - 1.0);
    b.v_min = b.v_min.clamp(0.0, height - 1.0);
    b.u_max = b.u_max.clamp(b.u_min + 1.0, width);
    b.v_max = b.v_max.clamp(b.v_min + 1.0, height);
    b
}

/// Stand-in detector: ground-truth boxes perturbed by Gaussian edge jitter
/// and paired with a synthetic classification score. A failed detection is
/// displaced by at least a quarter of the image width and scores below the
/// threshold.
pub fn detect(snapshot: &Snapshot, config: &DetectorConfig) -> Result<Vec<BoundingBox2D>> {
    config.validate()?;
    let labels = &snapshot.labels;
    let (w, h) = (labels.width() as f64, labels.height() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.jitter_sigma_px).map_err(|e| SegmentationError::Config(e.to_string()))?;
    let mut boxes = Vec::new();
    for class in DETECTABLE {
        let Some(truth) = ground_truth_box(labels, class) else { continue };
        // Draw the same number of variates per class whatever the outcome,
        // so one class's failure does not reshuffle the other's jitter.
        let noise: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let fail_draw: f64 = rng.random();
        let score_draw: f64 = rng.random();
        let shift_draw: f64 = rng.random();
        let failed =
            config.forced_failures.contains(&class) || fail_draw < config.failure_probability.get(class);

        let mut b = truth;
        b.u_min += noise[0];
        b.v_min += noise[1];
        b.u_max += noise[2];
        b.v_max += noise[3];
        if failed {
            let shift = (0.25 + 0.25 * shift_draw) * w;
            let center = (b.u_min + b.u_max) / 2.0;
            let signed = if center < w / 2.0 { shift } else { -shift };
            b.u_min += signed;
            b.u_max += signed;
            b.cls_score = score_draw * config.score_threshold;
        } else {
            b.cls_score = config.score_min + score_draw * (config.score_max - config.score_min);
        }
        if b.cls_score >= 1.0 {
            b.cls_score = 1.0;
        }
        boxes.push(clamp_box(b, w, h));
    }
    Ok(boxes)
}

/// Pixels inside `bbox` whose ground-truth label equals the box class.
pub fn mask_from_box(snapshot: &Snapshot, bbox: &BoundingBox2D) -> Result<BinaryMask> {
    let labels = &snapshot.labels;
    let (w, h) = (labels.width(), labels.height());
    bbox.validate(w, h)?;
    let mut mask = BinaryMask::filled(w, h, false);
    let u0 = bbox.u_min.max(0.0).floor() as usize;
    let v0 = bbox.v_min.max(0.0).floor() as usize;
    let u1 = (bbox.u_max.ceil() as usize).min(w);
    let v1 = (bbox.v_max.ceil() as usize).min(h);
    for v in v0..v1 {
        for u in u0..u1 {
            if bbox.contains(u, v) && labels.get(u, v) == bbox.class {
                mask.set(u, v, true);
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// Camera frame.
    pub trachea: PointCloud,
    /// Camera frame.
    pub tumor: PointCloud,
    pub boxes: Vec<BoundingBox2D>,
    pub needs_human: bool,
    pub source: BoxSource,
}

/// Highest-scoring box per class; earlier boxes win exact ties.
pub fn best_boxes(boxes: &[BoundingBox2D]) -> Vec<BoundingBox2D> {
    DETECTABLE
        .iter()
        .filter_map(|c| {
            boxes
                .iter()
                .filter(|b| b.class == *c)
                .fold(None::<&BoundingBox2D>, |best, b| match best {
                    Some(x) if x.cls_score >= b.cls_score => Some(x),
                    _ => Some(b),
                })
                .copied()
        })
        .collect()
}

/// Masks the depth image per class, back-projects each mask and removes the
/// tumor cloud's neighborhood from the trachea cloud. Supervisor-drawn boxes
/// are trusted regardless of score.
pub fn segment(
    snapshot: &Snapshot,
    boxes: &[BoundingBox2D],
    subtraction_radius: f64,
    score_threshold: f64,
) -> Result<SegmentationResult> {
    let chosen = best_boxes(boxes);
    let find = |c: Label| chosen.iter().find(|b| b.class == c);
    let low_score = chosen.iter().any(|b| b.source == BoxSource::Auto && b.cls_score < score_threshold);
    let missing = DETECTABLE.iter().any(|c| find(*c).is_none());
    let needs_human = low_score || missing;

    let trachea_box = find(Label::Trachea).ok_or(SegmentationError::MissingTrachea)?;
    let project = |b: &BoundingBox2D| -> Result<PointCloud> {
        let mask = mask_from_box(snapshot, b)?;
        let cloud = project_depth_to_cloud(&snapshot.depth, &mask, &snapshot.intrinsics)?;
        Ok(PointCloud::uniform(cloud.points().to_vec(), b.class)?)
    };
    let tumor = match find(Label::Tumor) {
        Some(b) => project(b)?,
        None => PointCloud::empty(),
    };
    let trachea = subtract_cloud(&project(trachea_box)?, &tumor, subtraction_radius)?;
    let source = if chosen.iter().any(|b| b.source == BoxSource::Human) {
        BoxSource::Human
    } else {
        BoxSource::Auto
    };
    Ok(SegmentationResult { trachea, tumor, boxes: chosen, needs_human, source })
}
