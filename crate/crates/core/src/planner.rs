//! Tool pitch estimation and transverse cut-path planning over a fitted
//! trachea surface.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};
use crate::surface::PolySurface;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("pitch estimation needs at least two points with distinct x")]
    DegeneratePitch,
    #[error("pitch table needs at least two entries")]
    ShortPitchTable,
    #[error("pitch {0} deg outside (0, 90)")]
    PitchRange(f64),
    #[error("empty tumor cloud")]
    EmptyTumor,
    #[error("tumor extent {extent} mm is below twice the waypoint spacing {spacing} mm")]
    TumorTooSmall { extent: f64, spacing: f64 },
    #[error("invalid plan configuration: {0}")]
    Config(String),
    #[error("cut index {index} not in plan with {count} paths")]
    NoSuchCut { index: usize, count: usize },
    #[error("plans do not overlap along x")]
    NoOverlap,
    #[error("invalid plan: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PlanError>;

pub const DEFAULT_CUT_COUNT: usize = 6;
pub const DEFAULT_CLEARANCE_MM: f64 = 1.0;
pub const DEFAULT_PITCH_DEG: f64 = 28.3;
pub const DEFAULT_SPEED_MM_S: f64 = 2.0;
pub const DEFAULT_WAYPOINT_SPACING_MM: f64 = 0.5;
pub const DEFAULT_LATERAL_MARGIN_MM: f64 = 2.0;
pub const DEFAULT_POWER_W: f64 = 24.0;
/// Height of the pulled-back home position above the highest waypoint.
pub const HOME_LIFT_MM: f64 = 30.0;

/// Pitch angles measured in four handheld demonstrations, first four cuts
/// each (rows are demonstrations).
pub const HANDHELD_DEMONSTRATION_PITCH_DEG: [[f64; 4]; 4] = [
    [21.7, 20.4, 24.7, 29.1],
    [20.8, 29.4, 34.1, 36.5],
    [28.7, 27.9, 28.2, 29.2],
    [32.0, 27.0, 31.6, 31.4],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TravelDirection {
    #[serde(rename = "+x")]
    PlusX,
    #[serde(rename = "-x")]
    MinusX,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub position: Point3,
    pub pitch_deg: f64,
    pub direction: TravelDirection,
    /// Simulated time from the start of the path at constant speed.
    pub t_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchTable {
    /// Per demonstration, per cut.
    pub entries: Vec<Vec<f64>>,
}

impl PitchTable {
    pub fn handheld_demonstrations() -> PitchTable {
        PitchTable { entries: HANDHELD_DEMONSTRATION_PITCH_DEG.iter().map(|r| r.to_vec()).collect() }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flatten().copied()
    }
}

/// Angle of the tool axis in the X-Z plane: least-squares line z = a + b x
/// through the tool points, returned as atan(|b|) in degrees.
pub fn estimate_pitch(demo_cloud: &PointCloud) -> Result<f64> {
    let pts = demo_cloud.points();
    if pts.len() < 2 {
        return Err(PlanError::DegeneratePitch);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let mz = pts.iter().map(|p| p.z).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.x - mx) * (p.x - mx)).sum();
    let sxz: f64 = pts.iter().map(|p| (p.x - mx) * (p.z - mz)).sum();
    let spread = pts.iter().map(|p| (p.x - mx).abs()).fold(0.0, f64::max);
    if !(sxx > 0.0) || spread <= 1e-12 * mx.abs().max(1.0) {
        return Err(PlanError::DegeneratePitch);
    }
    Ok((sxz / sxx).abs().atan().to_degrees())
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn summarize_pitch(table: &PitchTable) -> Result<(f64, f64)> {
    let values: Vec<f64> = table.values().collect();
    if values.len() < 2 {
        return Err(PlanError::ShortPitchTable);
    }
    if let Some(&bad) = values.iter().find(|v| !(**v > 0.0 && **v < 90.0)) {
        return Err(PlanError::PitchRange(bad));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Station schedule anchor: tumor start along Y and its extent L.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationSchedule {
    pub y_min: f64,
    pub extent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub cut_count: usize,
    pub clearance_mm: f64,
    pub pitch_deg: f64,
    pub speed_mm_s: f64,
    pub lateral_margin_mm: f64,
    pub waypoint_spacing_mm: f64,
    /// Carried for the log only.
    pub power_w: f64,
    /// Reuse a schedule instead of deriving it from the tumor cloud.
    pub schedule: Option<StationSchedule>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            cut_count: DEFAULT_CUT_COUNT,
            clearance_mm: DEFAULT_CLEARANCE_MM,
            pitch_deg: DEFAULT_PITCH_DEG,
            speed_mm_s: DEFAULT_SPEED_MM_S,
            lateral_margin_mm: DEFAULT_LATERAL_MARGIN_MM,
            waypoint_spacing_mm: DEFAULT_WAYPOINT_SPACING_MM,
            power_w: DEFAULT_POWER_W,
            schedule: None,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlanError::Config(m.into()));
        if self.cut_count == 0 {
            return bad("cut_count must be positive");
        }
        if !(self.clearance_mm.is_finite() && self.clearance_mm >= 0.0) {
            return bad("clearance must be finite and non-negative");
        }
        if !(self.pitch_deg > 0.0 && self.pitch_deg < 90.0) {
            return Err(PlanError::PitchRange(self.pitch_deg));
        }
        if !(self.speed_mm_s > 0.0 && self.speed_mm_s.is_finite()) {
            return bad("speed must be positive");
        }
        if !(self.waypoint_spacing_mm > 0.0 && self.waypoint_spacing_mm.is_finite()) {
            return bad("waypoint spacing must be positive");
        }
        if !(self.lateral_margin_mm >= 0.0 && self.lateral_margin_mm.is_finite()) {
            return bad("lateral margin must be non-negative");
        }
        if let Some(s) = self.schedule {
            if !(s.extent > 0.0 && s.y_min.is_finite() && s.extent.is_finite()) {
                return bad("schedule extent must be positive");
            }
        }
        Ok(())
    }
}

/// Ordered transverse cut paths. Each path is a left-to-right sweep followed
/// by its right-to-left retrace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PlanFile", try_from = "PlanFile")]
pub struct CutPlan {
    pub paths: Vec<Vec<Waypoint>>,
    pub clearance_mm: f64,
    pub pitch_deg: f64,
    pub speed_mm_s: f64,
    pub extent_mm: f64,
    pub stations_mm: Vec<f64>,
    pub home: Point3,
}

impl CutPlan {
    pub fn path(&self, index: usize) -> Result<&[Waypoint]> {
        self.paths
            .get(index)
            .map(Vec::as_slice)
            .ok_or(PlanError::NoSuchCut { index, count: self.paths.len() })
    }

    /// The outbound half of a path (before the retrace).
    pub fn forward(&self, index: usize) -> Result<&[Waypoint]> {
        let p = self.path(index)?;
        Ok(&p[..p.len() / 2])
    }

    pub fn schedule(&self) -> StationSchedule {
        let y_min = self.stations_mm.first().map_or(0.0, |s| s - self.extent_mm / self.paths.len().max(1) as f64 / 2.0);
        StationSchedule { y_min, extent: self.extent_mm }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.len() != self.stations_mm.len() || self.paths.is_empty() {
            return Err(PlanError::Invalid("path and station counts differ".into()));
        }
        if self.stations_mm.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PlanError::Invalid("stations must be strictly increasing".into()));
        }
        for p in &self.paths {
            if p.len() < 2 || p.len() % 2 != 0 {
                return Err(PlanError::Invalid("paths need an even number of waypoints".into()));
            }
            for w in p {
                if !w.position.is_finite() || !w.t_s.is_finite() {
                    return Err(PlanError::Invalid("non-finite waypoint".into()));
                }
                if !(w.pitch_deg > 0.0 && w.pitch_deg < 90.0) {
                    return Err(PlanError::PitchRange(w.pitch_deg));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<CutPlan> {
        serde_json::from_str(text).map_err(|e| PlanError::Invalid(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    x: f64,
    y: f64,
    z: f64,
    t_s: f64,
    dir: TravelDirection,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointFile {
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    clearance_mm: f64,
    pitch_deg: f64,
    speed_mm_s: f64,
    #[serde(rename = "L_mm")]
    extent_mm: f64,
    stations_mm: Vec<f64>,
    paths: Vec<Vec<WaypointFile>>,
    home: PointFile,
}

impl From<CutPlan> for PlanFile {
    fn from(p: CutPlan) -> Self {
        PlanFile {
            clearance_mm: p.clearance_mm,
            pitch_deg: p.pitch_deg,
            speed_mm_s: p.speed_mm_s,
            extent_mm: p.extent_mm,
            stations_mm: p.stations_mm,
            paths: p
                .paths
                .iter()
                .map(|path| {
                    path.iter()
                        .map(|w| WaypointFile {
                            x: w.position.x,
                            y: w.position.y,
                            z: w.position.z,
                            t_s: w.t_s,
                            dir: w.direction,
                        })
                        .collect()
                })
                .collect(),
            home: PointFile { x: p.home.x, y: p.home.y, z: p.home.z },
        }
    }
}

impl TryFrom<PlanFile> for CutPlan {
    type Error = PlanError;

    fn try_from(f: PlanFile) -> Result<Self> {
        let pitch = f.pitch_deg;
        let plan = CutPlan {
            paths: f
                .paths
                .into_iter()
                .map(|path| {
                    path.into_iter()
                        .map(|w| Waypoint {
                            position: Point3::new(w.x, w.y, w.z),
                            pitch_deg: pitch,
                            direction: w.dir,
                            t_s: w.t_s,
                        })
                        .collect()
                })
                .collect(),
            clearance_mm: f.clearance_mm,
            pitch_deg: pitch,
            speed_mm_s: f.speed_mm_s,
            extent_mm: f.extent_mm,
            stations_mm: f.stations_mm,
            home: Point3::new(f.home.x, f.home.y, f.home.z),
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl std::fmt::Display for TravelDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TravelDirection::PlusX => "+x",
            TravelDirection::MinusX => "-x",
        })
    }
}

/// Stations at cell centers `y_min + (k + 0.5) L / n`.
pub fn station_schedule(schedule: StationSchedule, cut_count: usize) -> Vec<f64> {
    let step = schedule.extent / cut_count as f64;
    (0..cut_count).map(|k| schedule.y_min + (k as f64 + 0.5) * step).collect()
}

/// Plans `cut_count` transverse paths over the tumor footprint, each at
/// `clearance` above the fitted surface.
pub fn plan_cuts(surface: &PolySurface, tumor_cloud: &PointCloud, config: &PlanConfig) -> Result<CutPlan> {
    config.validate()?;
    let (lo, hi) = tumor_cloud.bounds().ok_or(PlanError::EmptyTumor)?;
    let spacing = config.waypoint_spacing_mm;
    let x_extent = hi.x - lo.x;
    if x_extent < 2.0 * spacing {
        return Err(PlanError::TumorTooSmall { extent: x_extent, spacing });
    }
    let schedule = match config.schedule {
        Some(s) => s,
        None => {
            let extent = hi.y - lo.y;
            if extent < 2.0 * spacing {
                return Err(PlanError::TumorTooSmall { extent, spacing });
            }
            StationSchedule { y_min: lo.y, extent }
        }
    };
    let stations = station_schedule(schedule, config.cut_count);

    let x0 = lo.x - config.lateral_margin_mm;
    let x1 = hi.x + config.lateral_margin_mm;
    let steps = ((x1 - x0) / spacing).ceil() as usize;
    let xs: Vec<f64> = (0..=steps).map(|k| x0 + (x1 - x0) * k as f64 / steps as f64).collect();

    let mut z_top = f64::NEG_INFINITY;
    let paths: Vec<Vec<Waypoint>> = stations
        .iter()
        .map(|&y| {
            let forward: Vec<Point3> =
                xs.iter().map(|&x| Point3::new(x, y, surface.evaluate(x, y) + config.clearance_mm)).collect();
            let mut path = Vec::with_capacity(forward.len() * 2);
            let mut t = 0.0;
            let mut prev: Option<Point3> = None;
            let sweep = forward
                .iter()
                .map(|p| (*p, TravelDirection::PlusX))
                .chain(forward.iter().rev().map(|p| (*p, TravelDirection::MinusX)));
            for (p, direction) in sweep {
                if let Some(q) = prev {
                    t += p.distance(&q) / config.speed_mm_s;
                }
                prev = Some(p);
                z_top = z_top.max(p.z);
                path.push(Waypoint { position: p, pitch_deg: config.pitch_deg, direction, t_s: t });
            }
            path
        })
        .collect();

    let mid_y = schedule.y_min + schedule.extent / 2.0;
    Ok(CutPlan {
        paths,
        clearance_mm: config.clearance_mm,
        pitch_deg: config.pitch_deg,
        speed_mm_s: config.speed_mm_s,
        extent_mm: schedule.extent,
        stations_mm: stations,
        home: Point3::new(0.0, mid_y, z_top + HOME_LIFT_MM),
    })
}

/// Linear interpolation of z along a forward sweep with increasing x.
fn interp_z(path: &[Waypoint], x: f64) -> f64 {
    let i = path.partition_point(|w| w.position.x < x);
    if i == 0 {
        return path[0].position.z;
    }
    if i >= path.len() {
        return path[path.len() - 1].position.z;
    }
    let (a, b) = (&path[i - 1].position, &path[i].position);
    if b.x == a.x {
        return b.z;
    }
    let s = (x - a.x) / (b.x - a.x);
    a.z + s * (b.z - a.z)
}

/// RMS z-difference between the forward sweeps of cut `cut_index` in two
/// plans, resampled at the predicted plan's x stations that lie inside both
/// sweeps.
pub fn plan_consistency_rmse(predicted: &CutPlan, current: &CutPlan, cut_index: usize) -> Result<f64> {
    let a = predicted.forward(cut_index)?;
    let b = current.forward(cut_index)?;
    if a.is_empty() || b.is_empty() {
        return Err(PlanError::NoOverlap);
    }
    let lo = a[0].position.x.max(b[0].position.x);
    let hi = a[a.len() - 1].position.x.min(b[b.len() - 1].position.x);
    let mut ss = 0.0;
    let mut n = 0usize;
    for w in a.iter().filter(|w| (lo..=hi).contains(&w.position.x)) {
        let d = interp_z(b, w.position.x) - w.position.z;
        ss += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(PlanError::NoOverlap);
    }
    Ok((ss / n as f64).sqrt())
}
