//! Procedural tissue phantom: an opened half-pipe trachea described by an
//! analytic height field, with a voxelized tumor dome sitting on it.
//!
//! The scene supports three things: rendering from a pinhole camera,
//! retraction (modeled as exposure: material behind the peel station stops
//! occluding), and voxel removal along a swept cutting edge.

mod cut;
mod render;
mod voxel;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point3};

pub use cut::{CutOutcome, CutTool, DEFAULT_KERF_MM};
pub use render::{CameraModel, LabelImage, Snapshot};
pub use voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no scene geometry visible from the camera")]
    EmptySnapshot,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Fraction of the half-pipe radius that remains as an open trough.
pub const OPEN_FRACTION: f64 = 0.9;
/// Relative height modulation of the tumor dome (angular lobes).
pub const TUMOR_LUMP_AMPLITUDE: f64 = 0.08;
/// Working headroom above the tissue counted as inside the scene.
pub const SCENE_HEADROOM_MM: f64 = 100.0;
const NOISE_WAVES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracheaSpec {
    pub radius: f64,
    pub length: f64,
    pub noise_amp: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorSpec {
    /// Y coordinate of the footprint center.
    pub station: f64,
    pub diameter: f64,
    pub height: f64,
    /// Vertical profile exponent (2 gives an ellipsoidal dome).
    pub exp_n: f64,
    /// Footprint exponent (2 gives a circular footprint).
    pub exp_e: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub trachea: TracheaSpec,
    pub tumor: TumorSpec,
    pub resolution: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            trachea: TracheaSpec { radius: 20.0, length: 75.0, noise_amp: 0.4, seed: 0 },
            tumor: TumorSpec {
                station: 37.5,
                diameter: 20.0,
                height: 12.0,
                exp_n: 2.5,
                exp_e: 2.0,
                seed: 0,
            },
            resolution: 0.25,
        }
    }
}

impl PhantomSpec {
    /// Seeded shape variant: all seeds replaced by `seed`, tumor diameter
    /// scaled within ±20% and height within ±25%.
    pub fn variant(&self, seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163_6865_6121);
        let d = rng.random_range(0.8..=1.2);
        let h = rng.random_range(0.75..=1.25);
        let mut out = *self;
        out.trachea.seed = seed;
        out.tumor.seed = seed;
        out.tumor.diameter *= d;
        out.tumor.height *= h;
        out
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trachea;
        let m = &self.tumor;
        let finite = [t.radius, t.length, t.noise_amp, m.station, m.diameter, m.height, m.exp_n, m.exp_e]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PhantomError::Config("non-finite value in phantom spec".into()));
        }
        if !(t.radius > 0.0 && t.length > 0.0) {
            return Err(PhantomError::Config("trachea radius and length must be positive".into()));
        }
        if t.noise_amp < 0.0 || t.noise_amp >= 0.25 * t.radius {
            return Err(PhantomError::Config(format!("noise amplitude {} out of range", t.noise_amp)));
        }
        if !(m.diameter > 0.0) || m.height < 0.0 || !(m.exp_n > 0.0) || !(m.exp_e > 0.0) {
            return Err(PhantomError::Config(
                "tumor diameter and exponents must be positive, height non-negative".into(),
            ));
        }
        if !(0.1..=1.0).contains(&self.resolution) {
            return Err(PhantomError::Config(format!(
                "resolution {} mm outside [0.1, 1.0]",
                self.resolution
            )));
        }
        let a = m.diameter / 2.0;
        if m.station - a < 0.0 || m.station + a > t.length || a > OPEN_FRACTION * t.radius {
            return Err(PhantomError::Config(format!(
                "tumor footprint (station {}, diameter {}) is outside the trachea",
                m.station, m.diameter
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<PhantomSpec> {
        let spec: PhantomSpec =
            serde_json::from_str(text).map_err(|e| PhantomError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Inner surface of the opened half-pipe, `z = S(x, y)`, trough bottom at
/// x = 0, with a smooth pseudo-random undulation bounded by the noise amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct TracheaSurface {
    radius: f64,
    half_width: f64,
    length: f64,
    amplitude: f64,
    waves: Vec<Wave>,
}

impl TracheaSurface {
    pub fn new(spec: &TracheaSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let waves = (0..NOISE_WAVES)
            .map(|_| {
                let wavelength = rng.random_range(15.0..40.0);
                let dir = rng.random_range(0.0..PI);
                let k = 2.0 * PI / wavelength;
                Wave { kx: k * dir.cos(), ky: k * dir.sin(), phase: rng.random_range(0.0..2.0 * PI) }
            })
            .collect();
        TracheaSurface {
            radius: spec.radius,
            half_width: OPEN_FRACTION * spec.radius,
            length: spec.length,
            amplitude: spec.noise_amp,
            waves,
        }
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_width && (0.0..=self.length).contains(&y)
    }

    pub fn undulation(&self, x: f64, y: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let sum: f64 = self.waves.iter().map(|w| (w.kx * x + w.ky * y + w.phase).sin()).sum();
        self.amplitude * sum / self.waves.len() as f64
    }

    /// Surface height. Defined for |x| < radius; callers stay inside the
    /// open trough.
    #[inline]
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let r = self.radius;
        r - (r * r - x * x).max(0.0).sqrt() + self.undulation(x, y)
    }

    /// Height range over the trough, padded by the undulation amplitude.
    pub fn z_range(&self) -> (f64, f64) {
        let r = self.radius;
        let top = r - (r * r - self.half_width * self.half_width).sqrt();
        (-self.amplitude, top + self.amplitude)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct TumorShape {
    center_y: f64,
    semi_axis: f64,
    height: f64,
    exp_n: f64,
    exp_e: f64,
    lobes: f64,
    lobe_phase: f64,
}

impl TumorShape {
    fn new(spec: &TumorSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7475_6d6f_72);
        let lobes = if rng.random_bool(0.5) { 2.0 } else { 3.0 };
        TumorShape {
            center_y: spec.station,
            semi_axis: spec.diameter / 2.0,
            height: spec.height,
            exp_n: spec.exp_n,
            exp_e: spec.exp_e,
            lobes,
            lobe_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Dome thickness above the trachea surface at (x, y); 0 outside the footprint.
    fn thickness(&self, x: f64, y: f64) -> f64 {
        let dx = x / self.semi_axis;
        let dy = (y - self.center_y) / self.semi_axis;
        let r = (dx.abs().powf(self.exp_e) + dy.abs().powf(self.exp_e)).powf(1.0 / self.exp_e);
        if r >= 1.0 || self.height <= 0.0 {
            return 0.0;
        }
        let profile = (1.0 - r.powf(self.exp_n)).powf(1.0 / self.exp_n);
        let lobe = 1.0 + TUMOR_LUMP_AMPLITUDE * (self.lobes * dy.atan2(dx) + self.lobe_phase).sin();
        self.height * profile * lobe
    }
}

/// Complete simulated world for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    spec: PhantomSpec,
    trachea: TracheaSurface,
    tumor: VoxelGrid,
    peel_station: f64,
    detached: bool,
    removed_volume: f64,
    initial_volume: f64,
}

/// Builds the phantom. Tumor voxels are those whose centers lie between the
/// trachea surface and the dome top.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<SceneState> {
    spec.validate()?;
    let trachea = TracheaSurface::new(&spec.trachea);
    let shape = TumorShape::new(&spec.tumor);
    let res = spec.resolution;
    let a = shape.semi_axis;
    let pad = 4.0 * res;

    let nxy = ((2.0 * (a + pad)) / res).ceil() as usize;
    let x0 = -a - pad;
    let y0 = shape.center_y - a - pad;
    let col = |c: usize, o: f64| o + (c as f64 + 0.5) * res;

    let mut z_lo = f64::INFINITY;
    let mut z_hi = f64::NEG_INFINITY;
    for j in 0..nxy {
        for i in 0..nxy {
            let (x, y) = (col(i, x0), col(j, y0));
            let t = shape.thickness(x, y);
            if t > 0.0 {
                let s = trachea.height(x, y);
                z_lo = z_lo.min(s);
                z_hi = z_hi.max(s + t);
            }
        }
    }
    if !z_lo.is_finite() {
        // Degenerate tumor: keep a one-layer empty grid over the footprint.
        z_lo = trachea.height(0.0, shape.center_y);
        z_hi = z_lo;
    }
    let z0 = z_lo - pad;
    let nz = (((z_hi + pad) - z0) / res).ceil().max(1.0) as usize;
    let mut grid = VoxelGrid::new(Point3::new(x0, y0, z0), res, [nxy, nxy, nz]);

    for j in 0..nxy {
        for i in 0..nxy {
            let (x, y) = (col(i, x0), col(j, y0));
            let t = shape.thickness(x, y);
            if t <= 0.0 {
                continue;
            }
            let s = trachea.height(x, y);
            if let Some((k0, k1)) = grid.index_range(2, s, s + t) {
                for k in k0..=k1 {
                    let idx = grid.index(i, j, k);
                    grid.set_occupied(idx, true);
                }
            }
        }
    }

    let initial_volume = grid.occupied_count() as f64 * grid.voxel_volume();
    Ok(SceneState {
        spec: *spec,
        trachea,
        tumor: grid,
        peel_station: shape.center_y - a,
        detached: false,
        removed_volume: 0.0,
        initial_volume,
    })
}

impl SceneState {
    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn trachea(&self) -> &TracheaSurface {
        &self.trachea
    }

    pub fn tumor(&self) -> &VoxelGrid {
        &self.tumor
    }

    pub fn peel_station(&self) -> f64 {
        self.peel_station
    }

    pub fn detached(&self) -> bool {
        self.detached
    }

    pub fn removed_volume(&self) -> f64 {
        self.removed_volume
    }

    pub fn initial_volume(&self) -> f64 {
        self.initial_volume
    }

    /// Remaining tumor volume: occupied voxels times voxel volume.
    pub fn tumor_volume(&self) -> f64 {
        self.tumor.occupied_count() as f64 * self.tumor.voxel_volume()
    }

    /// Nominal lumen diameter of the trachea.
    pub fn nominal_diameter(&self) -> f64 {
        2.0 * self.spec.trachea.radius
    }

    /// Analytic tumor footprint extent along Y.
    pub fn tumor_y_extent(&self) -> (f64, f64) {
        let a = self.spec.tumor.diameter / 2.0;
        (self.spec.tumor.station - a, self.spec.tumor.station + a)
    }

    /// True when the voxel is hidden behind the peel station.
    #[inline]
    pub fn is_peeled(&self, center: &Point3) -> bool {
        center.y < self.peel_station
    }

    /// Advances the exposure boundary. Material is never destroyed here.
    pub fn retract_tumor(&mut self, delta: f64) -> Result<()> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(PhantomError::Contract(format!("retraction {delta} must be positive")));
        }
        self.peel_station += delta;
        Ok(())
    }

    /// Axis-aligned region in which tool positions are legal.
    pub fn bounds(&self) -> (Point3, Point3) {
        let (zmin, zmax) = self.trachea.z_range();
        let hw = self.trachea.half_width;
        (
            Point3::new(-hw, 0.0, zmin - self.trachea.radius),
            Point3::new(hw, self.trachea.length, zmax + SCENE_HEADROOM_MM),
        )
    }

    pub fn contains_point(&self, p: &Point3) -> bool {
        let (lo, hi) = self.bounds();
        (lo.x..=hi.x).contains(&p.x) && (lo.y..=hi.y).contains(&p.y) && (lo.z..=hi.z).contains(&p.z)
    }

    /// Char voxel centers still attached to the scene.
    pub fn char_centroids(&self) -> Vec<Point3> {
        self.tumor.char_indices().map(|i| self.tumor.center_of(i)).collect()
    }

    pub(crate) fn tumor_mut(&mut self) -> &mut VoxelGrid {
        &mut self.tumor
    }

    pub(crate) fn credit_removed(&mut self, volume: f64) {
        self.removed_volume += volume;
    }

    pub(crate) fn mark_detached(&mut self) {
        self.detached = true;
    }

    /// Test hook: flags an occupied voxel as char.
    pub fn mark_char(&mut self, idx: usize) {
        self.tumor.set_char(idx, true);
    }

    /// Replaces the tumor grid; used to build hand-made scenes in tests.
    pub fn with_tumor(mut self, grid: VoxelGrid) -> Self {
        self.initial_volume = grid.occupied_count() as f64 * grid.voxel_volume();
        self.tumor = grid;
        self
    }
}
