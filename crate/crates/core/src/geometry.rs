//! Core 3D/2D value types and the projection, transform, overlap and
//! cloud-subtraction primitives the rest of the crate is built on.
//!
//! World frame: Z up, trachea axis along +Y, cut travel along X. All lengths
//! are millimeters. Camera frame follows the usual pinhole convention
//! (x right, y down, z along the optical axis).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, o: &Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(&self, o: &Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, o: &Point3) -> f64 {
        self.sub(o).norm()
    }

    pub fn distance_sq(&self, o: &Point3) -> f64 {
        let d = self.sub(o);
        d.dot(&d)
    }
}

/// Class tag carried by points, pixels and boxes. The numeric ids are the
/// ones written to PCD `label` fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Background = 0,
    Trachea = 1,
    Tumor = 2,
    Char = 3,
}

impl Label {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Label> {
        match id {
            0 => Some(Label::Background),
            1 => Some(Label::Trachea),
            2 => Some(Label::Tumor),
            3 => Some(Label::Char),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::Background => "background",
            Label::Trachea => "trachea",
            Label::Tumor => "tumor",
            Label::Char => "char",
        };
        f.write_str(s)
    }
}

/// Ordered point list with optional per-point labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::Invalid {
                what: "point cloud",
                reason: format!("point {i} has a non-finite coordinate"),
            });
        }
        Ok(PointCloud { points, labels: None })
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(GeometryError::Invalid {
                what: "point cloud",
                reason: format!("{} labels for {} points", labels.len(), points.len()),
            });
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.labels = Some(labels);
        Ok(cloud)
    }

    /// Every point tagged with the same label.
    pub fn uniform(points: Vec<Point3>, label: Label) -> Result<Self> {
        let labels = vec![label; points.len()];
        PointCloud::with_labels(points, labels)
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds as (min, max); `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&i| keep(i)).collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::Invalid {
                what: "intrinsics",
                reason: format!("focal lengths must be positive and finite: {self:?}"),
            })
        }
    }

    /// Camera-frame point at pixel (u, v) with optical-axis depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    #[inline]
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Row-major depth grid in millimeters; 0 marks a pixel with no return.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(GeometryError::Invalid {
                what: "depth image",
                reason: format!("{} values for {width}x{height}", depth.len()),
            });
        }
        if let Some(i) = depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(GeometryError::Invalid {
                what: "depth image",
                reason: format!("pixel {i} has depth {}", depth[i]),
            });
        }
        Ok(DepthImage { width, height, depth })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DepthImage { width, height, depth: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }
}

/// Rigid motion p -> R p + t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: Point3::ORIGIN,
    };

    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn translation(t: Point3) -> Self {
        RigidTransform { translation: t, ..Self::IDENTITY }
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues), then translation.
    pub fn from_axis_angle(axis: Point3, angle: f64, translation: Point3) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !angle.is_finite() {
            return Err(GeometryError::Invalid {
                what: "rigid transform",
                reason: "axis must be non-zero and angle finite".into(),
            });
        }
        let (x, y, z) = (axis.x / n, axis.y / n, axis.z / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rotation = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        RigidTransform::new(rotation, translation)
    }

    /// World-from-camera pose of a camera at `eye` looking straight down
    /// (optical axis -Z), image u along +X and v along -Y.
    pub fn looking_down(eye: Point3) -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: eye,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if worst > 1e-9 || (det - 1.0).abs() > 1e-9 || !self.translation.is_finite() {
            return Err(GeometryError::Invalid {
                what: "rigid transform",
                reason: format!("rotation not proper orthonormal (err {worst:.3e}, det {det})"),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn rotate(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        )
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotate(p).add(&self.translation)
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let a = &self.rotation;
        let b = &first.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        RigidTransform { rotation, translation: self.apply(&first.translation) }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let rotation = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = RigidTransform { rotation, translation: Point3::ORIGIN };
        let t = inv.rotate(&self.translation).scale(-1.0);
        RigidTransform { rotation, translation: t }
    }
}

/// Where a box came from: the detector, or a supervisor drawing it by hand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    #[default]
    Auto,
    Human,
}

/// Axis-aligned pixel box. Only `Trachea` and `Tumor` are detectable classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub class: Label,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub cls_score: f64,
    #[serde(default)]
    pub source: BoxSource,
}

impl BoundingBox2D {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let inside = self.u_min >= 0.0
            && self.v_min >= 0.0
            && self.u_max <= width as f64
            && self.v_max <= height as f64;
        let ordered = self.u_min < self.u_max && self.v_min < self.v_max;
        let class_ok = matches!(self.class, Label::Trachea | Label::Tumor);
        let score_ok = (0.0..=1.0).contains(&self.cls_score);
        if inside && ordered && class_ok && score_ok {
            Ok(())
        } else {
            Err(GeometryError::Invalid {
                what: "bounding box",
                reason: format!("{self:?} is not a valid box in a {width}x{height} image"),
            })
        }
    }

    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    /// Pixel (u, v) is inside when its integer coordinate lies in the
    /// half-open box `[min, max)`.
    #[inline]
    pub fn contains(&self, u: usize, v: usize) -> bool {
        let (u, v) = (u as f64, v as f64);
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn bbox_iou(a: &BoundingBox2D, b: &BoundingBox2D) -> f64 {
    let iw = (a.u_max.min(b.u_max) - a.u_min.max(b.u_min)).max(0.0);
    let ih = (a.v_max.min(b.v_max) - a.v_min.max(b.v_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(GeometryError::Invalid {
                what: "mask",
                reason: format!("{} bits for {width}x{height}", bits.len()),
            });
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask { width, height, bits: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.bits[v * self.width + u] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Back-projects every masked pixel with a valid depth into the camera frame,
/// in row-major scan order.
pub fn project_depth_to_cloud(
    depth: &DepthImage,
    mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
) -> Result<PointCloud> {
    if mask.width != depth.width || mask.height != depth.height {
        return Err(GeometryError::DimensionMismatch {
            what: "mask",
            got_w: mask.width,
            got_h: mask.height,
            want_w: depth.width,
            want_h: depth.height,
        });
    }
    intrinsics.validate()?;
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v);
            if mask.get(u, v) && z > 0.0 {
                points.push(intrinsics.unproject(u as f64, v as f64, z));
            }
        }
    }
    Ok(PointCloud { points, labels: None })
}

pub fn transform_cloud(cloud: &PointCloud, pose: &RigidTransform) -> Result<PointCloud> {
    pose.validate()?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        labels: cloud.labels.clone(),
    })
}

/// Uniform hash grid for fixed-radius neighbor queries.
struct RadiusIndex<'a> {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
    points: &'a [Point3],
}

impl<'a> RadiusIndex<'a> {
    fn new(points: &'a [Point3], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        RadiusIndex { cell, buckets, points }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    fn any_within(&self, q: &Point3, radius: f64) -> bool {
        let r2 = radius * radius;
        let (kx, ky, kz) = Self::key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        if bucket.iter().any(|&i| self.points[i].distance_sq(q) <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Default neighbor radius used when subtracting one cloud from another.
pub const DEFAULT_SUBTRACTION_RADIUS_MM: f64 = 0.5;

/// Keeps the points of `base` whose nearest neighbor in `removal` is farther
/// than `radius`. Order of the survivors is preserved.
pub fn subtract_cloud(base: &PointCloud, removal: &PointCloud, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(GeometryError::Invalid {
            what: "subtraction radius",
            reason: format!("{radius} must be positive"),
        });
    }
    if removal.is_empty() {
        return Ok(base.clone());
    }
    let index = RadiusIndex::new(&removal.points, radius);
    Ok(base.select(|i| !index.any_within(&base.points[i], radius)))
}
