use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PhantomError, Result, SceneState};
use crate::geometry::{CameraIntrinsics, DepthImage, Label, Point3, RigidTransform};

/// Pinhole camera placed in the world, plus its depth noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// World-from-camera.
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of additive Gaussian depth noise, mm.
    pub depth_noise_sigma: f64,
    pub noise_seed: u64,
}

impl CameraModel {
    /// Top-down camera 250 mm above the tumor station: 256x256 pixels,
    /// 640 px focal length (about 0.39 mm per pixel at the tissue).
    pub fn overhead(scene: &SceneState) -> CameraModel {
        CameraModel {
            pose: RigidTransform::looking_down(Point3::new(0.0, scene.spec().tumor.station, 250.0)),
            intrinsics: CameraIntrinsics { fx: 640.0, fy: 640.0, cx: 128.0, cy: 128.0 },
            width: 256,
            height: 256,
            depth_noise_sigma: 0.2,
            noise_seed: 0,
        }
    }

    /// Millimeters per pixel at the given depth.
    pub fn pixel_pitch(&self, depth: f64) -> f64 {
        depth / self.intrinsics.fx
    }
}

/// Per-pixel class image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Option<Self> {
        (labels.len() == width * height).then_some(LabelImage { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Label {
        self.labels[v * self.width + u]
    }

    pub fn values(&self) -> &[Label] {
        &self.labels
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// One simulated capture.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub depth: DepthImage,
    pub labels: LabelImage,
    pub intrinsics: CameraIntrinsics,
    /// World-from-camera.
    pub pose: RigidTransform,
}

const MARCH_STEP_MM: f64 = 0.25;

struct Ray {
    origin: Point3,
    dir: Point3,
}

impl Ray {
    #[inline]
    fn at(&self, s: f64) -> Point3 {
        self.origin.add(&self.dir.scale(s))
    }
}

/// First intersection with the trachea height field. Rays that would enter
/// the tissue through the trough's cut edges are treated as misses.
fn hit_trachea(scene: &SceneState, ray: &Ray) -> Option<f64> {
    let surf = scene.trachea();
    let (zmin, zmax) = surf.z_range();
    if ray.dir.z >= 0.0 {
        return None;
    }
    let s_top = ((zmax + 1.0 - ray.origin.z) / ray.dir.z).max(0.0);
    let s_bot = (zmin - 1.0 - ray.origin.z) / ray.dir.z;
    if s_bot <= s_top {
        return None;
    }
    let f = |s: f64| -> Option<f64> {
        let p = ray.at(s);
        surf.contains(p.x, p.y).then(|| p.z - surf.height(p.x, p.y))
    };
    let ds = MARCH_STEP_MM / ray.dir.norm();
    let mut s_prev = s_top;
    let mut f_prev = f(s_prev);
    let mut s = s_top;
    while s < s_bot {
        s = (s + ds).min(s_bot);
        let fs = f(s);
        match (f_prev, fs) {
            (Some(fp), Some(fc)) if fp > 0.0 && fc <= 0.0 => {
                let (mut lo, mut hi) = (s_prev, s);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    match f(mid) {
                        Some(v) if v > 0.0 => lo = mid,
                        _ => hi = mid,
                    }
                    if hi - lo < 1e-13 * hi.max(1.0) {
                        break;
                    }
                }
                return Some(hi);
            }
            (_, Some(fc)) if fc <= 0.0 => return None,
            _ => {}
        }
        s_prev = s;
        f_prev = fs;
    }
    None
}

/// First visible tumor voxel along the ray (Amanatides-Woo traversal).
/// Returns the entry parameter and voxel index.
fn hit_tumor(scene: &SceneState, ray: &Ray) -> Option<(f64, usize)> {
    let g = scene.tumor();
    if g.is_empty() {
        return None;
    }
    let res = g.resolution();
    let o = g.origin();
    let dims = g.dims();
    let lo = [o.x, o.y, o.z];
    let hi = [
        o.x + dims[0] as f64 * res,
        o.y + dims[1] as f64 * res,
        o.z + dims[2] as f64 * res,
    ];
    let orig = [ray.origin.x, ray.origin.y, ray.origin.z];
    let dir = [ray.dir.x, ray.dir.y, ray.dir.z];

    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if orig[a] < lo[a] || orig[a] > hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - orig[a]) / dir[a];
            let tb = (hi[a] - orig[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return None;
    }

    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = orig[a] + t0 * dir[a];
        let c = (((p - lo[a]) / res).floor() as i64).clamp(0, dims[a] as i64 - 1);
        cell[a] = c;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (lo[a] + (c + 1) as f64 * res - orig[a]) / dir[a];
            t_delta[a] = res / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (lo[a] + c as f64 * res - orig[a]) / dir[a];
            t_delta[a] = -res / dir[a];
        }
    }

    let mut t_entry = t0;
    loop {
        let idx = g.index(cell[0] as usize, cell[1] as usize, cell[2] as usize);
        if g.occupied(idx) && !scene.is_peeled(&g.center_of(idx)) {
            return Some((t_entry, idx));
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > t1 {
            return None;
        }
        t_entry = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

impl SceneState {
    /// Ray-casts a depth and class image. Depth is the optical-axis
    /// coordinate of the first hit; pixel (u, v) samples the ray through
    /// the integer pixel coordinate, matching the back-projection formula.
    pub fn render_snapshot(&self, camera: &CameraModel) -> Result<Snapshot> {
        camera.intrinsics.validate()?;
        camera.pose.validate()?;
        if camera.width == 0 || camera.height == 0 {
            return Err(PhantomError::Contract("image size must be non-zero".into()));
        }
        let k = camera.intrinsics;
        let (w, h) = (camera.width, camera.height);

        let rows: Vec<Vec<(f64, Label)>> = (0..h)
            .into_par_iter()
            .map(|v| {
                (0..w)
                    .map(|u| {
                        let dir_cam = Point3::new(
                            (u as f64 - k.cx) / k.fx,
                            (v as f64 - k.cy) / k.fy,
                            1.0,
                        );
                        let ray = Ray {
                            origin: camera.pose.translation,
                            dir: camera.pose.rotate(&dir_cam),
                        };
                        let tr = hit_trachea(self, &ray);
                        let tu = hit_tumor(self, &ray);
                        match (tr, tu) {
                            (_, Some((st, idx))) if tr.is_none_or(|s| st < s) => {
                                let label =
                                    if self.tumor().is_char(idx) { Label::Char } else { Label::Tumor };
                                (st, label)
                            }
                            (Some(s), _) => (s, Label::Trachea),
                            _ => (0.0, Label::Background),
                        }
                    })
                    .collect()
            })
            .collect();

        let mut depth = Vec::with_capacity(w * h);
        let mut labels = Vec::with_capacity(w * h);
        for (d, l) in rows.into_iter().flatten() {
            depth.push(d);
            labels.push(l);
        }
        if labels.iter().all(|l| *l == Label::Background) {
            return Err(PhantomError::EmptySnapshot);
        }
        if camera.depth_noise_sigma > 0.0 {
            let normal = Normal::new(0.0, camera.depth_noise_sigma)
                .map_err(|e| PhantomError::Contract(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(camera.noise_seed);
            for d in depth.iter_mut().filter(|d| **d > 0.0) {
                *d = (*d + normal.sample(&mut rng)).max(1e-6);
            }
        }
        Ok(Snapshot {
            depth: DepthImage::new(w, h, depth)?,
            labels: LabelImage { width: w, height: h, labels },
            intrinsics: k,
            pose: camera.pose,
        })
    }
}
