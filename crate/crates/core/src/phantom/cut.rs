use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{PhantomError, Result, SceneState};
use crate::geometry::Point3;
use crate::planner::Waypoint;

pub const DEFAULT_KERF_MM: f64 = 1.0;

/// Cutting edge geometry. The edge is a segment of `edge_length` centered on
/// the tool tip and lying along Y; sweeping it along the path removes
/// everything within `kerf / 2` of the swept surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutTool {
    pub kerf: f64,
    pub edge_length: f64,
}

impl Default for CutTool {
    fn default() -> Self {
        CutTool { kerf: DEFAULT_KERF_MM, edge_length: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutOutcome {
    /// Total credited this cut: swept voxels, released fragments and any
    /// trachea wall material swept below the surface.
    pub removed_volume: f64,
    pub perforated: bool,
    pub char_voxels_added: usize,
    pub swept_volume: f64,
    pub released_volume: f64,
    pub trachea_volume: f64,
    pub detached: bool,
}

fn dist_point_segment(p: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(&ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (p.sub(a).dot(&ab) / len2).clamp(0.0, 1.0);
    p.distance(&a.add(&ab.scale(t)))
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    Point3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

/// Distance from `p` to the parallelogram `o + s u + t v`, s, t in [0, 1].
fn dist_point_parallelogram(p: &Point3, o: &Point3, u: &Point3, v: &Point3) -> f64 {
    let n = cross(u, v);
    let nn = n.norm();
    let edges = || {
        let ou = o.add(u);
        let ov = o.add(v);
        let ouv = ou.add(v);
        dist_point_segment(p, o, &ou)
            .min(dist_point_segment(p, o, &ov))
            .min(dist_point_segment(p, &ou, &ouv))
            .min(dist_point_segment(p, &ov, &ouv))
    };
    if nn <= 1e-12 * (u.norm() * v.norm()).max(1e-300) {
        return edges();
    }
    let d = p.sub(o);
    let (uu, uv, vv) = (u.dot(u), u.dot(v), v.dot(v));
    let (du, dv) = (d.dot(u), d.dot(v));
    let det = uu * vv - uv * uv;
    let s = (du * vv - dv * uv) / det;
    let t = (dv * uu - du * uv) / det;
    if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
        (d.dot(&n) / nn).abs()
    } else {
        edges()
    }
}

impl SceneState {
    /// Sweeps the tool along `path`, removing tumor voxels, flagging the
    /// boundary of the removed set as char, and releasing any material no
    /// longer 6-connected to the layer resting on the trachea.
    pub fn apply_cut(&mut self, path: &[Waypoint], tool: &CutTool) -> Result<CutOutcome> {
        if path.is_empty() {
            return Err(PhantomError::Contract("cut path is empty".into()));
        }
        if !(tool.kerf > 0.0) || !(tool.edge_length >= 0.0) {
            return Err(PhantomError::Contract(format!("invalid tool {tool:?}")));
        }
        if let Some(w) = path.iter().find(|w| !self.contains_point(&w.position)) {
            return Err(PhantomError::Contract(format!(
                "waypoint {:?} outside scene bounds",
                w.position
            )));
        }
        let perforated = path.iter().any(|w| {
            let p = w.position;
            p.z < self.trachea().height(p.x, p.y)
        });

        let half = tool.kerf / 2.0;
        let edge = Point3::new(0.0, tool.edge_length / 2.0, 0.0);
        let span = edge.scale(2.0);
        let segments: Vec<(Point3, Point3)> = if path.len() == 1 {
            vec![(path[0].position, path[0].position)]
        } else {
            path.windows(2).map(|w| (w[0].position, w[1].position)).collect()
        };

        let grid = self.tumor();
        let res = grid.resolution();
        let mut marked = vec![false; grid.len()];
        let mut swept = Vec::new();
        let mut trachea_cells: HashSet<(i64, i64, i64)> = HashSet::new();
        let go = grid.origin();

        for (a, b) in &segments {
            let o = a.sub(&edge);
            let u = b.sub(a);
            let lo = Point3::new(a.x.min(b.x), a.y.min(b.y) - edge.y, a.z.min(b.z))
                .sub(&Point3::new(half, half, half));
            let hi = Point3::new(a.x.max(b.x), a.y.max(b.y) + edge.y, a.z.max(b.z))
                .add(&Point3::new(half, half, half));
            let ranges = (
                grid.index_range(0, lo.x, hi.x),
                grid.index_range(1, lo.y, hi.y),
                grid.index_range(2, lo.z, hi.z),
            );
            if let (Some((i0, i1)), Some((j0, j1)), Some((k0, k1))) = ranges {
                for k in k0..=k1 {
                    for j in j0..=j1 {
                        for i in i0..=i1 {
                            let idx = grid.index(i, j, k);
                            if !grid.occupied(idx) || marked[idx] {
                                continue;
                            }
                            let c = grid.center(i, j, k);
                            if dist_point_parallelogram(&c, &o, &u, &span) <= half {
                                marked[idx] = true;
                                swept.push(idx);
                            }
                        }
                    }
                }
            }
            if perforated {
                // Wall material below the surface, sampled on the tumor lattice.
                let cell = |v: f64, o: f64| ((v - o) / res - 0.5).ceil() as i64;
                for k in cell(lo.z, go.z).. {
                    let z = go.z + (k as f64 + 0.5) * res;
                    if z > hi.z {
                        break;
                    }
                    for j in cell(lo.y, go.y).. {
                        let y = go.y + (j as f64 + 0.5) * res;
                        if y > hi.y {
                            break;
                        }
                        for i in cell(lo.x, go.x).. {
                            let x = go.x + (i as f64 + 0.5) * res;
                            if x > hi.x {
                                break;
                            }
                            let trachea = self.trachea();
                            if !trachea.contains(x, y) || z >= trachea.height(x, y) {
                                continue;
                            }
                            let c = Point3::new(x, y, z);
                            if dist_point_parallelogram(&c, &o, &u, &span) <= half {
                                trachea_cells.insert((i, j, k));
                            }
                        }
                    }
                }
            }
        }

        let voxel_volume = grid.voxel_volume();
        let grid = self.tumor_mut();
        for &idx in &swept {
            grid.set_occupied(idx, false);
        }
        let mut char_added = 0;
        for &idx in &swept {
            let neighbors: Vec<usize> = grid.neighbors6(idx).collect();
            for n in neighbors {
                if grid.occupied(n) && !grid.is_char(n) {
                    grid.set_char(n, true);
                    char_added += 1;
                }
            }
        }

        let remaining_before_release = self.tumor().occupied_count();
        let released = self.release_unanchored();
        let swept_volume = swept.len() as f64 * voxel_volume;
        let released_volume = released as f64 * voxel_volume;
        let trachea_volume = trachea_cells.len() as f64 * voxel_volume;
        let detached = released > 0 && 2 * released >= remaining_before_release;
        let removed_volume = swept_volume + released_volume + trachea_volume;
        self.credit_removed(removed_volume);
        if detached {
            self.mark_detached();
        }
        Ok(CutOutcome {
            removed_volume,
            perforated,
            char_voxels_added: char_added,
            swept_volume,
            released_volume,
            trachea_volume,
            detached,
        })
    }

    /// Removes every voxel not 6-connected to the layer within one voxel of
    /// the trachea surface. Returns the number released.
    fn release_unanchored(&mut self) -> usize {
        let grid = self.tumor();
        let res = grid.resolution();
        let [nx, ny, _] = grid.dims();
        let mut seeds = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let c = grid.center(i, j, 0);
                let s = self.trachea().height(c.x, c.y);
                if let Some((k0, k1)) = grid.index_range(2, f64::NEG_INFINITY, s + res) {
                    for k in k0..=k1 {
                        let idx = grid.index(i, j, k);
                        if grid.occupied(idx) && grid.center(i, j, k).z - s < res {
                            seeds.push(idx);
                        }
                    }
                }
            }
        }
        let anchored = grid.flood_from(seeds);
        let free: Vec<usize> = grid.occupied_indices().filter(|&i| !anchored[i]).collect();
        let grid = self.tumor_mut();
        for &idx in &free {
            grid.set_occupied(idx, false);
        }
        free.len()
    }
}
