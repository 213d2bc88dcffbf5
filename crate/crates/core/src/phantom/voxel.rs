use std::collections::VecDeque;

use crate::geometry::Point3;

/// Dense boolean occupancy grid with a parallel char-flag layer.
///
/// Voxel (i, j, k) covers `origin + [i, i+1) * resolution` on each axis; its
/// center is `origin + (i + 0.5) * resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    origin: Point3,
    resolution: f64,
    dims: [usize; 3],
    occupancy: Vec<bool>,
    char_flags: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(origin: Point3, resolution: f64, dims: [usize; 3]) -> Self {
        assert!(resolution > 0.0, "voxel resolution must be positive");
        let n = dims[0] * dims[1] * dims[2];
        VoxelGrid {
            origin,
            resolution,
            dims,
            occupancy: vec![false; n],
            char_flags: vec![false; n],
        }
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.resolution.powi(3)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Point3 {
        let r = self.resolution;
        Point3::new(
            self.origin.x + (i as f64 + 0.5) * r,
            self.origin.y + (j as f64 + 0.5) * r,
            self.origin.z + (k as f64 + 0.5) * r,
        )
    }

    pub fn center_of(&self, idx: usize) -> Point3 {
        let [i, j, k] = self.coords(idx);
        self.center(i, j, k)
    }

    #[inline]
    pub fn occupied(&self, idx: usize) -> bool {
        self.occupancy[idx]
    }

    #[inline]
    pub fn is_char(&self, idx: usize) -> bool {
        self.char_flags[idx]
    }

    pub fn set_occupied(&mut self, idx: usize, value: bool) {
        self.occupancy[idx] = value;
        if !value {
            self.char_flags[idx] = false;
        }
    }

    pub fn set_char(&mut self, idx: usize, value: bool) {
        self.char_flags[idx] = value && self.occupancy[idx];
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|o| **o).count()
    }

    pub fn char_count(&self) -> usize {
        self.char_flags.iter().filter(|c| **c).count()
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy.iter().enumerate().filter(|(_, o)| **o).map(|(i, _)| i)
    }

    pub fn char_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.char_flags.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i)
    }

    /// Inclusive index range of voxels whose centers may fall in `[lo, hi]`
    /// along `axis`, clamped to the grid. `None` when disjoint.
    pub fn index_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let o = match axis {
            0 => self.origin.x,
            1 => self.origin.y,
            _ => self.origin.z,
        };
        let n = self.dims[axis] as f64;
        let a = ((lo - o) / self.resolution - 0.5).ceil().max(0.0);
        let b = ((hi - o) / self.resolution - 0.5).floor().min(n - 1.0);
        if a > b || b < 0.0 || a >= n {
            None
        } else {
            Some((a as usize, b as usize))
        }
    }

    /// Occupied 6-neighbors of a voxel.
    pub fn neighbors6(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [i, j, k] = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        let cand = [
            (i > 0).then(|| idx - 1),
            (i + 1 < nx).then(|| idx + 1),
            (j > 0).then(|| idx - nx),
            (j + 1 < ny).then(|| idx + nx),
            (k > 0).then(|| idx - nx * ny),
            (k + 1 < nz).then(|| idx + nx * ny),
        ];
        cand.into_iter().flatten()
    }

    /// Marks every occupied voxel 6-connected to one of `seeds`.
    pub fn flood_from(&self, seeds: impl IntoIterator<Item = usize>) -> Vec<bool> {
        let mut seen = vec![false; self.occupancy.len()];
        let mut queue = VecDeque::new();
        for s in seeds {
            if self.occupancy[s] && !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(v) = queue.pop_front() {
            for n in self.neighbors6(v) {
                if self.occupancy[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        seen
    }
}
