//! Regular sampling grids and scalar volumes.
//!
//! All spatial data in the pipeline lives on axis-aligned regular grids.
//! Volumes are stored C-order with z fastest, i.e. index
//! `(i * ny + j) * nz + k` for voxel `(i, j, k)`, matching the on-disk
//! layout used by the CLI crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid spacing must be positive, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("grid dims must be at least 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("grids do not match: {0}")]
    Mismatch(String),
}

/// Axis-aligned regular sampling grid in the millimetre world (or probe)
/// frame. `origin_mm` is the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_mm: [f64; 3],
    pub spacing_mm: [f64; 3],
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(
        origin_mm: [f64; 3],
        spacing_mm: [f64; 3],
        dims: [usize; 3],
    ) -> Result<Self, GridError> {
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(GridError::NonPositiveSpacing(spacing_mm));
        }
        if dims.iter().any(|&d| d < 1) {
            return Err(GridError::EmptyDims(dims));
        }
        Ok(Self {
            origin_mm,
            spacing_mm,
            dims,
        })
    }

    /// Grid of `dims` voxels at isotropic-or-not `spacing`, centered on
    /// `center_mm`.
    pub fn centered(
        center_mm: [f64; 3],
        spacing_mm: [f64; 3],
        dims: [usize; 3],
    ) -> Result<Self, GridError> {
        let origin = [
            center_mm[0] - 0.5 * (dims[0] as f64 - 1.0) * spacing_mm[0],
            center_mm[1] - 0.5 * (dims[1] as f64 - 1.0) * spacing_mm[1],
            center_mm[2] - 0.5 * (dims[2] as f64 - 1.0) * spacing_mm[2],
        ];
        Self::new(origin, spacing_mm, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        ]
    }

    /// Continuous voxel coordinates of a world point (0 at the center of
    /// voxel 0 along each axis).
    #[inline]
    pub fn voxel_coords(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin_mm[0]) / self.spacing_mm[0],
            (p[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (p[2] - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// Physical extent spanned by the voxel centers plus one voxel, per axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing_mm[0],
            self.dims[1] as f64 * self.spacing_mm[1],
            self.dims[2] as f64 * self.spacing_mm[2],
        ]
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]
    }
}

/// Half-open voxel index box `[lo, hi)`, used to designate noise regions and
/// other sub-volumes by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl IndexBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        (0..3)
            .map(|a| self.hi[a].saturating_sub(self.lo[a]))
            .product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let lo = self.lo;
        let hi = self.hi;
        (lo[0]..hi[0]).flat_map(move |i| {
            (lo[1]..hi[1]).flat_map(move |j| (lo[2]..hi[2]).map(move |k| (i, j, k)))
        })
    }
}

/// Real scalar field sampled on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let mut v = Self::zeros(grid);
        let [nx, ny, nz] = v.grid.dims;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let idx = v.grid.index(i, j, k);
                    v.data[idx] = f(v.grid.voxel_center(i, j, k));
                }
            }
        }
        v
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> [usize; 3] {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (idx, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = idx;
            }
        }
        let [_, ny, nz] = self.grid.dims;
        [best / (ny * nz), (best / nz) % ny, best % nz]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Trilinear sample at continuous voxel coordinates. Coordinates exactly
    /// on integer lattice points return the stored value bit-exactly; samples
    /// outside the grid return 0.
    pub fn sample_voxel_coords(&self, u: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        let dims = [nx as f64, ny as f64, nz as f64];
        for a in 0..3 {
            if u[a] < 0.0 || u[a] > dims[a] - 1.0 {
                return 0.0;
            }
        }
        let i0 = [
            (u[0].floor() as usize).min(nx - 1),
            (u[1].floor() as usize).min(ny - 1),
            (u[2].floor() as usize).min(nz - 1),
        ];
        let f = [
            u[0] - i0[0] as f64,
            u[1] - i0[1] as f64,
            u[2] - i0[2] as f64,
        ];
        if f == [0.0, 0.0, 0.0] {
            return self.get(i0[0], i0[1], i0[2]);
        }
        let i1 = [
            (i0[0] + 1).min(nx - 1),
            (i0[1] + 1).min(ny - 1),
            (i0[2] + 1).min(nz - 1),
        ];
        let mut acc = 0.0;
        for (di, wi) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
            if wi == 0.0 {
                continue;
            }
            for (dj, wj) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
                if wj == 0.0 {
                    continue;
                }
                for (dk, wk) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
                    if wk == 0.0 {
                        continue;
                    }
                    acc += wi * wj * wk * self.get(di, dj, dk);
                }
            }
        }
        acc
    }

    /// Mean and population variance over an index box.
    pub fn box_stats(&self, region: &IndexBox) -> (f64, f64) {
        let n = region.len();
        assert!(n > 0, "empty region");
        let mut sum = 0.0;
        for (i, j, k) in region.iter() {
            sum += self.get(i, j, k);
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for (i, j, k) in region.iter() {
            let d = self.get(i, j, k) - mean;
            ss += d * d;
        }
        (mean, ss / n as f64)
    }
}
