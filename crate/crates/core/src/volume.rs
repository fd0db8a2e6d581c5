//! Dense scalar grids: 3D volumes, detector views and ray volumes.
//!
//! Values are held as `f64` in memory and stored as little-endian `f32` on
//! disk (see [`crate::io`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point3};

/// Placement of a voxel grid in mm. `origin` is the center of voxel (0,0,0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Point3,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose voxel-center bounding box is centered on the isocenter.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -(dims[a] as f64 - 1.0) / 2.0 * spacing[a]);
        Self::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::param("grid dims must be >= 1"));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("grid spacing must be positive"));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("grid origin must be finite"));
        }
        self.checked_len()
            .ok_or_else(|| Error::param("grid too large"))
            .map(|_| ())
    }

    pub(crate) fn checked_len(&self) -> Option<usize> {
        self.dims[0].checked_mul(self.dims[1])?.checked_mul(self.dims[2])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3 {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel-index coordinates of a point.
    #[inline]
    pub fn to_index_space(&self, p: Point3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Voxel-center bounding box expanded by half a voxel.
    pub fn bbox(&self) -> Aabb {
        let min = [0, 1, 2].map(|a| self.origin[a] - 0.5 * self.spacing[a]);
        let max = [0, 1, 2].map(|a| self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a]);
        Aabb { min, max }
    }

    /// Flat index of the voxel whose center is nearest to `p`.
    ///
    /// Ties round toward the lower index on each axis, so a point exactly on
    /// the lower face of the support is outside.
    #[inline]
    pub fn nearest_index(&self, p: Point3) -> Option<usize> {
        let c = self.to_index_space(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = (c[a] - 0.5).ceil();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(self.index(idx[0], idx[1], idx[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: Grid3,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn zeros(grid: Grid3) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn filled(grid: Grid3, value: f64) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    pub fn from_data(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::DimMismatch {
                expected: vec![grid.len()],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("volume values must be finite"));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.grid == other.grid
    }

    pub(crate) fn check_dims(&self, other: &Volume3) -> Result<()> {
        if self.grid.dims != other.grid.dims {
            return Err(Error::DimMismatch {
                expected: self.grid.dims.to_vec(),
                actual: other.grid.dims.to_vec(),
            });
        }
        Ok(())
    }

    pub fn sample_nearest(&self, p: Point3) -> f64 {
        match self.grid.nearest_index(p) {
            Some(i) => self.data[i],
            None => 0.0,
        }
    }

    pub fn sample_trilinear(&self, p: Point3) -> f64 {
        self.sample_trilinear_index(self.grid.to_index_space(p))
    }

    /// Trilinear interpolation at continuous voxel-index coordinates.
    /// Corners outside the grid contribute zero.
    #[inline]
    pub fn sample_trilinear_index(&self, c: [f64; 3]) -> f64 {
        let mut acc = 0.0;
        trilinear_corners(&self.grid.dims, c, |i, w| acc += w * self.data[i]);
        acc
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn dot(&self, other: &Volume3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, alpha: f64) -> Volume3 {
        Volume3 {
            grid: self.grid,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &Volume3) -> Volume3 {
        Volume3 {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + alpha * b).collect(),
        }
    }
}

/// Calls `f(flat_index, weight)` for each in-grid corner of the trilinear
/// stencil at `c`. Weights of in-grid corners are exactly those a zero-padded
/// trilinear interpolation would use.
#[inline]
pub(crate) fn trilinear_corners(dims: &[usize; 3], c: [f64; 3], mut f: impl FnMut(usize, f64)) {
    let fl = [c[0].floor(), c[1].floor(), c[2].floor()];
    // entire stencil outside
    for a in 0..3 {
        if !(fl[a] >= -1.0 && fl[a] < dims[a] as f64) {
            return;
        }
    }
    let fr = [c[0] - fl[0], c[1] - fl[1], c[2] - fl[2]];
    let base = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
    for dz in 0..2 {
        let z = base[2] + dz;
        if z < 0 || z >= dims[2] as i64 {
            continue;
        }
        let wz = if dz == 0 { 1.0 - fr[2] } else { fr[2] };
        for dy in 0..2 {
            let y = base[1] + dy;
            if y < 0 || y >= dims[1] as i64 {
                continue;
            }
            let wy = if dy == 0 { 1.0 - fr[1] } else { fr[1] };
            for dx in 0..2 {
                let x = base[0] + dx;
                if x < 0 || x >= dims[0] as i64 {
                    continue;
                }
                let wx = if dx == 0 { 1.0 - fr[0] } else { fr[0] };
                let i = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                f(i, wx * wy * wz);
            }
        }
    }
}

/// One detector image, w-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl View {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("view dims must be >= 1"));
        }
        if data.len() != width * height {
            return Err(Error::DimMismatch {
                expected: vec![width, height],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("view values must be finite"));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, w: usize, h: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn set(&mut self, w: usize, h: usize, v: f64) {
        self.data[h * self.width + w] = v;
    }
}

/// Per-pixel ray samples `R(w, h, s)`, s-fastest within each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RayVolume {
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    /// Mean step length (mm) over pixels whose ray hits the volume.
    pub step_len: f64,
    pub data: Vec<f64>,
}

impl RayVolume {
    pub fn zeros(width: usize, height: usize, steps: usize) -> Self {
        Self {
            width,
            height,
            steps,
            step_len: 0.0,
            data: vec![0.0; width * height * steps],
        }
    }

    pub fn from_data(width: usize, height: usize, steps: usize, step_len: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || steps == 0 {
            return Err(Error::param("ray volume dims must be >= 1"));
        }
        if data.len() != width * height * steps {
            return Err(Error::DimMismatch {
                expected: vec![width, height, steps],
                actual: vec![data.len()],
            });
        }
        if !step_len.is_finite() || step_len < 0.0 || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("ray volume values must be finite"));
        }
        Ok(Self {
            width,
            height,
            steps,
            step_len,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.width, self.height, self.steps]
    }

    #[inline]
    pub fn index(&self, w: usize, h: usize, s: usize) -> usize {
        (h * self.width + w) * self.steps + s
    }

    pub fn get(&self, w: usize, h: usize, s: usize) -> f64 {
        self.data[self.index(w, h, s)]
    }

    /// The S samples of one pixel's ray.
    pub fn ray(&self, w: usize, h: usize) -> &[f64] {
        let i = self.index(w, h, 0);
        &self.data[i..i + self.steps]
    }
}
