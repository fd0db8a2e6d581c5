//! Deformation vector fields in voxel units, backward warping and its exact
//! adjoint.
//!
//! `warp(V, D)(x) = V(x + D(x))` with trilinear interpolation and zero outside
//! the grid. The adjoint splats every output voxel back onto the eight source
//! corners with the same weights.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_payload, encode_payload, Sidecar};
use crate::volume::{trilinear_corners, Grid3, Volume3};

#[derive(Debug, Clone, PartialEq)]
pub struct Dvf {
    grid: Grid3,
    /// x, y, z displacement components, voxel units, x-fastest.
    comps: [Vec<f64>; 3],
}

impl Dvf {
    pub fn zeros(grid: Grid3) -> Self {
        let n = grid.len();
        Self {
            grid,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn from_components(grid: Grid3, comps: [Vec<f64>; 3]) -> Result<Self> {
        grid.validate()?;
        for c in &comps {
            if c.len() != grid.len() {
                return Err(Error::DimMismatch {
                    expected: vec![grid.len()],
                    actual: vec![c.len()],
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("displacements must be finite"));
            }
        }
        Ok(Self { grid, comps })
    }

    /// Constant displacement (voxel units) everywhere.
    pub fn uniform(grid: Grid3, d: [f64; 3]) -> Self {
        let n = grid.len();
        Self {
            grid,
            comps: [vec![d[0]; n], vec![d[1]; n], vec![d[2]; n]],
        }
    }

    /// Build from a field given in mm.
    pub fn from_mm(grid: Grid3, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut d = Self::zeros(grid);
        for i in 0..grid.len() {
            let [x, y, z] = grid.coords(i);
            let m = f(grid.voxel_center(x, y, z));
            for a in 0..3 {
                d.comps[a][i] = m[a] / grid.spacing[a];
            }
        }
        d
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    /// Displacement of voxel `i` in mm.
    pub fn at_mm(&self, i: usize) -> [f64; 3] {
        let d = self.at(i);
        [0, 1, 2].map(|a| d[a] * self.grid.spacing[a])
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let d = self.at(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    fn check(&self, vol: &Volume3) -> Result<()> {
        if vol.dims() != self.grid.dims {
            return Err(Error::DimMismatch {
                expected: self.grid.dims.to_vec(),
                actual: vol.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn sample_point(&self, i: usize) -> [f64; 3] {
        let [x, y, z] = self.grid.coords(i);
        let d = self.at(i);
        [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
    }
}

/// Backward warp: `out(x) = vol(x + d(x))`.
pub fn warp(vol: &Volume3, d: &Dvf) -> Result<Volume3> {
    d.check(vol)?;
    let mut out = Volume3::zeros(*vol.grid());
    let plane = d.grid.dims[0] * d.grid.dims[1];
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for (j, o) in slab.iter_mut().enumerate() {
            *o = vol.sample_trilinear_index(d.sample_point(z * plane + j));
        }
    });
    Ok(out)
}

/// Transpose of [`warp`].
pub fn warp_adjoint(vol: &Volume3, d: &Dvf) -> Result<Volume3> {
    d.check(vol)?;
    let mut out = Volume3::zeros(*vol.grid());
    let dims = d.grid.dims;
    let src = vol.data();
    let dst = out.data_mut();
    for (i, &v) in src.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        trilinear_corners(&dims, d.sample_point(i), |j, w| dst[j] += w * v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DvfSidecar {
    dims: Vec<usize>,
    spacing: [f64; 3],
    origin: [f64; 3],
    units: String,
    components: Vec<String>,
}

fn component_path(prefix: &Path, axis: usize) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push([".dx.vol", ".dy.vol", ".dz.vol"][axis]);
    PathBuf::from(s)
}

fn header_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".dvf.json");
    PathBuf::from(s)
}

impl Dvf {
    /// Parse a DVF from its shared sidecar and the three component payloads.
    pub fn decode(header: &[u8], payloads: [&[u8]; 3]) -> Result<Self> {
        let sc: DvfSidecar = serde_json::from_slice(header).map_err(|e| Error::Sidecar(e.to_string()))?;
        if sc.units != "voxel" {
            return Err(Error::Sidecar(format!("unsupported DVF units {:?}", sc.units)));
        }
        if sc.dims.len() != 3 || sc.dims.contains(&0) {
            return Err(Error::Sidecar("DVF dims must be three values >= 1".into()));
        }
        let grid = Grid3::new([sc.dims[0], sc.dims[1], sc.dims[2]], sc.spacing, sc.origin)
            .map_err(|e| Error::Sidecar(e.to_string()))?;
        let shape = Sidecar {
            dims: sc.dims.clone(),
            spacing: None,
            origin: None,
            layout: None,
            step_len: None,
        };
        let dx = decode_payload(&shape, payloads[0])?;
        let dy = decode_payload(&shape, payloads[1])?;
        let dz = decode_payload(&shape, payloads[2])?;
        Dvf::from_components(grid, [dx, dy, dz])
    }
}

/// Writes `prefix.dx.vol`, `prefix.dy.vol`, `prefix.dz.vol` and the shared
/// `prefix.dvf.json`.
pub fn write_dvf(d: &Dvf, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let names: Vec<String> = (0..3)
        .map(|a| {
            component_path(prefix, a)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let sc = DvfSidecar {
        dims: d.grid.dims.to_vec(),
        spacing: d.grid.spacing,
        origin: d.grid.origin,
        units: "voxel".into(),
        components: names,
    };
    for a in 0..3 {
        fs::write(component_path(prefix, a), encode_payload(&d.comps[a])?)?;
    }
    fs::write(header_path(prefix), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

pub fn read_dvf(prefix: impl AsRef<Path>) -> Result<Dvf> {
    let prefix = prefix.as_ref();
    let hp = header_path(prefix);
    let header = fs::read(&hp).map_err(|e| Error::Sidecar(format!("{}: {e}", hp.display())))?;
    let dx = fs::read(component_path(prefix, 0))?;
    let dy = fs::read(component_path(prefix, 1))?;
    let dz = fs::read(component_path(prefix, 2))?;
    Dvf::decode(&header, [&dx, &dy, &dz])
}
