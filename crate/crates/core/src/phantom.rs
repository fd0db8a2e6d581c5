//! Analytic breathing thorax phantom with exact inter-phase motion.
//!
//! The static anatomy (body, lungs, rib bands, tumor) lives in a rest frame.
//! Phase `i` is the rest anatomy pushed through a smooth superior-inferior
//! displacement `T_i(p) = p + u_i(p) z`, where `u_i` is a sum of two bumps
//! (tumor and diaphragm) with flat plateaus and cosine falloff, scaled by
//! `sin(2 pi i / N)`. Rendering pulls back through `T_i^-1`, so the analytic
//! field `D_{i->j}(x) = T_i(T_j^-1(x)) - x` warps phase `i` onto phase `j`
//! exactly (up to interpolation).

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dvf::Dvf;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::volume::{Grid3, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Point3,
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: Point3) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let q = (p[a] - self.center[a]) / self.radii[a];
            s += q * q;
        }
        s <= 1.0
    }
}

/// Separable box plateau with cosine falloff: weight 1 within `plateau`
/// (half-widths, mm) of `center`, decaying to 0 over `falloff` mm per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Point3,
    pub plateau: [f64; 3],
    pub falloff: [f64; 3],
}

fn cos_fall(d: f64, plateau: f64, falloff: f64) -> (f64, f64) {
    // returns (value, derivative wrt d)
    if d <= plateau {
        (1.0, 0.0)
    } else if d < plateau + falloff {
        let t = PI * (d - plateau) / falloff;
        (0.5 * (1.0 + t.cos()), -0.5 * PI / falloff * t.sin())
    } else {
        (0.0, 0.0)
    }
}

impl Bump {
    pub fn weight(&self, p: Point3) -> f64 {
        let mut w = 1.0;
        for a in 0..3 {
            w *= cos_fall((p[a] - self.center[a]).abs(), self.plateau[a], self.falloff[a]).0;
            if w == 0.0 {
                break;
            }
        }
        w
    }

    /// Derivative of the weight along z.
    fn dweight_dz(&self, p: Point3) -> f64 {
        let wx = cos_fall((p[0] - self.center[0]).abs(), self.plateau[0], self.falloff[0]).0;
        let wy = cos_fall((p[1] - self.center[1]).abs(), self.plateau[1], self.falloff[1]).0;
        let dz = p[2] - self.center[2];
        let (_, dd) = cos_fall(dz.abs(), self.plateau[2], self.falloff[2]);
        wx * wy * dd * dz.signum()
    }

    fn support_contains(&self, p: Point3) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() < self.plateau[a] + self.falloff[a])
    }

    /// Largest |dw/dz|.
    fn max_slope_z(&self) -> f64 {
        PI / (2.0 * self.falloff[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RibBands {
    /// Shell between these fractions of the body's axial elliptical radius.
    pub inner: f64,
    pub outer: f64,
    /// Superior-inferior band period and band thickness, mm.
    pub period: f64,
    pub thickness: f64,
    /// Bands exist for |z - body center z| below this, mm.
    pub half_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phantom4D {
    pub n_phases: usize,
    pub body: Ellipsoid,
    pub body_value: f64,
    pub lungs: Vec<Ellipsoid>,
    pub lung_value: f64,
    pub ribs: RibBands,
    pub rib_value: f64,
    pub tumor_center: Point3,
    pub tumor_radius: f64,
    pub tumor_value: f64,
    /// Peak superior-inferior tumor excursion, mm.
    pub tumor_amplitude: f64,
    /// Tumor motion envelope; `center` should equal `tumor_center`.
    pub tumor_envelope: Bump,
    /// Peak diaphragm excursion, mm.
    pub diaphragm_amplitude: f64,
    pub diaphragm_envelope: Bump,
}

impl Default for Phantom4D {
    fn default() -> Self {
        Self::desk()
    }
}

impl Phantom4D {
    /// Thorax sized for a 64^3 grid at 3 mm (192 mm field of view), four phases.
    pub fn desk() -> Self {
        let tumor_center = [-37.5, 1.5, 16.5];
        Self {
            n_phases: 4,
            body: Ellipsoid {
                center: [0.0; 3],
                radii: [88.0, 66.0, 88.0],
            },
            body_value: 0.2,
            lungs: vec![
                Ellipsoid {
                    center: [-38.0, 0.0, 10.0],
                    radii: [28.0, 40.0, 55.0],
                },
                Ellipsoid {
                    center: [38.0, 0.0, 10.0],
                    radii: [28.0, 40.0, 55.0],
                },
            ],
            lung_value: 0.02,
            ribs: RibBands {
                inner: 0.84,
                outer: 0.93,
                period: 24.0,
                thickness: 9.0,
                half_height: 66.0,
            },
            rib_value: 0.5,
            tumor_center,
            tumor_radius: 10.0,
            tumor_value: 0.3,
            tumor_amplitude: 9.0,
            tumor_envelope: Bump {
                center: tumor_center,
                plateau: [12.0, 12.0, 12.0],
                falloff: [14.0, 14.0, 20.0],
            },
            diaphragm_amplitude: 6.0,
            diaphragm_envelope: Bump {
                center: [0.0, 0.0, -45.0],
                plateau: [60.0, 36.0, 8.0],
                falloff: [14.0, 14.0, 14.0],
            },
        }
    }

    /// Same anatomy without any motion.
    pub fn static_desk() -> Self {
        Self {
            tumor_amplitude: 0.0,
            diaphragm_amplitude: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phases < 2 {
            return Err(Error::param("phantom needs at least two phases"));
        }
        let positive = |r: &[f64; 3]| r.iter().all(|v| v.is_finite() && *v > 0.0);
        if !positive(&self.body.radii) || self.lungs.iter().any(|l| !positive(&l.radii)) {
            return Err(Error::param("ellipsoid radii must be positive"));
        }
        if !(self.tumor_radius > 0.0) {
            return Err(Error::param("tumor radius must be positive"));
        }
        for b in [&self.tumor_envelope, &self.diaphragm_envelope] {
            if !(positive(&b.falloff) && b.plateau.iter().all(|p| *p >= 0.0)) {
                return Err(Error::param("bump plateau must be >= 0 and falloff > 0"));
            }
        }
        let st = self.tumor_amplitude.abs() * self.tumor_envelope.max_slope_z();
        let sd = self.diaphragm_amplitude.abs() * self.diaphragm_envelope.max_slope_z();
        let (te, de) = (&self.tumor_envelope, &self.diaphragm_envelope);
        let supports_meet = (0..3).all(|a| {
            (te.center[a] - de.center[a]).abs() < te.plateau[a] + te.falloff[a] + de.plateau[a] + de.falloff[a]
        });
        let slope = if supports_meet { st + sd } else { st.max(sd) };
        if slope >= 1.0 {
            return Err(Error::param(format!(
                "motion not invertible: superior-inferior stretch bound {slope:.3} >= 1"
            )));
        }
        // the tumor has to ride rigidly on its plateau, untouched by the diaphragm
        if (0..3).any(|a| (self.tumor_center[a] - te.center[a]).abs() + self.tumor_radius > te.plateau[a]) {
            return Err(Error::param("tumor must lie inside its motion plateau"));
        }
        let overlap = (0..3).all(|a| {
            (te.center[a] - de.center[a]).abs()
                < te.plateau[a] + self.tumor_amplitude.abs() + de.plateau[a] + de.falloff[a]
        });
        if overlap {
            return Err(Error::param("diaphragm envelope reaches the tumor plateau"));
        }
        // tumor stays inside one lung at both motion extremes
        for off in [-self.tumor_amplitude.abs(), self.tumor_amplitude.abs()] {
            let c = [self.tumor_center[0], self.tumor_center[1], self.tumor_center[2] + off];
            let r = self.tumor_radius;
            let mut probes = vec![c];
            for a in 0..3 {
                for s in [-1.0, 1.0] {
                    let mut p = c;
                    p[a] += s * r;
                    probes.push(p);
                }
            }
            if !self.lungs.iter().any(|l| probes.iter().all(|p| l.contains(*p))) {
                return Err(Error::param("tumor leaves the lung during motion"));
            }
        }
        Ok(())
    }

    fn phase_factor(&self, i: usize) -> f64 {
        (2.0 * PI * i as f64 / self.n_phases as f64).sin()
    }

    /// Superior-inferior tumor offset of phase `i`, mm.
    pub fn tumor_offset(&self, i: usize) -> f64 {
        self.tumor_amplitude * self.phase_factor(i)
    }

    pub fn diaphragm_offset(&self, i: usize) -> f64 {
        self.diaphragm_amplitude * self.phase_factor(i)
    }

    /// Phase index for a breathing-cycle position `t` (cycles; any real).
    pub fn phase_of(&self, t: f64) -> usize {
        let f = t - t.floor();
        ((f * self.n_phases as f64).floor() as usize).min(self.n_phases - 1)
    }

    /// Tumor center at phase `i`.
    pub fn tumor_center_at(&self, i: usize) -> Point3 {
        let c = self.tumor_center;
        [c[0], c[1], c[2] + self.tumor_offset(i)]
    }

    fn displacement(&self, i: usize, p: Point3) -> (f64, f64) {
        let (t, d) = (self.tumor_offset(i), self.diaphragm_offset(i));
        let u = t * self.tumor_envelope.weight(p) + d * self.diaphragm_envelope.weight(p);
        let du = t * self.tumor_envelope.dweight_dz(p) + d * self.diaphragm_envelope.dweight_dz(p);
        (u, du)
    }

    /// Rest frame to phase `i`.
    pub fn forward_map(&self, i: usize, p: Point3) -> Point3 {
        [p[0], p[1], p[2] + self.displacement(i, p).0]
    }

    /// Phase `i` to rest frame.
    pub fn inverse_map(&self, i: usize, x: Point3) -> Point3 {
        let inside = self.tumor_envelope.support_contains(x) || self.diaphragm_envelope.support_contains(x);
        if !inside || self.phase_factor(i) == 0.0 {
            return x;
        }
        // Newton on z_r + u(z_r) = z; the stretch bound keeps 1 + du > 0
        let mut p = x;
        for _ in 0..50 {
            let (u, du) = self.displacement(i, p);
            let r = p[2] + u - x[2];
            if r == 0.0 {
                break;
            }
            let step = r / (1.0 + du);
            p[2] -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        p
    }

    pub fn in_motion_envelope(&self, p: Point3) -> bool {
        self.tumor_envelope.support_contains(p) || self.diaphragm_envelope.support_contains(p)
    }

    fn in_ribs(&self, p: Point3) -> bool {
        let b = &self.body;
        let dz = p[2] - b.center[2];
        if dz.abs() > self.ribs.half_height {
            return false;
        }
        let qx = (p[0] - b.center[0]) / b.radii[0];
        let qy = (p[1] - b.center[1]) / b.radii[1];
        let rho = (qx * qx + qy * qy).sqrt();
        if rho < self.ribs.inner || rho > self.ribs.outer {
            return false;
        }
        dz.rem_euclid(self.ribs.period) < self.ribs.thickness
    }

    /// Rest-frame intensity at `p`.
    pub fn rest_value(&self, p: Point3) -> f64 {
        if !self.body.contains(p) {
            return 0.0;
        }
        let dt = [0, 1, 2].map(|a| p[a] - self.tumor_center[a]);
        if dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2] <= self.tumor_radius * self.tumor_radius {
            return self.tumor_value;
        }
        if self.lungs.iter().any(|l| l.contains(p)) {
            return self.lung_value;
        }
        if self.in_ribs(p) {
            return self.rib_value;
        }
        self.body_value
    }

    pub fn value(&self, i: usize, p: Point3) -> f64 {
        self.rest_value(self.inverse_map(i, p))
    }

    pub fn render_phantom(&self, i: usize, grid: &Grid3) -> Result<Volume3> {
        self.check_phase(i)?;
        grid.validate()?;
        let mut out = Volume3::zeros(*grid);
        let plane = grid.dims[0] * grid.dims[1];
        out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
            for (j, v) in slab.iter_mut().enumerate() {
                let [x, y, _] = grid.coords(z * plane + j);
                *v = self.value(i, grid.voxel_center(x, y, z));
            }
        });
        Ok(out)
    }

    pub fn render_all(&self, grid: &Grid3) -> Result<Vec<Volume3>> {
        (0..self.n_phases).map(|i| self.render_phantom(i, grid)).collect()
    }

    fn check_phase(&self, i: usize) -> Result<()> {
        if i >= self.n_phases {
            return Err(Error::IndexOutOfRange {
                what: "phase",
                index: i,
                limit: self.n_phases,
            });
        }
        Ok(())
    }

    /// `D_{i->j}(p)` in mm: pulling phase `i` through it yields phase `j`.
    pub fn displacement_mm(&self, i: usize, j: usize, p: Point3) -> Point3 {
        if i == j {
            return [0.0; 3];
        }
        let q = self.forward_map(i, self.inverse_map(j, p));
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    }

    /// Analytic field warping phase `i` onto phase `j`, voxel units.
    pub fn ground_truth_dvf(&self, i: usize, j: usize, grid: &Grid3) -> Result<Dvf> {
        self.check_phase(i)?;
        self.check_phase(j)?;
        if i == j {
            return Ok(Dvf::zeros(*grid));
        }
        Ok(Dvf::from_mm(*grid, |p| self.displacement_mm(i, j, p)))
    }
}
