//! Circular cone-beam acquisition geometry.
//!
//! The gantry rotates about the z axis. At angle `a` the source sits at
//! `sad * (cos a, sin a, 0)` and the flat detector faces it at distance `sdd`
//! along the central axis. The detector u axis is tangential
//! (`(-sin a, cos a, 0)`), the v axis is parallel to z, and pixel centers sit at
//! half-integer offsets so that an even detector has no pixel on its axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    /// Source to isocenter distance, mm.
    pub sad: f64,
    /// Source to detector distance, mm.
    pub sdd: f64,
    pub det_w: usize,
    pub det_h: usize,
    /// mm per pixel.
    pub det_spacing_u: f64,
    pub det_spacing_v: f64,
    /// Lateral detector shift, mm.
    pub det_offset_u: f64,
    pub det_offset_v: f64,
    /// Gantry angles in radians.
    pub angles: Vec<f64>,
}

/// Axis-aligned bounding box in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// A source-to-pixel ray with its intersection interval against a box.
///
/// `t_entry`/`t_exit` are distances from `origin` along `direction`. An empty
/// interval (`t_exit <= t_entry`) means the segment never enters the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Point3,
    pub t_entry: f64,
    pub t_exit: f64,
}

impl Ray {
    pub fn is_empty(&self) -> bool {
        self.t_exit <= self.t_entry
    }

    pub fn length(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.t_exit - self.t_entry
        }
    }

    pub fn at(&self, t: f64) -> Point3 {
        [
            self.origin[0] + self.direction[0] * t,
            self.origin[1] + self.direction[1] * t,
            self.origin[2] + self.direction[2] * t,
        ]
    }
}

impl Default for ConeBeamGeometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl ConeBeamGeometry {
    pub fn new(
        sad: f64,
        sdd: f64,
        (det_w, det_h): (usize, usize),
        (det_spacing_u, det_spacing_v): (f64, f64),
        (det_offset_u, det_offset_v): (f64, f64),
        angles: Vec<f64>,
    ) -> Result<Self> {
        let g = Self {
            sad,
            sdd,
            det_w,
            det_h,
            det_spacing_u,
            det_spacing_v,
            det_offset_u,
            det_offset_v,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n` equally spaced angles covering a full rotation, starting at 0.
    pub fn full_scan_angles(n: usize) -> Vec<f64> {
        (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
    }

    /// Small detector suited to 64^3 volumes at 3 mm: 64x64 pixels of 5 mm,
    /// 120 views over a full scan.
    pub fn desk() -> Self {
        Self {
            sad: 1000.0,
            sdd: 1500.0,
            det_w: 64,
            det_h: 64,
            det_spacing_u: 5.0,
            det_spacing_v: 5.0,
            det_offset_u: 0.0,
            det_offset_v: 0.0,
            angles: Self::full_scan_angles(120),
        }
    }

    /// Clinical-size scan: 256x192 detector at 1.55 mm with a 100-pixel
    /// half-fan shift, 680 views.
    pub fn clinical() -> Self {
        Self {
            sad: 1000.0,
            sdd: 1500.0,
            det_w: 256,
            det_h: 192,
            det_spacing_u: 1.55,
            det_spacing_v: 1.55,
            det_offset_u: 100.0 * 1.55,
            det_offset_v: 0.0,
            angles: Self::full_scan_angles(680),
        }
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGeometry(m.to_string()));
        if !(self.sad.is_finite() && self.sad > 0.0) {
            return bad("sad must be positive");
        }
        if !(self.sdd.is_finite() && self.sdd > self.sad) {
            return bad("sdd must exceed sad");
        }
        if self.det_w == 0 || self.det_h == 0 {
            return bad("detector must have at least one pixel per axis");
        }
        if !(self.det_spacing_u.is_finite()
            && self.det_spacing_u > 0.0
            && self.det_spacing_v.is_finite()
            && self.det_spacing_v > 0.0)
        {
            return bad("detector spacing must be positive");
        }
        if !(self.det_offset_u.is_finite() && self.det_offset_v.is_finite()) {
            return bad("detector offset must be finite");
        }
        if self.angles.is_empty() {
            return bad("at least one angle is required");
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return bad("angles must be finite");
        }
        if self.angles.len() > 1 {
            let increasing = self.angles.windows(2).all(|p| p[1] > p[0]);
            let decreasing = self.angles.windows(2).all(|p| p[1] < p[0]);
            if !(increasing || decreasing) {
                return bad("angles must be strictly monotonic");
            }
            let span = (self.angles[self.angles.len() - 1] - self.angles[0]).abs();
            if span >= 2.0 * PI {
                return bad("angles must lie within one rotation");
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let g: Self = serde_json::from_slice(bytes)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    fn angle(&self, k: usize) -> Result<f64> {
        self.angles.get(k).copied().ok_or(Error::IndexOutOfRange {
            what: "view",
            index: k,
            limit: self.angles.len(),
        })
    }

    fn check_pixel(&self, w: usize, h: usize) -> Result<()> {
        if w >= self.det_w {
            return Err(Error::IndexOutOfRange {
                what: "detector column",
                index: w,
                limit: self.det_w,
            });
        }
        if h >= self.det_h {
            return Err(Error::IndexOutOfRange {
                what: "detector row",
                index: h,
                limit: self.det_h,
            });
        }
        Ok(())
    }

    pub fn source_position(&self, k: usize) -> Result<Point3> {
        Ok(self.source_at(self.angle(k)?))
    }

    pub fn source_at(&self, angle: f64) -> Point3 {
        [self.sad * angle.cos(), self.sad * angle.sin(), 0.0]
    }

    /// Center of the (unshifted) detector plane.
    pub fn detector_center_at(&self, angle: f64) -> Point3 {
        let r = self.sad - self.sdd;
        [r * angle.cos(), r * angle.sin(), 0.0]
    }

    /// Detector-plane coordinates (u, v) in mm of the center of pixel (w, h).
    pub fn pixel_uv(&self, w: usize, h: usize) -> (f64, f64) {
        let u = (w as f64 + 0.5 - self.det_w as f64 / 2.0) * self.det_spacing_u + self.det_offset_u;
        let v = (h as f64 + 0.5 - self.det_h as f64 / 2.0) * self.det_spacing_v + self.det_offset_v;
        (u, v)
    }

    pub fn detector_pixel_position(&self, k: usize, w: usize, h: usize) -> Result<Point3> {
        let a = self.angle(k)?;
        self.check_pixel(w, h)?;
        Ok(self.pixel_position_at(a, w, h))
    }

    pub(crate) fn pixel_position_at(&self, angle: f64, w: usize, h: usize) -> Point3 {
        let c = self.detector_center_at(angle);
        let (u, v) = self.pixel_uv(w, h);
        let (s, co) = angle.sin_cos();
        [c[0] - s * u, c[1] + co * u, c[2] + v]
    }

    pub fn ray_for_pixel(&self, k: usize, w: usize, h: usize, bbox: &Aabb) -> Result<Ray> {
        let a = self.angle(k)?;
        self.check_pixel(w, h)?;
        Ok(self.ray_at(a, w, h, bbox))
    }

    /// Ray through pixel (w, h) at an arbitrary angle. Indices are not checked.
    pub fn ray_at(&self, angle: f64, w: usize, h: usize, bbox: &Aabb) -> Ray {
        let origin = self.source_at(angle);
        let target = self.pixel_position_at(angle, w, h);
        let d = sub(target, origin);
        let len = norm(d);
        let direction = [d[0] / len, d[1] / len, d[2] / len];
        let (t_entry, t_exit) = slab_interval(origin, direction, bbox, len).unwrap_or((0.0, 0.0));
        Ray {
            origin,
            direction,
            t_entry,
            t_exit,
        }
    }
}

/// Intersection of the segment `origin + t * dir`, `t in [0, t_max]`, with the box.
fn slab_interval(origin: Point3, dir: Point3, bbox: &Aabb, t_max: f64) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1: f64 = t_max;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < bbox.min[a] || origin[a] > bbox.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (bbox.min[a] - origin[a]) * inv;
        let mut tb = (bbox.max[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Point3, b: Point3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    fn geom_with(angles: Vec<f64>, w: usize, h: usize) -> ConeBeamGeometry {
        ConeBeamGeometry::new(1000.0, 1500.0, (w, h), (1.0, 1.0), (0.0, 0.0), angles).unwrap()
    }

    #[test]
    fn source_positions() {
        let g = geom_with(vec![0.0, PI / 2.0, PI], 2, 2);
        assert!(close(g.source_position(0).unwrap(), [1000.0, 0.0, 0.0], 1e-9));
        assert!(close(g.source_position(1).unwrap(), [0.0, 1000.0, 0.0], 1e-9));
        assert!(close(g.source_position(2).unwrap(), [-1000.0, 0.0, 0.0], 1e-9));
        assert!(matches!(g.source_position(3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn pixel_centers_are_half_offset() {
        let g = geom_with(vec![0.0], 2, 2);
        assert_eq!(g.pixel_uv(0, 0).0, -0.5);
        assert_eq!(g.pixel_uv(1, 0).0, 0.5);
        // at angle 0 the u axis is +y and the detector plane is x = -500
        let p = g.detector_pixel_position(0, 0, 1).unwrap();
        assert!(close(p, [-500.0, -0.5, 0.5], 1e-12));
        assert!(g.detector_pixel_position(0, 2, 0).is_err());
        assert!(g.detector_pixel_position(0, 0, 2).is_err());
    }

    #[test]
    fn half_fan_offset_shifts_by_pixels() {
        let mut g = ConeBeamGeometry::clinical();
        let (u_centered, _) = {
            g.det_offset_u = 0.0;
            g.pixel_uv(10, 0)
        };
        g.det_offset_u = 100.0 * g.det_spacing_u;
        let (u_shifted, _) = g.pixel_uv(10, 0);
        let (u_other, _) = {
            let mut c = g.clone();
            c.det_offset_u = 0.0;
            c.pixel_uv(110, 0)
        };
        assert!((u_shifted - u_other).abs() < 1e-9);
        assert!((u_shifted - u_centered - 155.0).abs() < 1e-9);
    }

    #[test]
    fn distances_hold_for_every_view() {
        let g = ConeBeamGeometry::desk();
        for k in 0..g.n_views() {
            let s = g.source_position(k).unwrap();
            assert!((norm(s) - g.sad).abs() < 1e-9);
            let c = g.detector_center_at(g.angles[k]);
            assert!((norm(sub(c, s)) - g.sdd).abs() < 1e-9);
        }
    }

    #[test]
    fn central_ray_crosses_full_box() {
        let g = geom_with(vec![0.0], 2, 2);
        let bbox = Aabb {
            min: [-10.0, -10.0, -10.0],
            max: [10.0, 10.0, 10.0],
        };
        // with an even detector, use a 1x1 detector for an exactly central ray
        let g1 = ConeBeamGeometry {
            det_w: 1,
            det_h: 1,
            ..g
        };
        let r = g1.ray_for_pixel(0, 0, 0, &bbox).unwrap();
        assert!(close(r.direction, [-1.0, 0.0, 0.0], 1e-12));
        assert!((r.t_entry - 990.0).abs() < 1e-9);
        assert!((r.t_exit - 1010.0).abs() < 1e-9);
    }

    #[test]
    fn corner_pixel_misses_small_box() {
        let g = ConeBeamGeometry::new(1000.0, 1500.0, (100, 100), (10.0, 10.0), (0.0, 0.0), vec![0.3]).unwrap();
        let bbox = Aabb {
            min: [-5.0, -5.0, -5.0],
            max: [5.0, 5.0, 5.0],
        };
        let r = g.ray_for_pixel(0, 0, 0, &bbox).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.length(), 0.0);
    }

    #[test]
    fn angle_validation() {
        assert!(ConeBeamGeometry::new(1000.0, 1500.0, (1, 1), (1.0, 1.0), (0.0, 0.0), vec![]).is_err());
        assert!(ConeBeamGeometry::new(1000.0, 1500.0, (1, 1), (1.0, 1.0), (0.0, 0.0), vec![0.0, 0.0]).is_err());
        assert!(ConeBeamGeometry::new(1000.0, 1500.0, (1, 1), (1.0, 1.0), (0.0, 0.0), vec![0.0, 7.0]).is_err());
        assert!(ConeBeamGeometry::new(1000.0, 900.0, (1, 1), (1.0, 1.0), (0.0, 0.0), vec![0.0]).is_err());
        assert!(ConeBeamGeometry::new(1000.0, 1500.0, (0, 1), (1.0, 1.0), (0.0, 0.0), vec![0.0]).is_err());
        assert!(ConeBeamGeometry::new(1000.0, 1500.0, (1, 1), (0.0, 1.0), (0.0, 0.0), vec![0.0]).is_err());
    }

    #[test]
    fn reversed_angle_order_keeps_rays() {
        let g = ConeBeamGeometry::desk();
        let mut rev = g.clone();
        rev.angles.reverse();
        rev.validate().unwrap();
        let bbox = Aabb {
            min: [-96.0; 3],
            max: [96.0; 3],
        };
        let n = g.n_views();
        for k in (0..n).step_by(7) {
            for (w, h) in [(0, 0), (31, 40), (63, 63)] {
                let a = g.ray_for_pixel(k, w, h, &bbox).unwrap();
                let b = rev.ray_for_pixel(n - 1 - k, w, h, &bbox).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn json_roundtrip_uses_field_names() {
        let g = ConeBeamGeometry::desk();
        let s = g.to_json();
        for f in [
            "sad",
            "sdd",
            "det_w",
            "det_h",
            "det_spacing_u",
            "det_spacing_v",
            "det_offset_u",
            "det_offset_v",
            "angles",
        ] {
            assert!(s.contains(&format!("\"{f}\"")), "{f}");
        }
        assert_eq!(ConeBeamGeometry::from_json(s.as_bytes()).unwrap(), g);
        assert!(ConeBeamGeometry::from_json(br#"{"sad": 1}"#).is_err());
    }

    /// Slab clipping against a brute-force in/out scan with 10*S steps.
    #[test]
    fn slab_interval_matches_brute_force_scan() {
        let g = ConeBeamGeometry::desk();
        let bbox = Aabb {
            min: [-70.0, -50.0, -90.0],
            max: [80.0, 60.0, 40.0],
        };
        let s_count = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k = rng.random_range(0..g.n_views());
            let w = rng.random_range(0..g.det_w);
            let h = rng.random_range(0..g.det_h);
            let ray = g.ray_for_pixel(k, w, h, &bbox).unwrap();
            let len = norm(sub(g.detector_pixel_position(k, w, h).unwrap(), ray.origin));
            let n = 10 * s_count;
            let step = len / n as f64;
            let mut first = None;
            let mut last = None;
            for i in 0..=n {
                let t = i as f64 * step;
                if bbox.contains(ray.at(t)) {
                    first.get_or_insert(t);
                    last = Some(t);
                }
            }
            match (first, last) {
                (Some(f), Some(l)) => {
                    assert!(!ray.is_empty());
                    assert!((ray.t_entry - f).abs() <= step, "{} vs {}", ray.t_entry, f);
                    assert!((ray.t_exit - l).abs() <= step);
                }
                _ => assert!(ray.is_empty() || ray.length() <= step),
            }
            let dn = norm(ray.direction);
            assert!((dn - 1.0).abs() < 1e-9);
        }
    }
}
