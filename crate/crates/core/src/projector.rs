//! Cone-beam ray marching: the ray path transformation, forward projection,
//! patch tiling, ray-dimension downsampling and the exact adjoint.
//!
//! Every detector pixel's ray is clipped to the volume box and the in-volume
//! interval is cut into `S` equal steps of length `delta`. Step `s` samples the
//! volume (nearest neighbor) at the step midpoint and the ray volume stores
//! `delta * value`, so `P(w, h) = sum_s R(w, h, s)` is a line integral in
//! mm x intensity. Rays that miss the volume record zeros.
//!
//! All projection paths share [`march`], which is why forward projection, the
//! materialized ray volume and the backprojection agree bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ConeBeamGeometry, Ray};
use crate::volume::{Grid3, RayVolume, View, Volume3};

/// Walks the `steps` midpoints of a ray, reporting the sampled voxel (if any).
/// Returns the step length, zero for rays that miss.
#[inline]
fn march(ray: &Ray, grid: &Grid3, steps: usize, mut f: impl FnMut(usize, Option<usize>, f64)) -> f64 {
    if ray.is_empty() {
        return 0.0;
    }
    let delta = (ray.t_exit - ray.t_entry) / steps as f64;
    for s in 0..steps {
        let t = ray.t_entry + (s as f64 + 0.5) * delta;
        f(s, grid.nearest_index(ray.at(t)), delta);
    }
    delta
}

fn check_view(geom: &ConeBeamGeometry, k: usize) -> Result<f64> {
    geom.angles.get(k).copied().ok_or(Error::IndexOutOfRange {
        what: "view",
        index: k,
        limit: geom.n_views(),
    })
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::param("ray step count S must be >= 1"));
    }
    Ok(())
}

/// Ray path transformation of `vol` for view `k`.
pub fn rpt_transform(vol: &Volume3, geom: &ConeBeamGeometry, k: usize, steps: usize) -> Result<RayVolume> {
    check_steps(steps)?;
    let angle = check_view(geom, k)?;
    let grid = *vol.grid();
    let bbox = grid.bbox();
    let (w_count, h_count) = (geom.det_w, geom.det_h);
    let values = vol.data();
    let mut out = RayVolume::zeros(w_count, h_count, steps);
    let deltas: Vec<f64> = out
        .data
        .par_chunks_mut(steps)
        .enumerate()
        .map(|(p, r)| {
            let ray = geom.ray_at(angle, p % w_count, p / w_count, &bbox);
            march(&ray, &grid, steps, |s, idx, delta| {
                r[s] = match idx {
                    Some(i) => delta * values[i],
                    None => 0.0,
                };
            })
        })
        .collect();
    let hit: Vec<f64> = deltas.into_iter().filter(|d| *d > 0.0).collect();
    out.step_len = if hit.is_empty() {
        0.0
    } else {
        hit.iter().sum::<f64>() / hit.len() as f64
    };
    Ok(out)
}

/// `P(w, h) = sum_s R(w, h, s)`, accumulated in order of `s`.
pub fn project_from_rpt(r: &RayVolume) -> View {
    let data = r
        .data
        .par_chunks(r.steps)
        .map(|ray| {
            let mut acc = 0.0;
            for &v in ray {
                acc += v;
            }
            acc
        })
        .collect();
    View {
        width: r.width,
        height: r.height,
        data,
    }
}

/// Forward projection of view `k` without materializing the ray volume.
/// Bit-identical to `project_from_rpt(&rpt_transform(..))`.
pub fn forward_project(vol: &Volume3, geom: &ConeBeamGeometry, k: usize, steps: usize) -> Result<View> {
    check_steps(steps)?;
    let angle = check_view(geom, k)?;
    let grid = *vol.grid();
    let bbox = grid.bbox();
    Ok(forward_at(vol.data(), &grid, &bbox, geom, angle, steps))
}

fn forward_at(values: &[f64], grid: &Grid3, bbox: &Aabb, geom: &ConeBeamGeometry, angle: f64, steps: usize) -> View {
    let w_count = geom.det_w;
    let data = (0..geom.det_w * geom.det_h)
        .into_par_iter()
        .map(|p| {
            let ray = geom.ray_at(angle, p % w_count, p / w_count, bbox);
            let mut acc = 0.0;
            march(&ray, grid, steps, |_, idx, delta| {
                acc += match idx {
                    Some(i) => delta * values[i],
                    None => 0.0,
                };
            });
            acc
        })
        .collect();
    View {
        width: geom.det_w,
        height: geom.det_h,
        data,
    }
}

/// Exact adjoint of [`forward_project`]: every ray step scatters
/// `delta * view(w, h)` into the voxel it sampled.
pub fn backproject(view: &View, geom: &ConeBeamGeometry, k: usize, steps: usize, grid: &Grid3) -> Result<Volume3> {
    check_steps(steps)?;
    let angle = check_view(geom, k)?;
    check_view_dims(view, geom)?;
    grid.validate()?;
    let mut out = Volume3::zeros(*grid);
    backproject_at(view, geom, angle, steps, grid, &grid.bbox(), out.data_mut());
    Ok(out)
}

fn check_view_dims(view: &View, geom: &ConeBeamGeometry) -> Result<()> {
    if view.width != geom.det_w || view.height != geom.det_h {
        return Err(Error::DimMismatch {
            expected: vec![geom.det_w, geom.det_h],
            actual: vec![view.width, view.height],
        });
    }
    Ok(())
}

fn backproject_at(
    view: &View,
    geom: &ConeBeamGeometry,
    angle: f64,
    steps: usize,
    grid: &Grid3,
    bbox: &Aabb,
    out: &mut [f64],
) {
    let w_count = geom.det_w;
    // Traces are gathered per detector row in parallel and scattered in a
    // fixed order, so the result does not depend on the thread count.
    let rows: Vec<Vec<(usize, f64)>> = (0..geom.det_h)
        .into_par_iter()
        .map(|h| {
            let mut contrib = Vec::new();
            for w in 0..w_count {
                let p = view.data[h * w_count + w];
                if p == 0.0 {
                    continue;
                }
                let ray = geom.ray_at(angle, w, h, bbox);
                march(&ray, grid, steps, |_, idx, delta| {
                    if let Some(i) = idx {
                        contrib.push((i, delta * p));
                    }
                });
            }
            contrib
        })
        .collect();
    for row in rows {
        for (i, v) in row {
            out[i] += v;
        }
    }
}

/// A linear projection operator for a fixed grid and detector.
///
/// Implementations must agree with [`forward_project`] and [`backproject`]
/// bit for bit. Calling with a view that the operator was not prepared for
/// panics.
pub trait Projector: Sync {
    fn grid(&self) -> &Grid3;
    fn detector(&self) -> (usize, usize);
    fn forward(&self, k: usize, vol: &[f64]) -> View;
    fn backproject_add(&self, k: usize, view: &View, out: &mut [f64]);

    fn backproject(&self, k: usize, view: &View) -> Volume3 {
        let mut out = Volume3::zeros(*self.grid());
        self.backproject_add(k, view, out.data_mut());
        out
    }
}

/// Marches rays on every call.
#[derive(Debug, Clone)]
pub struct RayMarcher {
    geom: ConeBeamGeometry,
    grid: Grid3,
    bbox: Aabb,
    steps: usize,
}

impl RayMarcher {
    pub fn new(geom: &ConeBeamGeometry, grid: Grid3, steps: usize) -> Result<Self> {
        check_steps(steps)?;
        geom.validate()?;
        grid.validate()?;
        Ok(Self {
            geom: geom.clone(),
            bbox: grid.bbox(),
            grid,
            steps,
        })
    }
}

impl Projector for RayMarcher {
    fn grid(&self) -> &Grid3 {
        &self.grid
    }

    fn detector(&self) -> (usize, usize) {
        (self.geom.det_w, self.geom.det_h)
    }

    fn forward(&self, k: usize, vol: &[f64]) -> View {
        assert_eq!(vol.len(), self.grid.len(), "volume does not match projector grid");
        forward_at(vol, &self.grid, &self.bbox, &self.geom, self.geom.angles[k], self.steps)
    }

    fn backproject_add(&self, k: usize, view: &View, out: &mut [f64]) {
        assert_eq!(out.len(), self.grid.len(), "volume does not match projector grid");
        backproject_at(
            view,
            &self.geom,
            self.geom.angles[k],
            self.steps,
            &self.grid,
            &self.bbox,
            out,
        );
    }
}

const NO_VOXEL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct ViewTrace {
    deltas: Vec<f64>,
    voxels: Vec<u32>,
}

/// Stores every ray's sampled voxel indices for a chosen set of views.
///
/// Costs `4 * W * H * S` bytes per view and removes all geometry work from
/// repeated projections.
#[derive(Debug, Clone)]
pub struct CachedProjector {
    grid: Grid3,
    width: usize,
    height: usize,
    steps: usize,
    traces: Vec<Option<ViewTrace>>,
}

impl CachedProjector {
    pub fn new(geom: &ConeBeamGeometry, grid: Grid3, steps: usize, views: &[usize]) -> Result<Self> {
        check_steps(steps)?;
        geom.validate()?;
        grid.validate()?;
        if grid.len() >= NO_VOXEL as usize {
            return Err(Error::param("grid too large for cached traces"));
        }
        let bbox = grid.bbox();
        let mut traces = vec![None; geom.n_views()];
        let n_pix = geom.det_w * geom.det_h;
        for &k in views {
            let angle = check_view(geom, k)?;
            if traces[k].is_some() {
                continue;
            }
            let mut voxels = vec![NO_VOXEL; n_pix * steps];
            let deltas: Vec<f64> = voxels
                .par_chunks_mut(steps)
                .enumerate()
                .map(|(p, vox)| {
                    let ray = geom.ray_at(angle, p % geom.det_w, p / geom.det_w, &bbox);
                    march(&ray, &grid, steps, |s, idx, _| {
                        if let Some(i) = idx {
                            vox[s] = i as u32;
                        }
                    })
                })
                .collect();
            traces[k] = Some(ViewTrace { deltas, voxels });
        }
        Ok(Self {
            grid,
            width: geom.det_w,
            height: geom.det_h,
            steps,
            traces,
        })
    }

    pub fn bytes_per_view(geom: &ConeBeamGeometry, steps: usize) -> usize {
        geom.det_w * geom.det_h * (steps * 4 + 8)
    }

    fn trace(&self, k: usize) -> &ViewTrace {
        self.traces
            .get(k)
            .and_then(|t| t.as_ref())
            .unwrap_or_else(|| panic!("view {k} was not prepared in the cached projector"))
    }
}

impl Projector for CachedProjector {
    fn grid(&self) -> &Grid3 {
        &self.grid
    }

    fn detector(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn forward(&self, k: usize, vol: &[f64]) -> View {
        assert_eq!(vol.len(), self.grid.len(), "volume does not match projector grid");
        let t = self.trace(k);
        let steps = self.steps;
        let data = t
            .voxels
            .par_chunks(steps)
            .zip(t.deltas.par_iter())
            .map(|(vox, &delta)| {
                let mut acc = 0.0;
                if delta == 0.0 {
                    return acc;
                }
                for &i in vox {
                    acc += if i == NO_VOXEL { 0.0 } else { delta * vol[i as usize] };
                }
                acc
            })
            .collect();
        View {
            width: self.width,
            height: self.height,
            data,
        }
    }

    fn backproject_add(&self, k: usize, view: &View, out: &mut [f64]) {
        assert_eq!(out.len(), self.grid.len(), "volume does not match projector grid");
        let t = self.trace(k);
        for (p, (vox, &delta)) in t.voxels.chunks(self.steps).zip(&t.deltas).enumerate() {
            let v = view.data[p];
            if v == 0.0 || delta == 0.0 {
                continue;
            }
            let c = delta * v;
            for &i in vox {
                if i != NO_VOXEL {
                    out[i as usize] += c;
                }
            }
        }
    }
}

/// Memory budget above which [`make_projector`] falls back to marching.
pub const TRACE_CACHE_BUDGET: usize = 1 << 30;

/// Cached traces when they fit in [`TRACE_CACHE_BUDGET`], otherwise on-the-fly marching.
pub fn make_projector(
    geom: &ConeBeamGeometry,
    grid: Grid3,
    steps: usize,
    views: &[usize],
) -> Result<Box<dyn Projector>> {
    let need = CachedProjector::bytes_per_view(geom, steps).saturating_mul(views.len());
    if need <= TRACE_CACHE_BUDGET && grid.len() < NO_VOXEL as usize {
        Ok(Box::new(CachedProjector::new(geom, grid, steps, views)?))
    } else {
        Ok(Box::new(RayMarcher::new(geom, grid, steps)?))
    }
}

/// Pixel rectangle on the detector plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub w0: usize,
    pub h0: usize,
    pub pw: usize,
    pub ph: usize,
}

/// Row-major tiling of a `W x H` detector into `pw x ph` patches; the last
/// column/row of patches takes the remainder.
pub fn grid_tiling(width: usize, height: usize, pw: usize, ph: usize) -> Vec<PatchSpec> {
    let mut out = Vec::new();
    if pw == 0 || ph == 0 {
        return out;
    }
    let mut h0 = 0;
    while h0 < height {
        let mut w0 = 0;
        while w0 < width {
            out.push(PatchSpec {
                w0,
                h0,
                pw: pw.min(width - w0),
                ph: ph.min(height - h0),
            });
            w0 += pw;
        }
        h0 += ph;
    }
    out
}

/// Checks that `patches` cover the `W x H` detector exactly once.
pub fn validate_tiling(patches: &[PatchSpec], width: usize, height: usize) -> Result<()> {
    let mut count = vec![0u32; width * height];
    for (n, p) in patches.iter().enumerate() {
        if p.pw == 0 || p.ph == 0 {
            return Err(Error::Tiling(format!("patch {n} is empty")));
        }
        let inside =
            p.w0.checked_add(p.pw).is_some_and(|e| e <= width) && p.h0.checked_add(p.ph).is_some_and(|e| e <= height);
        if !inside {
            return Err(Error::Tiling(format!(
                "patch {n} exceeds the {width}x{height} detector"
            )));
        }
        for h in p.h0..p.h0 + p.ph {
            for w in p.w0..p.w0 + p.pw {
                count[h * width + w] += 1;
                if count[h * width + w] > 1 {
                    return Err(Error::Tiling(format!("patch {n} overlaps pixel ({w}, {h})")));
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::Tiling(format!(
            "pixel ({}, {}) not covered",
            i % width,
            i / width
        )));
    }
    Ok(())
}

/// Cut a ray volume into detector patches. Each patch keeps the parent's
/// `step_len`.
pub fn split_patches(r: &RayVolume, patches: &[PatchSpec]) -> Result<Vec<RayVolume>> {
    validate_tiling(patches, r.width, r.height)?;
    let s = r.steps;
    Ok(patches
        .iter()
        .map(|p| {
            let mut data = Vec::with_capacity(p.pw * p.ph * s);
            for h in p.h0..p.h0 + p.ph {
                let start = r.index(p.w0, h, 0);
                data.extend_from_slice(&r.data[start..start + p.pw * s]);
            }
            RayVolume {
                width: p.pw,
                height: p.ph,
                steps: s,
                step_len: r.step_len,
                data,
            }
        })
        .collect())
}

pub fn merge_patches(parts: &[RayVolume], patches: &[PatchSpec], width: usize, height: usize) -> Result<RayVolume> {
    validate_tiling(patches, width, height)?;
    if parts.len() != patches.len() {
        return Err(Error::Tiling(format!(
            "{} parts for {} patches",
            parts.len(),
            patches.len()
        )));
    }
    let steps = parts[0].steps;
    let mut out = RayVolume::zeros(width, height, steps);
    out.step_len = parts[0].step_len;
    for (part, p) in parts.iter().zip(patches) {
        if part.width != p.pw || part.height != p.ph || part.steps != steps {
            return Err(Error::DimMismatch {
                expected: vec![p.pw, p.ph, steps],
                actual: part.dims().to_vec(),
            });
        }
        for h in 0..p.ph {
            let dst = out.index(p.w0, p.h0 + h, 0);
            let src = part.index(0, h, 0);
            out.data[dst..dst + p.pw * steps].copy_from_slice(&part.data[src..src + p.pw * steps]);
        }
    }
    Ok(out)
}

/// Assemble per-patch views into the full detector view.
pub fn merge_views(parts: &[View], patches: &[PatchSpec], width: usize, height: usize) -> Result<View> {
    validate_tiling(patches, width, height)?;
    if parts.len() != patches.len() {
        return Err(Error::Tiling(format!(
            "{} parts for {} patches",
            parts.len(),
            patches.len()
        )));
    }
    let mut out = View::zeros(width, height);
    for (part, p) in parts.iter().zip(patches) {
        if part.width != p.pw || part.height != p.ph {
            return Err(Error::DimMismatch {
                expected: vec![p.pw, p.ph],
                actual: vec![part.width, part.height],
            });
        }
        for h in 0..p.ph {
            for w in 0..p.pw {
                out.set(p.w0 + w, p.h0 + h, part.get(w, h));
            }
        }
    }
    Ok(out)
}

/// Local summation along the ray dimension: `out(x) = sum_{i<k} in(k*x + i)`.
pub fn downsample_rays(r: &RayVolume, factor: usize) -> Result<RayVolume> {
    if factor == 0 || !r.steps.is_multiple_of(factor) {
        return Err(Error::param(format!(
            "downsampling factor {factor} does not divide S = {}",
            r.steps
        )));
    }
    let steps = r.steps / factor;
    let data = r
        .data
        .chunks(factor)
        .map(|c| {
            let mut acc = 0.0;
            for &v in c {
                acc += v;
            }
            acc
        })
        .collect();
    Ok(RayVolume {
        width: r.width,
        height: r.height,
        steps,
        step_len: r.step_len * factor as f64,
        data,
    })
}

/// Steps per ray for a volume: twice the smallest dimension, rounded up to a
/// power of two (256 for 128x256x256, 128 for 64^3).
pub fn default_steps(dims: [usize; 3]) -> usize {
    (2 * dims.iter().copied().min().unwrap_or(1)).next_power_of_two()
}
