//! Multi-resolution Thirion demons registration.
//!
//! Finds `d` such that `warp(moving, d) ~ fixed`. Each iteration computes the
//! demons force from the current residual and the fixed image gradient,
//! smooths it (fluid regularization), adds it to the field and smooths the
//! field (diffusion regularization). Coarse levels are 2x block averages.

use serde::{Deserialize, Serialize};

use crate::dvf::{warp, Dvf};
use crate::error::{Error, Result};
use crate::volume::{Grid3, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemonsConfig {
    pub levels: usize,
    pub iters: usize,
    /// Gaussian sigma (voxels) applied to each update.
    pub sigma_fluid: f64,
    /// Gaussian sigma (voxels) applied to the accumulated field.
    pub sigma_diffusion: f64,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters: 50,
            sigma_fluid: 1.0,
            sigma_diffusion: 1.0,
        }
    }
}

pub fn demons_register(moving: &Volume3, fixed: &Volume3, cfg: &DemonsConfig) -> Result<Dvf> {
    moving.check_dims(fixed)?;
    let min_dim = fixed.dims().iter().copied().min().unwrap_or(1);
    let max_levels = (usize::BITS - 1 - min_dim.leading_zeros()) as usize;
    if cfg.levels == 0 || cfg.levels > max_levels.max(1) {
        return Err(Error::param(format!(
            "{} pyramid levels requested, at most {} allowed for min dim {min_dim}",
            cfg.levels,
            max_levels.max(1)
        )));
    }
    if !(cfg.sigma_fluid >= 0.0 && cfg.sigma_diffusion >= 0.0) {
        return Err(Error::param("demons sigmas must be >= 0"));
    }

    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    for _ in 1..cfg.levels {
        let (m, f) = pyramid.last().unwrap();
        pyramid.push((downsample2(m), downsample2(f)));
    }

    let mut field: Option<Dvf> = None;
    for (m, f) in pyramid.iter().rev() {
        let mut d = match field.take() {
            None => Dvf::zeros(*f.grid()),
            Some(coarse) => upsample_field(&coarse, *f.grid()),
        };
        let grad = gradient(f);
        for _ in 0..cfg.iters {
            let warped = warp(m, &d)?;
            let mut update = Dvf::zeros(*f.grid());
            for i in 0..f.data().len() {
                let diff = warped.data()[i] - f.data()[i];
                let g = [grad[0][i], grad[1][i], grad[2][i]];
                let denom = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + diff * diff;
                if denom < 1e-12 {
                    continue;
                }
                for a in 0..3 {
                    update.component_mut(a)[i] = -diff * g[a] / denom;
                }
            }
            for a in 0..3 {
                gaussian_smooth(update.component_mut(a), f.dims(), cfg.sigma_fluid);
                for (v, u) in d.component_mut(a).iter_mut().zip(update.component(a)) {
                    *v += u;
                }
                gaussian_smooth(d.component_mut(a), f.dims(), cfg.sigma_diffusion);
            }
        }
        field = Some(d);
    }
    Ok(field.expect("at least one level"))
}

/// Central differences in voxel units, one-sided at the borders.
fn gradient(v: &Volume3) -> [Vec<f64>; 3] {
    let dims = v.dims();
    let g = v.grid();
    let mut out = [vec![0.0; g.len()], vec![0.0; g.len()], vec![0.0; g.len()]];
    for i in 0..g.len() {
        let c = g.coords(i);
        for a in 0..3 {
            if dims[a] < 2 {
                continue;
            }
            let mut lo = c;
            let mut hi = c;
            if c[a] > 0 {
                lo[a] -= 1;
            }
            if c[a] + 1 < dims[a] {
                hi[a] += 1;
            }
            let span = (hi[a] - lo[a]) as f64;
            out[a][i] = (v.get(hi[0], hi[1], hi[2]) - v.get(lo[0], lo[1], lo[2])) / span;
        }
    }
    out
}

/// 2x2x2 block mean; odd trailing voxels average over what exists.
fn downsample2(v: &Volume3) -> Volume3 {
    let d = v.dims();
    let nd = d.map(|n| n.div_ceil(2));
    let g = v.grid();
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * 2.0);
    let origin = [0, 1, 2].map(|a| g.origin[a] + 0.5 * g.spacing[a]);
    let grid = Grid3 {
        dims: nd,
        spacing,
        origin,
    };
    Volume3::from_fn(grid, |x, y, z| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                    if sx < d[0] && sy < d[1] && sz < d[2] {
                        acc += v.get(sx, sy, sz);
                        n += 1.0;
                    }
                }
            }
        }
        acc / n
    })
}

/// Trilinear upsampling of a coarse field onto `fine`, rescaled to fine voxels.
fn upsample_field(coarse: &Dvf, fine: Grid3) -> Dvf {
    let cd = coarse.dims();
    let mut out = Dvf::zeros(fine);
    let clamp = |c: f64, n: usize| c.clamp(0.0, (n - 1) as f64);
    for i in 0..fine.len() {
        let [x, y, z] = fine.coords(i);
        let c = [
            clamp((x as f64 + 0.5) / 2.0 - 0.5, cd[0]),
            clamp((y as f64 + 0.5) / 2.0 - 0.5, cd[1]),
            clamp((z as f64 + 0.5) / 2.0 - 0.5, cd[2]),
        ];
        for a in 0..3 {
            out.component_mut(a)[i] = 2.0 * interp_clamped(coarse.component(a), cd, c);
        }
    }
    out
}

fn interp_clamped(data: &[f64], dims: [usize; 3], c: [f64; 3]) -> f64 {
    let i0 = [0, 1, 2].map(|a| (c[a].floor() as usize).min(dims[a] - 1));
    let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(dims[a] - 1));
    let f = [0, 1, 2].map(|a| c[a] - i0[a] as f64);
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)];
    let mut acc = 0.0;
    for (z, wz) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
        for (y, wy) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
            for (x, wx) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
                acc += wx * wy * wz * at(x, y, z);
            }
        }
    }
    acc
}

/// Separable Gaussian, kernel truncated at 3 sigma and renormalized at the
/// borders.
pub(crate) fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let stride = strides[axis];
        // iterate over all lines along `axis`
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let start = a * strides[oa] + b * strides[ob];
                line.clear();
                line.extend((0..n).map(|t| data[start + t * stride]));
                for t in 0..n {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (ki, &kw) in kernel.iter().enumerate() {
                        let s = t as isize + ki as isize - r;
                        if s >= 0 && (s as usize) < n {
                            acc += kw * line[s as usize];
                            wsum += kw;
                        }
                    }
                    data[start + t * stride] = acc / wsum;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(grid: Grid3, center: [f64; 3], sigma: f64) -> Volume3 {
        Volume3::from_fn(grid, |x, y, z| {
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2) + (z as f64 - center[2]).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn identical_images_give_zero_field() {
        let g = Grid3::centered([16, 16, 16], [1.0; 3]).unwrap();
        let v = blob(g, [8.0, 7.0, 8.5], 3.0);
        let d = demons_register(&v, &v, &DemonsConfig::default()).unwrap();
        assert!(d.max_abs() <= 1e-3);
    }

    #[test]
    fn recovers_translation_of_smooth_blob() {
        let g = Grid3::centered([32, 32, 32], [1.0; 3]).unwrap();
        let fixed = blob(g, [16.0, 16.0, 16.0], 4.0);
        // moving has the blob 2 voxels further along +z: warp(moving, d)(x) =
        // moving(x + d) matches fixed when d = (0, 0, 2)
        let moving = blob(g, [16.0, 16.0, 18.0], 4.0);
        let d = demons_register(&moving, &fixed, &DemonsConfig::default()).unwrap();
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for i in 0..g.len() {
            if fixed.data()[i] > 0.5 {
                let v = d.at(i);
                for a in 0..3 {
                    sum[a] += v[a];
                }
                n += 1.0;
            }
        }
        let mean = sum.map(|s| s / n);
        assert!((mean[2] - 2.0).abs() < 0.5, "mean displacement {mean:?}");
        assert!(mean[0].abs() < 0.5 && mean[1].abs() < 0.5);
    }

    #[test]
    fn deterministic() {
        let g = Grid3::centered([16, 16, 16], [1.0; 3]).unwrap();
        let a = blob(g, [8.0, 8.0, 8.0], 3.0);
        let b = blob(g, [8.0, 9.0, 7.0], 3.0);
        let cfg = DemonsConfig {
            iters: 10,
            ..Default::default()
        };
        assert_eq!(
            demons_register(&a, &b, &cfg).unwrap(),
            demons_register(&a, &b, &cfg).unwrap()
        );
    }

    #[test]
    fn rejects_bad_levels_and_dims() {
        let g = Grid3::centered([8, 8, 8], [1.0; 3]).unwrap();
        let v = Volume3::zeros(g);
        let too_many = DemonsConfig {
            levels: 4,
            ..Default::default()
        };
        assert!(demons_register(&v, &v, &too_many).is_err());
        let ok = DemonsConfig {
            levels: 3,
            iters: 1,
            ..Default::default()
        };
        assert!(demons_register(&v, &v, &ok).is_ok());
        let other = Volume3::zeros(Grid3::centered([8, 8, 9], [1.0; 3]).unwrap());
        assert!(demons_register(&v, &other, &ok).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let dims = [5, 4, 3];
        let mut d = vec![2.5; 60];
        gaussian_smooth(&mut d, dims, 1.3);
        assert!(d.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
