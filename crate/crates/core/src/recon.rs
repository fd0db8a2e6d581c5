//! Ordered-subsets SART with interleaved spatial TV steps, its joint
//! multi-phase variant with cyclic temporal TV, and the view/ray losses.

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionSet;
use crate::error::{Error, Result};
use crate::projector::{make_projector, Projector};
use crate::tv::{ttv_step, tv_step, TV_EPS};
use crate::volume::{Grid3, RayVolume, View, Volume3};

/// Lower clamp for ray and voxel weight sums.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub n_iters: usize,
    pub n_subsets: usize,
    pub relaxation: f64,
    pub tv_weight: f64,
    pub ttv_weight: f64,
    pub nonneg: bool,
    pub steps: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_iters: 30,
            n_subsets: 10,
            relaxation: 0.2,
            tv_weight: 2e-4,
            ttv_weight: 2e-3,
            nonneg: true,
            steps: 128,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.n_subsets == 0 || self.steps == 0 {
            return Err(Error::param("n_iters, n_subsets and steps must be >= 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::param(format!("relaxation {} outside (0, 2)", self.relaxation)));
        }
        if !(self.tv_weight >= 0.0 && self.ttv_weight >= 0.0) || !(self.tv_weight + self.ttv_weight).is_finite() {
            return Err(Error::param("regularization weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Round-robin subsets: subset `s` holds `views[s], views[s + n], ...`.
/// Fewer than `n_subsets` views gives one view per subset.
pub fn ordered_subsets(views: &[usize], n_subsets: usize) -> Vec<Vec<usize>> {
    let n = n_subsets.min(views.len()).max(1);
    (0..n)
        .map(|s| views.iter().skip(s).step_by(n).copied().collect())
        .collect()
}

/// Precomputed SART weights for one view set.
struct Sart {
    subsets: Vec<Vec<usize>>,
    /// Per view in subset order: 1 / max(A 1, floor).
    inv_rows: Vec<Vec<View>>,
    /// Per subset: 1 / max(A^T 1, floor).
    inv_cols: Vec<Vec<f64>>,
}

impl Sart {
    fn new(proj: &dyn Projector, views: &[usize], n_subsets: usize) -> Self {
        let grid = *proj.grid();
        let ones = vec![1.0; grid.len()];
        let (w, h) = proj.detector();
        let ones_view = View {
            width: w,
            height: h,
            data: vec![1.0; w * h],
        };
        let subsets = ordered_subsets(views, n_subsets);
        let mut inv_rows = Vec::with_capacity(subsets.len());
        let mut inv_cols = Vec::with_capacity(subsets.len());
        for sub in &subsets {
            let mut rows = Vec::with_capacity(sub.len());
            let mut col = vec![0.0; grid.len()];
            for &k in sub {
                let mut r = proj.forward(k, &ones);
                for v in r.data.iter_mut() {
                    *v = 1.0 / v.max(WEIGHT_FLOOR);
                }
                rows.push(r);
                proj.backproject_add(k, &ones_view, &mut col);
            }
            for v in col.iter_mut() {
                *v = 1.0 / v.max(WEIGHT_FLOOR);
            }
            inv_rows.push(rows);
            inv_cols.push(col);
        }
        Self {
            subsets,
            inv_rows,
            inv_cols,
        }
    }

    /// One pass over all subsets: data update, TV step, clamp.
    fn iterate(&self, proj: &dyn Projector, data: &[View], cfg: &ReconConfig, vol: &mut Volume3) {
        let mut acc = vec![0.0; vol.data().len()];
        for (s, sub) in self.subsets.iter().enumerate() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (j, &k) in sub.iter().enumerate() {
                let mut r = proj.forward(k, vol.data());
                for ((p, obs), inv) in r.data.iter_mut().zip(&data[k].data).zip(&self.inv_rows[s][j].data) {
                    *p = (obs - *p) * inv;
                }
                proj.backproject_add(k, &r, &mut acc);
            }
            for ((v, a), inv) in vol.data_mut().iter_mut().zip(&acc).zip(&self.inv_cols[s]) {
                *v += cfg.relaxation * a * inv;
            }
            tv_step(vol, cfg.tv_weight, TV_EPS);
            if cfg.nonneg {
                clamp_nonneg(vol);
            }
        }
    }
}

fn clamp_nonneg(vol: &mut Volume3) {
    for v in vol.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn check_data(proj: &dyn Projector, data: &[View], views: &[usize]) -> Result<()> {
    let (w, h) = proj.detector();
    for &k in views {
        let v = data.get(k).ok_or(Error::IndexOutOfRange {
            what: "view",
            index: k,
            limit: data.len(),
        })?;
        if (v.width, v.height) != (w, h) {
            return Err(Error::DimMismatch {
                expected: vec![w, h],
                actual: vec![v.width, v.height],
            });
        }
    }
    Ok(())
}

fn check_init(proj: &dyn Projector, init: &Volume3) -> Result<()> {
    if init.dims() != proj.grid().dims {
        return Err(Error::DimMismatch {
            expected: proj.grid().dims.to_vec(),
            actual: init.dims().to_vec(),
        });
    }
    Ok(())
}

/// OSSART on the views `views` (indices into `data`) with a prepared projector.
pub fn ossart_with(
    proj: &dyn Projector,
    data: &[View],
    views: &[usize],
    cfg: &ReconConfig,
    init: &Volume3,
) -> Result<Volume3> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::EmptyViews);
    }
    check_data(proj, data, views)?;
    check_init(proj, init)?;
    let sart = Sart::new(proj, views, cfg.n_subsets);
    let mut vol = Volume3::from_data(*proj.grid(), init.data().to_vec())?;
    for it in 0..cfg.n_iters {
        sart.iterate(proj, data, cfg, &mut vol);
        log::debug!("ossart iteration {}/{}", it + 1, cfg.n_iters);
    }
    Ok(vol)
}

/// OSSART on a subset of an acquisition's views.
pub fn ossart(acq: &AcquisitionSet, views: &[usize], cfg: &ReconConfig, init: &Volume3) -> Result<Volume3> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::EmptyViews);
    }
    let proj = make_projector(&acq.geom, *init.grid(), cfg.steps, views)?;
    ossart_with(proj.as_ref(), &acq.views, views, cfg, init)
}

/// Independent OSSART for every phase bin, starting from zero.
pub fn ossart_per_phase_with(proj: &dyn Projector, acq: &AcquisitionSet, cfg: &ReconConfig) -> Result<Vec<Volume3>> {
    let zero = Volume3::zeros(*proj.grid());
    (0..acq.n_phases())
        .map(|i| {
            if acq.bin(i).is_empty() {
                return Err(Error::EmptyPhase(i));
            }
            ossart_with(proj, &acq.views, acq.bin(i), cfg, &zero)
        })
        .collect()
}

/// Joint per-phase OSSART; after each iteration's sweep over all phases, one
/// gradient step on the cyclic temporal TV couples them.
pub fn ossart_ttv_with(proj: &dyn Projector, acq: &AcquisitionSet, cfg: &ReconConfig) -> Result<Vec<Volume3>> {
    cfg.validate()?;
    let n = acq.n_phases();
    for i in 0..n {
        if acq.bin(i).is_empty() {
            return Err(Error::EmptyPhase(i));
        }
        check_data(proj, &acq.views, acq.bin(i))?;
    }
    let systems: Vec<Sart> = (0..n).map(|i| Sart::new(proj, acq.bin(i), cfg.n_subsets)).collect();
    let mut vols: Vec<Volume3> = (0..n).map(|_| Volume3::zeros(*proj.grid())).collect();
    for it in 0..cfg.n_iters {
        for (sys, vol) in systems.iter().zip(vols.iter_mut()) {
            sys.iterate(proj, &acq.views, cfg, vol);
        }
        if n >= 2 && cfg.ttv_weight != 0.0 {
            ttv_step(&mut vols, cfg.ttv_weight, TV_EPS);
            if cfg.nonneg {
                vols.iter_mut().for_each(clamp_nonneg);
            }
        }
        log::debug!("ossart_ttv iteration {}/{}", it + 1, cfg.n_iters);
    }
    Ok(vols)
}

pub fn ossart_ttv(acq: &AcquisitionSet, grid: &Grid3, cfg: &ReconConfig) -> Result<Vec<Volume3>> {
    cfg.validate()?;
    let all: Vec<usize> = (0..acq.views.len()).collect();
    let proj = make_projector(&acq.geom, *grid, cfg.steps, &all)?;
    ossart_ttv_with(proj.as_ref(), acq, cfg)
}

/// `sum_k ||A_k V - P_k||^2` over `views`.
pub fn data_term(proj: &dyn Projector, vol: &Volume3, data: &[View], views: &[usize]) -> Result<f64> {
    check_data(proj, data, views)?;
    check_init(proj, vol)?;
    Ok(views
        .iter()
        .map(|&k| {
            let p = proj.forward(k, vol.data());
            p.data
                .iter()
                .zip(&data[k].data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum())
}

/// Mean absolute difference between two views.
pub fn loss_rec(p_syn: &View, p_obs: &View) -> Result<f64> {
    if (p_syn.width, p_syn.height) != (p_obs.width, p_obs.height) {
        return Err(Error::DimMismatch {
            expected: vec![p_obs.width, p_obs.height],
            actual: vec![p_syn.width, p_syn.height],
        });
    }
    let s: f64 = p_syn.data.iter().zip(&p_obs.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / p_obs.data.len() as f64)
}

/// Mean absolute difference between the phase-averaged ray volume and `r_ma`.
pub fn loss_ma(r_list: &[RayVolume], r_ma: &RayVolume) -> Result<f64> {
    if r_list.is_empty() {
        return Err(Error::param("loss_ma needs at least one ray volume"));
    }
    for r in r_list {
        if r.dims() != r_ma.dims() {
            return Err(Error::DimMismatch {
                expected: r_ma.dims().to_vec(),
                actual: r.dims().to_vec(),
            });
        }
    }
    let n = r_list.len() as f64;
    let mut acc = 0.0;
    for (idx, m) in r_ma.data.iter().enumerate() {
        let mean = r_list.iter().map(|r| r.data[idx]).sum::<f64>() / n;
        acc += (mean - m).abs();
    }
    Ok(acc / r_ma.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConeBeamGeometry;
    use crate::projector::RayMarcher;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subsets_are_round_robin() {
        let v: Vec<usize> = (0..7).collect();
        assert_eq!(ordered_subsets(&v, 3), vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
        assert_eq!(ordered_subsets(&v[..2], 5), vec![vec![0], vec![1]]);
    }

    #[test]
    fn config_validation() {
        assert!(ReconConfig::default().validate().is_ok());
        for bad in [
            ReconConfig {
                relaxation: 2.0,
                ..Default::default()
            },
            ReconConfig {
                n_subsets: 0,
                ..Default::default()
            },
            ReconConfig {
                tv_weight: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn losses_match_naive_loops() {
        let a = View::from_data(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = View::from_data(2, 2, vec![1.5, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_rec(&a, &b).unwrap(), 1.5 / 4.0);
        let c = View::from_data(2, 2, a.data.iter().map(|v| v + 0.25).collect()).unwrap();
        assert_eq!(loss_rec(&c, &a).unwrap(), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rv = || {
            let data = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            RayVolume::from_data(2, 3, 4, 1.0, data).unwrap()
        };
        let list = vec![rv(), rv(), rv()];
        let ma = rv();
        let mut naive = 0.0;
        for i in 0..24 {
            naive += ((list[0].data[i] + list[1].data[i] + list[2].data[i]) / 3.0 - ma.data[i]).abs();
        }
        naive /= 24.0;
        assert!(((loss_ma(&list, &ma).unwrap() - naive) / naive).abs() < 1e-12);
        assert_eq!(loss_ma(std::slice::from_ref(&ma), &ma).unwrap(), 0.0);
        let single: f64 = list[0]
            .data
            .iter()
            .zip(&ma.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 24.0;
        assert_eq!(loss_ma(&list[..1], &ma).unwrap(), single);
    }

    fn tiny() -> (ConeBeamGeometry, Grid3) {
        let mut geom = ConeBeamGeometry::desk();
        geom.det_w = 20;
        geom.det_h = 20;
        geom.det_spacing_u = 8.0;
        geom.det_spacing_v = 8.0;
        geom.angles = ConeBeamGeometry::full_scan_angles(24);
        (geom, Grid3::centered([12, 12, 12], [8.0; 3]).unwrap())
    }

    #[test]
    fn zero_data_is_fixed_point() {
        let (geom, grid) = tiny();
        let proj = RayMarcher::new(&geom, grid, 24).unwrap();
        let data = vec![View::zeros(20, 20); 24];
        let views: Vec<usize> = (0..24).collect();
        let out = ossart_with(&proj, &data, &views, &ReconConfig::default(), &Volume3::zeros(grid)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            ossart_with(&proj, &data, &[], &ReconConfig::default(), &Volume3::zeros(grid)),
            Err(Error::EmptyViews)
        ));
    }
}
