//! Deformation-based refinement of a single phase volume.
//!
//! For phase `i` the objective is
//! `F(V) = sum_j sum_{k in bin(j)} ||A_k warp(V, D_{i->j}) - P_k||^2 + tv_weight * TV(V)`
//! and its gradient is `2 sum_j warp_adjoint(sum_k A_k^T r_k, D_{i->j}) + tv_weight * grad TV`.
//! The solver is gradient descent with a fixed step that is halved whenever
//! an update fails to decrease `F`; the best iterate is returned.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionSet;
use crate::dvf::{warp, warp_adjoint, Dvf};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::projector::{make_projector, Projector};
use crate::tv::{tv_gradient, tv_value, TV_EPS};
use crate::volume::{Grid3, View, Volume3};

/// Fields keyed by `(from, to)` phase.
pub type DvfSet = BTreeMap<(usize, usize), Dvf>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub n_iters: usize,
    /// Gradient step; `None` picks one at the first iteration by an exact
    /// line search along the gradient followed by backtracking.
    pub step: Option<f64>,
    /// Use every phase's views through its DVF, or only the phase's own bin.
    pub use_all_phases: bool,
    pub tv_weight: f64,
    pub steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_iters: 50,
            step: None,
            use_all_phases: true,
            tv_weight: 0.0,
            steps: 128,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.steps == 0 {
            return Err(Error::param("n_iters and steps must be >= 1"));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("refine step must be > 0, got {s}")));
            }
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::param("tv_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One group of views seen through one deformation (`None` = identity).
struct Term<'a> {
    dvf: Option<&'a Dvf>,
    views: &'a [usize],
}

/// The refinement objective for one target phase.
pub struct RefineProblem<'a> {
    proj: &'a dyn Projector,
    data: &'a [View],
    terms: Vec<Term<'a>>,
    tv_weight: f64,
}

impl<'a> RefineProblem<'a> {
    /// Problem for phase `i` of `acq`. `D_{i->i}` is the identity whether or
    /// not it is present in `dvfs`.
    pub fn new(
        proj: &'a dyn Projector,
        acq: &'a AcquisitionSet,
        i: usize,
        dvfs: &'a DvfSet,
        use_all_phases: bool,
        tv_weight: f64,
    ) -> Result<Self> {
        let n = acq.n_phases();
        if i >= n {
            return Err(Error::IndexOutOfRange {
                what: "phase",
                index: i,
                limit: n,
            });
        }
        let mut terms = Vec::new();
        for j in 0..n {
            if acq.bin(j).is_empty() || (!use_all_phases && j != i) {
                continue;
            }
            let dvf = if j == i {
                None
            } else {
                let d = dvfs.get(&(i, j)).ok_or(Error::MissingDvf { from: i, to: j })?;
                if d.dims() != proj.grid().dims {
                    return Err(Error::DimMismatch {
                        expected: proj.grid().dims.to_vec(),
                        actual: d.dims().to_vec(),
                    });
                }
                Some(d)
            };
            terms.push(Term { dvf, views: acq.bin(j) });
        }
        Self::from_parts(proj, &acq.views, terms, tv_weight)
    }

    /// Single identity term over `views`.
    pub fn plain(proj: &'a dyn Projector, data: &'a [View], views: &'a [usize], tv_weight: f64) -> Result<Self> {
        Self::from_parts(proj, data, vec![Term { dvf: None, views }], tv_weight)
    }

    /// Single term over `views` seen through `dvf`.
    pub fn warped(
        proj: &'a dyn Projector,
        data: &'a [View],
        views: &'a [usize],
        dvf: &'a Dvf,
        tv_weight: f64,
    ) -> Result<Self> {
        if dvf.dims() != proj.grid().dims {
            return Err(Error::DimMismatch {
                expected: proj.grid().dims.to_vec(),
                actual: dvf.dims().to_vec(),
            });
        }
        Self::from_parts(proj, data, vec![Term { dvf: Some(dvf), views }], tv_weight)
    }

    fn from_parts(proj: &'a dyn Projector, data: &'a [View], terms: Vec<Term<'a>>, tv_weight: f64) -> Result<Self> {
        let (w, h) = proj.detector();
        if terms.iter().all(|t| t.views.is_empty()) {
            return Err(Error::EmptyViews);
        }
        for t in &terms {
            for &k in t.views {
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
        }
        Ok(Self {
            proj,
            data,
            terms,
            tv_weight,
        })
    }

    fn check(&self, v: &Volume3) -> Result<()> {
        if v.dims() != self.proj.grid().dims {
            return Err(Error::DimMismatch {
                expected: self.proj.grid().dims.to_vec(),
                actual: v.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn deformed(&self, v: &Volume3, dvf: Option<&Dvf>) -> Result<Volume3> {
        match dvf {
            None => Ok(v.clone()),
            Some(d) => warp(v, d),
        }
    }

    pub fn objective(&self, v: &Volume3) -> Result<f64> {
        self.check(v)?;
        let mut f = 0.0;
        for t in &self.terms {
            let w = self.deformed(v, t.dvf)?;
            for &k in t.views {
                let p = self.proj.forward(k, w.data());
                f += p
                    .data
                    .iter()
                    .zip(&self.data[k].data)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
        if self.tv_weight != 0.0 {
            f += self.tv_weight * tv_value(v, TV_EPS);
        }
        Ok(f)
    }

    pub fn objective_and_gradient(&self, v: &Volume3) -> Result<(f64, Volume3)> {
        self.check(v)?;
        let grid = *self.proj.grid();
        let mut f = 0.0;
        let mut grad = Volume3::zeros(grid);
        for t in &self.terms {
            let w = self.deformed(v, t.dvf)?;
            let mut bp = Volume3::zeros(grid);
            for &k in t.views {
                let mut r = self.proj.forward(k, w.data());
                for (p, obs) in r.data.iter_mut().zip(&self.data[k].data) {
                    *p -= obs;
                    f += *p * *p;
                }
                self.proj.backproject_add(k, &r, bp.data_mut());
            }
            let back = match t.dvf {
                None => bp,
                Some(d) => warp_adjoint(&bp, d)?,
            };
            for (g, b) in grad.data_mut().iter_mut().zip(back.data()) {
                *g += 2.0 * b;
            }
        }
        if self.tv_weight != 0.0 {
            f += self.tv_weight * tv_value(v, TV_EPS);
            let tg = tv_gradient(v, TV_EPS);
            for (g, t) in grad.data_mut().iter_mut().zip(tg.data()) {
                *g += self.tv_weight * t;
            }
        }
        Ok((f, grad))
    }

    /// Minimizer of the data term along `-g` from any point:
    /// `|g|^2 / (2 sum ||A D g||^2)`.
    fn exact_step(&self, g: &Volume3) -> Result<f64> {
        let gg = g.dot(g);
        let mut denom = 0.0;
        for t in &self.terms {
            let w = self.deformed(g, t.dvf)?;
            for &k in t.views {
                denom += self.proj.forward(k, w.data()).data.iter().map(|x| x * x).sum::<f64>();
            }
        }
        if denom <= 0.0 || gg == 0.0 {
            return Ok(0.0);
        }
        Ok(gg / (2.0 * denom))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineLogEntry {
    pub iter: usize,
    pub objective: f64,
    pub psnr: Option<f64>,
    /// Whether this iterate was kept.
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub volume: Volume3,
    pub objective: f64,
    pub initial_objective: f64,
    pub step: f64,
    pub log: Vec<RefineLogEntry>,
}

/// `iter,objective,psnr` with an empty psnr column when no ground truth was given.
pub fn log_to_csv(log: &[RefineLogEntry]) -> String {
    let mut s = String::from("iter,objective,psnr,accepted\n");
    for e in log {
        let p = e.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.9e},{},{}", e.iter, e.objective, p, e.accepted as u8);
    }
    s
}

/// Gradient descent on `problem` from `init`. `gt` only feeds the log.
pub fn minimize(
    problem: &RefineProblem,
    init: &Volume3,
    cfg: &RefineConfig,
    gt: Option<&Volume3>,
) -> Result<RefineResult> {
    cfg.validate()?;
    let quality = |v: &Volume3| -> Result<Option<f64>> {
        match gt {
            None => Ok(None),
            Some(g) => {
                let (lo, hi) = g.min_max();
                if hi > lo {
                    Ok(Some(psnr(v, g, hi - lo)?))
                } else {
                    Ok(None)
                }
            }
        }
    };
    let mut best = init.clone();
    let (mut best_f, mut grad) = problem.objective_and_gradient(&best)?;
    let initial_objective = best_f;
    let mut log = vec![RefineLogEntry {
        iter: 0,
        objective: best_f,
        psnr: quality(&best)?,
        accepted: true,
    }];
    let mut step = match cfg.step {
        Some(s) => s,
        None => problem.exact_step(&grad)?,
    };
    if step == 0.0 {
        // zero gradient or a gradient invisible to every view
        return Ok(RefineResult {
            volume: best,
            objective: best_f,
            initial_objective,
            step,
            log,
        });
    }
    let mut auto_backtrack = cfg.step.is_none();
    for iter in 1..=cfg.n_iters {
        let cand = best.add_scaled(-step, &grad);
        let (f, g) = problem.objective_and_gradient(&cand)?;
        let accepted = f < best_f;
        log.push(RefineLogEntry {
            iter,
            objective: f,
            psnr: quality(&cand)?,
            accepted,
        });
        log::debug!("refine iter {iter}: objective {f:.6e} step {step:.3e} accepted {accepted}");
        if accepted {
            best = cand;
            best_f = f;
            grad = g;
            auto_backtrack = false;
        } else {
            step *= 0.5;
            if auto_backtrack {
                // the automatic step is still being calibrated on the first move
                continue;
            }
        }
    }
    Ok(RefineResult {
        volume: best,
        objective: best_f,
        initial_objective,
        step,
        log,
    })
}

/// Refines phase `i` starting from `v_init`.
pub fn dvf_refine_with(
    proj: &dyn Projector,
    v_init: &Volume3,
    i: usize,
    dvfs: &DvfSet,
    acq: &AcquisitionSet,
    cfg: &RefineConfig,
    gt: Option<&Volume3>,
) -> Result<RefineResult> {
    let problem = RefineProblem::new(proj, acq, i, dvfs, cfg.use_all_phases, cfg.tv_weight)?;
    minimize(&problem, v_init, cfg, gt)
}

fn views_for(acq: &AcquisitionSet, phases: impl Iterator<Item = usize>, use_all: bool, i: usize) -> Vec<usize> {
    let mut views: Vec<usize> = phases
        .filter(|&j| use_all || j == i)
        .flat_map(|j| acq.bin(j).iter().copied())
        .collect();
    views.sort_unstable();
    views
}

pub fn dvf_refine(
    v_init: &Volume3,
    i: usize,
    dvfs: &DvfSet,
    acq: &AcquisitionSet,
    cfg: &RefineConfig,
    gt: Option<&Volume3>,
) -> Result<RefineResult> {
    cfg.validate()?;
    let views = views_for(acq, 0..acq.n_phases(), cfg.use_all_phases, i);
    let proj = make_projector(&acq.geom, *v_init.grid(), cfg.steps, &views)?;
    dvf_refine_with(proj.as_ref(), v_init, i, dvfs, acq, cfg, gt)
}

/// Refines every phase independently against one shared projector.
pub fn refine_all_phases_with(
    proj: &dyn Projector,
    v_inits: &[Volume3],
    dvfs: &DvfSet,
    acq: &AcquisitionSet,
    cfg: &RefineConfig,
    gts: Option<&[Volume3]>,
) -> Result<Vec<RefineResult>> {
    if v_inits.len() != acq.n_phases() {
        return Err(Error::SizeMismatch {
            expected: acq.n_phases(),
            actual: v_inits.len(),
        });
    }
    v_inits
        .iter()
        .enumerate()
        .map(|(i, v)| dvf_refine_with(proj, v, i, dvfs, acq, cfg, gts.map(|g| &g[i])))
        .collect()
}

pub fn refine_all_phases(
    v_inits: &[Volume3],
    dvfs: &DvfSet,
    acq: &AcquisitionSet,
    grid: &Grid3,
    cfg: &RefineConfig,
    gts: Option<&[Volume3]>,
) -> Result<Vec<RefineResult>> {
    cfg.validate()?;
    let views: Vec<usize> = (0..acq.views.len()).collect();
    let proj = make_projector(&acq.geom, *grid, cfg.steps, &views)?;
    refine_all_phases_with(proj.as_ref(), v_inits, dvfs, acq, cfg, gts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// `(voxel, analytic, finite difference)`
    pub probes: Vec<(usize, f64, f64)>,
    /// Largest `|analytic - fd|` over the probes divided by the largest
    /// `|analytic|` over the probes.
    pub max_rel_error: f64,
}

/// Central finite differences of `F` at `n_probes` random voxels.
pub fn gradient_check(
    problem: &RefineProblem,
    v: &Volume3,
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradientReport> {
    let (_, grad) = problem.objective_and_gradient(v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes);
    let mut work = v.clone();
    for _ in 0..n_probes {
        let idx = rng.random_range(0..v.data().len());
        let orig = work.data()[idx];
        work.data_mut()[idx] = orig + h;
        let fp = problem.objective(&work)?;
        work.data_mut()[idx] = orig - h;
        let fm = problem.objective(&work)?;
        work.data_mut()[idx] = orig;
        probes.push((idx, grad.data()[idx], (fp - fm) / (2.0 * h)));
    }
    let scale = probes.iter().fold(0.0f64, |m, p| m.max(p.1.abs()));
    let worst = probes.iter().fold(0.0f64, |m, p| m.max((p.1 - p.2).abs()));
    let max_rel_error = if scale > 0.0 {
        worst / scale
    } else if worst == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(GradientReport { probes, max_rel_error })
}
