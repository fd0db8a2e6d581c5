//! End-to-end experiment: simulate a gated acquisition of the breathing
//! phantom, reconstruct with every method, evaluate against ground truth and
//! write all artifacts under one output directory.
//!
//! Every stage returns exactly the values it stored on disk (payloads are
//! f32), so running stages one by one from disk gives bit-identical results
//! to a monolithic run.
//!
//! Layout under `out_dir`:
//! ```text
//! config.json
//! acquisition/{geometry.json, binning.json, views/view_KKKK.vol}
//! gt/phase_I.vol
//! recon/<method>/phase_I.vol
//! dvf/{gt,est}/d_I_J.{dx,dy,dz}.vol + d_I_J.dvf.json
//! refine/<method>/phase_I.csv
//! metrics/metrics.csv, metrics/table.txt
//! slices/<name>_phase_I.pgm
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acquisition::{simulate_acquisition, AcquisitionSet};
use crate::demons::{demons_register, DemonsConfig};
use crate::dvf::{read_dvf, write_dvf, Dvf};
use crate::error::{Error, Result};
use crate::gating::{breathing_phase_assignment, PhaseBinning};
use crate::geometry::ConeBeamGeometry;
use crate::io::{read_volume, write_pgm_slice, write_volume};
use crate::metrics::{evaluate_phases, format_table, reports_to_csv, MetricReport};
use crate::phantom::Phantom4D;
use crate::projector::{make_projector, Projector};
use crate::recon::{ossart_per_phase_with, ossart_ttv_with, ReconConfig};
use crate::refine::{log_to_csv, refine_all_phases_with, DvfSet, RefineConfig};
use crate::volume::{Grid3, View, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ossart,
    OssartTtv,
    DvfGt,
    DvfEst,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ossart, Method::OssartTtv, Method::DvfGt, Method::DvfEst];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ossart => "ossart",
            Method::OssartTtv => "ossart_ttv",
            Method::DvfGt => "dvf_gt",
            Method::DvfEst => "dvf_est",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown method {s:?}")))
    }
}

/// Starting volumes for a refinement run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Ossart,
    OssartTtv,
    Gt,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Ossart => "ossart",
            InitKind::OssartTtv => "ossart_ttv",
            InitKind::Gt => "gt",
        }
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitKind::Ossart, InitKind::OssartTtv, InitKind::Gt]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown init {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    /// Phases to bin into; defaults to the phantom's phase count.
    pub n_phases: Option<usize>,
    /// Breathing period of the surrogate, in views.
    pub period_views: f64,
    pub phase_shift: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            n_phases: None,
            period_views: 20.0,
            phase_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub phantom: Phantom4D,
    pub geometry: ConeBeamGeometry,
    pub grid: Grid3,
    pub gating: GatingConfig,
    /// Standard deviation of additive noise on every line integral.
    pub noise_sigma: f64,
    /// Ray steps used to simulate the acquisition.
    pub steps: usize,
    pub ossart: ReconConfig,
    pub ossart_ttv: ReconConfig,
    pub refine: RefineConfig,
    /// Starting volumes for refinement with ground-truth fields.
    pub dvf_gt_init: InitKind,
    /// Starting volumes for refinement with estimated fields; the fields are
    /// always registered between OSSART-TTV phases.
    pub dvf_est_init: InitKind,
    pub demons: DemonsConfig,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            phantom: Phantom4D::desk(),
            geometry: ConeBeamGeometry::desk(),
            grid: Grid3::centered([64, 64, 64], [3.0; 3]).expect("desk grid"),
            gating: GatingConfig::default(),
            noise_sigma: 0.0,
            steps: 128,
            ossart: ReconConfig {
                ttv_weight: 0.0,
                ..ReconConfig::default()
            },
            ossart_ttv: ReconConfig::default(),
            refine: RefineConfig::default(),
            dvf_gt_init: InitKind::Ossart,
            dvf_est_init: InitKind::OssartTtv,
            demons: DemonsConfig::default(),
            methods: Method::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_phases(&self) -> usize {
        self.gating.n_phases.unwrap_or(self.phantom.n_phases)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.geometry.validate()?;
        self.grid.validate()?;
        self.ossart.validate()?;
        self.ossart_ttv.validate()?;
        self.refine.validate()?;
        let n = self.n_phases();
        if n == 0 || n > self.phantom.n_phases {
            return Err(Error::param(format!(
                "gating uses {n} phases, phantom has {}",
                self.phantom.n_phases
            )));
        }
        if self.steps == 0 {
            return Err(Error::param("simulation steps must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise_sigma must be finite and >= 0"));
        }
        if self.methods.is_empty() {
            return Err(Error::param("no methods selected"));
        }
        Ok(())
    }

    pub fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    pub fn binning(&self) -> Result<PhaseBinning> {
        breathing_phase_assignment(
            self.n_phases(),
            self.geometry.n_views(),
            self.gating.period_views,
            self.gating.phase_shift,
        )
    }

    /// Analytic fields for every ordered phase pair.
    pub fn gt_dvfs(&self) -> Result<DvfSet> {
        let mut set = DvfSet::new();
        for (i, j) in pairs(self.n_phases()) {
            set.insert((i, j), stored_dvf(self.phantom.ground_truth_dvf(i, j, &self.grid)?));
        }
        Ok(set)
    }

    /// One projector over every view, shared by all stages.
    pub fn projector(&self, steps: usize) -> Result<Box<dyn Projector>> {
        let all: Vec<usize> = (0..self.geometry.n_views()).collect();
        make_projector(&self.geometry, self.grid, steps, &all)
    }
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

fn f32_round(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

fn stored(mut v: Volume3) -> Volume3 {
    f32_round(v.data_mut());
    v
}

fn stored_dvf(mut d: Dvf) -> Dvf {
    for a in 0..3 {
        f32_round(d.component_mut(a));
    }
    d
}

pub fn gt_dir(out: &Path) -> PathBuf {
    out.join("gt")
}

pub fn acquisition_dir(out: &Path) -> PathBuf {
    out.join("acquisition")
}

pub fn recon_dir(out: &Path, name: &str) -> PathBuf {
    out.join("recon").join(name)
}

pub fn dvf_dir(out: &Path, kind: &str) -> PathBuf {
    out.join("dvf").join(kind)
}

fn phase_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("phase_{i}.vol"))
}

pub fn write_phases(dir: &Path, vols: &[Volume3]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, v) in vols.iter().enumerate() {
        write_volume(v, phase_file(dir, i))?;
    }
    Ok(())
}

pub fn read_phases(dir: &Path, n: usize) -> Result<Vec<Volume3>> {
    (0..n).map(|i| read_volume(phase_file(dir, i))).collect()
}

pub fn write_dvfs(dir: &Path, set: &DvfSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ((i, j), d) in set {
        write_dvf(d, dir.join(format!("d_{i}_{j}")))?;
    }
    Ok(())
}

pub fn read_dvfs(dir: &Path, n: usize) -> Result<DvfSet> {
    let mut set = DvfSet::new();
    for (i, j) in pairs(n) {
        set.insert((i, j), read_dvf(dir.join(format!("d_{i}_{j}")))?);
    }
    Ok(set)
}

/// Renders ground truth and simulates the gated acquisition.
pub fn stage_simulate(cfg: &PipelineConfig, out: &Path) -> Result<(AcquisitionSet, Vec<Volume3>)> {
    let run = || -> Result<_> {
        cfg.validate()?;
        fs::create_dir_all(out)?;
        fs::write(out.join("config.json"), cfg.to_json())?;
        let binning = cfg.binning()?;
        if binning.degenerate {
            log::warn!("gating produced a degenerate binning");
        }
        let mut acq = simulate_acquisition(
            &cfg.phantom,
            &cfg.geometry,
            &binning,
            &cfg.grid,
            cfg.steps,
            cfg.noise_sigma,
            cfg.seed,
        )?;
        acq.views.iter_mut().for_each(|v: &mut View| f32_round(&mut v.data));
        acq.save(acquisition_dir(out))?;
        let gts: Vec<Volume3> = (0..cfg.n_phases())
            .map(|i| cfg.phantom.render_phantom(i, &cfg.grid).map(stored))
            .collect::<Result<_>>()?;
        write_phases(&gt_dir(out), &gts)?;
        Ok((acq, gts))
    };
    run().map_err(|e| e.in_stage("simulate"))
}

/// OSSART per phase and joint OSSART-TTV, for whichever of the two is asked for.
pub fn stage_reconstruct(
    cfg: &PipelineConfig,
    out: &Path,
    proj: &dyn Projector,
    acq: &AcquisitionSet,
    methods: &[Method],
) -> Result<BTreeMap<Method, Vec<Volume3>>> {
    let run = || -> Result<_> {
        let mut res = BTreeMap::new();
        if methods.contains(&Method::Ossart) {
            log::info!("reconstructing with ossart");
            let vols: Vec<Volume3> = ossart_per_phase_with(proj, acq, &cfg.ossart)?
                .into_iter()
                .map(stored)
                .collect();
            write_phases(&recon_dir(out, Method::Ossart.name()), &vols)?;
            res.insert(Method::Ossart, vols);
        }
        if methods.contains(&Method::OssartTtv) {
            log::info!("reconstructing with ossart_ttv");
            let vols: Vec<Volume3> = ossart_ttv_with(proj, acq, &cfg.ossart_ttv)?
                .into_iter()
                .map(stored)
                .collect();
            write_phases(&recon_dir(out, Method::OssartTtv.name()), &vols)?;
            res.insert(Method::OssartTtv, vols);
        }
        Ok(res)
    };
    run().map_err(|e| e.in_stage("reconstruct"))
}

/// Pairwise demons registration between the given phase volumes.
pub fn stage_register(cfg: &PipelineConfig, out: &Path, phases: &[Volume3]) -> Result<DvfSet> {
    let run = || -> Result<_> {
        let mut set = DvfSet::new();
        for (i, j) in pairs(phases.len()) {
            log::info!("registering phase {i} -> {j}");
            set.insert(
                (i, j),
                stored_dvf(demons_register(&phases[i], &phases[j], &cfg.demons)?),
            );
        }
        write_dvfs(&dvf_dir(out, "est"), &set)?;
        Ok(set)
    };
    run().map_err(|e| e.in_stage("register"))
}

/// Analytic fields from the phantom, stored under `dvf/gt`.
pub fn stage_gt_dvfs(cfg: &PipelineConfig, out: &Path) -> Result<DvfSet> {
    let run = || -> Result<_> {
        let d = cfg.gt_dvfs()?;
        write_dvfs(&dvf_dir(out, "gt"), &d)?;
        Ok(d)
    };
    run().map_err(|e| e.in_stage("register"))
}

/// Refines every phase and stores the result under `recon/<name>`.
#[allow(clippy::too_many_arguments)]
pub fn stage_refine(
    cfg: &PipelineConfig,
    out: &Path,
    name: &str,
    proj: &dyn Projector,
    acq: &AcquisitionSet,
    inits: &[Volume3],
    dvfs: &DvfSet,
    gts: Option<&[Volume3]>,
) -> Result<Vec<Volume3>> {
    let run = || -> Result<_> {
        log::info!("refining {name}");
        let results = refine_all_phases_with(proj, inits, dvfs, acq, &cfg.refine, gts)?;
        let log_dir = out.join("refine").join(name);
        fs::create_dir_all(&log_dir)?;
        for (i, r) in results.iter().enumerate() {
            fs::write(log_dir.join(format!("phase_{i}.csv")), log_to_csv(&r.log))?;
        }
        let vols: Vec<Volume3> = results.into_iter().map(|r| stored(r.volume)).collect();
        write_phases(&recon_dir(out, name), &vols)?;
        Ok(vols)
    };
    run().map_err(|e| e.in_stage("refine"))
}

/// Metrics for each named reconstruction, CSV, table and mid-slice images.
pub fn stage_evaluate(
    out: &Path,
    gts: &[Volume3],
    recons: &[(String, Vec<Volume3>)],
) -> Result<Vec<(String, MetricReport)>> {
    let run = || -> Result<_> {
        let mut rows = Vec::new();
        for (name, vols) in recons {
            rows.push((name.clone(), evaluate_phases(vols, gts, None)?));
        }
        let dir = out.join("metrics");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.csv"), reports_to_csv(&rows))?;
        let table = format_table(&rows);
        fs::write(dir.join("table.txt"), &table)?;
        let window = gts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
            let (a, b) = g.min_max();
            (lo.min(a), hi.max(b))
        });
        let slices = out.join("slices");
        let named = std::iter::once(("gt", gts)).chain(recons.iter().map(|(n, v)| (n.as_str(), v.as_slice())));
        for (name, vols) in named {
            for (i, v) in vols.iter().enumerate() {
                write_pgm_slice(v, v.dims()[2] / 2, window, slices.join(format!("{name}_phase_{i}.pgm")))?;
            }
        }
        Ok(rows)
    };
    run().map_err(|e| e.in_stage("evaluate"))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub acquisition: AcquisitionSet,
    pub gts: Vec<Volume3>,
    pub recons: Vec<(String, Vec<Volume3>)>,
    pub reports: Vec<(String, MetricReport)>,
    pub table: String,
}

impl PipelineOutput {
    pub fn report(&self, m: Method) -> Option<&MetricReport> {
        self.reports.iter().find(|(n, _)| n == m.name()).map(|(_, r)| r)
    }
}

pub fn pick_init<'a>(kind: InitKind, recon: &'a BTreeMap<Method, Vec<Volume3>>, gts: &'a [Volume3]) -> &'a [Volume3] {
    match kind {
        InitKind::Ossart => &recon[&Method::Ossart],
        InitKind::OssartTtv => &recon[&Method::OssartTtv],
        InitKind::Gt => gts,
    }
}

/// Direct reconstructions the configured methods depend on, in run order.
pub fn recon_methods_needed(cfg: &PipelineConfig) -> Vec<Method> {
    let mut needed: Vec<Method> = Vec::new();
    let mut need = |m: Method| {
        if !needed.contains(&m) {
            needed.push(m);
        }
    };
    for &m in &cfg.methods {
        match m {
            Method::Ossart | Method::OssartTtv => need(m),
            Method::DvfGt | Method::DvfEst => {
                let init = if m == Method::DvfGt {
                    cfg.dvf_gt_init
                } else {
                    cfg.dvf_est_init
                };
                match init {
                    InitKind::Ossart => need(Method::Ossart),
                    InitKind::OssartTtv => need(Method::OssartTtv),
                    InitKind::Gt => {}
                }
                if m == Method::DvfEst {
                    need(Method::OssartTtv);
                }
            }
        }
    }
    needed
}

/// Runs every stage needed for `cfg.methods`; only the requested methods'
/// reconstructions are stored and evaluated.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    let (acq, gts) = stage_simulate(cfg, out)?;

    let needed = recon_methods_needed(cfg);

    let recon_steps = cfg.ossart.steps;
    let proj = cfg.projector(recon_steps).map_err(|e| e.in_stage("reconstruct"))?;
    let mut recon = stage_reconstruct(cfg, out, proj.as_ref(), &acq, &needed)?;

    let refine_proj;
    let rproj: &dyn Projector = if cfg.refine.steps == recon_steps {
        proj.as_ref()
    } else {
        refine_proj = cfg.projector(cfg.refine.steps).map_err(|e| e.in_stage("refine"))?;
        refine_proj.as_ref()
    };
    if cfg.wants(Method::DvfGt) {
        let dvfs = stage_gt_dvfs(cfg, out)?;
        let inits = pick_init(cfg.dvf_gt_init, &recon, &gts).to_vec();
        let vols = stage_refine(cfg, out, Method::DvfGt.name(), rproj, &acq, &inits, &dvfs, Some(&gts))?;
        recon.insert(Method::DvfGt, vols);
    }
    if cfg.wants(Method::DvfEst) {
        let dvfs = stage_register(cfg, out, &recon[&Method::OssartTtv])?;
        let inits = pick_init(cfg.dvf_est_init, &recon, &gts).to_vec();
        let vols = stage_refine(cfg, out, Method::DvfEst.name(), rproj, &acq, &inits, &dvfs, Some(&gts))?;
        recon.insert(Method::DvfEst, vols);
    }

    let recons: Vec<(String, Vec<Volume3>)> = Method::ALL
        .into_iter()
        .filter(|m| cfg.wants(*m))
        .map(|m| (m.name().to_string(), recon.remove(&m).expect("computed above")))
        .collect();
    let reports = stage_evaluate(out, &gts, &recons)?;
    let table = format_table(&reports);
    Ok(PipelineOutput {
        acquisition: acq,
        gts,
        recons,
        reports,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_json(cfg.to_json().as_bytes()).unwrap();
        assert_eq!(back, cfg);
        let partial = PipelineConfig::from_json(br#"{"methods": ["ossart"], "seed": 5}"#).unwrap();
        assert_eq!(partial.methods, vec![Method::Ossart]);
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.grid, cfg.grid);
        assert!(PipelineConfig::from_json(br#"{"methods": ["fdk"]}"#).is_err());
        assert!(PipelineConfig::from_json(br#"{"methods": []}"#).is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("gt".parse::<InitKind>().unwrap(), InitKind::Gt);
    }
}
