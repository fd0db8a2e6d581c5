//! Respiratory-gated DRR acquisition and its on-disk layout.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gating::PhaseBinning;
use crate::geometry::ConeBeamGeometry;
use crate::io::{read_view, write_view};
use crate::phantom::Phantom4D;
use crate::projector::forward_project;
use crate::volume::{Grid3, View};

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSet {
    pub geom: ConeBeamGeometry,
    pub views: Vec<View>,
    pub binning: PhaseBinning,
}

impl AcquisitionSet {
    pub fn new(geom: ConeBeamGeometry, views: Vec<View>, binning: PhaseBinning) -> Result<Self> {
        geom.validate()?;
        binning.validate()?;
        if views.len() != geom.n_views() || binning.n_views() != geom.n_views() {
            return Err(Error::SizeMismatch {
                expected: geom.n_views(),
                actual: if views.len() != geom.n_views() {
                    views.len()
                } else {
                    binning.n_views()
                },
            });
        }
        for v in &views {
            if (v.width, v.height) != (geom.det_w, geom.det_h) {
                return Err(Error::DimMismatch {
                    expected: vec![geom.det_w, geom.det_h],
                    actual: vec![v.width, v.height],
                });
            }
        }
        Ok(Self { geom, views, binning })
    }

    pub fn n_phases(&self) -> usize {
        self.binning.n_phases
    }

    /// View indices of phase `i`.
    pub fn bin(&self, i: usize) -> &[usize] {
        &self.binning.bins[i]
    }

    /// Same views, all assigned to a single phase.
    pub fn merged(&self) -> Self {
        Self {
            geom: self.geom.clone(),
            views: self.views.clone(),
            binning: PhaseBinning::single(self.views.len()),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("views"))?;
        fs::write(dir.join("geometry.json"), self.geom.to_json())?;
        fs::write(dir.join("binning.json"), self.binning.to_json())?;
        for (k, v) in self.views.iter().enumerate() {
            write_view(v, view_path(dir, k))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::param(format!("no acquisition directory at {}", dir.display())));
        }
        let geom = ConeBeamGeometry::from_json(&fs::read(dir.join("geometry.json"))?)?;
        let binning = PhaseBinning::from_json(&fs::read(dir.join("binning.json"))?)?;
        let views = (0..geom.n_views())
            .map(|k| read_view(view_path(dir, k)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(geom, views, binning)
    }
}

fn view_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join("views").join(format!("view_{k:04}.vol"))
}

/// Projects each view through the phantom phase it was binned into and adds
/// Gaussian noise of standard deviation `noise_sigma` to every line integral.
///
/// Noise for view `k` comes from its own ChaCha stream keyed by `seed`, so
/// results do not depend on scheduling.
pub fn simulate_acquisition(
    ph: &Phantom4D,
    geom: &ConeBeamGeometry,
    binning: &PhaseBinning,
    grid: &Grid3,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<AcquisitionSet> {
    geom.validate()?;
    binning.validate()?;
    if binning.n_views() != geom.n_views() {
        return Err(Error::SizeMismatch {
            expected: geom.n_views(),
            actual: binning.n_views(),
        });
    }
    if binning.n_phases > ph.n_phases {
        return Err(Error::param(format!(
            "binning uses {} phases but the phantom has {}",
            binning.n_phases, ph.n_phases
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param("noise sigma must be finite and >= 0"));
    }
    let phases = (0..binning.n_phases)
        .map(|i| ph.render_phantom(i, grid))
        .collect::<Result<Vec<_>>>()?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::param(e.to_string()))?;
    let views = (0..geom.n_views())
        .into_par_iter()
        .map(|k| {
            let mut v = forward_project(&phases[binning.phase_of_view[k]], geom, k, steps)?;
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                for p in v.data.iter_mut() {
                    *p += noise.sample(&mut rng);
                }
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    AcquisitionSet::new(geom.clone(), views, binning.clone())
}
