//! Respiratory gating: a surrogate breathing signal per view and amplitude
//! binning of views into phases.
//!
//! Amplitude bins split the normalized signal range into `N/2` bands on the
//! rising (inhale) half and `N/2` on the falling (exhale) half. Phase 0 starts
//! at the bottom of the rising half, i.e. max exhale. Bins near the extremes
//! collect more views because the signal dwells there.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBinning {
    pub n_phases: usize,
    pub phase_of_view: Vec<usize>,
    pub bins: Vec<Vec<usize>>,
    /// Set when the surrogate had no amplitude range and every view went to
    /// phase 0.
    #[serde(default)]
    pub degenerate: bool,
}

impl PhaseBinning {
    pub fn from_phase_of_view(n_phases: usize, phase_of_view: Vec<usize>) -> Result<Self> {
        if n_phases == 0 {
            return Err(Error::param("binning needs at least one phase"));
        }
        let mut bins = vec![Vec::new(); n_phases];
        for (k, &p) in phase_of_view.iter().enumerate() {
            if p >= n_phases {
                return Err(Error::IndexOutOfRange {
                    what: "phase",
                    index: p,
                    limit: n_phases,
                });
            }
            bins[p].push(k);
        }
        Ok(Self {
            n_phases,
            phase_of_view,
            bins,
            degenerate: false,
        })
    }

    /// Every view in exactly one bin, bins sorted and consistent with
    /// `phase_of_view`.
    pub fn validate(&self) -> Result<()> {
        if self.n_phases == 0 || self.bins.len() != self.n_phases {
            return Err(Error::param(format!(
                "binning declares {} phases but has {} bins",
                self.n_phases,
                self.bins.len()
            )));
        }
        let k = self.phase_of_view.len();
        let mut seen = vec![false; k];
        for (p, bin) in self.bins.iter().enumerate() {
            for &v in bin {
                if v >= k || seen[v] || self.phase_of_view[v] != p {
                    return Err(Error::param(format!("bin {p} is inconsistent at view {v}")));
                }
                seen[v] = true;
            }
            if bin.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::param(format!("bin {p} is not sorted")));
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::param(format!("view {v} is in no bin")));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.phase_of_view.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.bins.iter().map(Vec::len).collect()
    }

    /// Everything in one phase.
    pub fn single(n_views: usize) -> Self {
        Self {
            n_phases: 1,
            phase_of_view: vec![0; n_views],
            bins: vec![(0..n_views).collect()],
            degenerate: false,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let b: Self = serde_json::from_slice(bytes)?;
        b.validate()?;
        Ok(b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("binning serializes")
    }
}

/// `sin(2 pi k / period_views + shift)` for `k` in `0..n_views`.
pub fn surrogate_signal(n_views: usize, period_views: f64, shift: f64) -> Vec<f64> {
    (0..n_views)
        .map(|k| (2.0 * PI * k as f64 / period_views + shift).sin())
        .collect()
}

/// Amplitude binning with the direction of motion given per sample.
pub fn bin_by_amplitude_with_direction(signal: &[f64], rising: &[bool], n_phases: usize) -> Result<PhaseBinning> {
    if n_phases == 0 {
        return Err(Error::param("binning needs at least one phase"));
    }
    if signal.len() != rising.len() {
        return Err(Error::SizeMismatch {
            expected: signal.len(),
            actual: rising.len(),
        });
    }
    if signal.iter().any(|a| !a.is_finite()) {
        return Err(Error::param("surrogate signal has non-finite samples"));
    }
    let (lo, hi) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
    let range = hi - lo;
    if signal.is_empty() || !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        log::warn!("surrogate signal has no amplitude range; all views assigned to phase 0");
        let mut b = PhaseBinning::from_phase_of_view(n_phases, vec![0; signal.len()])?;
        b.degenerate = true;
        return Ok(b);
    }
    let n = n_phases as f64;
    let phases = signal
        .iter()
        .zip(rising)
        .map(|(&a, &up)| {
            let psi = if up {
                0.5 * (a - lo) / range
            } else {
                0.5 + 0.5 * (hi - a) / range
            };
            ((psi * n).floor().max(0.0) as usize).min(n_phases - 1)
        })
        .collect();
    PhaseBinning::from_phase_of_view(n_phases, phases)
}

/// Amplitude binning of a sampled signal; direction from forward differences.
pub fn bin_by_amplitude(signal: &[f64], n_phases: usize) -> Result<PhaseBinning> {
    let k = signal.len();
    let rising: Vec<bool> = (0..k)
        .map(|i| {
            if i + 1 < k {
                signal[i + 1] >= signal[i]
            } else if i > 0 {
                signal[i] >= signal[i - 1]
            } else {
                true
            }
        })
        .collect();
    bin_by_amplitude_with_direction(signal, &rising, n_phases)
}

/// Amplitude binning of the sinusoidal surrogate, direction taken from its
/// analytic derivative.
pub fn breathing_phase_assignment(
    n_phases: usize,
    n_views: usize,
    period_views: f64,
    phase_shift: f64,
) -> Result<PhaseBinning> {
    if !(period_views.is_finite() && period_views > n_phases as f64) {
        return Err(Error::param(format!(
            "breathing period of {period_views} views must exceed the {n_phases} phases"
        )));
    }
    if !phase_shift.is_finite() {
        return Err(Error::param("phase shift must be finite"));
    }
    let signal = surrogate_signal(n_views, period_views, phase_shift);
    let rising: Vec<bool> = (0..n_views)
        .map(|k| (2.0 * PI * k as f64 / period_views + phase_shift).cos() >= 0.0)
        .collect();
    bin_by_amplitude_with_direction(&signal, &rising, n_phases)
}
