//! Volume PSNR and SSIM, and per-phase reports laid out like a comparison
//! table (methods as rows, phases as columns).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::Volume3;

pub const SSIM_WINDOW: usize = 7;

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::param(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

pub fn mse(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.check_dims(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(range^2 / MSE)`; `f64::INFINITY` for identical volumes.
pub fn psnr(a: &Volume3, b: &Volume3, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Mean SSIM over every fully contained 7x7x7 window, uniform weights and
/// population statistics.
pub fn ssim(a: &Volume3, b: &Volume3, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    a.check_dims(b)?;
    let d = a.dims();
    let w = SSIM_WINDOW;
    if d.iter().any(|&n| n < w) {
        return Err(Error::param(format!("ssim needs every dim >= {w}, got {d:?}")));
    }
    if a.data() == b.data() {
        // summed tables would lose the exact identity to rounding
        return Ok(1.0);
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (fa, fb) = (a.data(), b.data());
    let tables = [
        integral(d, |i| fa[i]),
        integral(d, |i| fb[i]),
        integral(d, |i| fa[i] * fa[i]),
        integral(d, |i| fb[i] * fb[i]),
        integral(d, |i| fa[i] * fb[i]),
    ];
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=d[2] - w {
        for y in 0..=d[1] - w {
            for x in 0..=d[0] - w {
                let s = |t: &[f64]| box_sum(t, d, [x, y, z], w);
                let (sa, sb, saa, sbb, sab) = (
                    s(&tables[0]),
                    s(&tables[1]),
                    s(&tables[2]),
                    s(&tables[3]),
                    s(&tables[4]),
                );
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Inclusive prefix sums with a zero border: table dims are `d + 1`.
fn integral(d: [usize; 3], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let (tx, ty) = (d[0] + 1, d[1] + 1);
    let mut t = vec![0.0; tx * ty * (d[2] + 1)];
    let at = |x: usize, y: usize, z: usize| x + tx * (y + ty * z);
    for z in 1..=d[2] {
        for y in 1..=d[1] {
            for x in 1..=d[0] {
                let v = f((x - 1) + d[0] * ((y - 1) + d[1] * (z - 1)));
                t[at(x, y, z)] = v + t[at(x - 1, y, z)] + t[at(x, y - 1, z)] + t[at(x, y, z - 1)]
                    - t[at(x - 1, y - 1, z)]
                    - t[at(x - 1, y, z - 1)]
                    - t[at(x, y - 1, z - 1)]
                    + t[at(x - 1, y - 1, z - 1)];
            }
        }
    }
    t
}

fn box_sum(t: &[f64], d: [usize; 3], o: [usize; 3], w: usize) -> f64 {
    let (tx, ty) = (d[0] + 1, d[1] + 1);
    let at = |x: usize, y: usize, z: usize| t[x + tx * (y + ty * z)];
    let [x0, y0, z0] = o;
    let [x1, y1, z1] = [x0 + w, y0 + w, z0 + w];
    at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0)
        - at(x0, y0, z0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(psnr dB, ssim)` per phase.
    pub per_phase: Vec<(f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Per-phase metrics against ground truth. Without an explicit
/// `data_range`, each pair uses its ground truth's max - min.
pub fn evaluate_phases(recons: &[Volume3], gts: &[Volume3], data_range: Option<f64>) -> Result<MetricReport> {
    if recons.len() != gts.len() {
        return Err(Error::SizeMismatch {
            expected: gts.len(),
            actual: recons.len(),
        });
    }
    if gts.is_empty() {
        return Err(Error::param("no phases to evaluate"));
    }
    let per_phase = recons
        .iter()
        .zip(gts)
        .map(|(r, g)| {
            let range = match data_range {
                Some(r) => r,
                None => {
                    let (lo, hi) = g.min_max();
                    hi - lo
                }
            };
            Ok((psnr(r, g, range)?, ssim(r, g, range)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_phase.len() as f64;
    Ok(MetricReport {
        mean_psnr: per_phase.iter().map(|p| p.0).sum::<f64>() / n,
        mean_ssim: per_phase.iter().map(|p| p.1).sum::<f64>() / n,
        per_phase,
    })
}

impl MetricReport {
    /// `phase,psnr,ssim` rows plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,psnr,ssim\n");
        for (i, (p, q)) in self.per_phase.iter().enumerate() {
            let _ = writeln!(s, "{i},{p:.6},{q:.6}");
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Long-format CSV over several methods: `method,phase,psnr,ssim`.
pub fn reports_to_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("method,phase,psnr,ssim\n");
    for (name, r) in rows {
        for (i, (p, q)) in r.per_phase.iter().enumerate() {
            let _ = writeln!(s, "{name},{i},{p:.6},{q:.6}");
        }
        let _ = writeln!(s, "{name},mean,{:.6},{:.6}", r.mean_psnr, r.mean_ssim);
    }
    s
}

/// Methods as rows, phases plus `Average` as columns; PSNR and SSIM blocks.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let n = rows.iter().map(|(_, r)| r.per_phase.len()).max().unwrap_or(0);
    let name_w = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    for (title, pick, prec) in [("PSNR (dB)", 0usize, 2usize), ("SSIM", 1, 4)] {
        let _ = write!(out, "{title:<name_w$}");
        for i in 0..n {
            let _ = write!(out, " | {:>9}", format!("Phase {i}"));
        }
        let _ = writeln!(out, " | {:>9}", "Average");
        let width = name_w + 12 * (n + 1);
        let _ = writeln!(out, "{}", "-".repeat(width));
        for (name, r) in rows {
            let _ = write!(out, "{name:<name_w$}");
            for i in 0..n {
                match r.per_phase.get(i) {
                    Some(v) => {
                        let x = if pick == 0 { v.0 } else { v.1 };
                        let _ = write!(out, " | {x:>9.prec$}");
                    }
                    None => {
                        let _ = write!(out, " | {:>9}", "-");
                    }
                }
            }
            let avg = if pick == 0 { r.mean_psnr } else { r.mean_ssim };
            let _ = writeln!(out, " | {avg:>9.prec$}");
        }
        out.push('\n');
    }
    out
}
