//! Mean PSNR of OSSART-TTV on the desk phantom for a list of weight pairs.
//!
//!     cargo run --release --example ttv_sweep -- 2e-4,0 2e-4,2e-3 2e-4,5e-3
//!
//! Each argument is `tv_weight,ttv_weight`.

use cbct4d_core::metrics::evaluate_phases;
use cbct4d_core::pipeline::PipelineConfig;
use cbct4d_core::recon::ossart_ttv_with;
use cbct4d_core::{simulate_acquisition, ReconConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let desk = PipelineConfig::default();
    let proj = desk.projector(desk.ossart_ttv.steps)?;
    let acq = simulate_acquisition(
        &desk.phantom,
        &desk.geometry,
        &desk.binning()?,
        &desk.grid,
        desk.steps,
        0.0,
        0,
    )?;
    let gts = desk.phantom.render_all(&desk.grid)?;
    for arg in std::env::args().skip(1) {
        let (tv, ttv) = arg.split_once(',').ok_or("expected tv,ttv")?;
        let cfg = ReconConfig {
            tv_weight: tv.parse()?,
            ttv_weight: ttv.parse()?,
            ..desk.ossart_ttv
        };
        let vols = ossart_ttv_with(proj.as_ref(), &acq, &cfg)?;
        let r = evaluate_phases(&vols, &gts, None)?;
        println!(
            "tv {} ttv {}: psnr {:.2} dB, ssim {:.4}",
            cfg.tv_weight, cfg.ttv_weight, r.mean_psnr, r.mean_ssim
        );
    }
    Ok(())
}
