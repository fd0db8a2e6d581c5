use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cbct4d_core::acquisition::AcquisitionSet;
use cbct4d_core::dvf::Dvf;
use cbct4d_core::pipeline::{
    acquisition_dir, dvf_dir, gt_dir, read_dvfs, read_phases, recon_dir, recon_methods_needed, run_pipeline,
    stage_evaluate, stage_gt_dvfs, stage_reconstruct, stage_refine, stage_register, stage_simulate, InitKind, Method,
    PipelineConfig,
};
use cbct4d_core::recon::ReconConfig;
use cbct4d_core::refine::DvfSet;
use cbct4d_core::volume::Volume3;
use cbct4d_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cbct4d", version, about = "Respiratory-gated 4D cone-beam CT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON). Missing fields take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

/// Overrides applied to every selected reconstruction config.
#[derive(Args, Clone, Default)]
struct ReconFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    relaxation: Option<f64>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    ttv_weight: Option<f64>,
    /// Allow negative voxel values.
    #[arg(long)]
    no_nonneg: bool,
    /// Ray steps per pixel.
    #[arg(long)]
    steps: Option<usize>,
}

impl ReconFlags {
    fn apply(&self, c: &mut ReconConfig) {
        if let Some(v) = self.iters {
            c.n_iters = v;
        }
        if let Some(v) = self.subsets {
            c.n_subsets = v;
        }
        if let Some(v) = self.relaxation {
            c.relaxation = v;
        }
        if let Some(v) = self.tv_weight {
            c.tv_weight = v;
        }
        if let Some(v) = self.ttv_weight {
            c.ttv_weight = v;
        }
        if self.no_nonneg {
            c.nonneg = false;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
    }
}

#[derive(Args, Clone, Default)]
struct RefineFlags {
    #[arg(long)]
    refine_iters: Option<usize>,
    /// Fixed gradient step (default: chosen at the first iteration).
    #[arg(long)]
    refine_step: Option<f64>,
    #[arg(long)]
    refine_tv_weight: Option<f64>,
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Use only the refined phase's own views.
    #[arg(long)]
    own_phase_only: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DvfKind {
    Gt,
    Est,
    Zero,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Ossart,
    OssartTtv,
    Gt,
}

#[derive(Subcommand)]
enum Command {
    /// Render ground truth and simulate the gated acquisition.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// OSSART and OSSART-TTV reconstructions from a stored acquisition.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconFlags,
        /// Methods to run (default: whatever the configured methods need).
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
    },
    /// Inter-phase fields: analytic ground truth and demons estimates.
    Register {
        #[command(flatten)]
        common: Common,
    },
    /// DVF-based refinement of every phase.
    Refine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        refine: RefineFlags,
        /// Fields to refine with (default: those of the configured methods).
        #[arg(long, value_enum)]
        dvf: Option<DvfKind>,
        /// Starting volumes (default: from the config).
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// PSNR/SSIM of every stored reconstruction against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// All stages in sequence.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconFlags,
        #[command(flatten)]
        refine: RefineFlags,
    },
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_json(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(cfg)
}

fn apply_refine(flags: &RefineFlags, cfg: &mut PipelineConfig) {
    let r = &mut cfg.refine;
    if let Some(v) = flags.refine_iters {
        r.n_iters = v;
    }
    if flags.refine_step.is_some() {
        r.step = flags.refine_step;
    }
    if let Some(v) = flags.refine_tv_weight {
        r.tv_weight = v;
    }
    if let Some(v) = flags.refine_steps {
        r.steps = v;
    }
    if flags.own_phase_only {
        r.use_all_phases = false;
    }
}

fn load_acquisition(out: &Path) -> cbct4d_core::Result<AcquisitionSet> {
    AcquisitionSet::load(acquisition_dir(out))
}

fn load_init(cfg: &PipelineConfig, out: &Path, kind: InitKind) -> cbct4d_core::Result<Vec<Volume3>> {
    let dir = match kind {
        InitKind::Gt => gt_dir(out),
        other => recon_dir(out, other.name()),
    };
    read_phases(&dir, cfg.n_phases())
}

fn stage<T>(name: &'static str, r: cbct4d_core::Result<T>) -> cbct4d_core::Result<T> {
    r.map_err(|e| if e.stage().is_some() { e } else { e.in_stage(name) })
}

/// Stored reconstructions: configured methods in canonical order, then any
/// other directories under `recon/` by name.
fn stored_recons(cfg: &PipelineConfig, out: &Path) -> cbct4d_core::Result<Vec<(String, Vec<Volume3>)>> {
    let mut names: Vec<String> = Method::ALL
        .into_iter()
        .filter(|m| cfg.wants(*m) && recon_dir(out, m.name()).is_dir())
        .map(|m| m.name().to_string())
        .collect();
    let mut extra = Vec::new();
    if let Ok(rd) = std::fs::read_dir(out.join("recon")) {
        for e in rd.flatten() {
            let n = e.file_name().to_string_lossy().into_owned();
            if e.path().is_dir() && !names.contains(&n) && n.parse::<Method>().is_err() {
                extra.push(n);
            }
        }
    }
    extra.sort();
    names.extend(extra);
    names
        .into_iter()
        .map(|n| {
            let v = read_phases(&recon_dir(out, &n), cfg.n_phases())?;
            Ok((n, v))
        })
        .collect()
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            let (acq, _) = stage_simulate(&cfg, &cfg.out_dir)?;
            log::info!("simulated {} views, bins {:?}", acq.views.len(), acq.binning.counts());
        }
        Command::Reconstruct { common, recon, method } => {
            let mut cfg = load_config(&common)?;
            recon.apply(&mut cfg.ossart);
            recon.apply(&mut cfg.ossart_ttv);
            let methods = if method.is_empty() {
                recon_methods_needed(&cfg)
            } else {
                method
                    .iter()
                    .map(|m| m.parse::<Method>())
                    .collect::<Result<Vec<_>, _>>()?
            };
            if let Some(m) = methods
                .iter()
                .find(|m| !matches!(m, Method::Ossart | Method::OssartTtv))
            {
                bail!("{m} is not a direct reconstruction; use `refine`");
            }
            let out = cfg.out_dir.clone();
            let acq = stage("reconstruct", load_acquisition(&out))?;
            let proj = stage("reconstruct", cfg.projector(cfg.ossart.steps))?;
            stage_reconstruct(&cfg, &out, proj.as_ref(), &acq, &methods)?;
        }
        Command::Register { common } => {
            let cfg = load_config(&common)?;
            let out = cfg.out_dir.clone();
            if cfg.wants(Method::DvfGt) {
                stage_gt_dvfs(&cfg, &out)?;
            }
            if cfg.wants(Method::DvfEst) {
                let phases = stage(
                    "register",
                    read_phases(&recon_dir(&out, Method::OssartTtv.name()), cfg.n_phases()),
                )?;
                stage_register(&cfg, &out, &phases)?;
            }
        }
        Command::Refine {
            common,
            refine,
            dvf,
            init,
        } => {
            let mut cfg = load_config(&common)?;
            apply_refine(&refine, &mut cfg);
            let out = cfg.out_dir.clone();
            let runs: Vec<(DvfKind, String)> = match dvf {
                Some(DvfKind::Gt) => vec![(DvfKind::Gt, Method::DvfGt.name().into())],
                Some(DvfKind::Est) => vec![(DvfKind::Est, Method::DvfEst.name().into())],
                Some(DvfKind::Zero) => vec![(DvfKind::Zero, "dvf_zero".into())],
                None => {
                    let mut v = Vec::new();
                    if cfg.wants(Method::DvfGt) {
                        v.push((DvfKind::Gt, Method::DvfGt.name().into()));
                    }
                    if cfg.wants(Method::DvfEst) {
                        v.push((DvfKind::Est, Method::DvfEst.name().into()));
                    }
                    v
                }
            };
            if runs.is_empty() {
                bail!("no refinement method configured; pass --dvf");
            }
            let acq = stage("refine", load_acquisition(&out))?;
            let gts = stage("refine", read_phases(&gt_dir(&out), cfg.n_phases()))?;
            let proj = stage("refine", cfg.projector(cfg.refine.steps))?;
            for (kind, name) in runs {
                let init_kind = match init {
                    Some(InitArg::Ossart) => InitKind::Ossart,
                    Some(InitArg::OssartTtv) => InitKind::OssartTtv,
                    Some(InitArg::Gt) => InitKind::Gt,
                    None if kind == DvfKind::Est => cfg.dvf_est_init,
                    None => cfg.dvf_gt_init,
                };
                let inits = stage("refine", load_init(&cfg, &out, init_kind))?;
                let dvfs = stage(
                    "refine",
                    match kind {
                        DvfKind::Gt => read_dvfs(&dvf_dir(&out, "gt"), cfg.n_phases()),
                        DvfKind::Est => read_dvfs(&dvf_dir(&out, "est"), cfg.n_phases()),
                        DvfKind::Zero => Ok(zero_dvfs(&cfg)),
                    },
                )?;
                stage_refine(&cfg, &out, &name, proj.as_ref(), &acq, &inits, &dvfs, Some(&gts))?;
            }
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let out = cfg.out_dir.clone();
            let gts = stage("evaluate", read_phases(&gt_dir(&out), cfg.n_phases()))?;
            let recons = stage("evaluate", stored_recons(&cfg, &out))?;
            if recons.is_empty() {
                bail!("no reconstructions under {}", out.join("recon").display());
            }
            let rows = stage_evaluate(&out, &gts, &recons)?;
            print!("{}", cbct4d_core::metrics::format_table(&rows));
        }
        Command::Run { common, recon, refine } => {
            let mut cfg = load_config(&common)?;
            recon.apply(&mut cfg.ossart);
            recon.apply(&mut cfg.ossart_ttv);
            apply_refine(&refine, &mut cfg);
            let res = run_pipeline(&cfg)?;
            print!("{}", res.table);
        }
    }
    Ok(())
}

fn zero_dvfs(cfg: &PipelineConfig) -> DvfSet {
    let n = cfg.n_phases();
    let mut set = DvfSet::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                set.insert((i, j), Dvf::zeros(cfg.grid));
            }
        }
    }
    set
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Stage { stage, source }) => eprintln!("error in stage {stage}: {source}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
