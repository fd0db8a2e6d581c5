use cbct4d_core::projector::{CachedProjector, RayMarcher};
use cbct4d_core::recon::{data_term, ossart_per_phase_with, ossart_ttv_with, ossart_with};
use cbct4d_core::refine::{minimize, RefineProblem};
use cbct4d_core::{
    breathing_phase_assignment, simulate_acquisition, AcquisitionSet, ConeBeamGeometry, DvfSet, Grid3, Phantom4D,
    PhaseBinning, ReconConfig, RefineConfig, View, Volume3,
};

fn setup() -> (ConeBeamGeometry, Grid3) {
    let mut geom = ConeBeamGeometry::desk();
    geom.det_w = 24;
    geom.det_h = 24;
    geom.det_spacing_u = 14.0;
    geom.det_spacing_v = 14.0;
    geom.angles = ConeBeamGeometry::full_scan_angles(40);
    (geom, Grid3::centered([20; 3], [9.6; 3]).unwrap())
}

fn acquisition(ph: &Phantom4D, geom: &ConeBeamGeometry, grid: &Grid3, n_phases: usize) -> AcquisitionSet {
    let b = breathing_phase_assignment(n_phases, geom.n_views(), 10.0, 0.0).unwrap();
    simulate_acquisition(ph, geom, &b, grid, 48, 0.0, 0).unwrap()
}

fn cfg(n_iters: usize) -> ReconConfig {
    ReconConfig {
        n_iters,
        n_subsets: 5,
        steps: 48,
        ..ReconConfig::default()
    }
}

#[test]
fn ossart_commutes_with_positive_scaling() {
    let (geom, grid) = setup();
    let acq = acquisition(&Phantom4D::static_desk(), &geom, &grid, 1);
    let proj = RayMarcher::new(&geom, grid, 48).unwrap();
    let all: Vec<usize> = (0..geom.n_views()).collect();
    let c = ReconConfig {
        tv_weight: 0.0,
        ..cfg(4)
    };
    let base = ossart_with(&proj, &acq.views, &all, &c, &Volume3::zeros(grid)).unwrap();
    let scaled_views: Vec<View> = acq
        .views
        .iter()
        .map(|v| View::from_data(v.width, v.height, v.data.iter().map(|x| x * 4.0).collect()).unwrap())
        .collect();
    let scaled = ossart_with(&proj, &scaled_views, &all, &c, &Volume3::zeros(grid)).unwrap();
    for (a, b) in base.data().iter().zip(scaled.data()) {
        assert!((a * 4.0 - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn ossart_output_is_nonnegative_and_residual_drops() {
    let (geom, grid) = setup();
    let acq = acquisition(&Phantom4D::desk(), &geom, &grid, 4);
    let proj = RayMarcher::new(&geom, grid, 48).unwrap();
    let views = acq.bin(1);
    let mut last = data_term(&proj, &Volume3::zeros(grid), &acq.views, views).unwrap();
    for n in 1..=5 {
        let c = ReconConfig {
            tv_weight: 0.0,
            ..cfg(n)
        };
        let v = ossart_with(&proj, &acq.views, views, &c, &Volume3::zeros(grid)).unwrap();
        assert!(v.data().iter().all(|&x| x >= 0.0));
        let r = data_term(&proj, &v, &acq.views, views).unwrap();
        assert!(r <= last, "iteration {n}: {r} > {last}");
        last = r;
    }
}

#[test]
fn cached_and_marching_projectors_give_identical_recons() {
    let (geom, grid) = setup();
    let acq = acquisition(&Phantom4D::desk(), &geom, &grid, 4);
    let all: Vec<usize> = (0..geom.n_views()).collect();
    let a = RayMarcher::new(&geom, grid, 48).unwrap();
    let b = CachedProjector::new(&geom, grid, 48, &all).unwrap();
    let c = cfg(2);
    assert_eq!(
        ossart_ttv_with(&a, &acq, &c).unwrap(),
        ossart_ttv_with(&b, &acq, &c).unwrap()
    );
}

#[test]
fn zero_temporal_weight_decouples_phases() {
    let (geom, grid) = setup();
    let acq = acquisition(&Phantom4D::desk(), &geom, &grid, 4);
    let proj = RayMarcher::new(&geom, grid, 48).unwrap();
    let c = ReconConfig {
        ttv_weight: 0.0,
        ..cfg(3)
    };
    assert_eq!(
        ossart_ttv_with(&proj, &acq, &c).unwrap(),
        ossart_per_phase_with(&proj, &acq, &c).unwrap()
    );
    let joint = ossart_ttv_with(&proj, &acq, &cfg(3)).unwrap();
    assert_ne!(joint, ossart_per_phase_with(&proj, &acq, &cfg(3)).unwrap());
}

#[test]
fn single_phase_joint_recon_is_plain_ossart() {
    let (geom, grid) = setup();
    let acq = acquisition(&Phantom4D::static_desk(), &geom, &grid, 1);
    assert_eq!(acq.binning, PhaseBinning::single(geom.n_views()));
    let proj = RayMarcher::new(&geom, grid, 48).unwrap();
    let all: Vec<usize> = (0..geom.n_views()).collect();
    let joint = ossart_ttv_with(&proj, &acq, &cfg(3)).unwrap();
    let plain = ossart_with(&proj, &acq.views, &all, &cfg(3), &Volume3::zeros(grid)).unwrap();
    assert_eq!(joint, vec![plain]);
}

#[test]
fn refinement_with_true_fields_beats_own_phase_only() {
    let (geom, grid) = setup();
    let ph = Phantom4D::desk();
    let acq = acquisition(&ph, &geom, &grid, 4);
    let proj = RayMarcher::new(&geom, grid, 48).unwrap();
    let mut dvfs = DvfSet::new();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                dvfs.insert((i, j), ph.ground_truth_dvf(i, j, &grid).unwrap());
            }
        }
    }
    let gt = ph.render_phantom(2, &grid).unwrap();
    let init = Volume3::zeros(grid);
    let rc = RefineConfig {
        n_iters: 15,
        ..RefineConfig::default()
    };
    let err = |v: &Volume3| {
        v.data()
            .iter()
            .zip(gt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let all = RefineProblem::new(&proj, &acq, 2, &dvfs, true, 0.0).unwrap();
    let own = RefineProblem::new(&proj, &acq, 2, &dvfs, false, 0.0).unwrap();
    let ra = minimize(&all, &init, &rc, Some(&gt)).unwrap();
    let ro = minimize(&own, &init, &rc, Some(&gt)).unwrap();
    assert!(ra.objective < ra.initial_objective);
    assert!(err(&ra.volume) < err(&ro.volume));
}
