//! Four-dimensional cone-beam CT reconstruction: projection operators, gated
//! acquisition simulation, algebraic reconstruction with spatial and temporal
//! TV, deformation-field refinement and volume metrics.

pub mod acquisition;
pub mod demons;
pub mod dvf;
pub mod error;
pub mod gating;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod recon;
pub mod refine;
pub mod tv;
pub mod volume;

pub use acquisition::{simulate_acquisition, AcquisitionSet};
pub use dvf::{warp, warp_adjoint, Dvf};
pub use error::{Error, Result};
pub use gating::{breathing_phase_assignment, PhaseBinning};
pub use geometry::{Aabb, ConeBeamGeometry, Point3, Ray};
pub use phantom::Phantom4D;
pub use pipeline::{run_pipeline, Method, PipelineConfig};
pub use projector::{backproject, forward_project, project_from_rpt, rpt_transform, PatchSpec, Projector};
pub use recon::{ossart, ossart_ttv, ReconConfig};
pub use refine::{dvf_refine, refine_all_phases, DvfSet, RefineConfig};
pub use volume::{Grid3, RayVolume, View, Volume3};
