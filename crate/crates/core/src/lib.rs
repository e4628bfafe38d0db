//! Laminar ("normal") coordinate systems between nested triangulated surfaces.
//!
//! The library registers an inner surface onto an outer one with a
//! constrained diffeomorphic surface flow (kernel-reduced LDDMM with a
//! normality constraint enforced by an augmented Lagrangian), then builds the
//! laminar system: streamlines, thickness, surface Jacobians, equivolumetric
//! layers. A volumetric Laplace level-set baseline and FreeSurfer-style
//! distance metrics are included for comparison.
//!
//! Modules mirror the pipeline:
//! - [`mesh`]: triangle meshes, file I/O, discrete differential geometry
//! - [`kernel`]: reproducing-kernel velocity fields and norms
//! - [`attachment`]: varifold data-attachment energy and gradient
//! - [`registration`]: the constrained optimal-control solver
//! - [`laminar`]: streamlines, σ, equivolumetric time change, layers
//! - [`levelset`]: voxel Laplace baseline
//! - [`metrics`]: distance distributions and comparison reports
//! - [`synth`]: synthetic fixtures with analytic oracles

pub mod attachment;
pub mod kernel;
pub mod laminar;
pub mod levelset;
pub mod mesh;
pub mod metrics;
pub mod registration;
pub mod synth;

pub use attachment::VarifoldSpec;
pub use kernel::KernelSpec;
pub use laminar::LaminarSystem;
pub use levelset::ScalarGrid;
pub use mesh::TriMesh;
pub use metrics::DistanceDistribution;
pub use registration::{FlowState, RegistrationConfig};
pub use synth::FixtureSpec;

/// Library version, embedded in run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh invariant violated: {0}")]
    InvalidMesh(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("degenerate face {face}{}", match step { Some(s) => format!(" at time step {s}"), None => String::new() })]
    DegenerateFace { face: usize, step: Option<usize> },
    #[error("vertex {0} has no incident face")]
    IsolatedVertex(usize),
    #[error("open mesh not supported here: {0}")]
    OpenMesh(String),
    #[error("surfaces are not nested: {0}")]
    NonNested(String),
    #[error("grid has no ribbon voxels")]
    NoRibbon,
    #[error("streamline stalled (|∇F| < 1e-10) at ({0:.4}, {1:.4}, {2:.4})")]
    StalledStreamline(f64, f64, f64),
    #[error("seed ({0:.4}, {1:.4}, {2:.4}) is outside the ribbon")]
    SeedOutsideRibbon(f64, f64, f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
