//! Shared fixtures for the pipeline benchmarks (see `benches/pipeline.rs`).

use lamina::registration::{FlowState, RegistrationConfig};
use lamina::TriMesh;

/// A small concentric-sphere problem sized for steady benchmark runtimes.
pub fn sphere_problem(subdivision: u32) -> (RegistrationConfig, TriMesh, TriMesh) {
    let inner = lamina::synth::icosphere(subdivision, 1.0);
    let outer = lamina::synth::icosphere(subdivision, 2.0);
    let config = RegistrationConfig {
        n_t: 5,
        ..RegistrationConfig::default()
    };
    (config, inner, outer)
}

/// A short prescribed flow used to benchmark laminar post-processing.
pub fn expanded_flow(subdivision: u32) -> FlowState {
    let (config, inner, _) = sphere_problem(subdivision);
    let normals = inner.vertex_normals().expect("sphere normals");
    let momenta = vec![normals.iter().map(|n| 0.15 * n).collect(); config.n_t];
    FlowState::from_momenta(&config, &inner, momenta).expect("valid flow")
}
