use lamina::mesh::TriMesh;
use lamina::registration::{self, InnerSolverConfig, RegistrationConfig};
use lamina::synth;
use nalgebra::Point3;

fn main() {
    let config = RegistrationConfig {
        n_t: 2,
        max_outer: 4,
        tol_c: 1e-9,
        inner: InnerSolverConfig {
            max_iterations: 1,
            ..InnerSolverConfig::default()
        },
        ..RegistrationConfig::default()
    };
    let inner = synth::icosphere(1, 1.0);
    let sphere = synth::icosphere(1, 1.0);
    let outer = TriMesh::new(
        sphere
            .vertices
            .iter()
            .map(|p| Point3::new(1.6 * p.x, 1.2 * p.y, 0.8 * p.z))
            .collect(),
        sphere.faces.clone(),
    )
    .unwrap();
    let (_, report) = registration::optimize(&config, &inner, &outer).unwrap();
    for (i, s) in report.outer_iterations.iter().enumerate() {
        println!(
            "outer {i}: maxc={:.3e} g={:.3e} inner={} mu={:.1e}",
            s.max_residual, s.grad_inf_norm, s.inner_iterations, s.mu
        );
    }
    println!("converged={}", report.converged);
}
