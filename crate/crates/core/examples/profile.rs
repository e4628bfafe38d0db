//! Scratch timing for the registration hot path (not part of the test suite).

use std::time::Instant;

use lamina::attachment::{self, VarifoldSpec};
use lamina::registration::{self, FlowState, RegistrationConfig};
use lamina::synth;

fn main() {
    let inner = synth::icosphere(3, 1.0);
    let outer = synth::icosphere(3, 2.0);
    let config = RegistrationConfig::default();
    let spec = VarifoldSpec::new(0.7);

    let t = Instant::now();
    let e = attachment::varifold_energy(&spec, &inner, &outer).unwrap();
    println!("varifold_energy 1280f: {:.3}s (E={e:.3})", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let g = attachment::varifold_gradient(&spec, &inner, &outer).unwrap();
    println!(
        "varifold_gradient 1280f: {:.3}s (|g0|={:.3})",
        t.elapsed().as_secs_f64(),
        g[0].norm()
    );

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let momenta = (0..config.n_t)
        .map(|_| {
            (0..inner.n_vertices())
                .map(|_| {
                    nalgebra::Vector3::new(
                        rand::Rng::gen::<f64>(&mut rng) - 0.5,
                        rand::Rng::gen::<f64>(&mut rng) - 0.5,
                        rand::Rng::gen::<f64>(&mut rng) - 0.5,
                    ) * 0.05
                })
                .collect()
        })
        .collect();
    let state = FlowState::from_momenta(&config, &inner, momenta).unwrap();

    let t = Instant::now();
    let b = registration::objective(&config, &state, &outer).unwrap();
    println!(
        "objective 642v nt=10: {:.3}s (total={:.3e})",
        t.elapsed().as_secs_f64(),
        b.total
    );

    let t = Instant::now();
    let grad = registration::objective_gradient(&config, &state, &outer).unwrap();
    println!(
        "objective_gradient 642v nt=10: {:.3}s (|g|={:.3e})",
        t.elapsed().as_secs_f64(),
        grad[0][0].norm()
    );

    let t = Instant::now();
    for _ in 0..3 {
        let _ = registration::objective_gradient(&config, &state, &outer).unwrap();
    }
    println!("3x objective_gradient: {:.3}s", t.elapsed().as_secs_f64());
}
