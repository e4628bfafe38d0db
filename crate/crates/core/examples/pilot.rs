//! Scratch pilot for acceptance-run magnitudes (not part of the test suite).

use std::time::Instant;

use nalgebra::Point3;

use lamina::laminar::{self, LaminarSystem};
use lamina::levelset::{GridSampler, LaplaceConfig, ScalarGrid};
use lamina::metrics;
use lamina::registration::{self, FlowState, RegistrationConfig};
use lamina::synth::{self, FixtureSpec};

fn thickness_stats(state: &FlowState) -> (f64, f64, f64) {
    let sys = LaminarSystem::from_flow(state).unwrap();
    let n = sys.thickness.len() as f64;
    let mean = sys.thickness.iter().sum::<f64>() / n;
    let within = sys
        .thickness
        .iter()
        .filter(|t| (**t - 1.0).abs() <= 0.02)
        .count() as f64
        / n;
    let worst = sys
        .thickness
        .iter()
        .map(|t| (t - 1.0).abs())
        .fold(0.0, f64::max);
    (mean, within, worst)
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if which == "sphere" || which == "all" {
        let inner = synth::icosphere(3, 1.0);
        let outer = synth::icosphere(3, 2.0);
        let config = RegistrationConfig::default();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let t0 = Instant::now();
        let (state, report) = pool
            .install(|| registration::optimize(&config, &inner, &outer))
            .unwrap();
        let wall = t0.elapsed().as_secs_f64();
        let (mean, within, worst) = thickness_stats(&state);
        println!(
            "sphere: wall={wall:.1}s converged={} outers={} maxres={:.3e}",
            report.converged,
            report.outer_iterations.len(),
            report.outer_iterations.last().unwrap().max_residual
        );
        println!("sphere: mean={mean:.5} within02={within:.4} worst={worst:.4}");

        let inner2 = synth::icosphere_seeded(3, 1.0, 42);
        let t1 = Instant::now();
        let (state2, _) = registration::optimize(&config, &inner2, &outer).unwrap();
        let (mean2, _, _) = thickness_stats(&state2);
        println!(
            "sphere-retri: wall={:.1}s mean={mean2:.5} shift={:.4}%",
            t1.elapsed().as_secs_f64(),
            100.0 * (mean2 - mean).abs() / mean
        );

        // criterion 6 magnitudes on this run
        let ring = laminar::sigma_one_ring(&state).unwrap();
        let zeta = laminar::sigma_zeta_ode(&config.kernel, &state, 2).unwrap();
        let nt = state.n_steps();
        let n = state.n_vertices();
        let h_per_step: Vec<Vec<f64>> = (0..=nt)
            .map(|i| state.mesh_at(i).mean_curvature().unwrap().0)
            .collect();
        let sys = LaminarSystem::from_flow(&state).unwrap();
        let mut dev_zr = Vec::new();
        let mut dev_lr = Vec::new();
        for k in 0..n {
            let r1 = ring[nt][k];
            let z1 = zeta[nt][k];
            let hs: Vec<f64> = (0..=nt).map(|i| h_per_step[i][k]).collect();
            let lep = laminar::leprince_sigma(&hs, sys.thickness[k]).unwrap();
            dev_zr.push((z1 - r1).abs() / r1.abs().max(1e-12));
            dev_lr.push((lep[nt] - r1).abs() / r1.abs().max(1e-12));
        }
        dev_zr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dev_lr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |v: &Vec<f64>, p: f64| v[((v.len() - 1) as f64 * p) as usize];
        println!(
            "sigma dev zeta-vs-ring: med={:.4} p90={:.4} max={:.4}",
            q(&dev_zr, 0.5),
            q(&dev_zr, 0.9),
            dev_zr.last().unwrap()
        );
        println!(
            "sigma dev leprince-vs-ring: med={:.4} p90={:.4} max={:.4}",
            q(&dev_lr, 0.5),
            q(&dev_lr, 0.9),
            dev_lr.last().unwrap()
        );

        // criterion 2 layer radii
        let mut sys2 = LaminarSystem::from_flow(&state).unwrap();
        sys2.set_sigma(ring).unwrap();
        sys2.equivolumetric_time_change().unwrap();
        for eps in [0.25, 0.5, 0.75] {
            let layer = sys2.extract_layer(eps).unwrap();
            let mean_r =
                layer.vertices.iter().map(|p| p.coords.norm()).sum::<f64>() / layer.n_vertices() as f64;
            let expect = (1.0f64 + eps * 7.0).powf(1.0 / 3.0);
            println!(
                "layer eps={eps}: mean_r={mean_r:.5} expect={expect:.5} rel={:.4}%",
                100.0 * (mean_r - expect).abs() / expect
            );
        }
    }

    if which == "folded" || which == "all" {
        for resolution in [20usize] {
            let spec = FixtureSpec::FoldedSheetPair {
                amplitude: 0.5,
                wavelength: 2.0,
                separation: 0.3,
                extent: 2.0,
                resolution,
                seed: 0,
            };
            let fx = synth::generate(&spec).unwrap();
            println!(
                "folded res={resolution}: inner {}v {}f",
                fx.inner.n_vertices(),
                fx.inner.n_faces()
            );
            let config = RegistrationConfig {
                n_t: 8,
                ..RegistrationConfig::default()
            };
            let t0 = Instant::now();
            let (state, report) = registration::optimize(&config, &fx.inner, &fx.outer).unwrap();
            println!(
                "folded: wall={:.1}s converged={} outers={} maxres={:.2e}",
                t0.elapsed().as_secs_f64(),
                report.converged,
                report.outer_iterations.len(),
                report.outer_iterations.last().unwrap().max_residual
            );
            let mut sys = LaminarSystem::from_flow(&state).unwrap();
            sys.set_sigma(laminar::sigma_one_ring(&state).unwrap()).unwrap();
            sys.equivolumetric_time_change().unwrap();
            let (thick, excluded) = metrics::thickness_distribution(&sys).unwrap();
            let fs = metrics::fs_distance(
                &fx.inner.vertices,
                &fx.outer.vertices,
                metrics::PointMetric::Euclidean,
            )
            .unwrap();
            println!(
                "folded: fs_mean={:.4} thick_mean={:.4} excluded={excluded} underest={}",
                fs.mean(),
                thick.mean(),
                fs.mean() < thick.mean()
            );
        }
    }

    if which == "folded2" {
        // clean offset: curvature radius 1/(A (2pi/L)^2) = 0.396 > separation
        let spec = FixtureSpec::FoldedSheetPair {
            amplitude: 0.4,
            wavelength: 2.5,
            separation: 0.25,
            extent: 2.0,
            resolution: 16,
            seed: 0,
        };
        let fx = synth::generate(&spec).unwrap();
        println!(
            "folded2: inner {}v {}f",
            fx.inner.n_vertices(),
            fx.inner.n_faces()
        );
        for (kw, vw, gs) in [(0.4, 0.3, 2000.0), (0.4, 0.3, 8000.0)] {
            let config = RegistrationConfig {
                kernel: lamina::kernel::KernelSpec::gaussian(kw),
                varifold: lamina::attachment::VarifoldSpec::new(vw),
                gamma_auto_scale: gs,
                n_t: 8,
                ..RegistrationConfig::default()
            };
            let t0 = Instant::now();
            let (state, report) = registration::optimize(&config, &fx.inner, &fx.outer).unwrap();
            println!(
                "folded2 kw={kw} vw={vw} gs={gs}: wall={:.0}s converged={} outers={}",
                t0.elapsed().as_secs_f64(),
                report.converged,
                report.outer_iterations.len()
            );
            for (i, o) in report.outer_iterations.iter().enumerate() {
                if i < 3 || i + 3 >= report.outer_iterations.len() {
                    println!(
                        "  outer {i}: obj={:.4e} attach={:.4e} maxc={:.2e} g={:.2e} inner={}",
                        o.objective, o.attachment, o.max_residual, o.grad_inf_norm,
                        o.inner_iterations
                    );
                }
            }
            let mut sys = LaminarSystem::from_flow(&state).unwrap();
            sys.set_sigma(laminar::sigma_one_ring(&state).unwrap()).unwrap();
            sys.equivolumetric_time_change().unwrap();
            let (thick, excluded) = metrics::thickness_distribution(&sys).unwrap();
            let fs = metrics::fs_distance(
                &fx.inner.vertices,
                &fx.outer.vertices,
                metrics::PointMetric::Euclidean,
            )
            .unwrap();
            let mut tv = thick.distances.clone();
            tv.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "folded2: fs_mean={:.4} thick_mean={:.4} thick_p10={:.4} thick_p90={:.4} excl={excluded} underest={}",
                fs.mean(),
                thick.mean(),
                tv[tv.len() / 10],
                tv[9 * tv.len() / 10],
                fs.mean() < thick.mean()
            );
        }
    }

    if which == "prop1" || which == "all" {
        // criterion 3: radial flow r(t) = 1 + 0.5 t on subdivision 4
        let base = synth::icosphere(4, 1.0);
        let nt = 8;
        let config = RegistrationConfig {
            n_t: nt,
            ..RegistrationConfig::default()
        };
        let mut state = FlowState::with_zero_momenta(&config, &base);
        for i in 0..=nt {
            let r = 1.0 + 0.5 * state.times[i];
            state.positions[i] = base.vertices.iter().map(|p| Point3::from(p.coords * r)).collect();
        }
        let sigma = laminar::sigma_one_ring(&state).unwrap();
        let dt = 1.0 / nt as f64;
        let mut ok = 0usize;
        let mut total = 0usize;
        let mut worst: f64 = 0.0;
        for i in 1..nt {
            let mesh = state.mesh_at(i);
            let (h, boundary) = mesh.mean_curvature().unwrap();
            for k in 0..base.n_vertices() {
                if boundary[k] {
                    continue;
                }
                let dsigma = (sigma[i + 1][k] - sigma[i - 1][k]) / (2.0 * dt);
                let predicted = -2.0 * sigma[i][k] * 0.5 * h[k];
                let rel = (dsigma - predicted).abs() / dsigma.abs().max(1e-12);
                worst = worst.max(rel);
                if rel < 0.02 {
                    ok += 1;
                }
                total += 1;
            }
        }
        println!(
            "prop1: within2pct={:.4} worst={:.4} (n={total})",
            ok as f64 / total as f64,
            worst
        );
    }

    if which == "levelset" || which == "all" {
        let t0 = Instant::now();
        let inner = synth::icosphere(4, 1.0);
        let outer = synth::icosphere(4, 2.0);
        let mut grid = ScalarGrid::voxelize(&inner, &outer, 0.05).unwrap();
        let sweeps = grid.solve_laplace(&LaplaceConfig::default()).unwrap();
        let sphere_f = |r: f64| (1.0 - 1.0 / r) / 0.5;
        let mut err: f64 = 0.0;
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let idx = grid.index(i, j, k);
                    if grid.labels[idx] == lamina::levelset::VoxelLabel::Ribbon {
                        let p = grid.node_position(i, j, k);
                        err = err.max((grid.values[idx] - sphere_f(p.coords.norm())).abs());
                    }
                }
            }
        }
        println!(
            "levelset h=0.05: sweeps={sweeps} maxFerr={err:.5} ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        let sampler = GridSampler::new(&grid);
        let mut worst: f64 = 0.0;
        let mut mean = 0.0;
        let stride = inner.n_vertices().div_ceil(200);
        let seeds: Vec<_> = inner.vertices.iter().step_by(stride).collect();
        for s in &seeds {
            let (_, len) = sampler.trace(**s).unwrap();
            worst = worst.max((len - 1.0).abs());
            mean += len;
        }
        mean /= seeds.len() as f64;
        println!(
            "levelset thickness: n={} mean={mean:.4} worstdev={worst:.4}",
            seeds.len()
        );
    }
}
