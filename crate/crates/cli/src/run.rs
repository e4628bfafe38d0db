//! Subcommand implementations. Each run reads its schema from the loaded
//! config document, produces files under the output directory, and records
//! outputs/timings/notes into the shared [`RunContext`] so the summary can
//! report partial progress even when a step fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use lamina::laminar::{self, LaminarSystem};
use lamina::levelset::{save_polylines_vtk, GridSampler, ScalarGrid};
use lamina::metrics::{self, DistanceDistribution};
use lamina::registration::{self, ConvergenceReport};
use lamina::synth;
use lamina::{Result, TriMesh};

use crate::config::*;

/// Accumulates everything the run summary needs.
#[derive(Default)]
pub struct RunContext {
    pub outputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
    pub notes: Map<String, Value>,
    pub convergence: Option<ConvergenceReport>,
}

impl RunContext {
    fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f(self);
        self.timings
            .insert(name.to_string(), started.elapsed().as_secs_f64());
        out
    }
}

fn parse<T: serde::de::DeserializeOwned>(config: &Value) -> Result<T> {
    Ok(serde_json::from_value(config.clone())?)
}

fn load_mesh(base: &Path, path: &Path, key: &str) -> Result<TriMesh> {
    let full = resolve(base, path);
    require_exists(&full, key)?;
    TriMesh::load(&full)
}

pub fn run_synth(
    config: &Value,
    _base: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: SynthConfig = parse(config)?;
    let mut spec = cfg.fixture;
    if let Some(seed) = seed {
        set_fixture_seed(&mut spec, seed);
    }
    let fixture = ctx.time("generate", |_| synth::generate(&spec))?;
    for (name, mesh) in [("inner.vtk", &fixture.inner), ("outer.vtk", &fixture.outer)] {
        let path = out_dir.join(name);
        mesh.save(&path)?;
        ctx.record(path);
    }
    let oracle_path = out_dir.join("oracle.json");
    std::fs::write(
        &oracle_path,
        serde_json::to_string_pretty(&json!({
            "fixture": serde_json::to_value(&spec)?,
            "oracle": fixture.oracle,
        }))?,
    )?;
    ctx.record(oracle_path);
    ctx.notes.insert(
        "fixture".into(),
        json!({
            "inner_vertices": fixture.inner.n_vertices(),
            "outer_vertices": fixture.outer.n_vertices(),
        }),
    );
    Ok(())
}

fn set_fixture_seed(spec: &mut synth::FixtureSpec, value: u64) {
    use synth::FixtureSpec::*;
    match spec {
        SpherePair { seed, .. }
        | CylinderPair { seed, .. }
        | SheetPair { seed, .. }
        | FoldedSheetPair { seed, .. }
        | FlowerTubePair { seed, .. } => *seed = value,
    }
}

pub fn run_register(
    config: &Value,
    base: &Path,
    out_dir: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: RegisterConfig = parse(config)?;
    let inner = load_mesh(base, &cfg.inner, "inner")?;
    let outer = load_mesh(base, &cfg.outer, "outer")?;
    let (state, report) =
        ctx.time("optimize", |_| registration::optimize(&cfg.registration, &inner, &outer))?;

    let checkpoint = out_dir.join("checkpoint.json");
    registration::save_checkpoint(&checkpoint, &cfg.registration, &state)?;
    ctx.record(checkpoint);

    let convergence_path = out_dir.join("convergence.json");
    std::fs::write(&convergence_path, serde_json::to_string_pretty(&report)?)?;
    ctx.record(convergence_path);

    // performance table mirrored to stdout and CSV
    let perf = out_dir.join("performance.csv");
    std::fs::write(
        &perf,
        format!(
            "vertices,faces,outer_iterations,inner_iterations,wall_seconds\n{},{},{},{},{}\n",
            report.vertices,
            report.faces,
            report.outer_iterations.len(),
            report.total_inner_iterations,
            report.wall_time_seconds,
        ),
    )?;
    ctx.record(perf);
    println!(
        "{:>10} {:>10} {:>8} {:>8} {:>10}",
        "vertices", "faces", "outer", "inner", "seconds"
    );
    println!(
        "{:>10} {:>10} {:>8} {:>8} {:>10.2}",
        report.vertices,
        report.faces,
        report.outer_iterations.len(),
        report.total_inner_iterations,
        report.wall_time_seconds,
    );

    ctx.notes.insert(
        "registration".into(),
        json!({
            "converged": report.converged,
            "gamma_d": report.gamma_d,
            "final_max_residual": report
                .outer_iterations
                .last()
                .map(|s| s.max_residual),
        }),
    );
    ctx.convergence = Some(report);
    Ok(())
}

pub fn run_laminar(
    config: &Value,
    base: &Path,
    out_dir: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: LaminarRunConfig = parse(config)?;
    let checkpoint = resolve(base, &cfg.checkpoint);
    require_exists(&checkpoint, "checkpoint")?;
    let (reg_config, state) = registration::load_checkpoint(&checkpoint)?;

    let mut system = LaminarSystem::from_flow(&state)?;
    let sigma = ctx.time("sigma", |_| match cfg.sigma {
        SigmaMethod::OneRing => laminar::sigma_one_ring(&state),
        SigmaMethod::ZetaOde => laminar::sigma_zeta_ode(&reg_config.kernel, &state, cfg.substeps),
    })?;
    system.set_sigma(sigma)?;
    ctx.time("equivolumetric", |_| system.equivolumetric_time_change())?;

    let streamlines = out_dir.join("streamlines.vtk");
    laminar::save_streamlines_vtk(&streamlines, &system)?;
    ctx.record(streamlines);
    let table = out_dir.join("seed_table.csv");
    laminar::save_seed_table_csv(&table, &system)?;
    ctx.record(table);

    for &eps in &cfg.layers {
        let layer = ctx.time(&format!("layer_{eps}"), |_| system.extract_layer(eps))?;
        let path = out_dir.join(format!("layer_{eps}.vtk"));
        layer.save(&path)?;
        ctx.record(path);
    }

    let flagged = system.flagged.iter().filter(|&&f| f).count();
    let mean_thickness =
        system.thickness.iter().sum::<f64>() / system.thickness.len().max(1) as f64;
    ctx.notes.insert(
        "laminar".into(),
        json!({
            "seeds": system.n_seeds(),
            "flagged": flagged,
            "mean_thickness": mean_thickness,
        }),
    );
    Ok(())
}

pub fn run_levelset(
    config: &Value,
    base: &Path,
    out_dir: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: LevelsetRunConfig = parse(config)?;
    let inner = load_mesh(base, &cfg.inner, "inner")?;
    let outer = load_mesh(base, &cfg.outer, "outer")?;

    let mut grid = ctx.time("voxelize", |_| {
        ScalarGrid::voxelize(&inner, &outer, cfg.spacing)
    })?;
    let sweeps = ctx.time("solve", |_| grid.solve_laplace(&cfg.laplace))?;

    let grid_path = out_dir.join("levelset.vtk");
    grid.save_vtk(&grid_path)?;
    ctx.record(grid_path);

    // deterministic stride subsample of the inner vertices as seeds
    let seeds: Vec<_> = match cfg.max_seeds {
        Some(cap) if cap > 0 && cap < inner.n_vertices() => {
            let stride = inner.n_vertices().div_ceil(cap);
            inner.vertices.iter().step_by(stride).copied().collect()
        }
        _ => inner.vertices.clone(),
    };
    let sampler = GridSampler::new(&grid);
    let traces: Vec<(Vec<nalgebra::Point3<f64>>, f64)> = ctx.time("trace", |_| {
        seeds.par_iter().map(|s| sampler.trace(*s)).collect()
    })?;
    let (lines, lengths): (Vec<_>, Vec<_>) = traces.into_iter().unzip();

    let lines_path = out_dir.join("levelset_streamlines.vtk");
    save_polylines_vtk(&lines_path, &lines, Some(("thickness", &lengths)))?;
    ctx.record(lines_path);

    let dist = DistanceDistribution::new(lengths, "inner vertices", "levelset streamline")?;
    let thickness_path = out_dir.join("levelset_thickness.csv");
    dist.save_csv(&thickness_path)?;
    ctx.record(thickness_path);

    ctx.notes.insert(
        "levelset".into(),
        json!({
            "ribbon_voxels": grid.ribbon_count(),
            "sor_sweeps": sweeps,
            "seeds": dist.len(),
            "mean_thickness": dist.mean(),
        }),
    );
    Ok(())
}

pub fn run_metrics(
    config: &Value,
    base: &Path,
    out_dir: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: MetricsRunConfig = parse(config)?;
    let source = load_mesh(base, &cfg.source, "source")?;
    let target = load_mesh(base, &cfg.target, "target")?;
    let dist = ctx.time("fs_distance", |_| {
        metrics::fs_distance(&source.vertices, &target.vertices, cfg.metric)
    })?;

    let distances_path = out_dir.join("distances.csv");
    dist.save_csv(&distances_path)?;
    ctx.record(distances_path);
    let cdf_path = out_dir.join("cdf.csv");
    dist.save_cdf_csv(&cdf_path, cfg.n_bins)?;
    ctx.record(cdf_path);

    let summary = json!({
        "n": dist.len(),
        "mean": dist.mean(),
        "median": dist.median(),
        "q05": dist.quantile(0.05),
        "q25": dist.quantile(0.25),
        "q75": dist.quantile(0.75),
        "q95": dist.quantile(0.95),
        "max": dist.max(),
    });
    let json_path = out_dir.join("metrics.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    ctx.record(json_path);
    ctx.notes.insert("metrics".into(), summary);
    Ok(())
}

pub fn run_compare(
    config: &Value,
    base: &Path,
    out_dir: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let cfg: CompareRunConfig = parse(config)?;
    let inner = load_mesh(base, &cfg.inner, "inner")?;
    let outer = load_mesh(base, &cfg.outer, "outer")?;
    let checkpoint = resolve(base, &cfg.checkpoint);
    require_exists(&checkpoint, "checkpoint")?;
    let (_, state) = registration::load_checkpoint(&checkpoint)?;

    let fs = ctx.time("fs_distance", |_| {
        metrics::fs_distance(&inner.vertices, &outer.vertices, cfg.metric)
    })?;
    let mut system = LaminarSystem::from_flow(&state)?;
    system.set_sigma(laminar::sigma_one_ring(&state)?)?;
    system.equivolumetric_time_change()?;
    let (thickness, excluded) = metrics::thickness_distribution(&system)?;

    let fs_path = out_dir.join("fs_distances.csv");
    fs.save_csv(&fs_path)?;
    ctx.record(fs_path);
    let thickness_path = out_dir.join("streamline_thickness.csv");
    thickness.save_csv(&thickness_path)?;
    ctx.record(thickness_path);

    let report = metrics::compare_report(&fs, &thickness, excluded);
    let report_path = out_dir.join("compare_report.json");
    report.save_json(&report_path)?;
    ctx.record(report_path);
    ctx.notes
        .insert("compare".into(), serde_json::to_value(&report)?);
    Ok(())
}
