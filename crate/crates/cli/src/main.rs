//! `lamina` — laminar coordinate systems between nested surfaces.
//!
//! Subcommands cover the full pipeline: generate synthetic fixtures,
//! register inner to outer surface under the normality constraint, extract
//! streamlines/thickness/equivolumetric layers, run the volumetric Laplace
//! baseline, and compute distance metrics and comparisons. Every run writes
//! `run_summary.json` into the output directory — also on failure — with the
//! config echo, versions, timings, and any convergence report.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
//! diagnostics file path is printed).

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use run::RunContext;

#[derive(Parser)]
#[command(
    name = "lamina",
    version,
    about = "Laminar coordinate systems between nested surfaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration (required; schema depends on the subcommand)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread count (default: logical cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override for randomized fixture generation
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic nested-surface fixture with its analytic oracle
    Synth,
    /// Register the inner surface onto the outer one
    Register,
    /// Extract streamlines, thickness, and equivolumetric layers
    Laminar,
    /// Voxel Laplace baseline: solve F and trace grid streamlines
    Levelset,
    /// Nearest-vertex surface distance distributions
    Metrics,
    /// Vertex-distance vs streamline-thickness comparison report
    Compare,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Register => "register",
            Command::Laminar => "laminar",
            Command::Levelset => "levelset",
            Command::Metrics => "metrics",
            Command::Compare => "compare",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(execute(cli));
}

fn exit_code_for(err: &lamina::Error) -> i32 {
    use lamina::Error::*;
    match err {
        Config(_) | Parse { .. } | Io(_) | Json(_) => 2,
        _ => 3,
    }
}

fn execute(cli: Cli) -> i32 {
    if let Some(threads) = cli.threads {
        // ignore failure: the pool may already exist in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let started = Instant::now();
    let mut ctx = RunContext::default();

    let loaded = load_config(cli.config.as_deref());
    let (config_value, config_dir) = match &loaded {
        Ok((value, dir)) => (Some(value), dir.clone()),
        Err(_) => (None, PathBuf::from(".")),
    };
    let out_dir = cli
        .out
        .clone()
        .or_else(|| {
            config_value
                .and_then(config::configured_output_dir)
                .map(|p| config::resolve(&config_dir, &p))
        })
        .unwrap_or_else(|| config_dir.clone());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create output directory {}: {e}", out_dir.display());
        return 2;
    }

    let result = loaded.and_then(|(value, dir)| {
        dispatch(cli.command, &value, &dir, &out_dir, cli.seed, &mut ctx).map(|_| (value, dir))
    });

    let total = started.elapsed().as_secs_f64();
    ctx.timings.insert("total".into(), total);

    let (status, exit, error_text, config_echo) = match &result {
        Ok((value, _)) => ("ok", 0, None, value.clone()),
        Err(e) => {
            let code = exit_code_for(e);
            let status = if code == 2 { "config-error" } else { "numerical-error" };
            (status, code, Some(e.to_string()), Value::Null)
        }
    };

    let summary = json!({
        "command": cli.command.name(),
        "config_path": cli.config.as_ref().map(|p| p.display().to_string()),
        "config": config_echo,
        "overrides": {
            "out": cli.out.as_ref().map(|p| p.display().to_string()),
            "threads": cli.threads,
            "seed": cli.seed,
        },
        "versions": {
            "lamina": lamina::VERSION,
            "lamina-cli": env!("CARGO_PKG_VERSION"),
        },
        "status": status,
        "exit_code": exit,
        "error": error_text,
        "timings_seconds": ctx.timings,
        "outputs": ctx.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "partial_outputs": exit != 0 && !ctx.outputs.is_empty(),
        "convergence": ctx.convergence,
        "notes": ctx.notes,
    });
    let summary_path = out_dir.join("run_summary.json");
    if let Err(e) = std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    ) {
        eprintln!("error: cannot write {}: {e}", summary_path.display());
    }

    if let Err(e) = &result {
        eprintln!("error: {e}");
        if exit == 3 {
            let diag_path = out_dir.join("diagnostics.json");
            let diag = json!({
                "error": e.to_string(),
                "command": cli.command.name(),
                "outputs_written": ctx.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            });
            if std::fs::write(
                &diag_path,
                serde_json::to_string_pretty(&diag).expect("diag serializes"),
            )
            .is_ok()
            {
                eprintln!("diagnostics written to {}", diag_path.display());
            }
        }
    }
    exit
}

/// Loads the config JSON and returns it with its containing directory (the
/// base for relative paths).
fn load_config(path: Option<&Path>) -> lamina::Result<(Value, PathBuf)> {
    let path = path.ok_or_else(|| {
        lamina::Error::Config("--config <path> is required for this subcommand".into())
    })?;
    if !path.exists() {
        return Err(lamina::Error::Config(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((value, dir))
}

fn dispatch(
    command: Command,
    config: &Value,
    base: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    ctx: &mut RunContext,
) -> lamina::Result<()> {
    match command {
        Command::Synth => run::run_synth(config, base, out_dir, seed, ctx),
        Command::Register => run::run_register(config, base, out_dir, ctx),
        Command::Laminar => run::run_laminar(config, base, out_dir, ctx),
        Command::Levelset => run::run_levelset(config, base, out_dir, ctx),
        Command::Metrics => run::run_metrics(config, base, out_dir, ctx),
        Command::Compare => run::run_compare(config, base, out_dir, ctx),
    }
}
