use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lfhcp::hallucinator::HallucinationConfig;
use lfhcp::pipeline::{self, PipelineManifest, PlannerChoice, WorldSource};
use lfhcp::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lfhcp", version, about = "Critical-point hallucination pipeline and dynamic-world simulator")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline manifest (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output file, or directory for `simulate`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write plottable CSVs (trajectories, coverage curves).
    #[arg(long, global = true)]
    emit_plot_data: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the effective manifest.
    Config,
    /// Resample an odometry CSV (t,x,y,heading) into plan windows.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Fit critical points to every plan and keep the accepted ones.
    Hallucinate {
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        /// Use the long iteration schedule (1000/1000/500).
        #[arg(long)]
        full_iterations: bool,
        #[arg(long)]
        obstacles: Option<usize>,
    },
    /// Sample obstacle trajectories through the kept critical points.
    Generate {
        #[arg(long)]
        critical_sets: PathBuf,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        scenarios_per_plan: Option<usize>,
    },
    /// Render scenarios into LiDAR training records.
    Render {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        beams: Option<usize>,
    },
    /// Dataset coverage over all 15 feature subsets.
    Coverage {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        plans: PathBuf,
    },
    /// Closed-loop trials in dynamic worlds.
    Simulate {
        #[arg(long, conflicts_with = "generate_worlds", required_unless_present = "generate_worlds")]
        worlds: Option<PathBuf>,
        #[arg(long)]
        generate_worlds: bool,
        /// gap, constant:<v>[,<omega>], replay:<trace.csv> or external:<command args>
        #[arg(long, default_value = "gap")]
        planner: String,
        #[arg(long)]
        trials_per_world: Option<usize>,
        /// Disable the predictive safety override.
        #[arg(long)]
        no_safety: bool,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::InvalidInput("--out is required".into()))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn print_json<T: serde::Serialize>(label: &str, value: &T) -> Result<()> {
    println!("{label}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut m = match &cli.config {
        Some(p) => PipelineManifest::load(p)?,
        None => PipelineManifest::default(),
    };
    if let Some(s) = cli.seed {
        m.seed = s;
    }
    let plot = cli.emit_plot_data;
    match cli.command {
        Cmd::Config => {
            let text = m.to_toml()?;
            match &cli.out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Ingest { input, stride, horizon, dt } => {
            m.ingest.stride = stride.unwrap_or(m.ingest.stride);
            m.ingest.horizon = horizon.unwrap_or(m.ingest.horizon);
            m.ingest.dt = dt.unwrap_or(m.ingest.dt);
            let s = pipeline::cmd_ingest(&m, &input, require_out(&cli.out)?)?;
            print_json("ingest", &s)?;
        }
        Cmd::Hallucinate { plans, horizon, full_iterations, obstacles } => {
            m.ingest.horizon = horizon.unwrap_or(m.ingest.horizon);
            if full_iterations {
                let full = HallucinationConfig::default();
                m.hallucination.phase1_iters = full.phase1_iters;
                m.hallucination.phase2_anneal_iters = full.phase2_anneal_iters;
                m.hallucination.phase2_hard_iters = full.phase2_hard_iters;
            }
            m.hallucination.n_obstacles = obstacles.unwrap_or(m.hallucination.n_obstacles);
            let s = pipeline::cmd_hallucinate(&m, &plans, require_out(&cli.out)?, cli.workers)?;
            print_json("hallucinate", &s)?;
        }
        Cmd::Generate { critical_sets, no_augment, scenarios_per_plan } => {
            m.augment &= !no_augment;
            m.generator.scenarios_per_plan = scenarios_per_plan.unwrap_or(m.generator.scenarios_per_plan);
            let out = require_out(&cli.out)?;
            let curve = plot.then(|| sibling(out, "_trajectories.csv"));
            let s = pipeline::cmd_generate(&m, &critical_sets, out, cli.workers, curve.as_deref())?;
            print_json("generate", &s)?;
        }
        Cmd::Render { scenarios, plans, beams } => {
            m.render.lidar.beams = beams.unwrap_or(m.render.lidar.beams);
            let s = pipeline::cmd_render(&m, &scenarios, &plans, require_out(&cli.out)?, cli.workers)?;
            print_json("render", &s)?;
        }
        Cmd::Coverage { scenarios, plans } => {
            let out = require_out(&cli.out)?;
            let curve = plot.then(|| sibling(out, "_curve.csv"));
            let report = pipeline::cmd_coverage(&m, &scenarios, &plans, out, curve.as_deref())?;
            print!("{}", report.to_table());
        }
        Cmd::Simulate { worlds, generate_worlds, planner, trials_per_world, no_safety } => {
            m.simulation.trials_per_world = trials_per_world.unwrap_or(m.simulation.trials_per_world);
            m.simulation.safety.enabled &= !no_safety;
            let choice = PlannerChoice::parse(&planner)?;
            let source = match (&worlds, generate_worlds) {
                (Some(d), _) => WorldSource::Dir(d),
                (None, _) => WorldSource::Generate,
            };
            let (s, _) = pipeline::cmd_simulate(&m, source, &choice, require_out(&cli.out)?, cli.workers, plot)?;
            println!(
                "simulate: {} trials over {} worlds, {} collisions, {} timeouts",
                s.trials, s.worlds, s.collisions, s.timeouts
            );
            println!("success: {}", s.success);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
