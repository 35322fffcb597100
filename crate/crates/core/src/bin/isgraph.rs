use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use isgraph::a_graph::{build_a_graph, load_plan};
use isgraph::eval::{evaluate_dir, exit_code, run_scenario};
use isgraph::factor_graph::FactorGraph;
use isgraph::matcher::{match_graphs, MatcherConfig};
use isgraph::plans::{generate_random_plan, load_scenario, tour_scenario};
use isgraph::s_graph::simulate;

#[derive(Parser)]
#[command(name = "isgraph", version, about = "Localize a simulated robot against a floor plan")]
struct Cli {
    /// Overrides the seed of the scenario or generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a floor plan into an architectural graph.
    BuildAgraph {
        plan: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Simulate a scenario and write the estimated situational graph.
    Simulate {
        scenario: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Match a situational graph against an architectural graph.
    Match {
        agraph: PathBuf,
        sgraph: PathBuf,
        /// Matcher settings as JSON; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full pipeline: simulate, match, merge and evaluate.
    Run {
        scenario: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Recompute metrics from the outputs of `run`.
    Eval { dir: PathBuf },
    /// Generate a random grid plan and, optionally, a touring scenario.
    GenPlan {
        #[arg(long, default_value_t = 5)]
        rooms: usize,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::BuildAgraph { plan, output } => {
            let plan = load_plan(&plan)?;
            let a = build_a_graph(&plan)?;
            write(&output, &a.to_json())?;
            eprintln!(
                "{} variables, {} factors",
                a.graph.num_variables(),
                a.graph.num_factors()
            );
        }
        Command::Simulate { scenario, output } => {
            let (mut scenario, plan) = load_scenario(&scenario)?;
            if let Some(seed) = cli.seed {
                scenario.sim.seed = seed;
            }
            let (s, offset) = simulate(&plan, &scenario.sim, &scenario.sgraph)?;
            std::fs::create_dir_all(&output)?;
            write(&output.join("sgraph.json"), &s.to_json())?;
            write(&output.join("trajectory_map.csv"), &s.trajectory_csv(&s.trajectory()))?;
            write(
                &output.join("map_offset.json"),
                &serde_json::to_string_pretty(&offset)?,
            )?;
            eprintln!(
                "{} keyframes, {} planes, {} rooms",
                s.keyframes().len(),
                s.planes().len(),
                s.rooms().len()
            );
        }
        Command::Match {
            agraph,
            sgraph,
            config,
        } => {
            let a = FactorGraph::from_json(&read(&agraph)?)?;
            let s = FactorGraph::from_json(&read(&sgraph)?)?;
            let cfg: MatcherConfig = match config {
                Some(p) => serde_json::from_str(&read(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => MatcherConfig::default(),
            };
            let result = match_graphs(&a, &s, &cfg)?;
            println!("{}", result.to_json());
            return Ok(exit_code(result.status));
        }
        Command::Run { scenario, output } => {
            let out = run_scenario(&scenario, &output, cli.seed)?;
            println!("{}", out.report.to_json());
            return Ok(exit_code(out.report.status));
        }
        Command::Eval { dir } => {
            let summary = evaluate_dir(&dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::GenPlan {
            rooms,
            output,
            scenario,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let plan = generate_random_plan(rooms, seed)?;
            write(&output, &plan.to_json())?;
            if let Some(path) = scenario {
                let plan_ref = relative_plan_path(&path, &output);
                let sc = tour_scenario(&plan, plan_ref, seed)?;
                write(&path, &sc.to_json())?;
            }
        }
    }
    Ok(0)
}

/// Plan path as written into a scenario stored at `scenario`.
fn relative_plan_path(scenario: &Path, plan: &Path) -> PathBuf {
    let plan_abs = std::path::absolute(plan).unwrap_or_else(|_| plan.to_path_buf());
    let base = scenario
        .parent()
        .and_then(|p| std::path::absolute(p).ok())
        .unwrap_or_default();
    plan_abs
        .strip_prefix(&base)
        .map(Path::to_path_buf)
        .unwrap_or(plan_abs)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
