//! `tileflow`: stage-by-stage driver for the privacy-preserving tile pipeline.

mod stages;
mod workspace;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use stages::{PlanConfig, Planner, RunConfig, SlideConfig, SplitConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use tileflow::{ErrorKind, PartitionPolicy, PlantedArtifact, Preference, Rebalance, WorldConfig};
use workspace::{write_bytes, Workspace};

#[derive(Parser)]
#[command(name = "tileflow", version, about = "Privacy-preserving distributed artifact detection on tiled slides")]
struct Cli {
    /// Output directory.
    #[arg(long, short, global = true, env = "TILEFLOW_OUTPUT", default_value = "tileflow-out")]
    output: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a slide with planted artifacts (trusted side).
    Generate {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        slide: SlideArgs,
        #[command(flatten)]
        tiles: TileArg,
    },
    /// Strip metadata, tile, encode and partition into cloud shards.
    Split {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        tiles: TileArg,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Compute the cost/makespan front and pick a plan.
    Plan {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Simulate distributed detection under the chosen plan.
    Run {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        world: WorldArgs,
    },
    /// Decode cloud outputs into the artifact mask (trusted side).
    Aggregate,
    /// Write the summary report.
    Report,
    /// Run all six stages in order.
    Pipeline {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        slide: SlideArgs,
        #[command(flatten)]
        tiles: TileArg,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        world: WorldArgs,
    },
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SlideArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    /// Planted region `class@r0,c0..r1,c1` in tile coordinates; repeatable.
    /// Without any, a default set covering all five classes is planted.
    #[arg(long = "artifact")]
    artifacts: Vec<PlantedArtifact>,
    /// Plant nothing.
    #[arg(long, conflicts_with = "artifacts")]
    clean: bool,
}

#[derive(Args)]
struct TileArg {
    #[arg(long, default_value_t = 128)]
    tile_size: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 4)]
    shards: usize,
    #[arg(long, default_value = "latin-scatter")]
    policy: PartitionPolicy,
}

#[derive(Args)]
struct PlanArgs {
    /// JSON list of infrastructures; three built-in sites when omitted.
    #[arg(long)]
    infras: Option<PathBuf>,
    /// JSON execution-time model; built-in defaults when omitted.
    #[arg(long)]
    et_model: Option<PathBuf>,
    #[arg(long, default_value = "knee")]
    preference: Preference,
    #[arg(long, value_enum, default_value_t = Planner::Auto)]
    planner: Planner,
    /// Largest search space enumerated exhaustively.
    #[arg(long, default_value_t = stages::DEFAULT_PLAN_BUDGET)]
    budget: u64,
    #[arg(long, default_value_t = 100)]
    generations: usize,
    #[arg(long, default_value_t = 40)]
    population: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RebalanceMode {
    None,
    Steal,
}

#[derive(Args)]
struct WorldArgs {
    /// Slow a site down: `id=factor`; repeatable.
    #[arg(long = "straggler", value_parser = parse_pair)]
    stragglers: Vec<(String, f64)>,
    /// Crash a site at a time in seconds: `id=secs`; repeatable.
    #[arg(long = "fail", value_parser = parse_pair)]
    failures: Vec<(String, f64)>,
    /// Also draw crashes from each site's availability.
    #[arg(long)]
    sample_failures: bool,
    #[arg(long, value_enum, default_value_t = RebalanceMode::None)]
    rebalance: RebalanceMode,
    #[arg(long, default_value_t = 1)]
    steal_granularity: usize,
    /// JSON detector thresholds; defaults when omitted.
    #[arg(long)]
    detectors: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(String, f64), String> {
    let (id, value) = s.split_once('=').ok_or_else(|| format!("expected id=value, got `{s}`"))?;
    let value = value.parse::<f64>().map_err(|e| format!("`{value}`: {e}"))?;
    Ok((id.to_string(), value))
}

impl SlideArgs {
    fn config(&self, seed: u64, tile_size: usize) -> SlideConfig {
        let artifacts = if self.clean {
            Some(Vec::new())
        } else if self.artifacts.is_empty() {
            None
        } else {
            Some(self.artifacts.clone())
        };
        SlideConfig { seed, width: self.width, height: self.height, tile_size, artifacts }
    }
}

impl SplitArgs {
    fn config(&self, seed: u64, tile_size: usize) -> SplitConfig {
        SplitConfig { seed, tile_size, shards: self.shards, policy: self.policy }
    }
}

impl PlanArgs {
    fn config(&self, seed: u64) -> PlanConfig {
        PlanConfig {
            seed,
            infras: self.infras.clone(),
            et_model: self.et_model.clone(),
            preference: self.preference,
            planner: self.planner,
            budget: self.budget,
            generations: self.generations,
            population: self.population,
        }
    }
}

impl WorldArgs {
    fn config(&self, seed: u64) -> RunConfig {
        let collect = |pairs: &[(String, f64)]| pairs.iter().cloned().collect::<BTreeMap<_, _>>();
        RunConfig {
            world: WorldConfig {
                seed,
                stragglers: collect(&self.stragglers),
                failures: collect(&self.failures),
                sample_failures: self.sample_failures,
                rebalance: match self.rebalance {
                    RebalanceMode::None => Rebalance::None,
                    RebalanceMode::Steal => Rebalance::Steal { granularity: self.steal_granularity },
                },
            },
            detectors: self.detectors.clone(),
        }
    }
}

fn pipeline(ws: &Workspace, slide: SlideConfig, split: SplitConfig, plan: PlanConfig, run: RunConfig) -> Result<()> {
    stages::validate_pipeline(&slide, &split, &plan, &run)?;
    let step = |name: &str, line: Result<String>| -> Result<()> {
        let line = line?;
        ws.scan_hygiene()?;
        println!("{name}: {line}");
        Ok(())
    };
    step("generate", stages::generate(ws, &slide))?;
    step("split", stages::split(ws, &split))?;
    step("plan", stages::plan(ws, &plan))?;
    step("run", stages::run(ws, &run))?;
    step("aggregate", stages::aggregate_stage(ws))?;
    step("report", stages::report(ws))
}

fn execute(cli: Cli) -> Result<()> {
    let ws = Workspace::new(&cli.output);
    let line = match cli.command {
        Command::Generate { seed, slide, tiles } => stages::generate(&ws, &slide.config(seed.seed, tiles.tile_size))?,
        Command::Split { seed, tiles, split } => stages::split(&ws, &split.config(seed.seed, tiles.tile_size))?,
        Command::Plan { seed, plan } => stages::plan(&ws, &plan.config(seed.seed))?,
        Command::Run { seed, world } => stages::run(&ws, &world.config(seed.seed))?,
        Command::Aggregate => stages::aggregate_stage(&ws)?,
        Command::Report => stages::report(&ws)?,
        Command::Pipeline { seed, slide, tiles, split, plan, world } => {
            let s = seed.seed;
            let marker = ws.failed_marker();
            if marker.exists() {
                std::fs::remove_file(&marker)?;
            }
            let result = pipeline(
                &ws,
                slide.config(s, tiles.tile_size),
                split.config(s, tiles.tile_size),
                plan.config(s),
                world.config(s),
            );
            if let Err(e) = &result {
                write_bytes(&marker, format!("{e:#}\n").as_bytes())?;
            }
            result?;
            return Ok(());
        }
    };
    ws.scan_hygiene()?;
    println!("{line}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<tileflow::Error>().map(tileflow::Error::kind) {
        Some(ErrorKind::Privacy) => 3,
        Some(ErrorKind::Scheduling) => 4,
        Some(ErrorKind::Stalled) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
