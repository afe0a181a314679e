//! One function per pipeline stage. Each reads its inputs from the workspace,
//! writes its outputs, and returns a one-line summary for the terminal.

use crate::workspace::{read_bytes, read_json, write_bytes, write_json, Workspace};
use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;
use tileflow::aggregate::MaskFile;
use tileflow::privacy::{PartitionFile, SecretFile};
use tileflow::scheduler::{Instance, PlanFile, DEFAULT_BUDGET};
use tileflow::slide::{default_artifacts, GroundTruth};
use tileflow::*;

/// Pixel size of one tile cell in the overlay image.
pub const OVERLAY_CELL_PX: usize = 16;

pub struct SlideConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    /// `None` plants the default artifact set.
    pub artifacts: Option<Vec<PlantedArtifact>>,
}

pub struct SplitConfig {
    pub seed: u64,
    pub tile_size: usize,
    pub shards: usize,
    pub policy: PartitionPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Planner {
    /// Exhaustive when the search space fits the budget, heuristic otherwise.
    Auto,
    Exhaustive,
    Heuristic,
}

pub struct PlanConfig {
    pub seed: u64,
    pub infras: Option<PathBuf>,
    pub et_model: Option<PathBuf>,
    pub preference: Preference,
    pub planner: Planner,
    pub budget: u64,
    pub generations: usize,
    pub population: usize,
}

pub struct RunConfig {
    pub world: WorldConfig,
    pub detectors: Option<PathBuf>,
}

/// Grid geometry and shard layout, kept next to the secret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub layout: ShardLayout,
}

pub fn default_infras() -> Vec<Infrastructure> {
    vec![
        Infrastructure::new("hospital-edge", 1.0, 0.2, 5e6),
        Infrastructure::new("campus-hpc", 2.5, 0.8, 2e7),
        Infrastructure::new("public-cloud", 6.0, 2.4, 1e7),
    ]
}

pub fn load_infras(path: Option<&PathBuf>) -> Result<Vec<Infrastructure>> {
    let infras = match path {
        Some(p) => read_json(p)?,
        None => default_infras(),
    };
    for infra in &infras {
        infra.validate()?;
    }
    Ok(infras)
}

pub fn load_et_model(path: Option<&PathBuf>) -> Result<EtModel> {
    let model: EtModel = match path {
        Some(p) => read_json(p)?,
        None => EtModel::default(),
    };
    model.validate()?;
    Ok(model)
}

pub fn load_detectors(path: Option<&PathBuf>) -> Result<DetectorSet> {
    let set: DetectorSet = match path {
        Some(p) => read_json(p)?,
        None => DetectorSet::default(),
    };
    set.validate()?;
    Ok(set)
}

/// Keeps the perturbation key independent of the slide's pixel noise stream.
fn secret_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7365_6372_6574
}

pub fn generate(ws: &Workspace, cfg: &SlideConfig) -> Result<String> {
    let rows = cfg.height.div_ceil(cfg.tile_size.max(1));
    let cols = cfg.width.div_ceil(cfg.tile_size.max(1));
    let artifacts = cfg.artifacts.clone().unwrap_or_else(|| default_artifacts(rows, cols));
    let slide = generate_slide(cfg.seed, cfg.width, cfg.height, cfg.tile_size, &artifacts)?;
    write_bytes(&ws.trusted("slide.tflw"), &slide.to_container_bytes())?;
    write_json(&ws.trusted("ground_truth.json"), slide.ground_truth().expect("generated slides carry ground truth"))?;
    Ok(format!("generated {}x{} slide with {} planted regions", cfg.width, cfg.height, artifacts.len()))
}

fn shard_paths(ws: &Workspace) -> Vec<(PathBuf, PathBuf)> {
    (0..)
        .map(|k| (ws.cloud(&format!("shard_{k}.json")), ws.cloud(&format!("shard_{k}.bin"))))
        .take_while(|(json, _)| json.exists())
        .collect()
}

pub fn split(ws: &Workspace, cfg: &SplitConfig) -> Result<String> {
    let slide = SlideImage::from_container_bytes(&read_bytes(&ws.require(ws.trusted("slide.tflw"), "generate")?)?)?;
    let (slide, vault) = strip_metadata(slide)?;
    if cfg.tile_size == 0 {
        return Err(Error::InvalidSpec("tile size must be positive".into()).into());
    }
    let (rows, cols) = (slide.height().div_ceil(cfg.tile_size), slide.width().div_ceil(cfg.tile_size));
    let layout = ShardLayout::new(cfg.shards, cfg.policy);
    layout.validate(rows * cols)?;

    let (grid, ax) = split_tiles(&slide, cfg.tile_size)?;
    let secret = PerturbationSecret::generate(secret_seed(cfg.seed), rows, cols);
    let parts = partition(&encode(&ax, &secret)?, &grid, &secret, &layout)?;
    let report = audit(&parts, &ax, &secret, &vault.leak_markers())?;
    if report.sentinel_leaks > 0 {
        return Err(Error::PrivacyPrecondition(format!(
            "{} metadata values found in shard data",
            report.sentinel_leaks
        ))
        .into());
    }

    write_json(&ws.trusted("vault.json"), &vault)?;
    write_json(&ws.trusted("secret.json"), &secret.to_file())?;
    write_json(&ws.trusted("manifest.json"), &grid.manifest())?;
    write_json(
        &ws.trusted("layout.json"),
        &LayoutFile { width: slide.width(), height: slide.height(), tile_size: cfg.tile_size, rows, cols, layout },
    )?;
    write_json(&ws.trusted("audit.json"), &report)?;

    for (json, bin) in shard_paths(ws) {
        fs::remove_file(json)?;
        if bin.exists() {
            fs::remove_file(bin)?;
        }
    }
    for p in &parts {
        let bin = format!("shard_{}.bin", p.shard_index);
        write_json(&ws.cloud(&format!("shard_{}.json", p.shard_index)), &p.to_file(&bin))?;
        write_bytes(&ws.cloud(&bin), &p.payload)?;
    }
    Ok(format!(
        "split {} tiles into {} shards ({}), {} adjacent same-shard pairs",
        grid.len(),
        parts.len(),
        cfg.policy,
        report.adjacency_violations
    ))
}

fn load_partitions(ws: &Workspace) -> Result<Vec<EncodedPartition>> {
    let paths = shard_paths(ws);
    if paths.is_empty() {
        ws.require(ws.cloud("shard_0.json"), "split")?;
    }
    paths
        .into_iter()
        .map(|(json, bin)| {
            let file: PartitionFile = read_json(&json)?;
            let payload = read_bytes(&bin.with_file_name(&file.payload_file))?;
            Ok(EncodedPartition::from_file(file, payload)?)
        })
        .collect()
}

pub fn plan(ws: &Workspace, cfg: &PlanConfig) -> Result<String> {
    let parts = load_partitions(ws)?;
    let inst =
        Instance::from_partitions(&parts, load_infras(cfg.infras.as_ref())?, load_et_model(cfg.et_model.as_ref())?)?;
    let space = (inst.infras.len() as u128).checked_pow(inst.shards.len() as u32).unwrap_or(u128::MAX);
    let exhaustive = match cfg.planner {
        Planner::Exhaustive => true,
        Planner::Heuristic => false,
        Planner::Auto => space <= cfg.budget as u128,
    };
    let front = if exhaustive {
        plan_exhaustive(&inst, cfg.budget)?
    } else {
        plan_heuristic(&inst, cfg.seed, cfg.generations, cfg.population)?
    };
    let file = PlanFile::new(&inst, &front, cfg.preference)?;
    write_json(&ws.top("instance.json"), &inst)?;
    write_json(&ws.top("plan.json"), &file)?;
    let chosen = &file.points[file.chosen];
    Ok(format!(
        "{} front of {} plans; chosen ({}) cost {:.3}, makespan {:.3}s on [{}]",
        if exhaustive { "exhaustive" } else { "heuristic" },
        file.points.len(),
        cfg.preference,
        chosen.f1,
        chosen.f2,
        chosen.assignment.join(", ")
    ))
}

fn load_plan(ws: &Workspace) -> Result<(Instance, PlanPoint)> {
    let inst: Instance = read_json(&ws.require(ws.top("instance.json"), "plan")?)?;
    let file: PlanFile = read_json(&ws.require(ws.top("plan.json"), "plan")?)?;
    let point = file.chosen_point(&inst)?;
    Ok((inst, point))
}

pub fn run(ws: &Workspace, cfg: &RunConfig) -> Result<String> {
    let (inst, point) = load_plan(ws)?;
    let parts = load_partitions(ws)?;
    let detectors = load_detectors(cfg.detectors.as_ref())?;
    write_json(&ws.top("world.json"), &cfg.world)?;
    let (trace, outputs) = simulate(&point, &parts, &inst, &cfg.world, &detectors)?;
    let summary = replay(&trace)?;
    write_bytes(&ws.cloud("trace.jsonl"), trace.to_jsonl().as_bytes())?;
    write_json(&ws.cloud("summary.json"), &summary)?;
    write_json(&ws.cloud("outputs.json"), &outputs)?;
    Ok(format!(
        "simulated {} tiles, completion {:.6}s, {} steals",
        summary.tiles,
        trace.completion_time.as_secs_f64(),
        summary.steals
    ))
}

pub fn aggregate_stage(ws: &Workspace) -> Result<String> {
    let outputs: Vec<DetectionOutput> = read_json(&ws.require(ws.cloud("outputs.json"), "run")?)?;
    let secret_file: SecretFile = read_json(&ws.require(ws.trusted("secret.json"), "split")?)?;
    let layout: LayoutFile = read_json(&ws.require(ws.trusted("layout.json"), "split")?)?;
    let secret = PerturbationSecret::from_file(&secret_file)?;
    if secret.shape() != (layout.rows, layout.cols) {
        return Err(anyhow!(Error::ShapeMismatch {
            expected: format!("{}x{}", layout.rows, layout.cols),
            found: format!("{:?}", secret.shape()),
        }));
    }
    let mask = aggregate(&outputs, &secret, &layout.layout)?;
    write_json(&ws.trusted("mask.json"), &mask.to_file())?;
    write_bytes(&ws.trusted("overlay.tflw"), &render_mask(&mask, OVERLAY_CELL_PX)?.to_container_bytes())?;
    Ok(format!("mask {}x{}, {} artifact-free tiles", mask.rows, mask.cols, mask.artifact_free()))
}

pub fn report(ws: &Workspace) -> Result<String> {
    let mask = ArtifactMask::from_file(&read_json::<MaskFile>(&ws.require(ws.trusted("mask.json"), "aggregate")?)?)?;
    let mut report = SummaryReport::new(&mask);
    if ws.trusted("ground_truth.json").exists() {
        let truth: GroundTruth = read_json(&ws.trusted("ground_truth.json"))?;
        report = report.with_metrics(tileflow::evaluate(&mask, &truth)?);
    }
    if ws.top("plan.json").exists() {
        report = report.with_plan(&load_plan(ws)?.1);
    }
    if ws.cloud("summary.json").exists() {
        let summary: TraceSummary = read_json(&ws.cloud("summary.json"))?;
        report = report.with_completion(tileflow::time::Micros(summary.completion_us));
    }
    if ws.trusted("audit.json").exists() {
        report = report.with_audit(read_json(&ws.trusted("audit.json"))?);
    }
    write_json(&ws.trusted("report.json"), &report)?;
    let f1 = report.metrics.as_ref().map(|m| m.values().map(|c| c.f1).fold(f64::INFINITY, f64::min));
    Ok(match f1 {
        Some(f1) => {
            format!("report written; artifact-free {:.3}, worst per-class F1 {f1:.3}", report.artifact_free_fraction)
        }
        None => format!("report written; artifact-free {:.3}", report.artifact_free_fraction),
    })
}

/// Checks every precondition that can be checked before the first stage runs.
pub fn validate_pipeline(slide: &SlideConfig, split: &SplitConfig, plan: &PlanConfig, run: &RunConfig) -> Result<()> {
    if slide.tile_size == 0 || slide.tile_size != split.tile_size {
        return Err(Error::InvalidSpec("tile size must be positive".into()).into());
    }
    let tiles = slide.width.div_ceil(slide.tile_size) * slide.height.div_ceil(slide.tile_size);
    ShardLayout::new(split.shards, split.policy).validate(tiles)?;
    let infras = load_infras(plan.infras.as_ref())?;
    load_et_model(plan.et_model.as_ref())?;
    load_detectors(run.detectors.as_ref())?;
    // world ids are checked against the infrastructure list only
    let probe = Instance::new(vec![1], infras, EtModel::default())?;
    run.world.validate(&probe)?;
    if plan.population < 4 || !plan.population.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!("population {} must be even and at least 4", plan.population)).into());
    }
    Ok(())
}

pub const DEFAULT_PLAN_BUDGET: u64 = DEFAULT_BUDGET;
