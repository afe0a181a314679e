//! Privacy-preserving distributed preprocessing for very large tiled images.
//!
//! The pipeline runs in three phases. A trusted server strips the slide
//! metadata, cuts the pixels into tiles, hides the tile coordinates and
//! scatters the tiles into `K` shards. The shards are placed on cloud
//! infrastructure by a bi-objective (cost, makespan) planner and executed in a
//! deterministic discrete-event simulation that tolerates stragglers and
//! crashed nodes. Finally the trusted server decodes the per-tile verdicts
//! back onto the tile grid and builds a per-class artifact mask.
//!
//! Module map:
//!
//! * [`slide`]: synthetic slides, metadata stripping and the slide container.
//! * [`tiles`]: tile grid and coordinate matrix.
//! * [`privacy`]: coordinate encoding, shard partitioning and leak auditing.
//! * [`scheduler`]: execution-time model, objectives and Pareto planning.
//! * [`simnet`]: discrete-event execution with work stealing.
//! * [`detectors`]: closed-form artifact detectors and their calibration.
//! * [`aggregate`]: mask reconstruction, rendering and evaluation.

pub mod aggregate;
pub mod detectors;
pub mod error;
pub mod privacy;
pub mod scheduler;
pub mod simnet;
pub mod slide;
pub mod tiles;
pub mod time;

pub use aggregate::{aggregate, baseline_mask, evaluate, render_mask, ArtifactMask, ClassMetrics, SummaryReport};
pub use detectors::{calibrate, detect, DetectorSet, Verdicts};
pub use error::{Error, ErrorKind, Result};
pub use privacy::{
    audit, decode, encode, partition, EncodedMatrix, EncodedPartition, PartitionPolicy, PerturbationSecret,
    PrivacyAudit, ShardLayout,
};
pub use scheduler::{
    estimate_et, eval_cost, eval_makespan, plan_exhaustive, plan_heuristic, select_plan, Assignment, EtModel,
    Infrastructure, ParetoFront, PlanPoint, Preference,
};
pub use simnet::{replay, simulate, DetectionOutput, ExecutionTrace, Rebalance, TraceSummary, WorldConfig};
pub use slide::{generate_slide, strip_metadata, ArtifactClass, MetadataVault, PlantedArtifact, SlideImage};
pub use tiles::{split_tiles, CoordinateMatrix, Tile, TileGrid, TileRef};
pub use time::Micros;
