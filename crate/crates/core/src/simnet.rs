//! Deterministic discrete-event execution of a plan.
//!
//! Each infrastructure that received at least one shard becomes a node with a
//! FIFO queue of tiles (its shards in index order). A node processes one tile
//! at a time; a tile costs the node's per-tile time from the ET model,
//! multiplied by the node's slowdown factor. Nodes may crash at configured
//! times, losing the tile in flight back to their queue.
//!
//! With work stealing enabled, every decision point moves tiles from the
//! tail of the most backlogged queue (a crashed node counts as infinitely
//! backlogged) to the live node that would finish them first, in batches of
//! `granularity`, while that strictly beats the victim's projected end. The
//! thief may still be busy; stolen tiles wait in its queue and cost the
//! thief's own per-tile time, transfer included.
//!
//! Simultaneous events are ordered by (kind rank, node, tile), so identical
//! inputs always give byte-identical traces.

use crate::detectors::{detect, DetectorSet, Verdicts};
use crate::error::{Error, Result};
use crate::privacy::EncodedPartition;
use crate::scheduler::{Instance, PlanPoint};
use crate::time::Micros;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Rebalance {
    #[default]
    None,
    Steal {
        granularity: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Infrastructure id -> slowdown factor (>= 1).
    #[serde(default)]
    pub stragglers: BTreeMap<String, f64>,
    /// Infrastructure id -> crash time in seconds.
    #[serde(default)]
    pub failures: BTreeMap<String, f64>,
    /// Draw additional crash times from each site's availability.
    #[serde(default)]
    pub sample_failures: bool,
    #[serde(default)]
    pub rebalance: Rebalance,
}

impl WorldConfig {
    pub fn fault_free() -> Self {
        WorldConfig::default()
    }

    pub fn validate(&self, inst: &Instance) -> Result<()> {
        for (id, &s) in &self.stragglers {
            if inst.infra_index(id).is_none() {
                return Err(Error::InvalidSpec(format!("straggler `{id}` is not a known infrastructure")));
            }
            if !(s.is_finite() && s >= 1.0) {
                return Err(Error::InvalidSpec(format!("slowdown for `{id}` must be >= 1, got {s}")));
            }
        }
        for (id, &t) in &self.failures {
            if inst.infra_index(id).is_none() {
                return Err(Error::InvalidSpec(format!("failure target `{id}` is not a known infrastructure")));
            }
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidSpec(format!("failure time for `{id}` must be >= 0")));
            }
        }
        if let Rebalance::Steal { granularity: 0 } = self.rebalance {
            return Err(Error::InvalidSpec("steal granularity must be at least 1 tile".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    TileDone,
    ShardDone,
    NodeFail,
    Steal,
    Dispatch,
    AllDone,
}

impl EventKind {
    /// Tie-break rank for events at the same instant.
    pub fn rank(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_us: u64,
    pub kind: EventKind,
    pub node: Option<String>,
    pub tile: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard: Option<usize>,
}

impl TraceEvent {
    fn sort_key(&self) -> (u64, u8, Option<&str>, Option<u64>) {
        (self.t_us, self.kind.rank(), self.node.as_deref(), self.tile)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
    pub completion_time: Micros,
    pub per_node_busy: BTreeMap<String, Micros>,
}

impl ExecutionTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.events.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TraceEvent>, _>>()?;
        Self::from_events(events)
    }

    /// Rebuilds the derived fields by replaying `events`.
    pub fn from_events(events: Vec<TraceEvent>) -> Result<Self> {
        let (completion_time, per_node_busy, _) = scan(&events)?;
        Ok(ExecutionTrace { events, completion_time, per_node_busy })
    }
}

/// Per-tile verdicts as reported by a cloud node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub encoded_id: u64,
    pub verdicts: Verdicts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Job {
    shard: usize,
    slot: usize,
    encoded_id: u64,
}

struct Node {
    id: String,
    tile_time: Micros,
    queue: VecDeque<Job>,
    current: Option<(Job, Micros, Micros)>,
    failed: bool,
    busy: Micros,
}

impl Node {
    fn idle(&self) -> bool {
        !self.failed && self.current.is_none()
    }

    fn free_at(&self, now: Micros) -> Micros {
        self.current.map_or(now, |(_, _, end)| end) + self.tile_time * self.queue.len() as u64
    }

    /// When this node would finish its queue; unbounded once crashed.
    fn projected_end(&self, now: Micros) -> Micros {
        if self.failed {
            Micros(u64::MAX)
        } else {
            self.free_at(now)
        }
    }
}

// heap key: (time, rank, node, tile)
type Pending = Reverse<(Micros, u8, usize, u64)>;

struct Sim<'a> {
    nodes: Vec<Node>,
    partitions: &'a [EncodedPartition],
    detector: &'a DetectorSet,
    steal: Option<usize>,
    heap: BinaryHeap<Pending>,
    events: Vec<TraceEvent>,
    outputs: Vec<DetectionOutput>,
    remaining_in_shard: Vec<usize>,
    remaining: usize,
}

impl Sim<'_> {
    fn log(&mut self, t: Micros, kind: EventKind, node: Option<usize>, tile: Option<u64>, shard: Option<usize>) {
        let node = node.map(|n| self.nodes[n].id.clone());
        self.events.push(TraceEvent { t_us: t.0, kind, node, tile, shard });
    }

    fn dispatch(&mut self, n: usize, now: Micros) {
        let job = self.nodes[n].queue.pop_front().expect("dispatch from empty queue");
        let end = now + self.nodes[n].tile_time;
        self.nodes[n].current = Some((job, now, end));
        self.heap.push(Reverse((end, EventKind::TileDone.rank(), n, job.encoded_id)));
        self.log(now, EventKind::Dispatch, Some(n), Some(job.encoded_id), None);
    }

    /// Moves tail batches from the most backlogged queue to whichever live
    /// node finishes them soonest, as long as that beats the victim's own
    /// projected end. Every move lowers the largest projected end or leaves
    /// it in place, so the run never ends later than without stealing.
    fn rebalance(&mut self, now: Micros, granularity: usize) -> bool {
        let mut moved = false;
        loop {
            let victim = (0..self.nodes.len()).filter(|&v| !self.nodes[v].queue.is_empty()).max_by(|&a, &b| {
                self.nodes[a].projected_end(now).cmp(&self.nodes[b].projected_end(now)).then(b.cmp(&a))
            });
            let Some(v) = victim else { return moved };
            let batch = granularity.min(self.nodes[v].queue.len());
            let thief = (0..self.nodes.len())
                .filter(|&m| m != v && !self.nodes[m].failed)
                .map(|m| (self.nodes[m].free_at(now) + self.nodes[m].tile_time * batch as u64, m))
                .min();
            match thief {
                Some((done_by, m)) if done_by < self.nodes[v].projected_end(now) => {
                    let at = self.nodes[v].queue.len() - batch;
                    let stolen: Vec<Job> = self.nodes[v].queue.drain(at..).collect();
                    for job in stolen {
                        self.log(now, EventKind::Steal, Some(m), Some(job.encoded_id), None);
                        self.nodes[m].queue.push_back(job);
                    }
                    moved = true;
                }
                _ => return moved,
            }
        }
    }

    fn decide(&mut self, now: Micros) {
        if let Some(g) = self.steal {
            self.rebalance(now, g);
        }
        for n in 0..self.nodes.len() {
            if self.nodes[n].idle() && !self.nodes[n].queue.is_empty() {
                self.dispatch(n, now);
            }
        }
    }

    fn complete(&mut self, n: usize, now: Micros, tile: u64) -> Result<bool> {
        match self.nodes[n].current {
            Some((job, start, end)) if end == now && job.encoded_id == tile => {
                self.nodes[n].current = None;
                self.nodes[n].busy += end - start;
                let part = &self.partitions[job.shard];
                let verdicts = detect(part.tile_pixels(job.slot), part.tile_size(), self.detector)?;
                self.outputs.push(DetectionOutput { encoded_id: tile, verdicts });
                self.log(now, EventKind::TileDone, Some(n), Some(tile), None);
                self.remaining -= 1;
                self.remaining_in_shard[job.shard] -= 1;
                if self.remaining_in_shard[job.shard] == 0 {
                    self.log(now, EventKind::ShardDone, Some(n), None, Some(job.shard));
                }
                Ok(true)
            }
            // completion of a tile lost to a crash
            _ => Ok(false),
        }
    }

    fn fail(&mut self, n: usize, now: Micros) {
        let node = &mut self.nodes[n];
        if node.failed {
            return;
        }
        node.failed = true;
        if let Some((job, start, _)) = node.current.take() {
            node.busy += now - start;
            node.queue.push_front(job);
        }
        self.log(now, EventKind::NodeFail, Some(n), None, None);
    }
}

/// Runs the plan to completion and returns the trace and one output per tile.
pub fn simulate(
    plan: &PlanPoint,
    partitions: &[EncodedPartition],
    inst: &Instance,
    world: &WorldConfig,
    detector: &DetectorSet,
) -> Result<(ExecutionTrace, Vec<DetectionOutput>)> {
    inst.validate()?;
    world.validate(inst)?;
    detector.validate()?;
    let genes = &plan.assignment.0;
    if genes.len() != partitions.len() || partitions.len() != inst.shards.len() {
        return Err(Error::InvalidSpec(format!(
            "plan maps {} shards, {} partitions given, instance has {}",
            genes.len(),
            partitions.len(),
            inst.shards.len()
        )));
    }
    for (k, p) in partitions.iter().enumerate() {
        if p.shard_index != k || p.size() != inst.shards[k] {
            return Err(Error::InvalidSpec(format!("partition {k} does not match the planned shard")));
        }
    }
    if let Some(k) = genes.iter().position(|&i| i >= inst.infras.len()) {
        return Err(Error::UnmappedShard(k));
    }

    let mut used: Vec<usize> = genes.clone();
    used.sort_unstable();
    used.dedup();
    let mut nodes = Vec::with_capacity(used.len());
    for &i in &used {
        let infra = &inst.infras[i];
        let slowdown = world.stragglers.get(&infra.id).copied().unwrap_or(1.0);
        let tile_time = inst.et_model.tile_time(infra)?.scale(slowdown).max(Micros(1));
        let queue = genes
            .iter()
            .enumerate()
            .filter(|&(_, &g)| g == i)
            .flat_map(|(k, _)| {
                partitions[k].entries.iter().enumerate().map(move |(slot, e)| Job {
                    shard: k,
                    slot,
                    encoded_id: e.encoded_id,
                })
            })
            .collect();
        nodes.push(Node { id: infra.id.clone(), tile_time, queue, current: None, failed: false, busy: Micros::ZERO });
    }

    let mut heap = BinaryHeap::new();
    let horizon: Micros = nodes.iter().map(|n| n.tile_time * n.queue.len() as u64).max().unwrap_or(Micros::ZERO);
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    for (n, &i) in used.iter().enumerate() {
        let infra = &inst.infras[i];
        let explicit = world.failures.get(&infra.id).map(|&s| Micros::from_secs_f64(s));
        // always draw so the stream does not depend on which sites have explicit times
        let draw: f64 = rng.gen();
        let at: f64 = rng.gen();
        let sampled = (world.sample_failures && draw >= infra.availability).then(|| horizon.scale(at));
        if let Some(t) = explicit.or(sampled) {
            heap.push(Reverse((t, EventKind::NodeFail.rank(), n, 0)));
        }
    }

    let total: usize = partitions.iter().map(EncodedPartition::size).sum();
    let mut sim = Sim {
        nodes,
        partitions,
        detector,
        steal: match world.rebalance {
            Rebalance::None => None,
            Rebalance::Steal { granularity } => Some(granularity),
        },
        heap,
        events: Vec::new(),
        outputs: Vec::with_capacity(total),
        remaining_in_shard: partitions.iter().map(EncodedPartition::size).collect(),
        remaining: total,
    };

    let mut now = Micros::ZERO;
    loop {
        while let Some(&Reverse((t, rank, n, tile))) = sim.heap.peek() {
            if t != now {
                break;
            }
            sim.heap.pop();
            if rank == EventKind::TileDone.rank() {
                sim.complete(n, now, tile)?;
            } else {
                sim.fail(n, now);
            }
        }
        if sim.remaining == 0 {
            break;
        }
        sim.decide(now);
        match sim.heap.peek() {
            Some(&Reverse((t, ..))) => now = t,
            None => break,
        }
    }

    if sim.remaining > 0 {
        let mut unprocessed: Vec<u64> = sim
            .nodes
            .iter()
            .flat_map(|n| n.queue.iter().map(|j| j.encoded_id).chain(n.current.map(|(j, _, _)| j.encoded_id)))
            .collect();
        unprocessed.sort_unstable();
        return Err(Error::SimulationStalled { unprocessed });
    }

    sim.log(now, EventKind::AllDone, None, None, None);
    sim.events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let per_node_busy = sim.nodes.iter().map(|n| (n.id.clone(), n.busy)).collect();
    sim.outputs.sort_by_key(|o| o.encoded_id);
    Ok((ExecutionTrace { events: sim.events, completion_time: now, per_node_busy }, sim.outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub completion_us: u64,
    pub utilization: BTreeMap<String, f64>,
    pub steals: usize,
    pub tiles: usize,
    /// Tiles per second of virtual time.
    pub throughput: f64,
}

/// Validates the event sequence and returns (completion, busy per node, steals).
fn scan(events: &[TraceEvent]) -> Result<(Micros, BTreeMap<String, Micros>, usize)> {
    let bad = |msg: String| Error::MalformedTrace(msg);
    if events.windows(2).any(|w| w[0].sort_key() > w[1].sort_key()) {
        return Err(bad("events are not in (time, kind, node, tile) order".into()));
    }
    let mut current: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    let mut busy: BTreeMap<String, Micros> = BTreeMap::new();
    let mut done = std::collections::BTreeSet::new();
    let mut steals = 0;
    let mut completion = None;
    for (i, e) in events.iter().enumerate() {
        let node = || e.node.as_deref().ok_or_else(|| bad(format!("event {i} has no node")));
        let tile = || e.tile.ok_or_else(|| bad(format!("event {i} has no tile")));
        match e.kind {
            EventKind::Dispatch => {
                let n = node()?;
                busy.entry(n.to_string()).or_default();
                if current.insert(n, (tile()?, e.t_us)).is_some() {
                    return Err(bad(format!("node {n} dispatched while busy at {}", e.t_us)));
                }
            }
            EventKind::TileDone => {
                let (n, t) = (node()?, tile()?);
                match current.remove(n) {
                    Some((running, start)) if running == t => {
                        *busy.entry(n.to_string()).or_default() += Micros(e.t_us - start);
                    }
                    _ => return Err(bad(format!("tile {t} finished on {n} without being dispatched there"))),
                }
                if !done.insert(t) {
                    return Err(bad(format!("tile {t} finished twice")));
                }
            }
            EventKind::NodeFail => {
                let n = node()?;
                busy.entry(n.to_string()).or_default();
                if let Some((_, start)) = current.remove(n) {
                    *busy.get_mut(n).unwrap() += Micros(e.t_us - start);
                }
            }
            EventKind::Steal => steals += 1,
            EventKind::ShardDone => {}
            EventKind::AllDone => {
                if i + 1 != events.len() {
                    return Err(bad("all-done is not the last event".into()));
                }
                completion = Some(Micros(e.t_us));
            }
        }
    }
    let completion = completion.ok_or_else(|| bad("missing all-done event".into()))?;
    if !current.is_empty() {
        return Err(bad("tiles still running at all-done".into()));
    }
    Ok((completion, busy, steals))
}

/// Utilization, throughput and steal count recovered from a trace.
pub fn replay(trace: &ExecutionTrace) -> Result<TraceSummary> {
    let (completion, busy, steals) = scan(&trace.events)?;
    let tiles = trace.events.iter().filter(|e| e.kind == EventKind::TileDone).count();
    let secs = completion.as_secs_f64();
    let utilization = busy
        .into_iter()
        .map(|(n, b)| (n, if completion.0 == 0 { 0.0 } else { b.0 as f64 / completion.0 as f64 }))
        .collect();
    Ok(TraceSummary {
        completion_us: completion.0,
        utilization,
        steals,
        tiles,
        throughput: if secs > 0.0 { tiles as f64 / secs } else { 0.0 },
    })
}
