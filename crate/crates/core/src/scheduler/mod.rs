//! Shard-to-infrastructure planning under a cost / makespan trade-off.
//!
//! Every shard `k` runs on exactly one infrastructure. Its execution time is
//! linear in the shard size:
//!
//! ```text
//! ET_k = n_k * round_us(per_tile_compute / speed) + n_k * round_us(transfer_bytes / bandwidth)
//! ```
//!
//! with per-tile terms rounded to whole microseconds, so that the simulator
//! (which works tile by tile) reproduces the same totals exactly. The two
//! objectives are
//!
//! * `f1 = sum_k ET_k * unit_price(infra(k))`, the monetary cost, and
//! * `f2 = src_time + max_i (sum of ET_k placed on i) + snk_time`, the makespan,
//!   where shards sharing an infrastructure run back to back.

mod nsga;
mod pareto;

pub use nsga::plan_heuristic;
pub use pareto::{dominates, hypervolume, nondominated};

use crate::error::{Error, Result};
use crate::privacy::EncodedPartition;
use crate::time::Micros;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Default cap on `|infras|^K` for exhaustive enumeration.
pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infrastructure {
    pub id: String,
    /// Tiles per second relative to the model's unit-speed compute time.
    pub speed: f64,
    /// Price per second of execution.
    pub unit_price: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Fraction of time the site is up, in (0, 1].
    #[serde(default = "one")]
    pub availability: f64,
}

fn one() -> f64 {
    1.0
}

impl Infrastructure {
    pub fn new(id: impl Into<String>, speed: f64, unit_price: f64, bandwidth: f64) -> Self {
        Infrastructure { id: id.into(), speed, unit_price, bandwidth, availability: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.speed.is_finite()
            && self.speed > 0.0
            && self.unit_price.is_finite()
            && self.unit_price >= 0.0
            && self.bandwidth.is_finite()
            && self.bandwidth > 0.0
            && self.availability > 0.0
            && self.availability <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("infrastructure `{}` has invalid parameters", self.id)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtModel {
    /// Seconds per tile at unit speed.
    pub per_tile_compute: f64,
    /// Bytes moved per tile.
    pub transfer_bytes: f64,
    /// Trusted-server split time, seconds.
    pub src_time: f64,
    /// Trusted-server aggregation time, seconds.
    pub snk_time: f64,
}

impl Default for EtModel {
    fn default() -> Self {
        EtModel { per_tile_compute: 0.5, transfer_bytes: 49_152.0, src_time: 2.0, snk_time: 1.0 }
    }
}

impl EtModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.per_tile_compute, self.transfer_bytes, self.src_time, self.snk_time];
        if fields.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidSpec("ET model fields must be positive and finite".into()))
        }
    }

    pub fn compute_time(&self, infra: &Infrastructure) -> Micros {
        Micros::from_secs_f64(self.per_tile_compute / infra.speed)
    }

    pub fn transfer_time(&self, infra: &Infrastructure) -> Micros {
        Micros::from_secs_f64(self.transfer_bytes / infra.bandwidth)
    }

    /// Time to move and process one tile on `infra`.
    pub fn tile_time(&self, infra: &Infrastructure) -> Result<Micros> {
        let t = self.compute_time(infra) + self.transfer_time(infra);
        if t == Micros::ZERO {
            return Err(Error::InvalidSpec(format!("per-tile time on `{}` rounds to zero", infra.id)));
        }
        Ok(t)
    }

    pub fn src(&self) -> Micros {
        Micros::from_secs_f64(self.src_time)
    }

    pub fn snk(&self) -> Micros {
        Micros::from_secs_f64(self.snk_time)
    }

    pub fn et(&self, tiles: usize, infra: &Infrastructure) -> Result<Micros> {
        if tiles == 0 {
            return Err(Error::EmptyShard(0));
        }
        Ok(self.tile_time(infra)? * tiles as u64)
    }
}

/// Execution time of one shard on one infrastructure.
pub fn estimate_et(shard: &EncodedPartition, infra: &Infrastructure, model: &EtModel) -> Result<Micros> {
    model.et(shard.size(), infra).map_err(|e| match e {
        Error::EmptyShard(_) => Error::EmptyShard(shard.shard_index),
        other => other,
    })
}

/// Shard sizes, candidate sites and the time model: one planning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub shards: Vec<usize>,
    pub infras: Vec<Infrastructure>,
    pub et_model: EtModel,
}

impl Instance {
    pub fn new(shards: Vec<usize>, infras: Vec<Infrastructure>, et_model: EtModel) -> Result<Self> {
        let inst = Instance { shards, infras, et_model };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_partitions(parts: &[EncodedPartition], infras: Vec<Infrastructure>, et_model: EtModel) -> Result<Self> {
        Self::new(parts.iter().map(EncodedPartition::size).collect(), infras, et_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::InvalidSpec("no shards to schedule".into()));
        }
        if let Some(k) = self.shards.iter().position(|&n| n == 0) {
            return Err(Error::EmptyShard(k));
        }
        if self.infras.is_empty() {
            return Err(Error::InvalidSpec("no infrastructure available".into()));
        }
        for (i, infra) in self.infras.iter().enumerate() {
            infra.validate()?;
            if self.infras[..i].iter().any(|o| o.id == infra.id) {
                return Err(Error::InvalidSpec(format!("duplicate infrastructure id `{}`", infra.id)));
            }
            self.et_model.tile_time(infra)?;
        }
        self.et_model.validate()
    }

    pub fn infra_index(&self, id: &str) -> Option<usize> {
        self.infras.iter().position(|i| i.id == id)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("instance serializes")))
    }

    fn table(&self) -> Result<EtTable> {
        EtTable::new(self)
    }
}

/// Precomputed `ET[k][i]` and cost terms.
pub(crate) struct EtTable {
    infras: usize,
    et: Vec<Micros>,
    cost: Vec<f64>,
    src: Micros,
    snk: Micros,
}

impl EtTable {
    pub(crate) fn new(inst: &Instance) -> Result<Self> {
        inst.validate()?;
        let mut et = Vec::with_capacity(inst.shards.len() * inst.infras.len());
        let mut cost = Vec::with_capacity(et.capacity());
        for (k, &n) in inst.shards.iter().enumerate() {
            for infra in &inst.infras {
                let t = inst.et_model.et(n, infra).map_err(|_| Error::EmptyShard(k))?;
                et.push(t);
                cost.push(t.as_secs_f64() * infra.unit_price);
            }
        }
        Ok(EtTable { infras: inst.infras.len(), et, cost, src: inst.et_model.src(), snk: inst.et_model.snk() })
    }

    fn shards(&self) -> usize {
        self.et.len() / self.infras
    }

    pub(crate) fn cost(&self, genes: &[usize]) -> f64 {
        genes.iter().enumerate().map(|(k, &i)| self.cost[k * self.infras + i]).sum()
    }

    pub(crate) fn inner_makespan(&self, genes: &[usize]) -> Micros {
        let mut load = vec![Micros::ZERO; self.infras];
        for (k, &i) in genes.iter().enumerate() {
            load[i] += self.et[k * self.infras + i];
        }
        load.into_iter().max().unwrap_or(Micros::ZERO)
    }

    pub(crate) fn point(&self, genes: &[usize]) -> PlanPoint {
        let f2 = self.src + self.inner_makespan(genes) + self.snk;
        PlanPoint { assignment: Assignment(genes.to_vec()), f1: self.cost(genes), f2: f2.as_secs_f64() }
    }
}

/// Shard `k` runs on infrastructure `self.0[k]` (an index into the instance's list).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn infra_of(&self, shard: usize) -> Option<usize> {
        self.0.get(shard).copied()
    }

    /// `x_k` indicator: 1 iff shard `k` is placed on infrastructure `i`.
    pub fn x(&self, shard: usize, infra: usize) -> u8 {
        (self.infra_of(shard) == Some(infra)) as u8
    }

    fn check(&self, inst: &Instance) -> Result<()> {
        if self.0.len() < inst.shards.len() {
            return Err(Error::UnmappedShard(self.0.len()));
        }
        if self.0.len() > inst.shards.len() {
            return Err(Error::InvalidSpec(format!(
                "assignment maps {} shards but the instance has {}",
                self.0.len(),
                inst.shards.len()
            )));
        }
        if let Some(k) = self.0.iter().position(|&i| i >= inst.infras.len()) {
            return Err(Error::UnmappedShard(k));
        }
        Ok(())
    }

    pub fn ids<'a>(&self, inst: &'a Instance) -> Vec<&'a str> {
        self.0.iter().map(|&i| inst.infras[i].id.as_str()).collect()
    }
}

/// Monetary cost `f1`.
pub fn eval_cost(a: &Assignment, inst: &Instance) -> Result<f64> {
    a.check(inst)?;
    Ok(inst.table()?.cost(&a.0))
}

/// Slowest infrastructure's serialized load, without the trusted-server terms.
pub fn detection_makespan(a: &Assignment, inst: &Instance) -> Result<Micros> {
    a.check(inst)?;
    Ok(inst.table()?.inner_makespan(&a.0))
}

/// Makespan `f2` including the trusted-server split and aggregation times.
pub fn eval_makespan(a: &Assignment, inst: &Instance) -> Result<Micros> {
    Ok(inst.et_model.src() + detection_makespan(a, inst)? + inst.et_model.snk())
}

pub fn evaluate(a: &Assignment, inst: &Instance) -> Result<PlanPoint> {
    a.check(inst)?;
    Ok(inst.table()?.point(&a.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub assignment: Assignment,
    /// Cost units.
    pub f1: f64,
    /// Seconds.
    pub f2: f64,
}

impl PlanPoint {
    pub(crate) fn lex_cmp(&self, other: &PlanPoint) -> std::cmp::Ordering {
        self.f1
            .total_cmp(&other.f1)
            .then(self.f2.total_cmp(&other.f2))
            .then_with(|| self.assignment.cmp(&other.assignment))
    }
}

/// Mutually nondominated plans, sorted by `f1` ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParetoFront {
    pub points: Vec<PlanPoint>,
}

impl ParetoFront {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn objectives(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.f1, p.f2)).collect()
    }
}

/// Enumerates all `|infras|^K` assignments and keeps the nondominated ones.
///
/// Among assignments with identical objectives only the lexicographically
/// smallest is kept.
pub fn plan_exhaustive(inst: &Instance, budget: u64) -> Result<ParetoFront> {
    let table = inst.table()?;
    let k = table.shards();
    let base = table.infras as u128;
    let size = (0..k).try_fold(1u128, |acc, _| acc.checked_mul(base)).unwrap_or(u128::MAX);
    if size > budget as u128 {
        return Err(Error::BudgetExceeded { size, budget });
    }

    // (f1, f2, index) where index is the mixed-radix code with shard 0 most
    // significant, so index order is lexicographic assignment order
    let mut genes = vec![0usize; k];
    let mut scored: Vec<(f64, Micros, u64)> = Vec::with_capacity(size as usize);
    for index in 0..size as u64 {
        scored.push((table.cost(&genes), table.inner_makespan(&genes), index));
        for g in genes.iter_mut().rev() {
            *g += 1;
            if *g < table.infras {
                break;
            }
            *g = 0;
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut points = Vec::new();
    let mut best: Option<Micros> = None;
    for (_, inner, index) in scored {
        if best.is_none_or(|b| inner < b) {
            best = Some(inner);
            let mut genes = vec![0usize; k];
            let mut rest = index;
            for g in genes.iter_mut().rev() {
                *g = (rest % table.infras as u64) as usize;
                rest /= table.infras as u64;
            }
            points.push(table.point(&genes));
        }
    }
    Ok(ParetoFront { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preference {
    MinCost,
    MinMakespan,
    Knee,
}

impl fmt::Display for Preference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preference::MinCost => "min-cost",
            Preference::MinMakespan => "min-makespan",
            Preference::Knee => "knee",
        })
    }
}

impl FromStr for Preference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-cost" => Ok(Preference::MinCost),
            "min-makespan" => Ok(Preference::MinMakespan),
            "knee" => Ok(Preference::Knee),
            _ => Err(Error::InvalidSpec(format!("unknown preference `{s}`"))),
        }
    }
}

/// Index of the preferred point in `front`.
///
/// The knee is the point farthest from the chord joining the front's two
/// extreme points, measured after scaling both objectives to [0, 1].
pub fn select_index(front: &ParetoFront, preference: Preference) -> Result<usize> {
    let pts = &front.points;
    if pts.is_empty() {
        return Err(Error::EmptyFront);
    }
    let by_lex = |a: &usize, b: &usize| pts[*a].lex_cmp(&pts[*b]);
    let idx: Vec<usize> = (0..pts.len()).collect();
    let chosen = match preference {
        Preference::MinCost => idx.into_iter().min_by(|a, b| pts[*a].f1.total_cmp(&pts[*b].f1).then(by_lex(a, b))),
        Preference::MinMakespan => idx.into_iter().min_by(|a, b| pts[*a].f2.total_cmp(&pts[*b].f2).then(by_lex(a, b))),
        Preference::Knee => {
            let (lo1, hi1) = pts.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.f1), h.max(p.f1)));
            let (lo2, hi2) = pts.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.f2), h.max(p.f2)));
            let norm = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let a = idx.iter().copied().min_by(by_lex).unwrap();
            let b = idx.iter().copied().max_by(by_lex).unwrap();
            let (ax, ay) = (norm(pts[a].f1, lo1, hi1), norm(pts[a].f2, lo2, hi2));
            let (bx, by) = (norm(pts[b].f1, lo1, hi1), norm(pts[b].f2, lo2, hi2));
            let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
            let dist = |i: usize| {
                if len == 0.0 {
                    return 0.0;
                }
                let (px, py) = (norm(pts[i].f1, lo1, hi1), norm(pts[i].f2, lo2, hi2));
                ((bx - ax) * (ay - py) - (ax - px) * (by - ay)).abs() / len
            };
            idx.into_iter().min_by(|x, y| dist(*y).total_cmp(&dist(*x)).then(by_lex(x, y)))
        }
    };
    Ok(chosen.unwrap())
}

pub fn select_plan(front: &ParetoFront, preference: Preference) -> Result<PlanPoint> {
    Ok(front.points[select_index(front, preference)?].clone())
}

/// On-disk plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub instance_hash: String,
    pub points: Vec<PlanFilePoint>,
    pub chosen: usize,
    pub preference: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFilePoint {
    pub assignment: Vec<String>,
    pub f1: f64,
    pub f2: f64,
}

impl PlanFile {
    pub fn new(inst: &Instance, front: &ParetoFront, preference: Preference) -> Result<Self> {
        Ok(PlanFile {
            instance_hash: inst.hash(),
            points: front
                .points
                .iter()
                .map(|p| PlanFilePoint {
                    assignment: p.assignment.ids(inst).into_iter().map(str::to_string).collect(),
                    f1: p.f1,
                    f2: p.f2,
                })
                .collect(),
            chosen: select_index(front, preference)?,
            preference,
        })
    }

    /// Resolves the chosen point against `inst`, re-evaluating its objectives.
    pub fn chosen_point(&self, inst: &Instance) -> Result<PlanPoint> {
        if self.instance_hash != inst.hash() {
            return Err(Error::InvalidSpec("plan was computed for a different instance".into()));
        }
        let p = self.points.get(self.chosen).ok_or(Error::EmptyFront)?;
        let genes = p
            .assignment
            .iter()
            .map(|id| inst.infra_index(id).ok_or_else(|| Error::InvalidSpec(format!("unknown infrastructure `{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        evaluate(&Assignment(genes), inst)
    }
}
