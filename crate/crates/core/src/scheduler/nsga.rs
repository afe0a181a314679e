//! Evolutionary search over shard-to-infrastructure vectors.
//!
//! Nondominated sorting with crowding-distance survival, binary tournaments,
//! one-point crossover and per-gene reset mutation at rate `1 / K`. Every
//! evaluated assignment goes into an archive and the result is the
//! nondominated subset of that archive.

use super::pareto::{dominates, nondominated};
use super::{EtTable, Instance, ParetoFront, PlanPoint};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const CROSSOVER_RATE: f64 = 0.9;

struct Individual {
    genes: Vec<usize>,
    objectives: (f64, f64),
    rank: usize,
    crowding: f64,
}

struct Archive<'a> {
    table: &'a EtTable,
    seen: BTreeMap<Vec<usize>, PlanPoint>,
}

impl Archive<'_> {
    fn eval(&mut self, genes: Vec<usize>) -> Individual {
        let table = self.table;
        let point = self.seen.entry(genes.clone()).or_insert_with(|| table.point(&genes));
        Individual { objectives: (point.f1, point.f2), genes, rank: 0, crowding: 0.0 }
    }
}

/// Assigns `rank` (0 = first front) and crowding distance in place.
fn sort_and_crowd(pop: &mut [Individual]) {
    let n = pop.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(pop[i].objectives, pop[j].objectives) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            }
        }
    }
    let mut front: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    let mut rank = 0;
    while !front.is_empty() {
        for &i in &front {
            pop[i].rank = rank;
        }
        crowd(pop, &front);
        let mut next = Vec::new();
        for &i in &front {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        front = next;
        rank += 1;
    }
}

fn crowd(pop: &mut [Individual], front: &[usize]) {
    for &i in front {
        pop[i].crowding = 0.0;
    }
    for axis in 0..2 {
        let get = |ind: &Individual| if axis == 0 { ind.objectives.0 } else { ind.objectives.1 };
        let mut order = front.to_vec();
        order.sort_by(|&a, &b| get(&pop[a]).total_cmp(&get(&pop[b])).then(a.cmp(&b)));
        let (lo, hi) = (get(&pop[order[0]]), get(&pop[*order.last().unwrap()]));
        pop[order[0]].crowding = f64::INFINITY;
        pop[*order.last().unwrap()].crowding = f64::INFINITY;
        if hi > lo {
            for w in 1..order.len().saturating_sub(1) {
                let gap = (get(&pop[order[w + 1]]) - get(&pop[order[w - 1]])) / (hi - lo);
                pop[order[w]].crowding += gap;
            }
        }
    }
}

fn better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

fn tournament<'p>(pop: &'p [Individual], rng: &mut ChaCha8Rng) -> &'p Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if better(b, a) {
        b
    } else {
        a
    }
}

/// Approximates the Pareto front; deterministic for a fixed `seed`.
pub fn plan_heuristic(inst: &Instance, seed: u64, generations: usize, population: usize) -> Result<ParetoFront> {
    if population < 4 || !population.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!("population {population} must be even and at least 4")));
    }
    let table = EtTable::new(inst)?;
    let k = inst.shards.len();
    let m = inst.infras.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archive = Archive { table: &table, seen: BTreeMap::new() };

    // uniform placements on each site anchor the extremes of the front
    let mut pop: Vec<Individual> = (0..m.min(population)).map(|i| archive.eval(vec![i; k])).collect();
    while pop.len() < population {
        let genes = (0..k).map(|_| rng.gen_range(0..m)).collect();
        pop.push(archive.eval(genes));
    }
    sort_and_crowd(&mut pop);

    let mutation = 1.0 / k as f64;
    for _ in 0..generations {
        let mut offspring = Vec::with_capacity(population);
        while offspring.len() < population {
            let mut a = tournament(&pop, &mut rng).genes.clone();
            let mut b = tournament(&pop, &mut rng).genes.clone();
            if k > 1 && rng.gen_bool(CROSSOVER_RATE) {
                let cut = rng.gen_range(1..k);
                a[cut..].swap_with_slice(&mut b[cut..]);
            }
            for child in [&mut a, &mut b] {
                for g in child.iter_mut() {
                    if rng.gen_bool(mutation) {
                        *g = rng.gen_range(0..m);
                    }
                }
            }
            offspring.push(archive.eval(a));
            offspring.push(archive.eval(b));
        }
        pop.extend(offspring);
        sort_and_crowd(&mut pop);
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&x, &y| {
            pop[x].rank.cmp(&pop[y].rank).then(pop[y].crowding.total_cmp(&pop[x].crowding)).then(x.cmp(&y))
        });
        order.truncate(population);
        order.sort_unstable();
        let mut keep = vec![false; pop.len()];
        order.iter().for_each(|&i| keep[i] = true);
        let mut idx = 0;
        pop.retain(|_| {
            idx += 1;
            keep[idx - 1]
        });
        sort_and_crowd(&mut pop);
    }

    Ok(nondominated(archive.seen.into_values().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{evaluate, plan_exhaustive, EtModel, Infrastructure, DEFAULT_BUDGET};

    fn instance() -> Instance {
        Instance::new(
            vec![5, 3, 8, 2, 6],
            vec![
                Infrastructure::new("a", 1.0, 1.0, 1e7),
                Infrastructure::new("b", 2.5, 3.0, 1e7),
                Infrastructure::new("c", 0.5, 0.2, 1e6),
            ],
            EtModel::default(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let inst = instance();
        let a = plan_heuristic(&inst, 17, 30, 20).unwrap();
        let b = plan_heuristic(&inst, 17, 30, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn points_reproduce_under_direct_evaluation() {
        let inst = instance();
        for p in plan_heuristic(&inst, 3, 20, 16).unwrap().points {
            assert_eq!(evaluate(&p.assignment, &inst).unwrap(), p);
        }
    }

    #[test]
    fn single_shard_matches_exhaustive() {
        let mut inst = instance();
        inst.shards = vec![7];
        assert_eq!(plan_heuristic(&inst, 1, 5, 4).unwrap(), plan_exhaustive(&inst, DEFAULT_BUDGET).unwrap());
    }

    #[test]
    fn rejects_bad_population() {
        assert!(plan_heuristic(&instance(), 1, 5, 3).is_err());
        assert!(plan_heuristic(&instance(), 1, 5, 7).is_err());
    }
}
