//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test --test acceptance -- --nocapture`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::thread;
use std::time::Instant;
use tileflow::privacy::{decode_matrix, SecretFile};
use tileflow::scheduler::{detection_makespan, evaluate as evaluate_plan, hypervolume, Instance};
use tileflow::slide::{default_artifacts, MetadataVault};
use tileflow::*;

const CONFIGS_E2E: usize = 56;
const ROUND_TRIP_GRIDS: usize = 500;
const SCHEDULER_INSTANCES: usize = 120;
const SIM_INSTANCES: usize = 150;
const STEAL_CONFIGS: usize = 400;
const HV_RATIO_MIN: f64 = 0.95;
const PEARSON_MAX: f64 = 0.1;
const STRAGGLER_RATIO_MAX: f64 = 1.25;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn three_sites() -> Vec<Infrastructure> {
    vec![
        Infrastructure::new("edge", 1.0, 0.5, 2e6),
        Infrastructure::new("campus", 2.0, 1.2, 8e6),
        Infrastructure::new("cloud", 4.0, 3.0, 4e6),
    ]
}

/// Everything the cloud would see for one configuration plus the two masks.
struct Run {
    distributed: ArtifactMask,
    baseline: ArtifactMask,
    cloud_bytes: Vec<Vec<u8>>,
    vault: MetadataVault,
    truth: slide::GroundTruth,
}

fn end_to_end(
    seed: u64,
    width: usize,
    height: usize,
    ts: usize,
    layout: ShardLayout,
    rng: &mut ChaCha8Rng,
    straggle: bool,
) -> Result<Run> {
    let (rows, cols) = (height.div_ceil(ts), width.div_ceil(ts));
    let slide = generate_slide(seed, width, height, ts, &default_artifacts(rows, cols))?;
    let (mut slide, vault) = strip_metadata(slide)?;
    let truth = slide.take_ground_truth().expect("synthetic slide has ground truth");
    let (grid, ax) = split_tiles(&slide, ts)?;
    let secret = PerturbationSecret::generate(seed ^ 0x5eed, rows, cols);
    let parts = partition(&encode(&ax, &secret)?, &grid, &secret, &layout)?;
    let inst = Instance::from_partitions(&parts, three_sites(), EtModel::default())?;
    let genes: Vec<usize> = (0..parts.len()).map(|_| rng.gen_range(0..inst.infras.len())).collect();
    let plan = evaluate_plan(&Assignment(genes.clone()), &inst)?;
    let world = if straggle {
        let victim = &inst.infras[*genes.choose(rng).unwrap()].id;
        WorldConfig {
            seed,
            stragglers: [(victim.clone(), rng.gen_range(2.0..10.0))].into(),
            rebalance: Rebalance::Steal { granularity: rng.gen_range(1..4) },
            ..Default::default()
        }
    } else {
        WorldConfig { seed, ..Default::default() }
    };
    let detectors = DetectorSet::default();
    let (trace, outputs) = simulate(&plan, &parts, &inst, &world, &detectors)?;
    let distributed = aggregate(&outputs, &secret, &layout)?;
    let baseline = baseline_mask(&grid, &detectors)?;

    let mut cloud_bytes = Vec::new();
    for p in &parts {
        cloud_bytes.push(serde_json::to_vec(&p.to_file(&format!("shard_{}.bin", p.shard_index)))?);
        cloud_bytes.push(p.payload.clone());
    }
    cloud_bytes.push(trace.to_jsonl().into_bytes());
    cloud_bytes.push(serde_json::to_vec(&outputs)?);
    cloud_bytes.push(serde_json::to_vec(&replay(&trace)?)?);
    Ok(Run { distributed, baseline, cloud_bytes, vault, truth })
}

fn random_config(i: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize, ShardLayout, bool) {
    let ts: usize = [64, 128][i % 2];
    let width = rng.gen_range(2 * ts..=1024);
    let height = rng.gen_range(2 * ts..=1024);
    let tiles = width.div_ceil(ts) * height.div_ceil(ts);
    let k = *[2usize, 4, 8].iter().filter(|&&k| k <= tiles).collect::<Vec<_>>().choose(rng).unwrap();
    let policy = [PartitionPolicy::LatinScatter, PartitionPolicy::Random][(i / 2) % 2];
    (width, height, ts, ShardLayout::new(*k, policy), i % 4 >= 2)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut identical = 0;
    let mut failures = Vec::new();
    let (mut stragglers, mut policies) = (0, [0usize; 2]);
    for i in 0..CONFIGS_E2E {
        let (w, h, ts, layout, straggle) = random_config(i, &mut rng);
        stragglers += straggle as usize;
        policies[(layout.policy == PartitionPolicy::Random) as usize] += 1;
        match end_to_end(i as u64, w, h, ts, layout, &mut rng, straggle) {
            Ok(run) if run.distributed == run.baseline => identical += 1,
            Ok(_) => failures.push(format!("config {i}: masks differ")),
            Err(e) => failures.push(format!("config {i}: {e}")),
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{identical}/{CONFIGS_E2E} masks bit-identical to the single-machine oracle \
             ({stragglers} straggler+steal worlds, {} latin / {} random){}",
            policies[0],
            policies[1],
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut notes = Vec::new();

    // exhaustive pair scan of latin-scatter layouts
    let mut pairs_checked = 0usize;
    let mut adjacent_same = 0usize;
    for rows in 1..=24 {
        for cols in 1..=24 {
            for k in [2usize, 3, 4, 5, 8] {
                let layout = ShardLayout::new(k, PartitionPolicy::LatinScatter);
                if layout.validate(rows * cols).is_err() {
                    continue;
                }
                let secret = PerturbationSecret::generate(rng.gen(), rows, cols);
                let shard = layout.assign(rows, cols, &secret);
                let cells = rows * cols;
                for a in 0..cells {
                    for b in a + 1..cells {
                        let (ra, ca, rb, cb) = (a / cols, a % cols, b / cols, b % cols);
                        if ra.abs_diff(rb) + ca.abs_diff(cb) == 1 {
                            pairs_checked += 1;
                            adjacent_same += (shard[a] == shard[b]) as usize;
                        }
                    }
                }
            }
        }
    }
    let latin_ok = adjacent_same == 0;
    notes.push(format!("{adjacent_same} same-shard 4-adjacent pairs in {pairs_checked}"));

    // encode/decode round trips
    let mut exact = 0;
    for _ in 0..ROUND_TRIP_GRIDS {
        let (rows, cols) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let secret = PerturbationSecret::generate(rng.gen(), rows, cols);
        let ax = CoordinateMatrix::identity(rows, cols);
        let restored =
            encode(&ax, &secret).and_then(|enc| decode_matrix(&enc, &secret)).ok().filter(|back| *back == ax);
        // the secret must also survive its own file format
        let reloaded = serde_json::to_string(&secret.to_file())
            .ok()
            .and_then(|s| serde_json::from_str::<SecretFile>(&s).ok())
            .and_then(|f| PerturbationSecret::from_file(&f).ok());
        exact += (restored.is_some() && reloaded.as_ref() == Some(&secret)) as usize;
    }
    let round_trip_ok = exact == ROUND_TRIP_GRIDS;
    notes.push(format!("{exact}/{ROUND_TRIP_GRIDS} exact round trips"));

    // sentinel scan over every cloud-side byte
    let mut leaks = 0;
    let mut scanned = 0usize;
    for i in 0..8 {
        let (w, h, ts, layout, straggle) = random_config(i, &mut rng);
        let run = end_to_end(500 + i as u64, w, h, ts, layout, &mut rng, straggle).expect("pipeline runs");
        for bytes in &run.cloud_bytes {
            scanned += bytes.len();
            leaks += run.vault.leak_markers().iter().filter(|m| contains(bytes, m.as_bytes())).count();
        }
    }
    let sentinel_ok = leaks == 0;
    notes.push(format!("{leaks} metadata hits in {scanned} cloud bytes"));

    // coordinate correlation on a 32x32 grid
    let secret = PerturbationSecret::generate(32, 32, 32);
    let enc = encode(&CoordinateMatrix::identity(32, 32), &secret).expect("encode");
    let true_rows: Vec<f64> = enc.entries.iter().map(|e| (secret.tile_id(e.encoded_id).unwrap() / 32) as f64).collect();
    let noisy_rows: Vec<f64> = enc.entries.iter().map(|e| e.noisy_coord[0] as f64).collect();
    let r = pearson_oracle(&true_rows, &noisy_rows);
    let pearson_ok = r.abs() < PEARSON_MAX;
    notes.push(format!("|r| = {:.4} (< {PEARSON_MAX})", r.abs()));

    outcome(latin_ok && round_trip_ok && sentinel_ok && pearson_ok, notes.join(", "))
}

/// Independent objective computation straight from the model definitions.
fn objectives(genes: &[usize], inst: &Instance) -> (f64, f64) {
    let m = &inst.et_model;
    let us = |secs: f64| (secs * 1e6).round() as u64;
    let mut load = vec![0u64; inst.infras.len()];
    let mut f1 = 0.0;
    for (k, &i) in genes.iter().enumerate() {
        let infra = &inst.infras[i];
        let tile = us(m.per_tile_compute / infra.speed) + us(m.transfer_bytes / infra.bandwidth);
        let et = inst.shards[k] as u64 * tile;
        f1 += et as f64 / 1e6 * infra.unit_price;
        load[i] += et;
    }
    let f2 = us(m.src_time) + load.into_iter().max().unwrap() + us(m.snk_time);
    (f1, f2 as f64 / 1e6)
}

fn brute_force_front(inst: &Instance) -> Vec<(Vec<usize>, f64, f64)> {
    let (k, m) = (inst.shards.len(), inst.infras.len());
    let mut all = Vec::new();
    for code in 0..m.pow(k as u32) {
        let mut genes = vec![0; k];
        let mut c = code;
        for g in genes.iter_mut().rev() {
            *g = c % m;
            c /= m;
        }
        let (f1, f2) = objectives(&genes, inst);
        all.push((genes, f1, f2));
    }
    let dominated =
        |a: &(Vec<usize>, f64, f64), b: &(Vec<usize>, f64, f64)| b.1 <= a.1 && b.2 <= a.2 && (b.1 < a.1 || b.2 < a.2);
    let mut front: Vec<_> = all
        .iter()
        .enumerate()
        .filter(|(i, p)| !all.iter().any(|q| dominated(p, q)) && !all[..*i].iter().any(|q| q.1 == p.1 && q.2 == p.2))
        .map(|(_, p)| p.clone())
        .collect();
    front.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    front
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.gen_range(1..=6);
    let m = rng.gen_range(1..=4);
    let shards = (0..k).map(|_| rng.gen_range(1..40)).collect();
    let infras = (0..m)
        .map(|i| {
            let mut infra = Infrastructure::new(
                format!("site-{i}"),
                [0.5, 1.0, 1.5, 2.0, 4.0][rng.gen_range(0..5)],
                rng.gen_range(0.0..3.0),
                [1e5, 1e6, 1e7][rng.gen_range(0..3)],
            );
            infra.availability = 1.0;
            infra
        })
        .collect();
    let model = EtModel {
        per_tile_compute: rng.gen_range(0.05..1.0),
        transfer_bytes: 49152.0,
        src_time: rng.gen_range(0.5..5.0),
        snk_time: rng.gen_range(0.5..3.0),
    };
    Instance::new(shards, infras, model).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut fronts_equal = 0;
    let mut worst_hv = f64::INFINITY;
    let mut notes = Vec::new();
    for n in 0..SCHEDULER_INSTANCES {
        let inst = random_instance(&mut rng);
        let exact = plan_exhaustive(&inst, scheduler::DEFAULT_BUDGET).expect("within budget");
        let got: Vec<_> = exact.points.iter().map(|p| (p.assignment.0.clone(), p.f1, p.f2)).collect();
        if got == brute_force_front(&inst) {
            fronts_equal += 1;
        } else {
            notes.push(format!("instance {n}: front differs"));
        }
        let objs = exact.objectives();
        let reference =
            (1.1 * objs.iter().map(|o| o.0).fold(0.0, f64::max), 1.1 * objs.iter().map(|o| o.1).fold(0.0, f64::max));
        let heuristic = plan_heuristic(&inst, n as u64, 40, 24).expect("heuristic runs");
        let hv_exact = hypervolume(&objs, reference);
        let ratio = if hv_exact > 0.0 { hypervolume(&heuristic.objectives(), reference) / hv_exact } else { 1.0 };
        worst_hv = worst_hv.min(ratio);
    }

    let unit = |src, snk| EtModel { per_tile_compute: 1.0, transfer_bytes: 1.0, src_time: src, snk_time: snk };
    let one = Instance::new(vec![10], vec![Infrastructure::new("a", 1.0, 2.0, 1e9)], unit(1.0, 1.0)).unwrap();
    let f1 = eval_cost(&Assignment(vec![0]), &one).unwrap();
    let two = Instance::new(
        vec![10, 7],
        vec![Infrastructure::new("a", 1.0, 1.0, 1e9), Infrastructure::new("b", 1.0, 1.0, 1e9)],
        unit(5.0, 3.0),
    )
    .unwrap();
    let f2 = eval_makespan(&Assignment(vec![0, 1]), &two).unwrap();
    let hand_ok = f1 == 20.0 && f2 == time::Micros(18_000_000);

    notes.insert(
        0,
        format!(
            "{fronts_equal}/{SCHEDULER_INSTANCES} fronts equal the brute-force scan, \
             min HV ratio {worst_hv:.4} (>= {HV_RATIO_MIN}), f1 = {f1}, f2 = {f2}"
        ),
    );
    outcome(fronts_equal == SCHEDULER_INSTANCES && worst_hv >= HV_RATIO_MIN && hand_ok, notes.join("; "))
}

fn synthetic_partitions(sizes: &[usize], ts: usize) -> Vec<EncodedPartition> {
    let mut next = 0u64;
    sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| EncodedPartition {
            shard_index: k,
            entries: (0..n)
                .map(|_| {
                    next += 1;
                    privacy::EncodedEntry { encoded_id: next - 1, noisy_coord: [0, 0] }
                })
                .collect(),
            payload: vec![170; n * ts * ts * 3],
            tile_bytes: ts * ts * 3,
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut equal = 0;
    let mut identical_traces = 0;
    for n in 0..SIM_INSTANCES {
        let inst = random_instance(&mut rng);
        let parts = synthetic_partitions(&inst.shards, 8);
        let genes: Vec<usize> = inst.shards.iter().map(|_| rng.gen_range(0..inst.infras.len())).collect();
        let plan = evaluate_plan(&Assignment(genes.clone()), &inst).unwrap();
        let detectors = DetectorSet::default();
        let (trace, _) = simulate(&plan, &parts, &inst, &WorldConfig::fault_free(), &detectors).unwrap();
        equal += (trace.completion_time == detection_makespan(&plan.assignment, &inst).unwrap()) as usize;

        let world = WorldConfig {
            seed: n as u64,
            stragglers: [(inst.infras[genes[0]].id.clone(), rng.gen_range(1.0..6.0))].into(),
            rebalance: Rebalance::Steal { granularity: rng.gen_range(1..4) },
            ..Default::default()
        };
        let a = simulate(&plan, &parts, &inst, &world, &detectors).unwrap().0.to_jsonl();
        let b = simulate(&plan, &parts, &inst, &world, &detectors).unwrap().0.to_jsonl();
        identical_traces += (a == b) as usize;
    }
    outcome(
        equal == SIM_INSTANCES && identical_traces == SIM_INSTANCES,
        format!(
            "{equal}/{SIM_INSTANCES} fault-free completions equal the makespan formula to the microsecond, \
             {identical_traces}/{SIM_INSTANCES} reruns byte-identical"
        ),
    )
}

/// Minimum over all ways to split `tiles` between nodes of the slowest node's time.
fn best_split(tiles: u64, tile_times: &[u64]) -> u64 {
    match tile_times {
        [] => u64::MAX,
        [t] => tiles * t,
        [t, rest @ ..] => (0..=tiles).map(|a| (a * t).max(best_split(tiles - a, rest))).min().unwrap(),
    }
}

fn criterion_5() -> Outcome {
    let unit = EtModel { per_tile_compute: 1.0, transfer_bytes: 1.0, src_time: 1.0, snk_time: 1.0 };
    let inst = Instance::new(
        vec![8, 8],
        vec![Infrastructure::new("a", 1.0, 1.0, 1e9), Infrastructure::new("b", 1.0, 1.0, 1e9)],
        unit,
    )
    .unwrap();
    let parts = synthetic_partitions(&[8, 8], 8);
    let plan = evaluate_plan(&Assignment(vec![0, 1]), &inst).unwrap();
    let detectors = DetectorSet::default();
    let slow =
        |rebalance| WorldConfig { stragglers: [("a".to_string(), 10.0)].into(), rebalance, ..Default::default() };
    let steal = simulate(&plan, &parts, &inst, &slow(Rebalance::Steal { granularity: 1 }), &detectors).unwrap().0;
    let fast = inst.et_model.tile_time(&inst.infras[1]).unwrap().0;
    let optimum = best_split(16, &[10 * fast, fast]);
    let ratio = steal.completion_time.0 as f64 / optimum as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut never_worse = 0;
    for n in 0..STEAL_CONFIGS {
        let inst = random_instance(&mut rng);
        let parts = synthetic_partitions(&inst.shards, 8);
        let genes: Vec<usize> = inst.shards.iter().map(|_| rng.gen_range(0..inst.infras.len())).collect();
        let plan = evaluate_plan(&Assignment(genes.clone()), &inst).unwrap();
        let id = inst.infras[*genes.choose(&mut rng).unwrap()].id.clone();
        let factor = rng.gen_range(2.0..12.0);
        let world = |rebalance| WorldConfig {
            seed: n as u64,
            stragglers: [(id.clone(), factor)].into(),
            rebalance,
            ..Default::default()
        };
        let plain = simulate(&plan, &parts, &inst, &world(Rebalance::None), &detectors).unwrap().0;
        let stolen = simulate(&plan, &parts, &inst, &world(Rebalance::Steal { granularity: 1 }), &detectors).unwrap().0;
        never_worse += (stolen.completion_time <= plain.completion_time) as usize;
    }
    outcome(
        ratio <= STRAGGLER_RATIO_MAX && never_worse == STEAL_CONFIGS,
        format!(
            "completion {} vs T* {} (ratio {ratio:.3} <= {STRAGGLER_RATIO_MAX}), \
             steal never worse in {never_worse}/{STEAL_CONFIGS} single-straggler configs",
            steal.completion_time,
            time::Micros(optimum)
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    let mut perfect = 0;
    let mut slides = 0;
    let mut notes = Vec::new();
    for (i, &(side, ts, k)) in [(512, 64, 4), (1024, 128, 8), (768, 64, 2), (640, 128, 4)].iter().enumerate() {
        let layout = ShardLayout::new(k, PartitionPolicy::LatinScatter);
        let run = end_to_end(600 + i as u64, side, side, ts, layout, &mut rng, i % 2 == 1).expect("pipeline runs");
        slides += 1;
        let metrics = aggregate::evaluate(&run.distributed, &run.truth).unwrap();
        if metrics.values().all(|m| m.f1 == 1.0) && !run.truth.artifacts.is_empty() {
            perfect += 1;
        } else {
            notes.push(format!("slide {i}: {metrics:?}"));
        }
    }
    let gray = vec![128u8; 64 * 64 * 3];
    let verdict = detect(&gray, 64, &DetectorSet::default()).unwrap();
    notes.insert(0, format!("{perfect}/{slides} corpus slides with F1 = 1.0 on every class, gray tile -> {verdict}"));
    outcome(perfect == slides && verdict.to_string() == "01000", notes.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 6] = [
        ("end-to-end equivalence", criterion_1),
        ("privacy invariants", criterion_2),
        ("scheduler correctness", criterion_3),
        ("simulator-formula consistency", criterion_4),
        ("straggler mitigation", criterion_5),
        ("detector self-verification", criterion_6),
    ];
    let start = Instant::now();
    let results: Vec<(Outcome, f64)> = thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    (f(), t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut all = true;
    for (i, ((name, _), (out, secs))) in criteria.iter().zip(&results).enumerate() {
        all &= out.pass;
        println!("[{}] {}. {name}: {} ({secs:.1}s)", if out.pass { "PASS" } else { "FAIL" }, i + 1, out.detail);
    }
    println!("acceptance suite finished in {:.1}s", start.elapsed().as_secs_f64());
    assert!(all, "at least one acceptance criterion failed");
}
