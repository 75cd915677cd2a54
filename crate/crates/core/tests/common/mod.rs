#![allow(dead_code)]

use std::path::PathBuf;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use strategem::cluster::{uniform_cluster, Cluster};
use strategem::config::{ExperimentConfig, LoadedConfig};
use strategem::cost::{CostEstimate, CostParams, Strategy};
use strategem::planner::PlanningProblem;
use strategem::sim::Scenario;
use strategem::workload::{build_chain, ComponentKind, ComponentSpec, TrainingSchedule, WorkloadSpec};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load(name: &str) -> LoadedConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config loads")
}

pub fn scenario(name: &str) -> Scenario {
    load(name).scenario().expect("shipped config validates")
}

/// Ring all-reduce as an explicit message schedule: `2(n-1)` rounds in
/// which every node forwards one `payload/n` chunk to its successor. A
/// node may start round `r+1` once its own send and the chunk it receives
/// in round `r` have both completed.
pub fn ring_schedule_time(payload: f64, n: usize, cluster: &Cluster) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let chunk = payload / n as f64;
    let hop = cluster.link_latency + chunk / cluster.link_bandwidth;
    let mut ready = vec![0.0f64; n];
    for _round in 0..2 * (n - 1) {
        let mut next = vec![0.0f64; n];
        for i in 0..n {
            let done = ready[i] + hop;
            let to = (i + 1) % n;
            next[i] = next[i].max(done);
            next[to] = next[to].max(done);
        }
        ready = next;
    }
    ready.into_iter().fold(0.0, f64::max)
}

fn log_uniform(rng: &mut StdRng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Pick a budget somewhere around the feasible range: below the cheapest
/// plan (infeasible), just above it (tight), or anywhere up to the most
/// memory-hungry plan.
fn budget_for(p: &PlanningProblem, rng: &mut StdRng) -> f64 {
    let lo: f64 = p
        .costs
        .iter()
        .map(|row| row.iter().map(|c| c.mem_per_device).fold(f64::INFINITY, f64::min))
        .sum();
    let hi: f64 = p
        .costs
        .iter()
        .map(|row| row.iter().map(|c| c.mem_per_device).fold(0.0, f64::max))
        .sum::<f64>()
        + p.sync_overhead;
    match rng.random_range(0..10) {
        0 => lo * rng.random_range(0.5..0.999),
        1..=4 => lo + (hi - lo) * rng.random_range(0.0..0.15),
        _ => lo + (hi - lo) * rng.random_range(0.0..1.2),
    }
}

/// Planner instance built through the cost model from random components.
pub fn model_instance(rng: &mut StdRng) -> PlanningProblem {
    let k = [2usize, 4, 8][rng.random_range(0..3)];
    let l = rng.random_range(1..=8);
    let kinds = [ComponentKind::Conv, ComponentKind::Attention, ComponentKind::Mlp];
    let spec = WorkloadSpec {
        name: "random".into(),
        components: (0..l)
            .map(|_| ComponentSpec {
                kind: kinds[rng.random_range(0..3)],
                flops_fwd: log_uniform(rng, 1e6, 1e10),
                flops_bwd: None,
                param_count: log_uniform(rng, 1e3, 1e8).round(),
                activation_bytes_per_sample: log_uniform(rng, 1e3, 1e7).round(),
            })
            .collect(),
    };
    let graph = build_chain(&spec).expect("random workload is valid");
    let cluster = uniform_cluster(
        k,
        32.0,
        log_uniform(rng, 1.0, 100.0),
        log_uniform(rng, 1.0, 400.0),
        rng.random_range(0.0..50.0),
    )
    .expect("random cluster is valid");
    let schedule = TrainingSchedule {
        dataset_size: 10_000,
        global_batch: 1 << rng.random_range(3..11),
        epochs: 1,
        bytes_per_element: 4,
    };
    let params = CostParams {
        mp_efficiency: rng.random_range(0.3..1.0),
        comm_rounds_mp: rng.random_range(1..5),
        reshard_factor: rng.random_range(0.0..2.0),
        min_device_batch: if rng.random_bool(0.5) { 0.0 } else { log_uniform(rng, 1.0, 256.0) },
        dp_overhead_bytes: if rng.random_bool(0.5) { 0.0 } else { log_uniform(rng, 1e6, 1e9) },
        ..CostParams::default()
    };
    let mut p = PlanningProblem::build(&graph, &cluster, &schedule, &params).expect("instance builds");
    p.mem_budget = budget_for(&p, rng);
    p
}

/// Planner instance with an arbitrary cost table.
pub fn table_instance(rng: &mut StdRng) -> PlanningProblem {
    let k = [2usize, 4, 8][rng.random_range(0..3)];
    let l = rng.random_range(1..=8);
    let strategies = Strategy::candidates(k);
    let costs = (0..l)
        .map(|_| {
            strategies
                .iter()
                .map(|_| {
                    let t_comm = rng.random_range(0.0..5.0);
                    CostEstimate {
                        t_comp: rng.random_range(0.1..10.0),
                        t_comm,
                        t_sync: t_comm * rng.random_range(0.0..1.0),
                        fwd_share: 1.0 / 3.0,
                        mem_per_device: rng.random_range(1.0..100.0),
                    }
                })
                .collect()
        })
        .collect();
    let mut p = PlanningProblem {
        strategies,
        costs,
        boundary: (0..l).map(|i| if i == 0 { 0.0 } else { rng.random_range(0.0..3.0) }).collect(),
        mem_budget: 0.0,
        sync_overhead: if rng.random_bool(0.3) { rng.random_range(0.0..50.0) } else { 0.0 },
    };
    p.mem_budget = budget_for(&p, rng);
    p
}

/// Half cost-model instances, half raw tables.
pub fn instances(n: usize, seed: u64) -> Vec<PlanningProblem> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                model_instance(&mut rng)
            } else {
                table_instance(&mut rng)
            }
        })
        .collect()
}

/// Memory of an assignment, recomputed from the table.
pub fn memory_of(p: &PlanningProblem, assignment: &[Strategy]) -> f64 {
    let mut total = 0.0;
    let mut syncs = false;
    for (i, s) in assignment.iter().enumerate() {
        let j = p.strategies.iter().position(|x| x == s).expect("candidate strategy");
        total += p.costs[i][j].mem_per_device;
        syncs |= s.dp_degree > 1;
    }
    if syncs {
        total + p.sync_overhead
    } else {
        total
    }
}
