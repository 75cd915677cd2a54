//! Strategy assignment: pick one strategy per component to minimise the
//! step time subject to the per-device memory budget.
//!
//! Devices are homogeneous and every strategy spans all of them, so the
//! per-device constraints collapse into one scalar budget and the
//! max-over-devices in the objective equals the per-device value.
//! Switching strategy between neighbouring components costs a re-shard,
//! which turns the problem into a resource-constrained shortest path over a
//! layered graph.

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::cost::{boundary_cost, estimate, CostEstimate, CostParams, Strategy, StrategyTag};
use crate::error::{Error, Result};
use crate::workload::{ModelGraph, TrainingSchedule};

/// Largest search space `solve_exact` will enumerate.
pub const EXACT_LIMIT: f64 = 1e7;
pub const DEFAULT_MEM_BUCKETS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Dp,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Solver::Exact),
            "dp" => Ok(Solver::Dp),
            _ => Err(Error::validation(format!("unknown solver `{s}` (exact|dp)"))),
        }
    }
}

/// Cost table for one planning instance.
#[derive(Debug, Clone)]
pub struct PlanningProblem {
    /// Candidate strategies in tie-break order.
    pub strategies: Vec<Strategy>,
    /// `costs[i][j]`: component i under strategy j.
    pub costs: Vec<Vec<CostEstimate>>,
    /// Re-shard cost into component i when its strategy differs from
    /// component i-1's. Entry 0 is unused.
    pub boundary: Vec<f64>,
    pub mem_budget: f64,
    /// Per-device bytes reserved by any plan that synchronizes gradients.
    pub sync_overhead: f64,
}

impl PlanningProblem {
    pub fn build(
        graph: &ModelGraph,
        cluster: &Cluster,
        schedule: &TrainingSchedule,
        params: &CostParams,
    ) -> Result<Self> {
        Self::build_with(graph, cluster, schedule, params, Strategy::candidates(cluster.k()))
    }

    pub fn build_with(
        graph: &ModelGraph,
        cluster: &Cluster,
        schedule: &TrainingSchedule,
        params: &CostParams,
        strategies: Vec<Strategy>,
    ) -> Result<Self> {
        if !cluster.is_homogeneous() {
            return Err(Error::validation(
                "heterogeneous clusters are not supported by the planner",
            ));
        }
        if strategies.is_empty() {
            return Err(Error::validation("no candidate strategies"));
        }
        let costs = graph
            .components()
            .iter()
            .map(|c| {
                strategies
                    .iter()
                    .map(|s| estimate(c, s, cluster, schedule, params))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let boundary = graph
            .components()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    0.0
                } else {
                    boundary_cost(c, cluster, schedule, params)
                }
            })
            .collect();
        Ok(PlanningProblem {
            strategies,
            costs,
            boundary,
            mem_budget: cluster.min_memory(),
            sync_overhead: params.dp_overhead_bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    fn check(&self, choice: &[usize]) -> Result<()> {
        if choice.len() != self.len() {
            return Err(Error::validation(format!(
                "assignment has {} entries for {} components",
                choice.len(),
                self.len()
            )));
        }
        if let Some(&bad) = choice.iter().find(|&&j| j >= self.strategies.len()) {
            return Err(Error::validation(format!("strategy index {bad} out of range")));
        }
        Ok(())
    }

    /// Step time of an assignment given as indices into `strategies`.
    pub fn objective(&self, choice: &[usize]) -> Result<f64> {
        self.check(choice)?;
        Ok(self.objective_unchecked(choice))
    }

    fn objective_unchecked(&self, choice: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &j) in choice.iter().enumerate() {
            total += self.costs[i][j].step_time();
            if i > 0 && choice[i - 1] != j {
                total += self.boundary[i];
            }
        }
        total
    }

    pub fn memory(&self, choice: &[usize]) -> f64 {
        let mut mem: f64 = choice
            .iter()
            .enumerate()
            .map(|(i, &j)| self.costs[i][j].mem_per_device)
            .sum();
        if choice.iter().any(|&j| self.strategies[j].syncs_gradients()) {
            mem += self.sync_overhead;
        }
        mem
    }

    pub fn evaluate(&self, choice: &[usize], solver: &str) -> Result<Plan> {
        self.check(choice)?;
        let per_component: Vec<_> = choice.iter().enumerate().map(|(i, &j)| self.costs[i][j]).collect();
        let reshard: Vec<f64> = (0..choice.len())
            .map(|i| {
                if i > 0 && choice[i - 1] != choice[i] {
                    self.boundary[i]
                } else {
                    0.0
                }
            })
            .collect();
        let mem = self.memory(choice);
        Ok(Plan {
            assignment: choice.iter().map(|&j| self.strategies[j]).collect(),
            step_time: self.objective_unchecked(choice),
            per_component,
            reshard,
            mem_per_device: mem,
            mem_budget: self.mem_budget,
            feasible: mem <= self.mem_budget,
            solver: solver.to_string(),
        })
    }

    fn search_space(&self) -> f64 {
        (self.strategies.len() as f64).powi(self.len() as i32)
    }

    /// Per-component cheapest-memory assignment, used as the best-effort
    /// answer when nothing fits.
    fn least_violating(&self) -> Vec<usize> {
        self.costs
            .iter()
            .map(|row| {
                (0..row.len())
                    .min_by(|&a, &b| {
                        row[a]
                            .mem_per_device
                            .total_cmp(&row[b].mem_per_device)
                            .then(row[a].step_time().total_cmp(&row[b].step_time()))
                    })
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// A complete assignment with its predicted costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub assignment: Vec<Strategy>,
    /// Seconds per mini-batch step.
    pub step_time: f64,
    pub per_component: Vec<CostEstimate>,
    /// Re-shard seconds charged at the boundary into each component.
    pub reshard: Vec<f64>,
    pub mem_per_device: f64,
    pub mem_budget: f64,
    pub feasible: bool,
    pub solver: String,
}

impl Plan {
    /// Step time rebuilt from the parts.
    pub fn recomputed_step_time(&self) -> f64 {
        self.per_component.iter().map(CostEstimate::step_time).sum::<f64>()
            + self.reshard.iter().sum::<f64>()
    }

    pub fn comm_time(&self) -> f64 {
        self.per_component.iter().map(|c| c.t_comm).sum::<f64>() + self.reshard.iter().sum::<f64>()
    }

    pub fn comm_share(&self) -> f64 {
        if self.step_time > 0.0 {
            self.comm_time() / self.step_time
        } else {
            0.0
        }
    }

    /// Stable 64-bit FNV-1a hash of the assignment.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in &self.assignment {
            for b in s.to_string().bytes().chain(std::iter::once(b';')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Step time of `assignment` on the given instance.
pub fn objective(
    assignment: &[Strategy],
    graph: &ModelGraph,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> Result<f64> {
    if assignment.len() != graph.len() {
        return Err(Error::validation(format!(
            "assignment has {} entries for {} components",
            assignment.len(),
            graph.len()
        )));
    }
    let mut strategies: Vec<Strategy> = Vec::new();
    let choice: Vec<usize> = assignment
        .iter()
        .map(|s| match strategies.iter().position(|x| x == s) {
            Some(j) => j,
            None => {
                strategies.push(*s);
                strategies.len() - 1
            }
        })
        .collect();
    let problem = PlanningProblem::build_with(graph, cluster, schedule, params, strategies)?;
    problem.objective(&choice)
}

/// Lexicographic comparison key used to break objective ties.
fn better(obj: f64, choice: &[usize], best_obj: f64, best: &[usize]) -> bool {
    match obj.total_cmp(&best_obj) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => choice < best,
    }
}

/// Globally optimal plan by exhaustive enumeration.
pub fn solve_exact_problem(problem: &PlanningProblem) -> Result<Plan> {
    let size = problem.search_space();
    if size > EXACT_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: EXACT_LIMIT,
        });
    }
    let n = problem.len();
    let s = problem.strategies.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut choice = vec![0usize; n];
    // Depth-first enumeration in lexicographic order; partial time and
    // memory are carried down the stack.
    #[allow(clippy::too_many_arguments)]
    fn walk(
        p: &PlanningProblem,
        s: usize,
        i: usize,
        time: f64,
        mem: f64,
        syncs: bool,
        choice: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if i == choice.len() {
            let total_mem = if syncs { mem + p.sync_overhead } else { mem };
            if total_mem > p.mem_budget {
                return;
            }
            let replace = match best {
                None => true,
                Some((b, bc)) => better(time, choice, *b, bc),
            };
            if replace {
                *best = Some((time, choice.clone()));
            }
            return;
        }
        for j in 0..s {
            let c = &p.costs[i][j];
            let mut t = time + c.step_time();
            if i > 0 && choice[i - 1] != j {
                t += p.boundary[i];
            }
            choice[i] = j;
            walk(
                p,
                s,
                i + 1,
                t,
                mem + c.mem_per_device,
                syncs || p.strategies[j].syncs_gradients(),
                choice,
                best,
            );
        }
    }
    walk(problem, s, 0, 0.0, 0.0, false, &mut choice, &mut best);
    match best {
        Some((_, c)) => problem.evaluate(&c, "exact"),
        None => problem.evaluate(&problem.least_violating(), "exact"),
    }
}

/// Layered dynamic program over (component, strategy, memory used).
///
/// Memory is tracked as the excess over each component's cheapest
/// strategy, with the remaining slack split into `mem_buckets` levels.
/// Consumption rounds up, so a plan reported feasible always fits. A second
/// pass rounds down; that relaxation admits every feasible plan, so when its
/// optimum happens to fit it is the true optimum.
pub fn solve_dp_problem(problem: &PlanningProblem, mem_buckets: usize) -> Result<Plan> {
    if mem_buckets < 16 {
        return Err(Error::validation(format!(
            "mem_buckets must be at least 16, got {mem_buckets}"
        )));
    }
    let all: Vec<usize> = (0..problem.strategies.len()).collect();
    let label = format!("dp({mem_buckets})");

    if !problem.mem_budget.is_finite() {
        let choice = chain_dp(problem, &all, None).map(|(_, c)| c);
        return match choice {
            Some(c) => problem.evaluate(&c, &label),
            None => problem.evaluate(&problem.least_violating(), &label),
        };
    }

    // Plans that never synchronize gradients skip the sync buffer; the rest
    // solve against the budget minus the buffer.
    let mut passes: Vec<(Vec<usize>, f64)> = Vec::new();
    if problem.sync_overhead > 0.0 {
        let no_sync: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| !problem.strategies[j].syncs_gradients())
            .collect();
        if !no_sync.is_empty() {
            passes.push((no_sync, problem.mem_budget));
        }
        passes.push((all.clone(), problem.mem_budget - problem.sync_overhead));
    } else {
        passes.push((all.clone(), problem.mem_budget));
    }

    let mut candidates = Vec::new();
    for (allowed, budget) in &passes {
        for round_up in [true, false] {
            if let Some(grid) = MemGrid::new(problem, allowed, *budget, mem_buckets, round_up) {
                candidates.extend(chain_dp(problem, allowed, Some(&grid)));
            }
        }
    }
    // Uniform assignments are cheap to check exactly, so the result never
    // loses to one of them.
    candidates.extend((0..problem.strategies.len()).map(|j| (0.0, vec![j; problem.len()])));

    let best = candidates
        .into_iter()
        .filter(|(_, c)| problem.memory(c) <= problem.mem_budget)
        .map(|(_, c)| (problem.objective_unchecked(&c), c))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    match best {
        Some((_, c)) => problem.evaluate(&c, &label),
        None => problem.evaluate(&problem.least_violating(), &label),
    }
}

/// Discretised memory for one DP pass.
struct MemGrid {
    /// Cheapest memory per component among the allowed strategies.
    base: Vec<f64>,
    unit: f64,
    cap: usize,
    round_up: bool,
}

impl MemGrid {
    fn new(problem: &PlanningProblem, allowed: &[usize], budget: f64, buckets: usize, round_up: bool) -> Option<Self> {
        let base: Vec<f64> = problem
            .costs
            .iter()
            .map(|row| allowed.iter().map(|&j| row[j].mem_per_device).fold(f64::INFINITY, f64::min))
            .collect();
        let slack = budget - base.iter().sum::<f64>();
        if !(slack >= 0.0) {
            return None;
        }
        let unit = if slack > 0.0 { slack / buckets as f64 } else { 1.0 };
        let cap = if slack > 0.0 { buckets } else { 0 };
        Some(MemGrid { base, unit, cap, round_up })
    }

    fn levels(&self, i: usize, mem: f64) -> Option<usize> {
        let x = ((mem - self.base[i]) / self.unit).max(0.0);
        let b = if self.round_up { x.ceil() } else { x.floor() };
        (b <= self.cap as f64).then_some(b as usize)
    }
}

/// Shortest path through the layered graph restricted to `allowed`
/// strategies, optionally tracking discretised memory.
fn chain_dp(problem: &PlanningProblem, allowed: &[usize], memory: Option<&MemGrid>) -> Option<(f64, Vec<usize>)> {
    let n = problem.len();
    let s = allowed.len();
    let levels = memory.map_or(1, |g| g.cap + 1);
    let need = |i: usize, a: usize| -> Option<usize> {
        match memory {
            None => Some(0),
            Some(g) => g.levels(i, problem.costs[i][allowed[a]].mem_per_device),
        }
    };

    let idx = |a: usize, b: usize| a * levels + b;
    let mut cost = vec![f64::INFINITY; s * levels];
    // back[i][state] = previous strategy slot
    let mut back: Vec<Vec<u16>> = Vec::with_capacity(n);

    for a in 0..s {
        if let Some(b) = need(0, a) {
            cost[idx(a, b)] = problem.costs[0][allowed[a]].step_time();
        }
    }
    back.push(vec![u16::MAX; s * levels]);

    for i in 1..n {
        let mut next = vec![f64::INFINITY; s * levels];
        let mut from = vec![u16::MAX; s * levels];
        for (a, &j) in allowed.iter().enumerate() {
            let Some(w) = need(i, a) else { continue };
            let step = problem.costs[i][j].step_time();
            for b in 0..levels.saturating_sub(w) {
                let mut best = f64::INFINITY;
                let mut arg = u16::MAX;
                for p in 0..s {
                    let c = cost[idx(p, b)];
                    if !c.is_finite() {
                        continue;
                    }
                    let edge = if p == a { 0.0 } else { problem.boundary[i] };
                    let v = c + edge;
                    if v < best {
                        best = v;
                        arg = p as u16;
                    }
                }
                if best.is_finite() {
                    let slot = idx(a, b + w);
                    let v = best + step;
                    if v < next[slot] {
                        next[slot] = v;
                        from[slot] = arg;
                    }
                }
            }
        }
        cost = next;
        back.push(from);
    }

    let mut best: Option<(f64, usize, usize)> = None;
    for a in 0..s {
        for b in 0..levels {
            let c = cost[idx(a, b)];
            if c.is_finite() && best.is_none_or(|(bc, _, _)| c < bc) {
                best = Some((c, a, b));
            }
        }
    }
    let (total, mut a, mut b) = best?;
    let mut choice = vec![0usize; n];
    for i in (0..n).rev() {
        choice[i] = allowed[a];
        if i > 0 {
            let p = back[i][idx(a, b)] as usize;
            b -= need(i, a).expect("reachable state has a memory weight");
            a = p;
        }
    }
    Some((total, choice))
}

pub fn solve_exact(
    graph: &ModelGraph,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> Result<Plan> {
    solve_exact_problem(&PlanningProblem::build(graph, cluster, schedule, params)?)
}

pub fn solve_dp(
    graph: &ModelGraph,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
    mem_buckets: usize,
) -> Result<Plan> {
    solve_dp_problem(&PlanningProblem::build(graph, cluster, schedule, params)?, mem_buckets)
}

pub fn solve_problem(problem: &PlanningProblem, solver: Solver, mem_buckets: usize) -> Result<Plan> {
    match solver {
        Solver::Exact => solve_exact_problem(problem),
        Solver::Dp => solve_dp_problem(problem, mem_buckets),
    }
}

/// The strategy a static baseline uses on `k` devices. HP picks the
/// factorization with the lowest step time, ties going to the larger
/// data-parallel degree.
pub fn uniform_plan(
    tag: StrategyTag,
    graph: &ModelGraph,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> Result<Plan> {
    let k = cluster.k();
    let options = if k == 1 {
        vec![Strategy::dp(1)]
    } else {
        match tag {
            StrategyTag::DP => vec![Strategy::dp(k)],
            StrategyTag::MP => vec![Strategy::mp(k)],
            StrategyTag::HP => Strategy::hp_factorizations(k),
        }
    };
    if options.is_empty() {
        return Err(Error::validation(format!(
            "no hybrid factorization d*m = {k} with d, m > 1"
        )));
    }
    let mut best: Option<Plan> = None;
    for s in options {
        let problem = PlanningProblem::build_with(graph, cluster, schedule, params, vec![s])?;
        let plan = problem.evaluate(&vec![0; graph.len()], &format!("uniform-{}", tag.as_str()))?;
        // options ascend in d, so `<=` hands ties to the larger d
        if best.as_ref().is_none_or(|b| plan.step_time <= b.step_time) {
            best = Some(plan);
        }
    }
    Ok(best.expect("at least one option"))
}
