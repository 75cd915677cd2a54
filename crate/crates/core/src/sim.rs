//! Deterministic event simulation of a full training run.
//!
//! Time is logical: each event advances the clock by its duration and
//! nothing overlaps, so the sum of event durations is the total time.
//! Compute durations come from the cost model scaled by the "true" drift
//! state; measurements seen by the adaptive scheduler add lognormal noise
//! on top.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::cost::{CostParams, StrategyTag};
use crate::error::{Error, Result};
use crate::planner::{self, Plan, PlanningProblem, Solver, DEFAULT_MEM_BUCKETS};
use crate::rng::{Purpose, Stream};
use crate::workload::{ModelGraph, TrainingSchedule};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Dp,
    Mp,
    Hp,
    Adaptive,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Single, Mode::Dp, Mode::Mp, Mode::Hp, Mode::Adaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Dp => "dp",
            Mode::Mp => "mp",
            Mode::Hp => "hp",
            Mode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown mode `{s}` (single|dp|mp|hp|adaptive)")))
    }
}

/// A deterministic change to one component's true compute cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedDrift {
    /// Applied at the start of this epoch.
    pub epoch: u32,
    pub component: usize,
    /// Multiplier on the component's compute time, e.g. 1.5 for +50%.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftModel {
    /// Std-dev of the log of the multiplicative measurement noise.
    pub sigma_noise: f64,
    /// Per-epoch random-walk std-dev (log scale) of true compute costs.
    pub sigma_drift: f64,
    pub seed: u64,
    /// Timed iterations averaged into one measurement.
    pub profile_iters: u32,
    pub scripted: Vec<ScriptedDrift>,
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel {
            sigma_noise: 0.05,
            sigma_drift: 0.0,
            seed: 0,
            profile_iters: 20,
            scripted: Vec::new(),
        }
    }
}

impl DriftModel {
    pub fn noiseless() -> Self {
        DriftModel {
            sigma_noise: 0.0,
            ..DriftModel::default()
        }
    }

    pub fn validate(&self, components: usize) -> Result<()> {
        if !(self.sigma_noise >= 0.0) || !(self.sigma_drift >= 0.0) {
            return Err(Error::validation("drift sigmas must be non-negative"));
        }
        if self.profile_iters == 0 {
            return Err(Error::validation("profile_iters must be at least 1"));
        }
        for s in &self.scripted {
            if s.component >= components {
                return Err(Error::validation(format!(
                    "scripted drift names component {} of {components}",
                    s.component
                )));
            }
            if !(s.factor > 0.0) || !s.factor.is_finite() {
                return Err(Error::validation(format!(
                    "scripted drift factor must be positive, got {}",
                    s.factor
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Seconds charged for each full profiling pass.
    pub profile_cost_s: f64,
    pub checkpoint_cost_s: f64,
    /// Relative change that counts as significant.
    pub tau: f64,
    /// Charge a full profile every epoch instead of free ratio tracking.
    pub profile_every_epoch: bool,
    pub solver: Solver,
    pub mem_buckets: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            profile_cost_s: 0.5,
            checkpoint_cost_s: 2.0,
            tau: 0.2,
            profile_every_epoch: false,
            solver: Solver::Dp,
            mem_buckets: DEFAULT_MEM_BUCKETS,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.profile_cost_s >= 0.0) || !(self.checkpoint_cost_s >= 0.0) {
            return Err(Error::validation("profiling and checkpoint costs must be non-negative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::validation(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Everything a run needs besides the mode and seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: ModelGraph,
    pub cluster: Cluster,
    pub schedule: TrainingSchedule,
    pub params: CostParams,
    pub drift: DriftModel,
    pub sim: SimParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.graph.is_empty() {
            return Err(Error::validation("model graph has no components"));
        }
        self.cluster.validate()?;
        self.schedule.validate()?;
        self.params.validate()?;
        self.drift.validate(self.graph.len())?;
        self.sim.validate()
    }

    /// The same scenario on the first `k` devices.
    pub fn with_devices(&self, k: usize) -> Result<Scenario> {
        Ok(Scenario {
            cluster: self.cluster.truncated(k)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledCosts {
    /// Measured per-device compute seconds per step, per component.
    pub t_comp: Vec<f64>,
    /// Measured communication over compute.
    pub ratio: f64,
    pub epoch: u32,
}

/// Measure the current plan. `truth` holds the true compute multipliers;
/// `round` distinguishes several measurements within one epoch.
pub fn profile(plan: &Plan, truth: &[f64], drift: &DriftModel, seed: u64, epoch: u32, round: u32) -> ProfiledCosts {
    let mut rng = Stream::new(seed ^ drift.seed, epoch, Purpose::Profile, round);
    let iters = drift.profile_iters.max(1);
    let mut noise = || (0..iters).map(|_| rng.lognormal(drift.sigma_noise)).sum::<f64>() / iters as f64;
    let t_comp: Vec<f64> = plan
        .per_component
        .iter()
        .zip(truth)
        .map(|(c, &f)| c.t_comp * f * noise())
        .collect();
    let comm = plan.comm_time() * noise();
    let comp: f64 = t_comp.iter().sum();
    ProfiledCosts {
        ratio: if comp > 0.0 { comm / comp } else { 0.0 },
        t_comp,
        epoch,
    }
}

fn relative_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else if old == 0.0 {
        f64::INFINITY
    } else {
        ((new - old) / old).abs()
    }
}

pub fn should_replan(baseline: &ProfiledCosts, current: &ProfiledCosts, tau: f64) -> bool {
    if baseline.t_comp.len() != current.t_comp.len() {
        return true;
    }
    relative_change(baseline.ratio, current.ratio) > tau
        || baseline
            .t_comp
            .iter()
            .zip(&current.t_comp)
            .any(|(&b, &c)| relative_change(b, c) > tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Profile,
    Plan,
    Forward,
    Backward,
    MpComm,
    Reshard,
    GradSync,
    ParamUpdate,
    Checkpoint,
}

impl EventType {
    pub fn is_comm(self) -> bool {
        matches!(self, EventType::MpComm | EventType::Reshard | EventType::GradSync)
    }

    pub fn is_compute(self) -> bool {
        matches!(self, EventType::Forward | EventType::Backward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_start: f64,
    pub duration: f64,
    pub event_type: EventType,
    pub component_id: Option<usize>,
    pub epoch: u32,
    pub batch: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(|e| e.duration).sum()
    }

    /// Profiling and planning time spent after the initial plan.
    pub fn replan_overhead(&self) -> f64 {
        let mut seen_training = false;
        let mut total = 0.0;
        for e in &self.events {
            match e.event_type {
                EventType::Profile | EventType::Plan if seen_training => total += e.duration,
                EventType::Forward => seen_training = true,
                _ => {}
            }
        }
        total
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for e in &self.events {
                w.serialize(e).map_err(|e| Error::validation(format!("trace: {e}")))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        crate::io::write_atomic(path, &buf)
    }

    pub fn read_csv(path: &Path) -> Result<Trace> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Schema {
            file: path.display().to_string(),
            field: e.to_string(),
        })?;
        let events = r
            .deserialize()
            .collect::<std::result::Result<Vec<TraceEvent>, _>>()
            .map_err(|e| Error::Schema {
                file: path.display().to_string(),
                field: e.to_string(),
            })?;
        Ok(Trace { events })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplanEvent {
    pub epoch: u32,
    pub old_plan_hash: String,
    pub new_plan_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimMetrics {
    pub schema_version: u32,
    pub mode: Mode,
    pub k: usize,
    pub seed: u64,
    pub total_time_s: f64,
    pub throughput_samples_per_s: f64,
    pub comm_fraction: f64,
    pub compute_time_s: f64,
    pub comm_time_s: f64,
    pub overhead_time_s: f64,
    pub peak_mem_bytes: f64,
    pub replan_events: Vec<ReplanEvent>,
    pub checkpoint_count: u32,
    /// Strategy per component of the final plan, e.g. `HP(4x2)`.
    pub final_plan: Vec<String>,
}

impl SimMetrics {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Schema {
                file: "metrics".into(),
                field: format!("schema_version {} (expected {METRICS_SCHEMA_VERSION})", self.schema_version),
            });
        }
        if !(self.total_time_s > 0.0) || !(0.0..1.0).contains(&self.comm_fraction) {
            return Err(Error::Invariant(format!(
                "metrics out of range: total_time_s {} comm_fraction {}",
                self.total_time_s, self.comm_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: SimMetrics,
    /// Empty unless the run was asked to record it.
    pub trace: Trace,
    pub initial_plan: Plan,
    pub final_plan: Plan,
}

fn hash_hex(plan: &Plan) -> String {
    format!("{:016x}", plan.hash())
}

/// The plan a mode starts from; `scale` multiplies each component's compute
/// time (adaptive re-planning on measured costs).
fn make_plan(mode: Mode, sc: &Scenario, scale: Option<&[f64]>) -> Result<Plan> {
    let (tag, cluster) = match mode {
        Mode::Single => (Some(StrategyTag::DP), sc.cluster.truncated(1)?),
        Mode::Dp => (Some(StrategyTag::DP), sc.cluster.clone()),
        Mode::Mp => (Some(StrategyTag::MP), sc.cluster.clone()),
        Mode::Hp => (Some(StrategyTag::HP), sc.cluster.clone()),
        Mode::Adaptive => (None, sc.cluster.clone()),
    };
    let plan = match tag {
        Some(tag) => planner::uniform_plan(tag, &sc.graph, &cluster, &sc.schedule, &sc.params)?,
        None => {
            let base = PlanningProblem::build(&sc.graph, &cluster, &sc.schedule, &sc.params)?;
            let mut scaled = base.clone();
            if let Some(f) = scale {
                for (row, &f) in scaled.costs.iter_mut().zip(f) {
                    for c in row {
                        c.t_comp *= f;
                    }
                }
            }
            let chosen = planner::solve_problem(&scaled, sc.sim.solver, sc.sim.mem_buckets)?;
            let idx: Vec<usize> = chosen
                .assignment
                .iter()
                .map(|s| base.strategies.iter().position(|x| x == s).expect("candidate"))
                .collect();
            // durations always come from the unscaled model
            let mut plan = base.evaluate(&idx, &chosen.solver)?;
            plan.feasible = chosen.feasible;
            plan
        }
    };
    if !plan.feasible {
        return Err(Error::Infeasible(format!(
            "{mode} plan needs {:.0} bytes per device but the memory budget is {:.0} bytes",
            plan.mem_per_device, plan.mem_budget
        )));
    }
    Ok(plan)
}

/// Events of one mini-batch step, without timestamps.
fn batch_template(plan: &Plan, truth: &[f64]) -> Vec<(EventType, Option<usize>, f64)> {
    let mut ev = Vec::with_capacity(plan.per_component.len() * 6 + 1);
    for (i, c) in plan.per_component.iter().enumerate() {
        if plan.reshard[i] > 0.0 {
            ev.push((EventType::Reshard, Some(i), plan.reshard[i] / 2.0));
        }
        ev.push((EventType::Forward, Some(i), c.t_comp * truth[i] * c.fwd_share));
        if c.t_mp_comm() > 0.0 {
            ev.push((EventType::MpComm, Some(i), c.t_mp_comm() / 2.0));
        }
    }
    for (i, c) in plan.per_component.iter().enumerate().rev() {
        if c.t_mp_comm() > 0.0 {
            ev.push((EventType::MpComm, Some(i), c.t_mp_comm() / 2.0));
        }
        ev.push((EventType::Backward, Some(i), c.t_comp * truth[i] * (1.0 - c.fwd_share)));
        if plan.reshard[i] > 0.0 {
            ev.push((EventType::Reshard, Some(i), plan.reshard[i] / 2.0));
        }
    }
    for (i, (c, s)) in plan.per_component.iter().zip(&plan.assignment).enumerate() {
        if s.syncs_gradients() {
            ev.push((EventType::GradSync, Some(i), c.t_sync));
        }
    }
    ev.push((EventType::ParamUpdate, None, 0.0));
    ev
}

struct Clock {
    now: f64,
    comm: f64,
    compute: f64,
    overhead: f64,
    record: bool,
    trace: Vec<TraceEvent>,
}

impl Clock {
    fn emit(&mut self, kind: EventType, component: Option<usize>, duration: f64, epoch: u32, batch: Option<u64>) {
        if self.record {
            self.trace.push(TraceEvent {
                t_start: self.now,
                duration,
                event_type: kind,
                component_id: component,
                epoch,
                batch,
            });
        }
        self.now += duration;
        if kind.is_comm() {
            self.comm += duration;
        } else if kind.is_compute() {
            self.compute += duration;
        } else {
            self.overhead += duration;
        }
    }
}

/// Simulate `schedule.epochs` epochs in the given mode.
pub fn run(sc: &Scenario, mode: Mode, seed: u64, record_trace: bool) -> Result<SimOutput> {
    sc.validate()?;
    let n = sc.graph.len();
    let mut plan = make_plan(mode, sc, None)?;
    let initial_plan = plan.clone();
    let k = if mode == Mode::Single { 1 } else { sc.cluster.k() };

    let mut clock = Clock {
        now: 0.0,
        comm: 0.0,
        compute: 0.0,
        overhead: 0.0,
        record: record_trace,
        trace: Vec::new(),
    };
    let mut truth = vec![1.0; n];
    let mut peak_mem = plan.mem_per_device;
    let mut replans = Vec::new();
    let mut checkpoints = 0u32;
    let stream_seed = seed ^ sc.drift.seed;

    clock.emit(EventType::Profile, None, sc.sim.profile_cost_s, 0, None);
    clock.emit(EventType::Plan, None, 0.0, 0, None);
    let mut baseline = profile(&plan, &truth, &sc.drift, seed, 0, 0);

    let batches = sc.schedule.batches_per_epoch();
    for epoch in 0..sc.schedule.epochs {
        if epoch > 0 && sc.drift.sigma_drift > 0.0 {
            let mut rng = Stream::new(stream_seed, epoch, Purpose::Drift, 0);
            for t in truth.iter_mut() {
                *t *= rng.lognormal(sc.drift.sigma_drift);
            }
        }
        for s in sc.drift.scripted.iter().filter(|s| s.epoch == epoch) {
            truth[s.component] *= s.factor;
        }

        let template = batch_template(&plan, &truth);
        for b in 0..batches {
            for &(kind, comp, dur) in &template {
                clock.emit(kind, comp, dur, epoch, Some(b));
            }
        }

        // synthetic validation improvement, rarer as training proceeds
        let u = Stream::new(stream_seed, epoch, Purpose::Checkpoint, 0).uniform();
        if u < 1.0 / (1.0 + epoch as f64) {
            clock.emit(EventType::Checkpoint, None, sc.sim.checkpoint_cost_s, epoch, None);
            checkpoints += 1;
        }

        if mode != Mode::Adaptive {
            continue;
        }
        if sc.sim.profile_every_epoch {
            clock.emit(EventType::Profile, None, sc.sim.profile_cost_s, epoch, None);
        }
        let current = profile(&plan, &truth, &sc.drift, seed, epoch, 1);
        if !should_replan(&baseline, &current, sc.sim.tau) {
            continue;
        }
        if !sc.sim.profile_every_epoch {
            clock.emit(EventType::Profile, None, sc.sim.profile_cost_s, epoch, None);
        }
        let scale: Vec<f64> = current
            .t_comp
            .iter()
            .zip(&plan.per_component)
            .map(|(m, c)| if c.t_comp > 0.0 { m / c.t_comp } else { 1.0 })
            .collect();
        let next = make_plan(mode, sc, Some(&scale)).map_err(|e| match e {
            Error::Infeasible(m) => Error::Infeasible(format!("re-plan after epoch {epoch}: {m}")),
            other => other,
        })?;
        clock.emit(EventType::Plan, None, 0.0, epoch, None);
        log::debug!("epoch {epoch}: re-planned {} -> {}", hash_hex(&plan), hash_hex(&next));
        replans.push(ReplanEvent {
            epoch,
            old_plan_hash: hash_hex(&plan),
            new_plan_hash: hash_hex(&next),
        });
        plan = next;
        peak_mem = peak_mem.max(plan.mem_per_device);
        baseline = profile(&plan, &truth, &sc.drift, seed, epoch, 2);
    }

    let total = clock.now;
    let metrics = SimMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        mode,
        k,
        seed,
        total_time_s: total,
        throughput_samples_per_s: (sc.schedule.dataset_size * sc.schedule.epochs as u64) as f64 / total,
        comm_fraction: if total > 0.0 { clock.comm / total } else { 0.0 },
        compute_time_s: clock.compute,
        comm_time_s: clock.comm,
        overhead_time_s: clock.overhead,
        peak_mem_bytes: peak_mem,
        replan_events: replans,
        checkpoint_count: checkpoints,
        final_plan: plan.assignment.iter().map(|s| s.to_string()).collect(),
    };
    if !(total > 0.0) {
        return Err(Error::Invariant(format!("{mode} run produced total time {total}")));
    }
    Ok(SimOutput {
        metrics,
        trace: Trace { events: clock.trace },
        initial_plan,
        final_plan: plan,
    })
}
