//! Sweeps over device counts, plan files and summary reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::planner::Plan;
use crate::sim::{run, Mode, Scenario, SimMetrics};
use crate::workload::ModelGraph;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Apply `f` to every item on up to `jobs` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Infeasible,
    /// The mode has no layout at this device count (HP at prime K).
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub k: usize,
    pub status: RunStatus,
    pub total_time_s: Option<f64>,
    pub speedup: Option<f64>,
    pub efficiency: Option<f64>,
    pub comm_fraction: Option<f64>,
    pub peak_mem_bytes: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub single_time_s: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn get(&self, mode: Mode, k: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.mode == mode && r.k == k)
    }

    pub fn speedup(&self, mode: Mode, k: usize) -> Option<f64> {
        self.get(mode, k).and_then(|r| r.speedup)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::validation(format!("sweep csv: {e}")))?;
        }
        w.into_inner()
            .map_err(|e| Error::validation(format!("sweep csv: {e}")))
    }

    pub fn all_infeasible(&self) -> bool {
        self.rows.iter().all(|r| r.status != RunStatus::Ok)
    }
}

/// One simulated run per `(mode, k)`; failures are recorded, not raised.
pub fn sweep(sc: &Scenario, modes: &[Mode], k_values: &[usize], seed: u64, jobs: usize) -> Result<SweepReport> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::validation("k_values must be non-empty and each at least 1"));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k > sc.cluster.k()) {
        return Err(Error::validation(format!(
            "k = {k} exceeds the cluster's {} devices",
            sc.cluster.k()
        )));
    }
    let single = run(sc, Mode::Single, seed, false)?.metrics.total_time_s;
    let points: Vec<(Mode, usize)> = k_values
        .iter()
        .flat_map(|&k| modes.iter().map(move |&m| (m, k)))
        .collect();
    let rows = parallel_map(&points, jobs, |&(mode, k)| {
        let result = sc.with_devices(k).and_then(|s| run(&s, mode, seed, false));
        match result {
            Ok(out) => {
                let m = out.metrics;
                SweepRow {
                    mode,
                    k,
                    status: RunStatus::Ok,
                    total_time_s: Some(m.total_time_s),
                    speedup: Some(single / m.total_time_s),
                    efficiency: Some(single / m.total_time_s / m.k as f64),
                    comm_fraction: Some(m.comm_fraction),
                    peak_mem_bytes: Some(m.peak_mem_bytes),
                    note: String::new(),
                }
            }
            Err(e) => SweepRow {
                mode,
                k,
                status: if matches!(e, Error::Infeasible(_)) {
                    RunStatus::Infeasible
                } else {
                    RunStatus::Unavailable
                },
                total_time_s: None,
                speedup: None,
                efficiency: None,
                comm_fraction: None,
                peak_mem_bytes: None,
                note: e.to_string(),
            },
        }
    });
    Ok(SweepReport {
        single_time_s: single,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub component_id: usize,
    pub kind: String,
    pub strategy: String,
    pub step_time_s: f64,
    pub mem_bytes: f64,
}

/// On-disk form of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub schema_version: u32,
    pub model: String,
    pub k: usize,
    pub solver: String,
    pub plan_hash: String,
    pub step_time_s: f64,
    pub comm_share: f64,
    pub mem_per_device_bytes: f64,
    pub mem_budget_bytes: f64,
    pub feasible: bool,
    pub components: Vec<PlanEntry>,
}

impl PlanFile {
    pub fn new(graph: &ModelGraph, plan: &Plan) -> Self {
        let k = plan.assignment.first().map_or(1, |s| s.dp_degree * s.mp_degree);
        PlanFile {
            schema_version: PLAN_SCHEMA_VERSION,
            model: graph.name.clone(),
            k,
            solver: plan.solver.clone(),
            plan_hash: format!("{:016x}", plan.hash()),
            step_time_s: plan.step_time,
            comm_share: plan.comm_share(),
            mem_per_device_bytes: plan.mem_per_device,
            mem_budget_bytes: plan.mem_budget,
            feasible: plan.feasible,
            components: graph
                .components()
                .iter()
                .zip(&plan.assignment)
                .zip(&plan.per_component)
                .enumerate()
                .map(|(i, ((c, s), e))| PlanEntry {
                    component_id: c.id,
                    kind: c.kind.as_str().to_string(),
                    strategy: s.to_string(),
                    step_time_s: e.step_time() + plan.reshard[i],
                    mem_bytes: e.mem_per_device,
                })
                .collect(),
        }
    }

    pub fn validate(&self, file: &str) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Schema {
                file: file.into(),
                field: format!("schema_version {}", self.schema_version),
            });
        }
        if self.components.is_empty() {
            return Err(Error::Schema {
                file: file.into(),
                field: "components".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub k: usize,
    pub time_h: f64,
    pub speedup: Option<f64>,
    pub peak_mem_gb: f64,
    pub comm_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub mode: Mode,
    pub compute_share: f64,
    pub comm_share: f64,
    pub overhead_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub component_id: usize,
    pub kind: String,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub shares: Vec<ShareRow>,
    pub strategies: Vec<StrategyRow>,
}

pub fn report(metrics: &[SimMetrics], plan: Option<&PlanFile>) -> Result<Report> {
    if metrics.is_empty() {
        return Err(Error::validation("report needs at least one metrics file"));
    }
    let single = metrics
        .iter()
        .find(|m| m.mode == Mode::Single)
        .map(|m| m.total_time_s);
    let summary = metrics
        .iter()
        .map(|m| SummaryRow {
            mode: m.mode,
            k: m.k,
            time_h: m.total_time_s / 3600.0,
            speedup: single.map(|s| s / m.total_time_s),
            peak_mem_gb: m.peak_mem_bytes / crate::cluster::GIB,
            comm_pct: 100.0 * m.comm_fraction,
        })
        .collect();
    let shares = metrics
        .iter()
        .map(|m| ShareRow {
            mode: m.mode,
            compute_share: m.compute_time_s / m.total_time_s,
            comm_share: m.comm_time_s / m.total_time_s,
            overhead_share: m.overhead_time_s / m.total_time_s,
        })
        .collect();
    let strategies = plan
        .map(|p| {
            p.components
                .iter()
                .map(|c| StrategyRow {
                    component_id: c.component_id,
                    kind: c.kind.clone(),
                    strategy: c.strategy.clone(),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Report {
        summary,
        shares,
        strategies,
    })
}

impl Report {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9} {:>3} {:>10} {:>8} {:>10} {:>7}",
            "mode", "K", "time (h)", "speedup", "peak (GB)", "comm %"
        );
        for r in &self.summary {
            let speedup = r.speedup.map_or("-".to_string(), |v| format!("{v:.2}x"));
            let _ = writeln!(
                s,
                "{:<9} {:>3} {:>10.3} {:>8} {:>10.3} {:>7.1}",
                r.mode.as_str(),
                r.k,
                r.time_h,
                speedup,
                r.peak_mem_gb,
                r.comm_pct
            );
        }
        if !self.strategies.is_empty() {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for r in &self.strategies {
                *counts.entry((r.kind.clone(), r.strategy.clone())).or_default() += 1;
            }
            let _ = writeln!(s, "\nstrategy selection:");
            for ((kind, strategy), n) in counts {
                let _ = writeln!(s, "  {kind:<10} {strategy:<10} x{n}");
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fn csv_of<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| Error::validation(format!("report csv: {e}")))?;
            }
            w.into_inner().map_err(|e| Error::validation(format!("report csv: {e}")))
        }
        write_atomic(&dir.join("summary.csv"), &csv_of(&self.summary)?)?;
        write_atomic(&dir.join("time_shares.csv"), &csv_of(&self.shares)?)?;
        if !self.strategies.is_empty() {
            write_atomic(&dir.join("strategy_selection.csv"), &csv_of(&self.strategies)?)?;
        }
        crate::io::write_json(&dir.join("report.json"), self)
    }
}
