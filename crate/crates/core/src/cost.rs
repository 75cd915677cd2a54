//! Per-(component, strategy) cost model: compute time, communication time
//! and per-device memory for one mini-batch step, plus re-sharding cost at
//! strategy boundaries.
//!
//! Communication uses the ring all-reduce alpha-beta model. There is no
//! overlap between computation and communication.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::workload::{Component, ComponentKind, TrainingSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyTag {
    DP,
    MP,
    HP,
}

impl StrategyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::DP => "DP",
            StrategyTag::MP => "MP",
            StrategyTag::HP => "HP",
        }
    }
}

impl std::str::FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DP" => Ok(StrategyTag::DP),
            "MP" => Ok(StrategyTag::MP),
            "HP" => Ok(StrategyTag::HP),
            _ => Err(Error::validation(format!("unknown strategy `{s}`"))),
        }
    }
}

/// A parallelization choice: `dp_degree`-way data parallel times
/// `mp_degree`-way model parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub tag: StrategyTag,
    pub dp_degree: usize,
    pub mp_degree: usize,
}

impl Strategy {
    pub fn dp(k: usize) -> Self {
        Strategy {
            tag: StrategyTag::DP,
            dp_degree: k,
            mp_degree: 1,
        }
    }

    pub fn mp(k: usize) -> Self {
        Strategy {
            tag: StrategyTag::MP,
            dp_degree: 1,
            mp_degree: k,
        }
    }

    pub fn hp(d: usize, m: usize) -> Self {
        Strategy {
            tag: StrategyTag::HP,
            dp_degree: d,
            mp_degree: m,
        }
    }

    /// Every distinct strategy on `k` devices, in tie-break order:
    /// DP, MP, then HP by ascending data-parallel degree. On one device the
    /// only layout is the single-device one, reported as DP.
    pub fn candidates(k: usize) -> Vec<Strategy> {
        let mut out = vec![Strategy::dp(k)];
        if k > 1 {
            out.push(Strategy::mp(k));
        }
        out.extend(Self::hp_factorizations(k));
        out
    }

    /// All (d, m) with d * m = k and both > 1, ascending in d.
    pub fn hp_factorizations(k: usize) -> Vec<Strategy> {
        (2..k)
            .filter(|&d| k.is_multiple_of(d) && k / d > 1)
            .map(|d| Strategy::hp(d, k / d))
            .collect()
    }

    pub fn validate_for(&self, k: usize) -> Result<()> {
        let (d, m) = (self.dp_degree, self.mp_degree);
        let ok = if k == 1 {
            d == 1 && m == 1
        } else {
            match self.tag {
                StrategyTag::DP => d == k && m == 1,
                StrategyTag::MP => d == 1 && m == k,
                StrategyTag::HP => d > 1 && m > 1 && d * m == k,
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "strategy {self} is not valid on {k} device(s)"
            )))
        }
    }

    pub fn syncs_gradients(&self) -> bool {
        self.dp_degree > 1
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            StrategyTag::HP => write!(f, "HP({}x{})", self.dp_degree, self.mp_degree),
            tag => f.write_str(tag.as_str()),
        }
    }
}

/// Cost-model constants. Defaults are generic; the calibration configs
/// override them with fitted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Weights, gradients and optimizer state per parameter.
    pub bytes_per_param_state: f64,
    /// Compute efficiency of an intra-layer split (any m > 1).
    pub mp_efficiency: f64,
    /// Per-kind overrides of `mp_efficiency`.
    pub mp_efficiency_by_kind: BTreeMap<ComponentKind, f64>,
    /// Partial-result all-reduces per step under model parallelism, split
    /// evenly between forward and backward.
    pub comm_rounds_mp: u32,
    pub reshard_factor: f64,
    /// Samples per device below which compute time stops shrinking
    /// (device under-utilisation). 0 disables the floor.
    pub min_device_batch: f64,
    /// Fixed per-device buffer reserved by any plan that synchronizes
    /// gradients.
    pub dp_overhead_bytes: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            bytes_per_param_state: 16.0,
            mp_efficiency: 0.85,
            mp_efficiency_by_kind: BTreeMap::new(),
            comm_rounds_mp: 4,
            reshard_factor: 1.0,
            min_device_batch: 0.0,
            dp_overhead_bytes: 0.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |e: f64| e > 0.0 && e <= 1.0;
        if !(self.bytes_per_param_state >= 0.0 && self.bytes_per_param_state.is_finite()) {
            return Err(Error::validation("bytes_per_param_state must be finite and >= 0"));
        }
        if !in_unit(self.mp_efficiency) || !self.mp_efficiency_by_kind.values().all(|&e| in_unit(e)) {
            return Err(Error::validation("mp_efficiency must lie in (0, 1]"));
        }
        if !(self.reshard_factor >= 0.0 && self.reshard_factor.is_finite()) {
            return Err(Error::validation("reshard_factor must be finite and >= 0"));
        }
        if !(self.min_device_batch >= 0.0 && self.min_device_batch.is_finite()) {
            return Err(Error::validation("min_device_batch must be finite and >= 0"));
        }
        if !(self.dp_overhead_bytes >= 0.0 && self.dp_overhead_bytes.is_finite()) {
            return Err(Error::validation("dp_overhead_bytes must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn mp_efficiency_for(&self, kind: ComponentKind) -> f64 {
        self.mp_efficiency_by_kind
            .get(&kind)
            .copied()
            .unwrap_or(self.mp_efficiency)
    }
}

/// Costs of one component under one strategy for a single mini-batch step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Seconds of forward + backward compute on each participating device.
    pub t_comp: f64,
    /// Seconds of communication: intra-layer all-reduces plus gradient sync.
    pub t_comm: f64,
    /// Portion of `t_comm` spent synchronizing gradients.
    pub t_sync: f64,
    /// Fraction of `t_comp` spent in the forward pass.
    pub fwd_share: f64,
    pub mem_per_device: f64,
}

impl CostEstimate {
    pub fn step_time(&self) -> f64 {
        self.t_comp + self.t_comm
    }

    /// Intra-layer (model-parallel) communication.
    pub fn t_mp_comm(&self) -> f64 {
        self.t_comm - self.t_sync
    }
}

/// Ring all-reduce: reduce-scatter then all-gather, `2(n-1)` steps each
/// moving `payload / n` bytes.
pub fn allreduce_time(payload: f64, n: usize, cluster: &Cluster) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n_f = n as f64;
    2.0 * (n_f - 1.0) / n_f * payload / cluster.link_bandwidth + 2.0 * (n_f - 1.0) * cluster.link_latency
}

pub fn estimate(
    component: &Component,
    strategy: &Strategy,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> Result<CostEstimate> {
    strategy.validate_for(cluster.k())?;
    let d = strategy.dp_degree;
    let m = strategy.mp_degree;
    let local_batch = schedule.global_batch as f64 / d as f64;
    let efficiency = if m > 1 {
        params.mp_efficiency_for(component.kind)
    } else {
        1.0
    };

    let busy_batch = local_batch.max(params.min_device_batch);
    let t_comp = component.flops_total() * busy_batch / (cluster.throughput() * efficiency * m as f64);
    let fwd_share = if component.flops_total() > 0.0 {
        component.flops_fwd / component.flops_total()
    } else {
        0.5
    };

    let act_bytes = component.activation_bytes_per_sample as f64;
    let grad_bytes = schedule.bytes_per_element as f64 * component.param_count as f64;
    let t_mp = if m > 1 {
        params.comm_rounds_mp as f64 * allreduce_time(act_bytes * local_batch, m, cluster)
    } else {
        0.0
    };
    let t_sync = allreduce_time(grad_bytes / m as f64, d, cluster);

    // Activations of a split layer are sharded with its computation.
    let mem_per_device = (params.bytes_per_param_state * component.param_count as f64
        + act_bytes * local_batch)
        / m as f64;

    Ok(CostEstimate {
        t_comp,
        t_comm: t_mp + t_sync,
        t_sync,
        fwd_share,
        mem_per_device,
    })
}

/// Cost of converting the activation layout at the boundary into
/// `component`, charged once forward and once backward.
pub fn reshard_cost(
    prev: &Strategy,
    next: &Strategy,
    component: &Component,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> f64 {
    if prev == next {
        return 0.0;
    }
    boundary_cost(component, cluster, schedule, params)
}

/// The re-sharding cost into `component` when its neighbour's strategy differs.
pub(crate) fn boundary_cost(
    component: &Component,
    cluster: &Cluster,
    schedule: &TrainingSchedule,
    params: &CostParams,
) -> f64 {
    let bytes = component.activation_bytes_per_sample as f64 * schedule.global_batch as f64;
    params.reshard_factor * 2.0 * (bytes / cluster.link_bandwidth + cluster.link_latency)
}
