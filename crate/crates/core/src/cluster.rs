//! Device pool and interconnect.
//!
//! Unit convention: 1 GB = 2^30 bytes for memory, 1 GB/s = 1e9 bytes/s for
//! bandwidth, 1 TFLOP/s = 1e12 FLOP/s.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: usize,
    /// Bytes.
    pub mem_capacity: f64,
    /// FLOP/s.
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub devices: Vec<Device>,
    /// Bytes per second on every link.
    pub link_bandwidth: f64,
    /// Seconds per message.
    pub link_latency: f64,
}

impl Cluster {
    pub fn k(&self) -> usize {
        self.devices.len()
    }

    pub fn min_memory(&self) -> f64 {
        self.devices
            .iter()
            .map(|d| d.mem_capacity)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn throughput(&self) -> f64 {
        self.devices[0].throughput
    }

    pub fn is_homogeneous(&self) -> bool {
        let first = &self.devices[0];
        self.devices
            .iter()
            .all(|d| d.mem_capacity == first.mem_capacity && d.throughput == first.throughput)
    }

    /// The same interconnect with only the first `k` devices.
    pub fn truncated(&self, k: usize) -> Result<Cluster> {
        if k == 0 || k > self.k() {
            return Err(Error::validation(format!(
                "cannot take {k} devices from a cluster of {}",
                self.k()
            )));
        }
        Ok(Cluster {
            devices: self.devices[..k].to_vec(),
            link_bandwidth: self.link_bandwidth,
            link_latency: self.link_latency,
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::validation("cluster must have at least one device"));
        }
        for d in &self.devices {
            if !(d.mem_capacity > 0.0) || !(d.throughput > 0.0) {
                return Err(Error::validation(format!(
                    "device {}: memory and throughput must be positive",
                    d.id
                )));
            }
        }
        if !(self.link_bandwidth > 0.0) || !(self.link_latency >= 0.0) {
            return Err(Error::validation(
                "link bandwidth must be positive and latency non-negative",
            ));
        }
        Ok(())
    }
}

/// `k` identical devices behind a uniform all-to-all interconnect.
pub fn uniform_cluster(
    k: usize,
    mem_gb: f64,
    throughput_tflops: f64,
    bandwidth_gbps: f64,
    latency_us: f64,
) -> Result<Cluster> {
    if k == 0 {
        return Err(Error::validation("cluster size k must be at least 1"));
    }
    let spec = ClusterSpec {
        k,
        mem_gb,
        throughput_tflops,
        bandwidth_gbps,
        latency_us,
    };
    let cluster = Cluster {
        devices: (0..k)
            .map(|id| Device {
                id,
                mem_capacity: mem_gb * GIB,
                throughput: throughput_tflops * 1e12,
            })
            .collect(),
        link_bandwidth: bandwidth_gbps * 1e9,
        link_latency: latency_us / 1e6,
    };
    cluster.validate().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{m} ({spec:?})")),
        other => other,
    })?;
    Ok(cluster)
}

/// Cluster file contents; also parsed from `k=8,mem=32,tflops=15,bw=25,lat=5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub k: usize,
    pub mem_gb: f64,
    pub throughput_tflops: f64,
    pub bandwidth_gbps: f64,
    pub latency_us: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            k: 8,
            mem_gb: 32.0,
            throughput_tflops: 15.0,
            bandwidth_gbps: 25.0,
            latency_us: 5.0,
        }
    }
}

impl ClusterSpec {
    pub fn build(&self) -> Result<Cluster> {
        uniform_cluster(
            self.k,
            self.mem_gb,
            self.throughput_tflops,
            self.bandwidth_gbps,
            self.latency_us,
        )
    }
}

impl FromStr for ClusterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ClusterSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("cluster: expected key=value, got `{part}`")))?;
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::validation(format!("cluster: bad number `{v}` for `{key}`")))
            };
            match key {
                "k" => {
                    spec.k = value
                        .parse()
                        .map_err(|_| Error::validation(format!("cluster: bad device count `{value}`")))?
                }
                "mem" | "mem_gb" => spec.mem_gb = num(value)?,
                "tflops" | "throughput_tflops" => spec.throughput_tflops = num(value)?,
                "bw" | "bandwidth_gbps" => spec.bandwidth_gbps = num(value)?,
                "lat" | "latency_us" => spec.latency_us = num(value)?,
                other => return Err(Error::validation(format!("cluster: unknown key `{other}`"))),
            }
        }
        Ok(spec)
    }
}
