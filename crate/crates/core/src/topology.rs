//! Cluster layout shared by the locality loss and the communication model.
//! Default values are illustrative and live in `config/defaults.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULTS_JSON: &str = include_str!("../config/defaults.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub n_nodes: usize,
    pub devices_per_node: usize,
    /// bytes/s
    pub intra_bw: f64,
    /// bytes/s
    pub inter_bw: f64,
    /// seconds
    pub intra_latency: f64,
    /// seconds
    pub inter_latency: f64,
}

impl ClusterTopology {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.devices_per_node == 0 {
            return Err(Error::Config("topology needs at least one node and one device".into()));
        }
        if !(self.inter_bw > 0.0) || !(self.intra_bw > self.inter_bw) {
            return Err(Error::Config(format!(
                "bandwidths must satisfy intra_bw > inter_bw > 0, got {} and {}",
                self.intra_bw, self.inter_bw
            )));
        }
        if !(self.intra_latency >= 0.0) || !(self.inter_latency >= 0.0) {
            return Err(Error::Config("latencies must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_devices(&self) -> usize {
        self.n_nodes * self.devices_per_node
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.devices_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn latency(&self, a: usize, b: usize) -> f64 {
        if self.same_node(a, b) {
            self.intra_latency
        } else {
            self.inter_latency
        }
    }

    pub fn bandwidth(&self, a: usize, b: usize) -> f64 {
        if self.same_node(a, b) {
            self.intra_bw
        } else {
            self.inter_bw
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let topo: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        topo.validate()?;
        Ok(topo)
    }
}

impl Default for ClusterTopology {
    fn default() -> Self {
        Defaults::load().topology
    }
}

/// Every tunable default of the cost model, parsed from the bundled config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Defaults {
    pub topology: ClusterTopology,
    pub overlap_ratio: f64,
    pub device_flops: f64,
    pub token_bytes: usize,
}

impl Defaults {
    pub fn load() -> Self {
        serde_json::from_str(DEFAULTS_JSON).expect("bundled defaults.json is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSlot {
    pub node: usize,
    /// Device index within the node.
    pub device: usize,
}

/// Expert → (node, device) map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPlacement {
    pub experts: Vec<DeviceSlot>,
}

impl ExpertPlacement {
    /// Experts dealt round-robin over devices in global device order, so
    /// expert e sits on global device `e % D`.
    pub fn round_robin(n_experts: usize, topo: &ClusterTopology) -> Self {
        let experts = (0..n_experts)
            .map(|e| {
                let g = e % topo.n_devices();
                DeviceSlot { node: g / topo.devices_per_node, device: g % topo.devices_per_node }
            })
            .collect();
        Self { experts }
    }

    /// Consecutive expert blocks per device: expert e on device `e * D / n`.
    pub fn blocked(n_experts: usize, topo: &ClusterTopology) -> Self {
        let d = topo.n_devices();
        let experts = (0..n_experts)
            .map(|e| {
                let g = e * d / n_experts.max(1);
                DeviceSlot { node: g / topo.devices_per_node, device: g % topo.devices_per_node }
            })
            .collect();
        Self { experts }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn node_of(&self, expert: usize) -> usize {
        self.experts[expert].node
    }

    pub fn global_device(&self, expert: usize, topo: &ClusterTopology) -> usize {
        let slot = self.experts[expert];
        slot.node * topo.devices_per_node + slot.device
    }

    pub fn validate(&self, topo: &ClusterTopology) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("placement has no experts".into()));
        }
        for (e, slot) in self.experts.iter().enumerate() {
            if slot.node >= topo.n_nodes || slot.device >= topo.devices_per_node {
                return Err(Error::Config(format!(
                    "expert {e} placed on node {} device {}, outside the topology",
                    slot.node, slot.device
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_defaults() {
        let d = Defaults::load();
        d.topology.validate().unwrap();
        assert_eq!(d.topology.n_devices(), 16);
        assert_eq!(d.overlap_ratio, 0.5);
    }

    #[test]
    fn topology_validation() {
        let mut t = ClusterTopology::default();
        t.inter_bw = t.intra_bw;
        assert!(t.validate().is_err());
        let mut t = ClusterTopology::default();
        t.intra_latency = -1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn placements() {
        let t = ClusterTopology::default();
        let p = ExpertPlacement::blocked(16, &t);
        p.validate(&t).unwrap();
        assert_eq!(p.node_of(7), 0);
        assert_eq!(p.node_of(8), 1);
        assert_eq!(p.global_device(9, &t), 9);
        let p = ExpertPlacement::blocked(32, &t);
        assert_eq!(p.global_device(3, &t), 1);
        let p = ExpertPlacement::round_robin(32, &t);
        assert_eq!(p.global_device(17, &t), 1);
        assert!(ExpertPlacement { experts: vec![] }.validate(&t).is_err());
    }
}
