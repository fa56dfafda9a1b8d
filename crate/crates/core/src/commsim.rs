//! Communication cost model for expert dispatch on a two-tier cluster.
//!
//! All-to-All is a ring schedule of D−1 rounds. In round r device s sends to
//! device (s + r) mod D, and a round lasts as long as its slowest pair
//! (latency + bytes / bandwidth, with intra- or inter-node parameters). The
//! group-wise variant sends 1/g of each inter-node transfer through every
//! member of a g-device tensor-parallel group, then restores the full data
//! with a ring All-Gather inside each group.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::router::RoutingOutcome;
use crate::topology::{ClusterTopology, ExpertPlacement};

fn check_square(volume: ArrayView2<'_, f64>, topo: &ClusterTopology) -> Result<()> {
    let d = topo.n_devices();
    if volume.nrows() != d || volume.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: volume.nrows().max(volume.ncols()) });
    }
    if volume.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("volumes must be finite and non-negative".into()));
    }
    Ok(())
}

fn check_sources(outcome: &RoutingOutcome, source_device: &[usize], topo: &ClusterTopology) -> Result<()> {
    if source_device.len() != outcome.n_tokens() {
        return Err(Error::DimensionMismatch { expected: outcome.n_tokens(), got: source_device.len() });
    }
    if let Some(&bad) = source_device.iter().find(|&&s| s >= topo.n_devices()) {
        return Err(Error::Config(format!("source device {bad} outside the topology")));
    }
    Ok(())
}

fn check_placement(outcome: &RoutingOutcome, placement: &ExpertPlacement, topo: &ClusterTopology) -> Result<()> {
    placement.validate(topo)?;
    if let Some(&e) = outcome.expert_of_token.iter().find(|&&e| e >= placement.n_experts()) {
        return Err(Error::Config(format!("expert {e} has no placement")));
    }
    Ok(())
}

/// Bytes sent from each source device to each expert-hosting device. Dropped
/// tokens are not dispatched.
pub fn build_volume_matrix(
    outcome: &RoutingOutcome,
    placement: &ExpertPlacement,
    topo: &ClusterTopology,
    token_bytes: f64,
    source_device: &[usize],
) -> Result<Array2<f64>> {
    check_sources(outcome, source_device, topo)?;
    check_placement(outcome, placement, topo)?;
    let d = topo.n_devices();
    let mut volume = Array2::zeros((d, d));
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if outcome.dropped[m] {
            continue;
        }
        volume[[source_device[m], placement.global_device(e, topo)]] += token_bytes;
    }
    Ok(volume)
}

fn round_cost(volume: ArrayView2<'_, f64>, topo: &ClusterTopology, r: usize) -> f64 {
    let d = topo.n_devices();
    (0..d)
        .map(|s| {
            let t = (s + r) % d;
            topo.latency(s, t) + volume[[s, t]] / topo.bandwidth(s, t)
        })
        .fold(0.0, f64::max)
}

/// Ring-scheduled All-to-All time in seconds. The diagonal is local and free.
pub fn alltoall_cost(volume: ArrayView2<'_, f64>, topo: &ClusterTopology) -> Result<f64> {
    topo.validate()?;
    check_square(volume, topo)?;
    Ok((1..topo.n_devices()).map(|r| round_cost(volume, topo, r)).sum())
}

/// Ring All-Gather of `total_bytes` spread over `g` devices.
pub fn ring_allgather_cost(total_bytes: f64, g: usize, bw: f64, latency: f64) -> f64 {
    if g <= 1 {
        return 0.0;
    }
    let gm1 = (g - 1) as f64;
    gm1 / g as f64 * total_bytes / bw + gm1 * latency
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    AllToAll,
    AllGather,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommPhase {
    pub kind: PhaseKind,
    pub participants: Vec<usize>,
    pub volume: Array2<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommPlan {
    pub volume: Array2<f64>,
    pub phases: Vec<CommPhase>,
    pub input_bytes: f64,
    /// Inter-node bytes withheld from the All-to-All by sharding.
    pub deferred_bytes: f64,
    /// Bytes moved by the All-Gather phases.
    pub replication_bytes: f64,
}

impl CommPlan {
    pub fn phase_bytes(&self) -> f64 {
        self.phases.iter().map(|p| p.volume.sum()).sum()
    }

    pub fn seconds(&self) -> f64 {
        // All-Gather groups run concurrently.
        let a2a: f64 = self.phases.iter().filter(|p| p.kind == PhaseKind::AllToAll).map(|p| p.seconds).sum();
        let ag = self
            .phases
            .iter()
            .filter(|p| p.kind == PhaseKind::AllGather)
            .map(|p| p.seconds)
            .fold(0.0, f64::max);
        a2a + ag
    }
}

/// Group-wise All-to-All: inter-node entries shrink to 1/g, then each
/// tensor-parallel group of g consecutive devices all-gathers what it received.
pub fn groupwise_alltoall_cost(
    volume: ArrayView2<'_, f64>,
    topo: &ClusterTopology,
    tp_group_size: usize,
) -> Result<(f64, CommPlan)> {
    topo.validate()?;
    check_square(volume, topo)?;
    let g = tp_group_size;
    if g == 0 || topo.devices_per_node % g != 0 {
        return Err(Error::Config(format!(
            "tp group size {g} must divide devices_per_node {}",
            topo.devices_per_node
        )));
    }
    let d = topo.n_devices();
    let mut phase1 = volume.to_owned();
    let mut inter_total = 0.0;
    for s in 0..d {
        for t in 0..d {
            if !topo.same_node(s, t) {
                inter_total += volume[[s, t]];
                phase1[[s, t]] = volume[[s, t]] / g as f64;
            }
        }
    }
    let a2a_seconds = alltoall_cost(phase1.view(), topo)?;
    let mut phases = vec![CommPhase {
        kind: PhaseKind::AllToAll,
        participants: (0..d).collect(),
        volume: phase1.clone(),
        seconds: a2a_seconds,
    }];
    let mut replication = 0.0;
    if g > 1 {
        // inter-node shard bytes each device received in phase 1
        let received: Vec<f64> = (0..d)
            .map(|t| (0..d).filter(|&s| !topo.same_node(s, t)).map(|s| phase1[[s, t]]).sum())
            .collect();
        for group in 0..d / g {
            let members: Vec<usize> = (group * g..(group + 1) * g).collect();
            let mut gather = Array2::zeros((d, d));
            for &t in &members {
                for &u in &members {
                    if u != t {
                        gather[[t, u]] = received[t];
                    }
                }
            }
            let shard_total: f64 = members.iter().map(|&t| received[t]).sum();
            replication += gather.sum();
            phases.push(CommPhase {
                kind: PhaseKind::AllGather,
                participants: members,
                volume: gather,
                seconds: ring_allgather_cost(shard_total, g, topo.intra_bw, topo.intra_latency),
            });
        }
    }
    let plan = CommPlan {
        volume: volume.to_owned(),
        phases,
        input_bytes: volume.sum(),
        deferred_bytes: inter_total - inter_total / g as f64,
        replication_bytes: replication,
    };
    Ok((plan.seconds(), plan))
}

/// Share of dispatched tokens whose expert lives on the token's own node.
/// With nothing dispatched no traffic leaves any node, and the result is 1.
pub fn locality_fraction(
    outcome: &RoutingOutcome,
    placement: &ExpertPlacement,
    topo: &ClusterTopology,
    source_device: &[usize],
) -> Result<f64> {
    check_sources(outcome, source_device, topo)?;
    check_placement(outcome, placement, topo)?;
    let (mut local, mut total) = (0usize, 0usize);
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if outcome.dropped[m] {
            continue;
        }
        total += 1;
        if placement.node_of(e) == topo.node_of(source_device[m]) {
            local += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { local as f64 / total as f64 })
}

/// Communication left exposed after overlapping with computation.
pub fn visible_comm(comm: f64, compute: f64, overlap_ratio: f64) -> f64 {
    (comm - overlap_ratio * compute).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub token_bytes: f64,
    pub tp_group_size: usize,
    pub overlap_ratio: f64,
    pub device_flops: f64,
    pub flops_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub router: String,
    pub locality_fraction: f64,
    pub plain_seconds: f64,
    pub groupwise_seconds: f64,
    pub compute_seconds: f64,
    pub visible_comm_seconds: f64,
    pub comm_share: f64,
}

/// Models one dispatch per router and reports communication time, locality
/// and the exposed communication share of the layer time.
pub fn compare_strategies(
    runs: &[(String, RoutingOutcome)],
    placement: &ExpertPlacement,
    topo: &ClusterTopology,
    source_device: &[usize],
    model: &CostModel,
) -> Result<Vec<StrategyRow>> {
    if let Some((name, o)) = runs.iter().find(|(_, o)| o.n_tokens() != source_device.len()) {
        return Err(Error::DimensionMismatch { expected: source_device.len(), got: o.n_tokens() })
            .map_err(|e| Error::Config(format!("router {name}: {e}")));
    }
    runs.iter()
        .map(|(name, outcome)| {
            let volume = build_volume_matrix(outcome, placement, topo, model.token_bytes, source_device)?;
            let plain = alltoall_cost(volume.view(), topo)?;
            let (grouped, _) = groupwise_alltoall_cost(volume.view(), topo, model.tp_group_size)?;
            // busiest device bounds the expert compute time
            let mut per_device = vec![0usize; topo.n_devices()];
            for (e, c) in outcome.served_counts().into_iter().enumerate() {
                per_device[placement.global_device(e, topo)] += c;
            }
            let busiest = per_device.into_iter().max().unwrap_or(0) as f64;
            let compute = busiest * model.flops_per_token / model.device_flops;
            let visible = visible_comm(grouped, compute, model.overlap_ratio);
            let total = compute + visible;
            Ok(StrategyRow {
                router: name.clone(),
                locality_fraction: locality_fraction(outcome, placement, topo, source_device)?,
                plain_seconds: plain,
                groupwise_seconds: grouped,
                compute_seconds: compute,
                visible_comm_seconds: visible,
                comm_share: if total > 0.0 { visible / total } else { 0.0 },
            })
        })
        .collect()
}

pub fn write_strategy_csv<W: std::io::Write>(rows: &[StrategyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a D×D byte matrix with no header.
pub fn read_volume_csv<R: std::io::Read>(input: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Config(format!("bad volume entry {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("volume matrix must be square and non-empty".into()));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::RoutingOutcome;

    fn outcome(experts: Vec<usize>, n: usize) -> RoutingOutcome {
        let t = experts.len();
        RoutingOutcome {
            expert_of_token: experts,
            gate_value: vec![1.0; t],
            dropped: vec![false; t],
            f: vec![0.0; n],
            p: vec![0.0; n],
        }
    }

    #[test]
    fn single_token_volume() {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(16, &topo);
        let v = build_volume_matrix(&outcome(vec![3], 16), &placement, &topo, 4096.0, &[0]).unwrap();
        assert_eq!(v[[0, 3]], 4096.0);
        assert_eq!(v.sum(), 4096.0);
    }

    #[test]
    fn self_routed_tokens_stay_on_diagonal() {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(16, &topo);
        let experts: Vec<usize> = (0..32).map(|m| m % 16).collect();
        let sources = experts.clone();
        let v = build_volume_matrix(&outcome(experts, 16), &placement, &topo, 10.0, &sources).unwrap();
        for s in 0..16 {
            for t in 0..16 {
                assert_eq!(v[[s, t]] == 0.0, s != t);
            }
        }
    }

    #[test]
    fn unplaced_expert_is_an_error() {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(4, &topo);
        assert!(build_volume_matrix(&outcome(vec![7], 8), &placement, &topo, 1.0, &[0]).is_err());
    }

    #[test]
    fn latency_floor() {
        let topo = ClusterTopology::default();
        let zero = Array2::zeros((16, 16));
        let c = alltoall_cost(zero.view(), &topo).unwrap();
        assert!((c - 15.0 * topo.inter_latency).abs() < 1e-18);
    }

    #[test]
    fn doubling_volume_doubles_cost_without_latency() {
        let topo = ClusterTopology { intra_latency: 0.0, inter_latency: 0.0, ..Default::default() };
        let v = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 1000.0);
        let a = alltoall_cost(v.view(), &topo).unwrap();
        let b = alltoall_cost((&v * 2.0).view(), &topo).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn groupwise_rejects_bad_group() {
        let topo = ClusterTopology::default();
        let v = Array2::zeros((16, 16));
        assert!(groupwise_alltoall_cost(v.view(), &topo, 3).is_err());
        assert!(groupwise_alltoall_cost(v.view(), &topo, 0).is_err());
    }

    #[test]
    fn groupwise_without_inter_traffic_adds_only_gather_latency() {
        let topo = ClusterTopology::default();
        let v = Array2::from_shape_fn((16, 16), |(i, j)| if i / 8 == j / 8 { 5e5 } else { 0.0 });
        let plain = alltoall_cost(v.view(), &topo).unwrap();
        let (grouped, plan) = groupwise_alltoall_cost(v.view(), &topo, 4).unwrap();
        assert_eq!(plan.phases[0].volume, v);
        assert!((grouped - plain - 3.0 * topo.intra_latency).abs() < 1e-15);
    }

    #[test]
    fn locality_fraction_cases() {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(16, &topo);
        let all_local = outcome(vec![0, 1, 2, 9], 16);
        assert_eq!(locality_fraction(&all_local, &placement, &topo, &[0, 0, 5, 12]).unwrap(), 1.0);
        let half = outcome(vec![0, 9], 16);
        assert_eq!(locality_fraction(&half, &placement, &topo, &[0, 0]).unwrap(), 0.5);
        let mut dropped = outcome(vec![9], 16);
        dropped.dropped[0] = true;
        assert_eq!(locality_fraction(&dropped, &placement, &topo, &[0]).unwrap(), 1.0);
    }

    #[test]
    fn overlap() {
        assert_eq!(visible_comm(1.0, 1.0, 0.5), 0.5);
        assert_eq!(visible_comm(1.0, 4.0, 0.5), 0.0);
    }

    #[test]
    fn compare_identical_assignments() {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(16, &topo);
        let o = outcome((0..64).map(|m| (m * 5) % 16).collect(), 16);
        let sources: Vec<usize> = (0..64).map(|m| m % 16).collect();
        let model = CostModel { token_bytes: 4096.0, tp_group_size: 8, overlap_ratio: 0.5, device_flops: 1e12, flops_per_token: 1e6 };
        let rows = compare_strategies(
            &[("a".into(), o.clone()), ("b".into(), o)],
            &placement,
            &topo,
            &sources,
            &model,
        )
        .unwrap();
        assert_eq!(rows[0].plain_seconds, rows[1].plain_seconds);
        assert_eq!(rows[0].groupwise_seconds, rows[1].groupwise_seconds);
        let short = outcome(vec![0; 3], 16);
        assert!(compare_strategies(&[("c".into(), short)], &placement, &topo, &sources, &model).is_err());
    }

    #[test]
    fn volume_csv_roundtrip_shape() {
        let m = read_volume_csv("0, 1\n2, 3\n".as_bytes()).unwrap();
        assert_eq!(m[[1, 0]], 2.0);
        assert!(read_volume_csv("0,1\n2\n".as_bytes()).is_err());
    }
}
