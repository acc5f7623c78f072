//! Device and resource-block scheduling.
//!
//! One cluster schedules its covered devices by a greedy minimum-weight
//! independent-set search on the conflict graph. Chains are assembled left
//! to right: each bridge claims one block usable toward both heads, and each
//! cluster's pool excludes its neighbor's blocks so adjacent clusters stay
//! orthogonal. Whole chains are then picked by a second greedy pass over
//! chain weights in joules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::radio::{achievable_rate, ChannelParams, GainTable};
use crate::resource::{self, TrainerConfig};
use crate::topology::{
    enumerate_cluster_candidates, ClusterCandidate, ConflictGraph, CoverageMap,
};
use crate::Device;

// ---------------------------------------------------------------------------
// Plan types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub num_rrbs: usize,
    pub max_chain_len: usize,
    /// Budget on the total number of clusters across all selected chains.
    pub max_clusters: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            num_rrbs: 22,
            max_chain_len: 3,
            max_clusters: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub device: usize,
    pub rrb: usize,
    pub uplink_rate: f64,
    /// This device's own reception rate of the head's broadcast.
    pub downlink_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleAssignment {
    pub ch: usize,
    pub entries: Vec<ScheduleEntry>,
    /// Bridges adjacent to this cluster; they listen to the head's broadcast.
    pub bd_ids: Vec<usize>,
    /// Broadcast rate every receiver (locals and bridges) can decode.
    /// `None` when the cluster has nobody to talk to.
    pub common_downlink_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BdAssignment {
    pub bd: usize,
    pub left_ch: usize,
    pub right_ch: usize,
    pub rrb: usize,
    /// Bottleneck rate of the single shared-block upload both heads hear.
    pub uplink_rate: f64,
    /// Slower of the two broadcast reception rates.
    pub downlink_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainPlan {
    pub chain: ClusterCandidate,
    pub per_ch: BTreeMap<usize, ScheduleAssignment>,
    pub bds: Vec<BdAssignment>,
    /// Selection weight: scheduled device energies plus head broadcasts.
    pub total_weight_j: f64,
}

impl ChainPlan {
    /// Heads, bridges, and scheduled locals: every device this plan reserves.
    pub fn participants(&self) -> BTreeSet<usize> {
        let mut out = self.chain.members();
        for assign in self.per_ch.values() {
            out.extend(assign.entries.iter().map(|e| e.device));
        }
        out
    }

    pub fn num_scheduled(&self) -> usize {
        self.per_ch.values().map(|a| a.entries.len()).sum()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub chains: Vec<ChainPlan>,
}

impl NetworkPlan {
    pub fn num_clusters(&self) -> usize {
        self.chains.iter().map(|p| p.chain.num_clusters()).sum()
    }

    /// Scheduled locals across all chains, bridges excluded.
    pub fn num_scheduled(&self) -> usize {
        self.chains.iter().map(|p| p.num_scheduled()).sum()
    }

    pub fn num_bds(&self) -> usize {
        self.chains.iter().map(|p| p.bds.len()).sum()
    }

    pub fn participants(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for p in &self.chains {
            out.extend(p.participants());
        }
        out
    }
}

/// Everything plan assembly reads but never mutates.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub devices: &'a [Device],
    pub coverage: &'a CoverageMap,
    pub gains: &'a GainTable,
    pub channel: &'a ChannelParams,
    pub train: &'a TrainerConfig,
    pub knobs: &'a SchedulerConfig,
}

fn rate(p_w: f64, gain: f64, channel: &ChannelParams) -> f64 {
    achievable_rate(p_w, gain, channel).expect("power and gain are non-negative")
}

// ---------------------------------------------------------------------------
// Per-cluster scheduling
// ---------------------------------------------------------------------------

/// Vertex cost in seconds: computation at the device's current clock plus
/// upload over the candidate block. Dead links get an infinite sentinel so
/// the greedy never picks them.
pub fn device_vertex_weight(
    train: &TrainerConfig,
    proc_density: f64,
    num_samples: usize,
    f_star: f64,
    uplink_rate: f64,
) -> f64 {
    if uplink_rate <= 0.0 {
        return f64::INFINITY;
    }
    let comp = train.local_iters as f64 * proc_density * num_samples as f64 / f_star;
    comp + train.model_size_bits / uplink_rate
}

/// Greedy minimum-weight independent set: repeatedly take the cheapest live
/// vertex (ties to the lowest (device, rrb)) and delete its closed
/// neighborhood, until no finite-weight vertex remains. The result is a
/// maximal independent set, so it schedules as many devices as the conflict
/// structure allows.
pub fn mwis_greedy(graph: &ConflictGraph) -> Vec<usize> {
    let n = graph.num_vertices();
    let mut alive = vec![true; n];
    let mut chosen = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (v, &live) in alive.iter().enumerate() {
            if !live || !graph.weights[v].is_finite() {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    graph.weights[v] < graph.weights[b]
                        || (graph.weights[v] == graph.weights[b]
                            && graph.vertices[v] < graph.vertices[b])
                }
            };
            if better {
                best = Some(v);
            }
        }
        let Some(v) = best else { break };
        chosen.push(v);
        alive[v] = false;
        for &u in graph.neighbors(v) {
            alive[u] = false;
        }
    }
    chosen
}

/// Selection weight of one cluster: scheduled devices' computation and
/// upload energies plus the head's broadcast energy. Bridges are shared
/// between two clusters and are costed at the chain level, not here.
pub fn cluster_vertex_weight(
    assignment: &ScheduleAssignment,
    devices: &[Device],
    f_star: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
) -> f64 {
    let mut total = 0.0;
    for e in &assignment.entries {
        let dev = &devices[e.device];
        let f = f_star
            .get(&e.device)
            .copied()
            .unwrap_or(dev.cpu_max_hz);
        total += resource::comp_energy(
            train.local_iters,
            dev.proc_density,
            dev.num_samples,
            train.switched_capacitance,
            f,
        );
        total += resource::comm_energy(dev.tx_power_w, train.model_size_bits, e.uplink_rate)
            .expect("scheduled entries have positive rates");
    }
    if !assignment.entries.is_empty() {
        if let Some(common) = assignment.common_downlink_rate {
            total +=
                resource::comm_energy(devices[assignment.ch].tx_power_w, train.model_size_bits, common)
                    .expect("positive common rate");
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Chain plan assembly
// ---------------------------------------------------------------------------

/// Build the full schedule of one chain candidate against the devices not
/// yet reserved elsewhere (`taken`). Returns `None` when the chain cannot
/// operate: a bridge has no block left, a bridge link is dead, or a bridge
/// cannot meet the round budget even at its top clock.
pub fn plan_chain(
    ctx: &PlanContext,
    candidate: &ClusterCandidate,
    f_star: &BTreeMap<usize, f64>,
    taken: &BTreeSet<usize>,
) -> Option<ChainPlan> {
    let z = ctx.knobs.num_rrbs;
    let members = candidate.members();

    // Bridges claim their shared block first, so every cluster knows its
    // reserved blocks before devices compete for the rest. Consecutive
    // bridges share a cluster and must differ; the block is the one whose
    // worse head link is fastest, lowest index on ties.
    let mut bds: Vec<BdAssignment> = Vec::new();
    for (left, right, bd) in candidate.adjacent_pairs() {
        let p_bd = ctx.devices[bd].tx_power_w;
        let prev_rrb = bds.last().map(|b| b.rrb);
        let mut best: Option<(f64, usize)> = None;
        for rrb in 0..z {
            if Some(rrb) == prev_rrb {
                continue;
            }
            let r_left = rate(p_bd, ctx.gains.d2d(bd, left, rrb), ctx.channel);
            let r_right = rate(p_bd, ctx.gains.d2d(bd, right, rrb), ctx.channel);
            let r = r_left.min(r_right);
            if best.is_none_or(|(br, _)| r > br) {
                best = Some((r, rrb));
            }
        }
        let (uplink_rate, rrb) = best?;
        if uplink_rate <= 0.0 {
            return None;
        }
        let down_left = rate(
            ctx.devices[left].tx_power_w,
            ctx.gains.d2d_broadcast(left, bd),
            ctx.channel,
        );
        let down_right = rate(
            ctx.devices[right].tx_power_w,
            ctx.gains.d2d_broadcast(right, bd),
            ctx.channel,
        );
        let downlink_rate = down_left.min(down_right);
        if downlink_rate <= 0.0 {
            return None;
        }
        bds.push(BdAssignment {
            bd,
            left_ch: left,
            right_ch: right,
            rrb,
            uplink_rate,
            downlink_rate,
        });
    }

    // Bridges are load-bearing: the chain is unusable if one cannot finish
    // its round inside the budget even at its fastest clock.
    for b in &bds {
        let dev = &ctx.devices[b.bd];
        let f_hat = resource::f_hat(
            ctx.train,
            dev.proc_density,
            dev.num_samples,
            b.uplink_rate,
            b.downlink_rate,
        )
        .ok()?;
        if f_hat > dev.cpu_max_hz {
            return None;
        }
    }

    // Clusters left to right. Each pool drops the adjacent bridges' blocks
    // and everything the previous cluster's devices used. Devices already
    // scheduled under an earlier head stay there; zones may overlap.
    let mut per_ch = BTreeMap::new();
    let mut prev_used: BTreeSet<usize> = BTreeSet::new();
    let mut assigned: BTreeSet<usize> = BTreeSet::new();
    for (idx, &ch) in candidate.ch_chain.iter().enumerate() {
        let mut pool: BTreeSet<usize> = (0..z).collect();
        if idx > 0 {
            pool.remove(&bds[idx - 1].rrb);
            for r in &prev_used {
                pool.remove(r);
            }
        }
        if idx < bds.len() {
            pool.remove(&bds[idx].rrb);
        }

        let p_ch = ctx.devices[ch].tx_power_w;
        let mut vertices = Vec::new();
        let mut weights = Vec::new();
        let mut link: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for &n in ctx.coverage.set(ch) {
            if n == ch || members.contains(&n) || taken.contains(&n) || assigned.contains(&n) {
                continue;
            }
            let dev = &ctx.devices[n];
            let down = rate(p_ch, ctx.gains.d2d_broadcast(ch, n), ctx.channel);
            if down <= 0.0 {
                continue;
            }
            for &rrb in &pool {
                let up = rate(dev.tx_power_w, ctx.gains.d2d(n, ch, rrb), ctx.channel);
                if up <= 0.0 {
                    continue;
                }
                // A device only enters the graph on blocks it could finish a
                // round on at its top clock.
                let Ok(f_hat) =
                    resource::f_hat(ctx.train, dev.proc_density, dev.num_samples, up, down)
                else {
                    continue;
                };
                if f_hat > dev.cpu_max_hz {
                    continue;
                }
                let f_now = f_star.get(&n).copied().unwrap_or(dev.cpu_max_hz);
                vertices.push((n, rrb));
                weights.push(device_vertex_weight(
                    ctx.train,
                    dev.proc_density,
                    dev.num_samples,
                    f_now,
                    up,
                ));
                link.insert((n, rrb), (up, down));
            }
        }
        let mut graph = ConflictGraph::from_vertices(ch, vertices);
        graph.weights = weights;
        let entries: Vec<ScheduleEntry> = mwis_greedy(&graph)
            .into_iter()
            .map(|v| {
                let (device, rrb) = graph.vertices[v];
                let (up, down) = link[&(device, rrb)];
                ScheduleEntry {
                    device,
                    rrb,
                    uplink_rate: up,
                    downlink_rate: down,
                }
            })
            .collect();
        prev_used = entries.iter().map(|e| e.rrb).collect();
        assigned.extend(entries.iter().map(|e| e.device));

        let bd_ids: Vec<usize> = bds
            .iter()
            .filter(|b| b.left_ch == ch || b.right_ch == ch)
            .map(|b| b.bd)
            .collect();
        let mut receiver_rates: Vec<f64> =
            entries.iter().map(|e| e.downlink_rate).collect();
        for b in &bds {
            if b.left_ch == ch || b.right_ch == ch {
                receiver_rates.push(rate(
                    p_ch,
                    ctx.gains.d2d_broadcast(ch, b.bd),
                    ctx.channel,
                ));
            }
        }
        let common_downlink_rate = receiver_rates
            .iter()
            .copied()
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.min(r))));
        if let Some(r) = common_downlink_rate {
            if r <= 0.0 {
                return None;
            }
        }
        per_ch.insert(
            ch,
            ScheduleAssignment {
                ch,
                entries,
                bd_ids,
                common_downlink_rate,
            },
        );
    }

    let total_weight_j = per_ch
        .values()
        .map(|a| cluster_vertex_weight(a, ctx.devices, f_star, ctx.train))
        .sum();
    Some(ChainPlan {
        chain: candidate.clone(),
        per_ch,
        bds,
        total_weight_j,
    })
}

// ---------------------------------------------------------------------------
// Cluster selection
// ---------------------------------------------------------------------------

/// Greedy chain selection. The first pick is the global minimum weight;
/// afterwards the cheapest candidate whose coverage touches the selection
/// wins, and when the frontier dries up the search restarts from the global
/// minimum among untouched candidates. Candidates are replanned against the
/// growing reservation set, so weights reflect the devices actually left.
pub fn select_clusters_greedy<F>(
    candidates: &[ClusterCandidate],
    max_clusters: usize,
    mut plan_fn: F,
) -> NetworkPlan
where
    F: FnMut(&ClusterCandidate, &BTreeSet<usize>) -> Option<ChainPlan>,
{
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut used = vec![false; candidates.len()];
    let mut picked: Vec<ChainPlan> = Vec::new();
    let mut budget = max_clusters;
    loop {
        let mut plans: Vec<(usize, ChainPlan)> = Vec::new();
        for (i, cand) in candidates.iter().enumerate() {
            if used[i]
                || cand.num_clusters() > budget
                || !cand.members().is_disjoint(&taken)
            {
                continue;
            }
            if let Some(plan) = plan_fn(cand, &taken) {
                plans.push((i, plan));
            }
        }
        if plans.is_empty() {
            break;
        }
        let connected = |plan: &ChainPlan| {
            picked
                .iter()
                .any(|s| !s.chain.total_coverage.is_disjoint(&plan.chain.total_coverage))
        };
        let restrict = !picked.is_empty() && plans.iter().any(|(_, p)| connected(p));
        let mut best: Option<usize> = None; // index into plans
        for (k, (_, plan)) in plans.iter().enumerate() {
            if restrict && !connected(plan) {
                continue;
            }
            // Candidate order breaks weight ties, keeping runs deterministic.
            if best.is_none_or(|b| plan.total_weight_j < plans[b].1.total_weight_j) {
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        let (i, plan) = plans.swap_remove(k);
        used[i] = true;
        budget -= plan.chain.num_clusters();
        taken.extend(plan.participants());
        picked.push(plan);
    }
    NetworkPlan { chains: picked }
}

/// Enumerate chain candidates over the coverage map and select a full plan
/// at the given clock vector.
pub fn build_network_plan(ctx: &PlanContext, f_star: &BTreeMap<usize, f64>) -> NetworkPlan {
    let candidates = enumerate_cluster_candidates(ctx.coverage, ctx.knobs.max_chain_len);
    select_clusters_greedy(&candidates, ctx.knobs.max_clusters, |cand, taken| {
        plan_chain(ctx, cand, f_star, taken)
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("device {device} holds more than one role or block")]
    DeviceReuse { device: usize },
    #[error("block {rrb} assigned twice within cluster {ch}")]
    RrbReuse { ch: usize, rrb: usize },
    #[error("adjacent pair ({left}, {right}) lacks a bridge")]
    MissingBridge { left: usize, right: usize },
    #[error("bridge {bd} is outside the zone of head {ch}")]
    BridgeOutsideZone { bd: usize, ch: usize },
    #[error("device {device} clocked at {freq} cycles/s outside [{min}, {max}]")]
    FrequencyOutOfBounds {
        device: usize,
        freq: f64,
        min: f64,
        max: f64,
    },
    #[error("device {device} needs {needed} s of a {budget} s round budget")]
    RoundBudgetExceeded {
        device: usize,
        needed: f64,
        budget: f64,
    },
    #[error("plan time {tau} s exceeds the training budget {budget} s")]
    TotalTimeExceeded { tau: f64, budget: f64 },
}

const TIME_TOLERANCE_S: f64 = 1e-9;

/// Check the four scheduling constraints: unique device/block assignment,
/// one in-zone bridge per adjacent pair, clock bounds, and the time budget
/// both per device and for the whole plan.
pub fn validate_plan(
    plan: &NetworkPlan,
    devices: &[Device],
    coverage: &CoverageMap,
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let budget = train.per_round_budget_s();

    let mut roles: BTreeSet<usize> = BTreeSet::new();
    let mut claim = |device: usize, violations: &mut Vec<Violation>| {
        if !roles.insert(device) {
            violations.push(Violation::DeviceReuse { device });
        }
    };
    for chain in &plan.chains {
        for &ch in &chain.chain.ch_chain {
            claim(ch, &mut violations);
        }
        for b in &chain.bds {
            claim(b.bd, &mut violations);
        }
        for assign in chain.per_ch.values() {
            let mut rrbs = BTreeSet::new();
            for e in &assign.entries {
                claim(e.device, &mut violations);
                if !rrbs.insert(e.rrb) {
                    violations.push(Violation::RrbReuse {
                        ch: assign.ch,
                        rrb: e.rrb,
                    });
                }
            }
        }

        let pairs: Vec<(usize, usize)> = chain
            .chain
            .ch_chain
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect();
        for (k, (left, right)) in pairs.iter().enumerate() {
            match chain.bds.get(k) {
                None => violations.push(Violation::MissingBridge {
                    left: *left,
                    right: *right,
                }),
                Some(b) => {
                    for ch in [*left, *right] {
                        if !coverage.covers(ch, b.bd) {
                            violations.push(Violation::BridgeOutsideZone { bd: b.bd, ch });
                        }
                    }
                }
            }
        }
    }

    // Clock bounds and per-device budget for every participant.
    let mut check_device = |device: usize, up_rate: f64, down_rate: f64| {
        let dev = &devices[device];
        let f = freqs.get(&device).copied().unwrap_or(dev.cpu_max_hz);
        if f < dev.cpu_min_hz || f > dev.cpu_max_hz {
            violations.push(Violation::FrequencyOutOfBounds {
                device,
                freq: f,
                min: dev.cpu_min_hz,
                max: dev.cpu_max_hz,
            });
        }
        let comp = resource::comp_time(train.local_iters, dev.proc_density, dev.num_samples, f)
            .unwrap_or(f64::INFINITY);
        let needed = comp + train.model_size_bits / up_rate + train.model_size_bits / down_rate;
        if needed > budget + TIME_TOLERANCE_S {
            violations.push(Violation::RoundBudgetExceeded {
                device,
                needed,
                budget,
            });
        }
    };
    for chain in &plan.chains {
        for assign in chain.per_ch.values() {
            for e in &assign.entries {
                check_device(e.device, e.uplink_rate, e.downlink_rate);
            }
        }
        for b in &chain.bds {
            check_device(b.bd, b.uplink_rate, b.downlink_rate);
        }
    }

    let tau = resource::round_timing(plan, devices, freqs, train).total_s;
    if tau > train.fl_time_budget_s + TIME_TOLERANCE_S {
        violations.push(Violation::TotalTimeExceeded {
            tau,
            budget: train.fl_time_budget_s,
        });
    }
    violations
}

// ---------------------------------------------------------------------------
