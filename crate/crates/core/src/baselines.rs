//! Reference schemes the chained-cluster system is compared against: a
//! star network where every device talks straight to the base station, and
//! a hierarchical overlay where heads forward their cluster aggregates to
//! the base station for global averaging.
//!
//! Both reuse the same rate, energy, and clock machinery; they differ only
//! in who aggregates and which links are charged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{LossModel, Sample};
use crate::protocol::{sgd_local_update, ProtocolError};
use crate::radio::{achievable_rate, ChannelParams, GainTable};
use crate::resource::{self, ResourceError, TrainerConfig};
use crate::scheduler::{device_vertex_weight, mwis_greedy, NetworkPlan, ScheduleEntry};
use crate::topology::ConflictGraph;
use crate::Device;

/// Base-station constants shared by both baselines.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselineParams {
    pub bs_power_w: f64,
    pub bs_pos: (f64, f64),
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            bs_power_w: 3.0,
            bs_pos: (0.0, 0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Star scheduling
// ---------------------------------------------------------------------------

/// Device-to-BS schedule: the base station is the single aggregator, so the
/// whole block pool is shared with no reuse.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StarPlan {
    pub entries: Vec<ScheduleEntry>,
    /// Broadcast rate every scheduled device can receive.
    pub common_downlink_rate: Option<f64>,
}

impl StarPlan {
    pub fn scheduled(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.device).collect()
    }
}

fn bs_rate(p_w: f64, gain: f64, channel: &ChannelParams) -> f64 {
    achievable_rate(p_w, gain, channel).expect("power and gain are non-negative")
}

/// One scheduling pass at the given clock vector: every (device, block)
/// pair with a live uplink and a feasible clock is a vertex; the same
/// greedy that packs clusters packs the cellular pool.
pub fn plan_star(
    devices: &[Device],
    gains: &GainTable,
    channel: &ChannelParams,
    train: &TrainerConfig,
    params: &BaselineParams,
    f_star: &BTreeMap<usize, f64>,
) -> StarPlan {
    let z = gains.num_rrbs();
    let mut vertices = Vec::new();
    let mut weights = Vec::new();
    let mut rates = Vec::new();
    for (n, dev) in devices.iter().enumerate() {
        let down = bs_rate(params.bs_power_w, gains.from_bs(n), channel);
        if down <= 0.0 {
            continue;
        }
        for rrb in 0..z {
            let up = bs_rate(dev.tx_power_w, gains.to_bs(n, rrb), channel);
            if up <= 0.0 {
                continue;
            }
            let Ok(fh) = resource::f_hat(train, dev.proc_density, dev.num_samples, up, down)
            else {
                continue;
            };
            if fh > dev.cpu_max_hz {
                continue;
            }
            vertices.push((n, rrb));
            weights.push(device_vertex_weight(
                train,
                dev.proc_density,
                dev.num_samples,
                f_star.get(&n).copied().unwrap_or(dev.cpu_max_hz),
                up,
            ));
            rates.push((up, down));
        }
    }
    let mut graph = ConflictGraph::from_vertices(usize::MAX, vertices);
    graph.weights = weights;
    let chosen = mwis_greedy(&graph);
    let mut entries: Vec<ScheduleEntry> = chosen
        .iter()
        .map(|&v| {
            let (device, rrb) = graph.vertices[v];
            let idx = graph
                .vertices
                .iter()
                .position(|&p| p == (device, rrb))
                .unwrap();
            ScheduleEntry {
                device,
                rrb,
                uplink_rate: rates[idx].0,
                downlink_rate: rates[idx].1,
            }
        })
        .collect();
    entries.sort_by_key(|e| e.device);
    let common = (!entries.is_empty()).then(|| {
        entries
            .iter()
            .map(|e| e.downlink_rate)
            .fold(f64::INFINITY, f64::min)
    });
    StarPlan {
        common_downlink_rate: common,
        entries,
    }
}

/// Clocks for the star schedule by the same closed-form rule.
pub fn star_freqs(
    plan: &StarPlan,
    devices: &[Device],
    train: &TrainerConfig,
) -> Result<BTreeMap<usize, f64>, ResourceError> {
    let mut freqs: BTreeMap<usize, f64> = devices
        .iter()
        .enumerate()
        .map(|(n, d)| (n, d.cpu_max_hz))
        .collect();
    for e in &plan.entries {
        let dev = &devices[e.device];
        let fh = resource::f_hat(
            train,
            dev.proc_density,
            dev.num_samples,
            e.uplink_rate,
            e.downlink_rate,
        )?;
        freqs.insert(
            e.device,
            resource::closed_form_freq(fh, dev.cpu_min_hz, dev.cpu_max_hz)?,
        );
    }
    Ok(freqs)
}

/// Schedule/clock alternation for the star scheme, mirroring the chained
/// scheme's loop: plan at the current clocks, re-clock the plan, stop at a
/// fixed point or the iteration budget.
pub fn star_stage1(
    devices: &[Device],
    gains: &GainTable,
    channel: &ChannelParams,
    train: &TrainerConfig,
    params: &BaselineParams,
) -> Result<(StarPlan, BTreeMap<usize, f64>), ResourceError> {
    assert!(train.max_stage1_iters >= 1, "need at least one pass");
    let mut f_star: BTreeMap<usize, f64> = devices
        .iter()
        .enumerate()
        .map(|(n, d)| (n, d.cpu_max_hz))
        .collect();
    let mut prev_key: Option<Vec<(usize, u64)>> = None;
    let mut result = None;
    for _ in 0..train.max_stage1_iters {
        let plan = plan_star(devices, gains, channel, train, params, &f_star);
        let freqs = star_freqs(&plan, devices, train)?;
        let key: Vec<(usize, u64)> = freqs.iter().map(|(&n, &f)| (n, f.round() as u64)).collect();
        let done = prev_key.as_ref() == Some(&key);
        prev_key = Some(key);
        f_star = freqs.clone();
        result = Some((plan, freqs));
        if done {
            break;
        }
    }
    Ok(result.expect("at least one pass ran"))
}

// ---------------------------------------------------------------------------
// Round cost accounting
// ---------------------------------------------------------------------------

/// Star round energy: every scheduled device computes and uploads over its
/// cellular link, then the base station broadcasts once at the common rate.
pub fn star_round_energy(
    plan: &StarPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
    params: &BaselineParams,
) -> f64 {
    let mut total = 0.0;
    for e in &plan.entries {
        let dev = &devices[e.device];
        let f = freqs.get(&e.device).copied().unwrap_or(dev.cpu_max_hz);
        total += resource::comp_energy(
            train.local_iters,
            dev.proc_density,
            dev.num_samples,
            train.switched_capacitance,
            f,
        );
        total += resource::comm_energy(dev.tx_power_w, train.model_size_bits, e.uplink_rate)
            .expect("scheduled rates are positive");
    }
    if let Some(common) = plan.common_downlink_rate {
        total += resource::comm_energy(params.bs_power_w, train.model_size_bits, common)
            .expect("positive common rate");
    }
    total
}

/// Star round duration: slowest compute-plus-upload, then the broadcast.
pub fn star_round_time(
    plan: &StarPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
) -> f64 {
    let mut up_phase = 0.0_f64;
    for e in &plan.entries {
        let dev = &devices[e.device];
        let f = freqs.get(&e.device).copied().unwrap_or(dev.cpu_max_hz);
        let comp = resource::comp_time(train.local_iters, dev.proc_density, dev.num_samples, f)
            .expect("allocated clocks are positive");
        up_phase = up_phase.max(comp + train.model_size_bits / e.uplink_rate);
    }
    let down = plan
        .common_downlink_rate
        .map_or(0.0, |r| train.model_size_bits / r);
    up_phase + down
}

/// Backhaul rates of a chained plan's heads: each head forwards on its
/// strongest cellular block (the BS grants blocks by rate, the same
/// diversity the star schedule gets); downlink from the base-station
/// broadcast at the rate every head can receive.
fn head_backhaul_rates(
    plan: &NetworkPlan,
    devices: &[Device],
    gains: &GainTable,
    channel: &ChannelParams,
    params: &BaselineParams,
) -> (Vec<(usize, f64)>, Option<f64>) {
    let mut ups = Vec::new();
    let mut common = f64::INFINITY;
    let mut any = false;
    for chain in &plan.chains {
        for &ch in &chain.chain.ch_chain {
            let up = (0..gains.num_rrbs())
                .map(|rrb| bs_rate(devices[ch].tx_power_w, gains.to_bs(ch, rrb), channel))
                .fold(0.0, f64::max);
            let down = bs_rate(params.bs_power_w, gains.from_bs(ch), channel);
            ups.push((ch, up));
            common = common.min(down);
            any = true;
        }
    }
    (ups, any.then_some(common))
}

/// Hierarchical round energy: the chained plan's full cost plus the
/// head-to-BS forwards and the BS return broadcast.
pub fn hier_round_energy(
    plan: &NetworkPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
    gains: &GainTable,
    channel: &ChannelParams,
    params: &BaselineParams,
) -> f64 {
    let base = resource::total_energy(plan, devices, freqs, train).round_j;
    let (ups, common) = head_backhaul_rates(plan, devices, gains, channel, params);
    let mut extra = 0.0;
    for (ch, up) in ups {
        extra += resource::comm_energy(devices[ch].tx_power_w, train.model_size_bits, up)
            .expect("cellular uplink rate is positive");
    }
    if let Some(common) = common {
        extra += resource::comm_energy(params.bs_power_w, train.model_size_bits, common)
            .expect("positive broadcast rate");
    }
    base + extra
}

/// Hierarchical round duration: local upload phase, head forwards, BS
/// broadcast back, head broadcasts down. Four sequential hops.
pub fn hier_round_time(
    plan: &NetworkPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
    gains: &GainTable,
    channel: &ChannelParams,
    params: &BaselineParams,
) -> f64 {
    let report = resource::round_timing(plan, devices, freqs, train);
    let mut up_phase = 0.0_f64;
    let mut down_phase = 0.0_f64;
    for chain in &plan.chains {
        for assign in chain.per_ch.values() {
            let down = assign
                .common_downlink_rate
                .map_or(0.0, |r| train.model_size_bits / r);
            down_phase = down_phase.max(down);
            let cluster_total = report.per_cluster_s.get(&assign.ch).copied().unwrap_or(0.0);
            up_phase = up_phase.max(cluster_total - down);
        }
    }
    let (ups, common) = head_backhaul_rates(plan, devices, gains, channel, params);
    // Heads share a single backhaul grant and forward one after another.
    let forward: f64 = ups
        .iter()
        .map(|&(_, up)| train.model_size_bits / up)
        .sum();
    let back = common.map_or(0.0, |r| train.model_size_bits / r);
    up_phase + forward + back + down_phase
}

// ---------------------------------------------------------------------------
// Global averaging
// ---------------------------------------------------------------------------

/// One FedAvg round: every participant trains from the global model, the
/// aggregator takes the sample-weighted mean. Both baselines share this;
/// they differ only in how the models travel.
pub fn fedavg_round(
    model: &LossModel,
    global: &[f64],
    participants: &[usize],
    data: &BTreeMap<usize, Vec<Sample>>,
    train: &TrainerConfig,
) -> Result<Vec<f64>, ProtocolError> {
    let mut num = vec![0.0; global.len()];
    let mut den = 0.0;
    for &n in participants {
        let Some(local) = data.get(&n).filter(|d| !d.is_empty()) else {
            continue;
        };
        let trained = sgd_local_update(model, global, local, train, None)?;
        let w = local.len() as f64;
        for (a, b) in num.iter_mut().zip(&trained) {
            *a += w * b;
        }
        den += w;
    }
    if den <= 0.0 {
        return Err(ProtocolError::ZeroTotalWeight);
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{build_network_plan, PlanContext, SchedulerConfig};
    use crate::topology::CoverageMap;
    use crate::DeviceId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn device(id: usize, pos: (f64, f64)) -> Device {
        Device {
            id: DeviceId(id),
            pos,
            tx_power_w: 1.0,
            proc_density: 500.0,
            num_samples: 200,
            cpu_min_hz: 3.0e5,
            cpu_max_hz: 1.0e9,
        }
    }

    fn loose_train() -> TrainerConfig {
        TrainerConfig {
            fl_time_budget_s: 1.0e6,
            max_global_iters: 1,
            ..TrainerConfig::default()
        }
    }

    fn ring_positions(n: usize, radius: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                (radius * a.cos(), radius * a.sin())
            })
            .collect()
    }

    #[test]
    fn star_schedules_everyone_when_blocks_are_plentiful() {
        let positions = ring_positions(4, 300.0);
        let devices: Vec<Device> = positions.iter().enumerate().map(|(i, &p)| device(i, p)).collect();
        let channel = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let gains = GainTable::sample(&mut rng, &positions, (0.0, 0.0), 6, &channel).unwrap();
        let train = loose_train();
        let (plan, freqs) =
            star_stage1(&devices, &gains, &channel, &train, &BaselineParams::default()).unwrap();
        assert_eq!(plan.entries.len(), 4);
        let mut seen_rrbs = std::collections::BTreeSet::new();
        for e in &plan.entries {
            assert!(seen_rrbs.insert(e.rrb), "block {} reused", e.rrb);
            assert_eq!(freqs[&e.device], devices[e.device].cpu_min_hz);
        }
        assert!(plan.common_downlink_rate.unwrap() > 0.0);
    }

    #[test]
    fn star_is_capped_by_the_block_pool() {
        let positions = ring_positions(8, 350.0);
        let devices: Vec<Device> = positions.iter().enumerate().map(|(i, &p)| device(i, p)).collect();
        let channel = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let gains = GainTable::sample(&mut rng, &positions, (0.0, 0.0), 3, &channel).unwrap();
        let train = loose_train();
        let (plan, _) =
            star_stage1(&devices, &gains, &channel, &train, &BaselineParams::default()).unwrap();
        assert_eq!(plan.entries.len(), 3);
        let scheduled = plan.scheduled();
        assert_eq!(
            scheduled.len(),
            scheduled.iter().collect::<std::collections::BTreeSet<_>>().len()
        );
    }

    #[test]
    fn one_participant_fedavg_returns_its_local_model() {
        let model = LossModel::Quadratic {
            target: vec![0.0, 0.0],
        };
        let train = TrainerConfig {
            learning_rate: 0.25,
            local_iters: 1,
            ..loose_train()
        };
        let mut data = BTreeMap::new();
        data.insert(7usize, vec![(vec![0.0], 0usize); 3]);
        let out = fedavg_round(&model, &[4.0, -8.0], &[7], &data, &train).unwrap();
        // One quadratic step toward 0 from the global model.
        assert_eq!(out, vec![3.0, -6.0]);
    }

    /// A chained plan plus everything needed to cost it.
    fn chained_fixture() -> (
        Vec<Device>,
        CoverageMap,
        GainTable,
        ChannelParams,
        TrainerConfig,
        NetworkPlan,
        BTreeMap<usize, f64>,
    ) {
        let positions = vec![
            (0.0, 0.0),
            (80.0, 0.0),
            (160.0, 0.0),
            (-40.0, 30.0),
            (190.0, 40.0),
        ];
        let devices: Vec<Device> = positions.iter().enumerate().map(|(i, &p)| device(i, p)).collect();
        let coverage = CoverageMap::new(positions.clone(), 100.0);
        let channel = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let gains = GainTable::sample(&mut rng, &positions, (250.0, 400.0), 6, &channel).unwrap();
        let train = loose_train();
        let knobs = SchedulerConfig {
            num_rrbs: 6,
            max_chain_len: 3,
            max_clusters: 3,
        };
        let ctx = PlanContext {
            devices: &devices,
            coverage: &coverage,
            gains: &gains,
            channel: &channel,
            train: &train,
            knobs: &knobs,
        };
        let freqs: BTreeMap<usize, f64> = (0..devices.len()).map(|n| (n, 1.0e9)).collect();
        let plan = build_network_plan(&ctx, &freqs);
        assert!(!plan.chains.is_empty());
        (devices, coverage, gains, channel, train, plan, freqs)
    }

    #[test]
    fn hierarchy_always_pays_the_backhaul_premium() {
        let (devices, _, gains, channel, train, plan, freqs) = chained_fixture();
        let params = BaselineParams {
            bs_pos: (250.0, 400.0),
            ..BaselineParams::default()
        };
        let base = resource::total_energy(&plan, &devices, &freqs, &train).round_j;
        let hier = hier_round_energy(&plan, &devices, &freqs, &train, &gains, &channel, &params);
        assert!(hier > base, "hier {hier} <= base {base}");

        let base_t = resource::round_timing(&plan, &devices, &freqs, &train).total_s;
        let hier_t =
            hier_round_time(&plan, &devices, &freqs, &train, &gains, &channel, &params);
        assert!(hier_t > base_t, "hier {hier_t} <= base {base_t}");
    }

    #[test]
    fn star_and_hierarchy_agree_when_the_same_devices_participate() {
        let model = LossModel::Quadratic {
            target: vec![1.0],
        };
        let train = TrainerConfig {
            learning_rate: 0.1,
            local_iters: 2,
            ..loose_train()
        };
        let mut data = BTreeMap::new();
        for n in 0..3usize {
            data.insert(n, vec![(vec![0.0], 0usize); 50 + 10 * n]);
        }
        let participants = [0, 1, 2];
        let mut star = vec![0.0];
        let mut hier = vec![0.0];
        for _ in 0..4 {
            star = fedavg_round(&model, &star, &participants, &data, &train).unwrap();
            hier = fedavg_round(&model, &hier, &participants, &data, &train).unwrap();
            assert_eq!(star, hier);
        }
        assert!((star[0] - 1.0).abs() < 1.0, "training moves toward the target");
    }
}
