//! Round-time and energy accounting, the closed-form CPU clock rule, and
//! the alternating loop that lets scheduling and clock allocation settle on
//! a fixed point.
//!
//! Computation energy follows the switched-capacitance law `T_l·Q·D·α·f²`,
//! so the cheapest feasible clock is always the slowest one that still fits
//! the round budget; the closed form clamps that lower bound into the
//! device's supported range.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scheduler::{self, NetworkPlan, PlanContext};
use crate::Device;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ResourceError {
    #[error("clock must be positive, got {0} cycles/s")]
    NonPositiveFrequency(f64),
    #[error("rate must be positive, got {0} bits/s")]
    NonPositiveRate(f64),
    #[error("round budget leaves no computation time (slack {0} s)")]
    NoComputeSlack(f64),
    #[error("required clock is not finite")]
    InfeasibleFrequency,
}

// ---------------------------------------------------------------------------
// Training-loop constants
// ---------------------------------------------------------------------------

/// Learning and budget constants shared by the optimizer and the protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Local gradient steps per round (T_l).
    pub local_iters: usize,
    pub learning_rate: f64,
    /// Weight of the cluster-gradient correction term; 0 disables it.
    pub grad_correction: f64,
    /// Logged stopping thresholds; they never abort a run.
    pub local_accuracy: f64,
    pub global_accuracy: f64,
    pub model_size_bits: f64,
    /// Planned number of global rounds (T).
    pub max_global_iters: usize,
    /// Wall-clock budget for the whole training (T_max), seconds.
    pub fl_time_budget_s: f64,
    /// Effective switched capacitance of the device CPUs.
    pub switched_capacitance: f64,
    /// Alternation budget for the schedule/clock loop (K_max).
    pub max_stage1_iters: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_iters: 5,
            learning_rate: 0.1,
            grad_correction: 0.0,
            local_accuracy: 0.0,
            global_accuracy: 0.0,
            model_size_bits: 72_800.0,
            max_global_iters: 150,
            fl_time_budget_s: 1.0,
            switched_capacitance: 1e-28,
            max_stage1_iters: 8,
        }
    }
}

impl TrainerConfig {
    /// Share of the training budget one round may spend. A zero-round
    /// configuration runs planning only, so the budget is unconstrained.
    pub fn per_round_budget_s(&self) -> f64 {
        if self.max_global_iters == 0 {
            f64::INFINITY
        } else {
            self.fl_time_budget_s / self.max_global_iters as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

/// Seconds to run `local_iters` passes over `num_samples` samples at clock
/// `freq_hz`.
pub fn comp_time(
    local_iters: usize,
    proc_density: f64,
    num_samples: usize,
    freq_hz: f64,
) -> Result<f64, ResourceError> {
    if freq_hz <= 0.0 {
        return Err(ResourceError::NonPositiveFrequency(freq_hz));
    }
    Ok(local_iters as f64 * proc_density * num_samples as f64 / freq_hz)
}

/// Round duration of one cluster from per-device `(compute, upload,
/// download)` seconds: uploads overlap on orthogonal blocks, so the cluster
/// waits for its slowest compute-plus-upload, then for the broadcast to
/// reach its slowest receiver.
pub fn cluster_fl_time(components: &[(f64, f64, f64)]) -> f64 {
    let up = components
        .iter()
        .map(|&(c, u, _)| c + u)
        .fold(0.0, f64::max);
    let down = components.iter().map(|&(_, _, d)| d).fold(0.0, f64::max);
    up + down
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTiming {
    pub comp_s: f64,
    pub upload_s: f64,
    pub download_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_device: BTreeMap<usize, DeviceTiming>,
    pub per_cluster_s: BTreeMap<usize, f64>,
    /// Slowest cluster: the round is done when every cluster is.
    pub total_s: f64,
}

/// Per-round timing of a full plan. Bridges count in both adjacent
/// clusters: each waits for the shared upload and the bridge hears both
/// broadcasts.
pub fn round_timing(
    plan: &NetworkPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
) -> TimingReport {
    let mut report = TimingReport::default();
    let comp_of = |n: usize| -> f64 {
        let dev = &devices[n];
        let f = freqs.get(&n).copied().unwrap_or(dev.cpu_max_hz);
        comp_time(train.local_iters, dev.proc_density, dev.num_samples, f)
            .expect("allocated clocks are positive")
    };
    for chain in &plan.chains {
        for assign in chain.per_ch.values() {
            let mut items: Vec<(f64, f64, f64)> = Vec::new();
            let down_s = assign
                .common_downlink_rate
                .map_or(0.0, |r| train.model_size_bits / r);
            for e in &assign.entries {
                let t = DeviceTiming {
                    comp_s: comp_of(e.device),
                    upload_s: train.model_size_bits / e.uplink_rate,
                    download_s: train.model_size_bits / e.downlink_rate,
                };
                report.per_device.insert(e.device, t);
                items.push((t.comp_s, t.upload_s, down_s));
            }
            for b in chain.bds.iter().filter(|b| assign.bd_ids.contains(&b.bd)) {
                let t = DeviceTiming {
                    comp_s: comp_of(b.bd),
                    upload_s: train.model_size_bits / b.uplink_rate,
                    download_s: train.model_size_bits / b.downlink_rate,
                };
                report.per_device.insert(b.bd, t);
                items.push((t.comp_s, t.upload_s, down_s));
            }
            report
                .per_cluster_s
                .insert(assign.ch, cluster_fl_time(&items));
        }
    }
    report.total_s = report.per_cluster_s.values().copied().fold(0.0, f64::max);
    report
}

// ---------------------------------------------------------------------------
// Clock allocation
// ---------------------------------------------------------------------------

/// Slowest clock that still finishes compute plus both transfers inside the
/// per-round budget. Devices with no data need no compute time at all.
pub fn f_hat(
    train: &TrainerConfig,
    proc_density: f64,
    num_samples: usize,
    uplink_rate: f64,
    downlink_rate: f64,
) -> Result<f64, ResourceError> {
    if uplink_rate <= 0.0 {
        return Err(ResourceError::NonPositiveRate(uplink_rate));
    }
    if downlink_rate <= 0.0 {
        return Err(ResourceError::NonPositiveRate(downlink_rate));
    }
    let budget = train.per_round_budget_s();
    let slack =
        budget - train.model_size_bits / downlink_rate - train.model_size_bits / uplink_rate;
    if slack <= 0.0 {
        return Err(ResourceError::NoComputeSlack(slack));
    }
    let work = train.local_iters as f64 * proc_density * num_samples as f64;
    Ok(work / slack)
}

/// Clamp the required clock into the supported range: the lower bound is
/// energy-minimal, so anything below `f_min` rounds up to `f_min`, anything
/// above `f_max` is capped (and must have been screened as feasible).
pub fn closed_form_freq(f_hat: f64, f_min: f64, f_max: f64) -> Result<f64, ResourceError> {
    assert!(f_min <= f_max, "clock bounds out of order");
    if !f_hat.is_finite() {
        return Err(ResourceError::InfeasibleFrequency);
    }
    Ok(f_hat.clamp(f_min, f_max))
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

/// Joules to run the local training: cycles times energy per cycle at the
/// given clock (quadratic in `freq_hz`).
pub fn comp_energy(
    local_iters: usize,
    proc_density: f64,
    num_samples: usize,
    alpha: f64,
    freq_hz: f64,
) -> f64 {
    local_iters as f64 * proc_density * num_samples as f64 * alpha * freq_hz * freq_hz
}

/// Joules to push `bits` through a link at `rate` with transmit power
/// `power_w`.
pub fn comm_energy(power_w: f64, bits: f64, rate: f64) -> Result<f64, ResourceError> {
    if rate <= 0.0 {
        return Err(ResourceError::NonPositiveRate(rate));
    }
    Ok(power_w * bits / rate)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub per_device_comp_j: BTreeMap<usize, f64>,
    pub per_device_comm_j: BTreeMap<usize, f64>,
    pub per_ch_broadcast_j: BTreeMap<usize, f64>,
    /// One round: every participant's compute and upload, plus head
    /// broadcasts.
    pub round_j: f64,
    /// The whole training: round energy times the planned round count.
    pub total_j: f64,
}

/// Energy accounting for a plan. Bridges are charged once: a single upload
/// on the shared block reaches both heads.
pub fn total_energy(
    plan: &NetworkPlan,
    devices: &[Device],
    freqs: &BTreeMap<usize, f64>,
    train: &TrainerConfig,
) -> EnergyBreakdown {
    let mut out = EnergyBreakdown::default();
    let charge = |n: usize, rate: f64, out: &mut EnergyBreakdown| {
        let dev = &devices[n];
        let f = freqs.get(&n).copied().unwrap_or(dev.cpu_max_hz);
        let comp = comp_energy(
            train.local_iters,
            dev.proc_density,
            dev.num_samples,
            train.switched_capacitance,
            f,
        );
        let comm = comm_energy(dev.tx_power_w, train.model_size_bits, rate)
            .expect("scheduled rates are positive");
        out.per_device_comp_j.insert(n, comp);
        out.per_device_comm_j.insert(n, comm);
    };
    for chain in &plan.chains {
        for assign in chain.per_ch.values() {
            for e in &assign.entries {
                charge(e.device, e.uplink_rate, &mut out);
            }
            if let Some(common) = assign.common_downlink_rate {
                let e = comm_energy(
                    devices[assign.ch].tx_power_w,
                    train.model_size_bits,
                    common,
                )
                .expect("positive common rate");
                out.per_ch_broadcast_j.insert(assign.ch, e);
            }
        }
        for b in &chain.bds {
            charge(b.bd, b.uplink_rate, &mut out);
        }
    }
    out.round_j = out.per_device_comp_j.values().sum::<f64>()
        + out.per_device_comm_j.values().sum::<f64>()
        + out.per_ch_broadcast_j.values().sum::<f64>();
    out.total_j = train.max_global_iters as f64 * out.round_j;
    out
}

/// Control-plane message count for a whole training: per alternation every
/// device reports state and gets a decision (2N) and heads are notified
/// (N_c); per round each head collects its schedule's reports and announces
/// (N_l per cluster plus one).
pub fn signaling_overhead(
    rounds: usize,
    stage1_iters: usize,
    num_devices: usize,
    per_cluster_scheduled: &[usize],
) -> u64 {
    let n_c = per_cluster_scheduled.len() as u64;
    let per_round = stage1_iters as u64 * (2 * num_devices as u64 + n_c)
        + per_cluster_scheduled.iter().map(|&s| s as u64).sum::<u64>()
        + n_c;
    rounds as u64 * per_round
}

// ---------------------------------------------------------------------------
// Stage-I alternation
// ---------------------------------------------------------------------------

/// Energy-minimal clocks for every participant of the plan; everyone else
/// idles at their top clock (they run nothing this round).
pub fn plan_clock_allocation(
    plan: &NetworkPlan,
    devices: &[Device],
    train: &TrainerConfig,
) -> Result<BTreeMap<usize, f64>, ResourceError> {
    let mut freqs: BTreeMap<usize, f64> = devices
        .iter()
        .enumerate()
        .map(|(n, d)| (n, d.cpu_max_hz))
        .collect();
    let set = |n: usize, up: f64, down: f64, freqs: &mut BTreeMap<usize, f64>| {
        let dev = &devices[n];
        let fh = f_hat(train, dev.proc_density, dev.num_samples, up, down)?;
        freqs.insert(n, closed_form_freq(fh, dev.cpu_min_hz, dev.cpu_max_hz)?);
        Ok(())
    };
    for chain in &plan.chains {
        for assign in chain.per_ch.values() {
            for e in &assign.entries {
                set(e.device, e.uplink_rate, e.downlink_rate, &mut freqs)?;
            }
        }
        for b in &chain.bds {
            set(b.bd, b.uplink_rate, b.downlink_rate, &mut freqs)?;
        }
    }
    Ok(freqs)
}

fn freq_key(freqs: &BTreeMap<usize, f64>) -> Vec<(usize, u64)> {
    // Fixed-point comparison at 1 cycle/s granularity.
    freqs.iter().map(|(&n, &f)| (n, f.round() as u64)).collect()
}

/// Alternate scheduling (at the current clock vector) and clock allocation
/// (for the resulting plan) until the clock vector repeats or the iteration
/// budget runs out. The first pass schedules at full speed.
pub fn stage1_iterate(
    ctx: &PlanContext,
) -> Result<(NetworkPlan, BTreeMap<usize, f64>), ResourceError> {
    assert!(ctx.train.max_stage1_iters >= 1, "need at least one pass");
    let mut f_star: BTreeMap<usize, f64> = ctx
        .devices
        .iter()
        .enumerate()
        .map(|(n, d)| (n, d.cpu_max_hz))
        .collect();
    let mut prev_key: Option<Vec<(usize, u64)>> = None;
    let mut result = None;
    for _ in 0..ctx.train.max_stage1_iters {
        let plan = scheduler::build_network_plan(ctx, &f_star);
        let freqs = plan_clock_allocation(&plan, ctx.devices, ctx.train)?;
        let key = freq_key(&freqs);
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
