//! The experiment loop: per-seed world construction (placement, Stage-I
//! plan, data partition), per-scheme round simulation, and the batch driver
//! that writes CSVs and the summary.
//!
//! Every scheme on a seed plans against the same gain table, drawn once
//! from a dedicated stream. Assignments, rates, and clocks are frozen after
//! Stage-I, so each round costs what the plan allocated and the cumulative
//! columns grow linearly. Fixed-size transfers priced at the instantaneous
//! rate of a fresh fade every round have no finite mean (one deep fade can
//! outweigh the rest of the campaign), which is why accounting stays on the
//! allocated rates.

use crate::config::{DataSource, ModelKind, Scheme, SimConfig};
use crate::data::{self, PartitionRules};
use crate::metrics::{self, MetricsRow, SchemeSummary, SeedOutcome};
use anyhow::{bail, Context, Result};
use eocd_core::baselines::{self, BaselineParams};
use eocd_core::model::{perceptron_width_for_budget, LossModel, Sample};
use eocd_core::protocol::{ChainProtocol, ChainSpec, ModelInit};
use eocd_core::radio::{ChannelParams, GainTable};
use eocd_core::resource::{self, TrainerConfig};
use eocd_core::scheduler::{self, NetworkPlan, PlanContext};
use eocd_core::topology::coverage_sets;
use eocd_core::{Device, DeviceId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::Path;

// ---------------------------------------------------------------------------
// Deterministic RNG streams
// ---------------------------------------------------------------------------

/// Independent generator for one (seed, purpose) pair. Purposes keep the
/// draws of placement, channel, data, partition, and model init from
/// shifting each other when one consumer changes how much it draws.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

/// Drop devices uniformly over the disk and draw their processing density.
pub fn place_devices<R: Rng>(cfg: &SimConfig, rng: &mut R) -> Vec<Device> {
    let d = &cfg.device;
    (0..cfg.network.num_devices)
        .map(|id| {
            let r = cfg.network.area_radius_m * rng.gen::<f64>().sqrt();
            let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            let q = rng.gen_range(d.proc_density_min..=d.proc_density_max);
            Device {
                id: DeviceId(id),
                pos: (r * theta.cos(), r * theta.sin()),
                tx_power_w: d.tx_power_w,
                proc_density: q,
                num_samples: d.samples_per_device,
                cpu_min_hz: d.cpu_min_hz,
                cpu_max_hz: d.cpu_max_hz,
            }
        })
        .collect()
}

/// Everything one seed shares across schemes: topology, the frozen Stage-I
/// plan with its clock vector, the partitioned data, and the shared model
/// init. Keeping these fixed makes scheme comparisons paired.
pub struct SeedWorld {
    pub seed: u64,
    pub devices: Vec<Device>,
    pub positions: Vec<(f64, f64)>,
    pub coverage: eocd_core::topology::CoverageMap,
    pub channel: ChannelParams,
    pub train: TrainerConfig,
    pub baseline: BaselineParams,
    pub plan: NetworkPlan,
    pub freqs: BTreeMap<usize, f64>,
    pub plan_violations: usize,
    pub model: LossModel,
    pub data: BTreeMap<usize, Vec<Sample>>,
    pub eval: Vec<Sample>,
    pub init: Vec<f64>,
}

/// Partition groups: one per cluster in chain order (head, its scheduled
/// devices, and the bridge to its right), then one group for everything
/// outside the plan.
fn partition_groups(plan: &NetworkPlan, num_devices: usize) -> Vec<Vec<usize>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut groups = Vec::new();
    for chain in &plan.chains {
        for (i, &ch) in chain.chain.ch_chain.iter().enumerate() {
            let mut group = Vec::new();
            let mut push = |dev: usize, group: &mut Vec<usize>| {
                if seen.insert(dev) {
                    group.push(dev);
                }
            };
            push(ch, &mut group);
            if let Some(assign) = chain.per_ch.get(&ch) {
                for e in &assign.entries {
                    push(e.device, &mut group);
                }
            }
            if let Some(b) = chain.bds.get(i) {
                push(b.bd, &mut group);
            }
            groups.push(group);
        }
    }
    let rest: Vec<usize> = (0..num_devices).filter(|n| !seen.contains(n)).collect();
    if !rest.is_empty() {
        groups.push(rest);
    }
    groups
}

pub fn build_world(cfg: &SimConfig, seed: u64) -> Result<SeedWorld> {
    let devices = place_devices(cfg, &mut stream(seed, "placement"));
    let positions: Vec<(f64, f64)> = devices.iter().map(|d| d.pos).collect();
    let coverage = coverage_sets(&devices, cfg.network.coverage_radius_m);
    let channel = cfg.channel_params();
    let train = cfg.trainer_config();
    let knobs = cfg.scheduler_config();
    let baseline = BaselineParams {
        bs_power_w: cfg.network.bs_power_w,
        bs_pos: cfg.network.bs_pos,
    };

    // Stage-I plans against the first round's channel realization.
    let gains = GainTable::sample(
        &mut stream(seed, "channel"),
        &positions,
        baseline.bs_pos,
        cfg.network.num_rrbs,
        &channel,
    )
    .context("sampling the planning gain table")?;
    let ctx = PlanContext {
        devices: &devices,
        coverage: &coverage,
        gains: &gains,
        channel: &channel,
        train: &train,
        knobs: &knobs,
    };
    let (plan, freqs) = resource::stage1_iterate(&ctx).context("Stage-I allocation")?;
    let plan_violations =
        scheduler::validate_plan(&plan, &devices, &coverage, &freqs, &train).len();

    let da = &cfg.data;
    let dataset = match da.source {
        DataSource::Synthetic => data::synthesize_dataset(
            da.classes,
            da.dim,
            da.samples_per_class,
            da.separation,
            &mut stream(seed, "data"),
        ),
        DataSource::Idx => {
            let images = da.images_path.as_ref().expect("validated");
            let labels = da.labels_path.as_ref().expect("validated");
            data::ingest_idx_images(Path::new(images), Path::new(labels))
                .context("reading IDX dataset")?
        }
    };
    let dim = dataset
        .first()
        .map(|(x, _)| x.len())
        .context("dataset is empty")?;
    let (pool, eval) = data::split_holdout(dataset, da.holdout_frac, &mut stream(seed, "split"));

    let groups = partition_groups(&plan, cfg.network.num_devices);
    let rules = PartitionRules {
        classes: da.classes,
        labels_per_device: da.labels_per_device,
        max_labels_per_cluster: da.max_labels_per_cluster,
        samples_per_device: cfg.device.samples_per_device,
    };
    let data = data::partition_non_iid(&pool, &groups, &rules, &mut stream(seed, "partition"))
        .context("partitioning data across devices")?;

    let model = match da.model {
        ModelKind::Logistic => LossModel::Logistic {
            dim,
            classes: da.classes,
        },
        ModelKind::Perceptron => LossModel::Perceptron {
            dim,
            classes: da.classes,
            hidden: perceptron_width_for_budget(dim, da.classes, da.perceptron_param_budget),
        },
    };
    let mut init_rng = stream(seed, "init");
    let init: Vec<f64> = (0..model.num_params())
        .map(|_| 0.01 * init_rng.sample::<f64, _>(StandardNormal))
        .collect();

    Ok(SeedWorld {
        seed,
        devices,
        positions,
        coverage,
        channel,
        train,
        baseline,
        plan,
        freqs,
        plan_violations,
        model,
        data,
        eval,
        init,
    })
}

// ---------------------------------------------------------------------------
// Scheme runs
// ---------------------------------------------------------------------------

fn accuracy_stats(model: &LossModel, params_list: &[Vec<f64>], eval: &[Sample]) -> (f64, f64) {
    assert!(!params_list.is_empty(), "no models to evaluate");
    let accs: Vec<f64> = params_list
        .iter()
        .map(|p| model.accuracy(p, eval))
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let worst = accs.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, worst)
}

/// Simulate one scheme on one seed world for `rounds` global iterations.
/// Returns the per-round rows, cumulative columns included. Energy and
/// time advance by the plan's allocated round cost; training state evolves
/// round by round.
pub fn run_scheme(
    cfg: &SimConfig,
    world: &SeedWorld,
    scheme: Scheme,
    rounds: usize,
) -> Result<Vec<MetricsRow>> {
    let gains = GainTable::sample(
        &mut stream(world.seed, "channel"),
        &world.positions,
        world.baseline.bs_pos,
        cfg.network.num_rrbs,
        &world.channel,
    )
    .context("sampling the planning gain table")?;

    let train = &world.train;
    let mut rows = Vec::with_capacity(rounds);
    let mut energy_cum = 0.0;
    let mut time_cum = 0.0;

    match scheme {
        Scheme::Eocd => {
            if world.plan.chains.is_empty() {
                bail!("seed {}: Stage-I produced no clusters", world.seed);
            }
            let mut protocols: Vec<ChainProtocol> = world
                .plan
                .chains
                .iter()
                .map(|cp| {
                    ChainProtocol::new(
                        ChainSpec::from_plan(cp),
                        world.model.clone(),
                        train.clone(),
                        ModelInit::Shared(world.init.clone()),
                        &world.data,
                    )
                })
                .collect::<Result<_, _>>()
                .context("initializing chain protocols")?;
            let scheduled = world.plan.participants().len();
            let round_e =
                resource::total_energy(&world.plan, &world.devices, &world.freqs, train).round_j;
            let round_t =
                resource::round_timing(&world.plan, &world.devices, &world.freqs, train).total_s;
            for t in 1..=rounds {
                energy_cum += round_e;
                time_cum += round_t;

                let mut ch_models = Vec::new();
                for proto in &mut protocols {
                    proto.run_round(&world.data).context("chain round")?;
                    for i in 0..proto.spec().num_clusters() {
                        ch_models.push(proto.broadcast_model(i)?.params);
                    }
                }
                let (acc_mean, acc_worst) = accuracy_stats(&world.model, &ch_models, &world.eval);
                rows.push(MetricsRow {
                    t,
                    scheme: scheme.name().into(),
                    seed: world.seed,
                    acc_mean,
                    acc_worst_ch: acc_worst,
                    energy_cum_j: energy_cum,
                    time_cum_s: time_cum,
                    scheduled,
                    violations: world.plan_violations,
                });
            }
        }
        Scheme::Star => {
            let (plan, freqs) = baselines::star_stage1(
                &world.devices,
                &gains,
                &world.channel,
                train,
                &world.baseline,
            )
            .context("star Stage-I")?;
            if plan.entries.is_empty() {
                bail!("seed {}: star scheduled nothing", world.seed);
            }
            let participants = plan.scheduled();
            let round_e =
                baselines::star_round_energy(&plan, &world.devices, &freqs, train, &world.baseline);
            let round_t = baselines::star_round_time(&plan, &world.devices, &freqs, train);
            let mut global = world.init.clone();
            for t in 1..=rounds {
                energy_cum += round_e;
                time_cum += round_t;

                global =
                    baselines::fedavg_round(&world.model, &global, &participants, &world.data, train)
                        .context("star aggregation")?;
                let acc = world.model.accuracy(&global, &world.eval);
                rows.push(MetricsRow {
                    t,
                    scheme: scheme.name().into(),
                    seed: world.seed,
                    acc_mean: acc,
                    acc_worst_ch: acc,
                    energy_cum_j: energy_cum,
                    time_cum_s: time_cum,
                    scheduled: participants.len(),
                    violations: 0,
                });
            }
        }
        Scheme::Hier => {
            if world.plan.chains.is_empty() {
                bail!("seed {}: Stage-I produced no clusters", world.seed);
            }
            let participants: Vec<usize> = world.plan.participants().into_iter().collect();
            let round_e = baselines::hier_round_energy(
                &world.plan,
                &world.devices,
                &world.freqs,
                train,
                &gains,
                &world.channel,
                &world.baseline,
            );
            let round_t = baselines::hier_round_time(
                &world.plan,
                &world.devices,
                &world.freqs,
                train,
                &gains,
                &world.channel,
                &world.baseline,
            );
            let mut global = world.init.clone();
            for t in 1..=rounds {
                energy_cum += round_e;
                time_cum += round_t;

                global =
                    baselines::fedavg_round(&world.model, &global, &participants, &world.data, train)
                        .context("hier aggregation")?;
                let acc = world.model.accuracy(&global, &world.eval);
                rows.push(MetricsRow {
                    t,
                    scheme: scheme.name().into(),
                    seed: world.seed,
                    acc_mean: acc,
                    acc_worst_ch: acc,
                    energy_cum_j: energy_cum,
                    time_cum_s: time_cum,
                    scheduled: participants.len(),
                    violations: world.plan_violations,
                });
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Batch driver
// ---------------------------------------------------------------------------

/// Stage-I figures reported when a batch runs with zero rounds.
#[derive(Debug, serde::Serialize)]
pub struct StageOneReport {
    pub seed: u64,
    pub scheme: String,
    pub clusters: usize,
    pub scheduled: usize,
    pub violations: usize,
    pub est_round_energy_j: f64,
    pub est_round_time_s: f64,
}

fn stage_one_report(cfg: &SimConfig, world: &SeedWorld, scheme: Scheme) -> Result<StageOneReport> {
    let gains = GainTable::sample(
        &mut stream(world.seed, "channel"),
        &world.positions,
        world.baseline.bs_pos,
        cfg.network.num_rrbs,
        &world.channel,
    )?;
    let train = &world.train;
    let (clusters, scheduled, violations, energy, time) = match scheme {
        Scheme::Eocd => (
            world.plan.num_clusters(),
            world.plan.participants().len(),
            world.plan_violations,
            resource::total_energy(&world.plan, &world.devices, &world.freqs, train).round_j,
            resource::round_timing(&world.plan, &world.devices, &world.freqs, train).total_s,
        ),
        Scheme::Star => {
            let (plan, freqs) =
                baselines::star_stage1(&world.devices, &gains, &world.channel, train, &world.baseline)?;
            (
                0,
                plan.entries.len(),
                0,
                baselines::star_round_energy(&plan, &world.devices, &freqs, train, &world.baseline),
                baselines::star_round_time(&plan, &world.devices, &freqs, train),
            )
        }
        Scheme::Hier => (
            world.plan.num_clusters(),
            world.plan.participants().len(),
            world.plan_violations,
            baselines::hier_round_energy(
                &world.plan,
                &world.devices,
                &world.freqs,
                train,
                &gains,
                &world.channel,
                &world.baseline,
            ),
            baselines::hier_round_time(
                &world.plan,
                &world.devices,
                &world.freqs,
                train,
                &gains,
                &world.channel,
                &world.baseline,
            ),
        ),
    };
    Ok(StageOneReport {
        seed: world.seed,
        scheme: scheme.name().into(),
        clusters,
        scheduled,
        violations,
        est_round_energy_j: energy,
        est_round_time_s: time,
    })
}

/// Run every scheme on every seed, write one CSV per pair plus
/// `summary.json`, and return the summaries. `rounds` of zero emits
/// header-only CSVs and per-seed Stage-I reports instead of round rows.
pub fn run_experiment(
    cfg: &SimConfig,
    out_dir: &Path,
) -> Result<BTreeMap<String, SchemeSummary>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let rounds = cfg.trainer.max_global_iters;
    let mut outcomes: BTreeMap<String, Vec<SeedOutcome>> = BTreeMap::new();

    for seed in 0..cfg.experiment.seeds {
        let world =
            build_world(cfg, seed).with_context(|| format!("building world for seed {seed}"))?;
        let mut stage_reports = Vec::new();
        for &scheme in &cfg.experiment.schemes {
            let rows = run_scheme(cfg, &world, scheme, rounds)
                .with_context(|| format!("running {} on seed {seed}", scheme.name()))?;
            metrics::write_csv(&metrics::csv_path(out_dir, scheme.name(), seed), &rows)
                .context("writing CSV")?;
            let outcome = if let Some(last) = rows.last() {
                SeedOutcome {
                    seed,
                    final_acc: last.acc_mean,
                    final_acc_worst_ch: last.acc_worst_ch,
                    energy_cum_j: last.energy_cum_j,
                    time_cum_s: last.time_cum_s,
                    scheduled: last.scheduled,
                    violations: last.violations,
                }
            } else {
                let report = stage_one_report(cfg, &world, scheme)?;
                let outcome = SeedOutcome {
                    seed,
                    final_acc: 0.0,
                    final_acc_worst_ch: 0.0,
                    energy_cum_j: 0.0,
                    time_cum_s: 0.0,
                    scheduled: report.scheduled,
                    violations: report.violations,
                };
                stage_reports.push(report);
                outcome
            };
            outcomes
                .entry(scheme.name().to_string())
                .or_default()
                .push(outcome);
        }
        if !stage_reports.is_empty() {
            let text = serde_json::to_string_pretty(&stage_reports).expect("report serializes");
            metrics::write_atomic(
                &out_dir.join(format!("stage1_seed{seed}.json")),
                text.as_bytes(),
            )?;
        }
    }

    let summaries: BTreeMap<String, SchemeSummary> = outcomes
        .into_iter()
        .map(|(scheme, list)| (scheme, metrics::summarize(&list)))
        .collect();
    metrics::write_summary(out_dir, &summaries).context("writing summary")?;
    Ok(summaries)
}

// ---------------------------------------------------------------------------
