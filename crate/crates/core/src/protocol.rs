//! The decentralized learning engine: local SGD, bridge-device aggregation
//! with redundancy removal, head extraction and broadcast, and the
//! delay-indexed closed form used as a test oracle.
//!
//! Everything that travels between nodes is a `Parcel`: an un-normalized
//! linear combination `Σ coeff·w` together with its exact composition, a map
//! from `(source, iteration)` to that component's sample weight. Redundancy
//! removal is parcel subtraction, and it is legal only when the subtrahend's
//! composition is contained in the minuend's with matching coefficients; the
//! composition map is what makes "each component enters exactly once"
//! checkable instead of hoped-for.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{LossModel, Sample};
use crate::resource::TrainerConfig;
use crate::scheduler::ChainPlan;
use crate::topology::ClusterCandidate;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("all aggregation weights are zero")]
    ZeroTotalWeight,
    #[error("non-finite gradient during local update")]
    NonFiniteGradient,
    #[error("component {0} cannot be removed: not in the incoming aggregate")]
    MissingComponent(String),
    #[error("component {0} weight mismatch: ledger {1}, incoming {2}")]
    WeightMismatch(String, f64, f64),
    #[error("component {0} would enter an aggregate twice")]
    DoubleCount(String),
    #[error("history for {0} at iteration {1} is missing")]
    InsufficientHistory(String, usize),
}

// ---------------------------------------------------------------------------
// Model vectors and parcels
// ---------------------------------------------------------------------------

/// A parameter vector and the sample count standing behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector {
    pub params: Vec<f64>,
    pub sample_weight: f64,
}

impl ModelVector {
    pub fn new(params: Vec<f64>, sample_weight: f64) -> Self {
        ModelVector {
            params,
            sample_weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }
}

/// Where a model component originated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Cluster(usize),
    Bridge(usize),
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Cluster(i) => write!(f, "cluster {i}"),
            Source::Bridge(q) => write!(f, "bridge {q}"),
        }
    }
}

const COEFF_TOL: f64 = 1e-9;

/// Un-normalized weighted sum of source models with exact bookkeeping of
/// which `(source, iteration)` components it contains and at what weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub components: BTreeMap<(Source, usize), f64>,
    pub value: Vec<f64>,
    pub weight: f64,
}

impl Parcel {
    pub fn empty(dim: usize) -> Self {
        Parcel {
            components: BTreeMap::new(),
            value: vec![0.0; dim],
            weight: 0.0,
        }
    }

    pub fn from_model(source: Source, iteration: usize, model: &ModelVector) -> Self {
        let mut components = BTreeMap::new();
        components.insert((source, iteration), model.sample_weight);
        Parcel {
            value: model.params.iter().map(|p| p * model.sample_weight).collect(),
            weight: model.sample_weight,
            components,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Merge two parcels with disjoint compositions.
    pub fn checked_add(&self, other: &Parcel) -> Result<Parcel, ProtocolError> {
        let mut out = self.clone();
        for (key, coeff) in &other.components {
            if out.components.contains_key(key) {
                return Err(ProtocolError::DoubleCount(format!(
                    "{} iter {}",
                    key.0, key.1
                )));
            }
            out.components.insert(*key, *coeff);
        }
        for (v, o) in out.value.iter_mut().zip(&other.value) {
            *v += o;
        }
        out.weight += other.weight;
        Ok(out)
    }

    /// Remove a known sub-parcel: every component of `known` must be present
    /// here at the same weight.
    pub fn checked_sub(&self, known: &Parcel) -> Result<Parcel, ProtocolError> {
        let mut out = self.clone();
        for ((source, iter), coeff) in &known.components {
            let Some(have) = out.components.remove(&(*source, *iter)) else {
                return Err(ProtocolError::MissingComponent(format!(
                    "{source} iter {iter}"
                )));
            };
            let tol = COEFF_TOL * have.abs().max(1.0);
            if (have - coeff).abs() > tol {
                return Err(ProtocolError::WeightMismatch(
                    format!("{source} iter {iter}"),
                    *coeff,
                    have,
                ));
            }
        }
        for (v, k) in out.value.iter_mut().zip(&known.value) {
            *v -= k;
        }
        out.weight -= known.weight;
        if out.weight < -COEFF_TOL {
            return Err(ProtocolError::ZeroTotalWeight);
        }
        Ok(out)
    }

    /// The weighted average this parcel represents.
    pub fn normalized(&self) -> Result<ModelVector, ProtocolError> {
        if self.weight <= 0.0 {
            return Err(ProtocolError::ZeroTotalWeight);
        }
        Ok(ModelVector {
            params: self.value.iter().map(|v| v / self.weight).collect(),
            sample_weight: self.weight,
        })
    }
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

/// Mean loss of `params` on `data`.
pub fn local_loss(model: &LossModel, params: &[f64], data: &[Sample]) -> Result<f64, ProtocolError> {
    if data.is_empty() && !matches!(model, LossModel::Quadratic { .. }) {
        return Err(ProtocolError::EmptyDataset);
    }
    Ok(model.loss(params, data))
}

/// `local_iters` gradient steps starting from the received model `w0`.
/// With a nonzero correction weight the step uses the drift-corrected
/// gradient `∇L_n(w) − ∇L_n(w0) + η·g` where `g` is the cluster-level
/// gradient supplied by the head.
pub fn sgd_local_update(
    model: &LossModel,
    w0: &[f64],
    data: &[Sample],
    train: &TrainerConfig,
    cluster_grad: Option<&[f64]>,
) -> Result<Vec<f64>, ProtocolError> {
    let mut w = w0.to_vec();
    if train.learning_rate == 0.0 {
        return Ok(w);
    }
    let anchor = if train.grad_correction != 0.0 {
        Some(model.grad(w0, data))
    } else {
        None
    };
    for _ in 0..train.local_iters {
        let mut g = model.grad(&w, data);
        if let Some(anchor) = &anchor {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi -= anchor[i];
                if let Some(cg) = cluster_grad {
                    *gi += train.grad_correction * cg[i];
                }
            }
        }
        if g.iter().any(|gi| !gi.is_finite()) {
            return Err(ProtocolError::NonFiniteGradient);
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= train.learning_rate * gi;
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Aggregation primitives
// ---------------------------------------------------------------------------

/// Sample-weighted average of a set of models.
fn weighted_average(models: &[&ModelVector]) -> Result<ModelVector, ProtocolError> {
    let total: f64 = models.iter().map(|m| m.sample_weight).sum();
    if total <= 0.0 {
        return Err(ProtocolError::ZeroTotalWeight);
    }
    let dim = models[0].dim();
    let mut params = vec![0.0; dim];
    for m in models {
        for (p, mp) in params.iter_mut().zip(&m.params) {
            *p += m.sample_weight * mp;
        }
    }
    for p in &mut params {
        *p /= total;
    }
    Ok(ModelVector {
        params,
        sample_weight: total,
    })
}

/// First-round bridge aggregate: plain weighted average of the two head
/// models and the bridge's own.
pub fn bd_aggregate_first(
    bd_model: &ModelVector,
    ch_models: &[ModelVector],
) -> Result<ModelVector, ProtocolError> {
    let mut all: Vec<&ModelVector> = ch_models.iter().collect();
    all.push(bd_model);
    weighted_average(&all)
}

/// Head-side aggregation of its schedule's uploads.
pub fn ch_aggregate_local(local_models: &[ModelVector]) -> Result<ModelVector, ProtocolError> {
    if local_models.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    weighted_average(&local_models.iter().collect::<Vec<_>>())
}

/// Strip every component the owner already holds from an incoming
/// aggregate, leaving only the novel part.
pub fn ch_extract_adjacent(
    incoming: &Parcel,
    known: &[&Parcel],
) -> Result<Parcel, ProtocolError> {
    let mut out = incoming.clone();
    for k in known {
        out = out.checked_sub(k)?;
    }
    Ok(out)
}

/// Combine the head's fresh cluster aggregate with the extracted adjacent
/// parcels into the next broadcast.
pub fn ch_broadcast_model(
    own_cluster: &Parcel,
    extracted: &[&Parcel],
) -> Result<Parcel, ProtocolError> {
    let mut out = own_cluster.clone();
    for e in extracted {
        out = out.checked_add(e)?;
    }
    if out.weight <= 0.0 {
        return Err(ProtocolError::ZeroTotalWeight);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bridge and head ledgers
// ---------------------------------------------------------------------------

/// Iterations of own contributions kept for redundancy removal; echoes come
/// back one round later, so a short window is plenty.
const OWN_WINDOW: usize = 8;

fn prune_window(window: &mut BTreeMap<usize, Parcel>, round: usize) {
    let cutoff = round.saturating_sub(OWN_WINDOW);
    window.retain(|&iter, _| iter >= cutoff);
}

/// What a bridge remembers between rounds: its own recent models and the
/// novelty lump it last took from each side.
#[derive(Debug, Clone, Default)]
pub struct BdLedger {
    own_window: BTreeMap<usize, Parcel>,
    lump_left: Option<Parcel>,
    lump_right: Option<Parcel>,
}

/// One bridge round: strip everything already known from both broadcasts,
/// remember the two novelty lumps, and add the fresh local model. The
/// result carries each reachable source exactly once at its freshest
/// iteration.
pub fn bd_clean_and_aggregate(
    left: &Parcel,
    right: &Parcel,
    ledger: &mut BdLedger,
    fresh: Parcel,
    round: usize,
) -> Result<Parcel, ProtocolError> {
    let dim = left.value.len();
    let empty = Parcel::empty(dim);
    let prev_right = ledger.lump_right.clone().unwrap_or_else(|| empty.clone());
    let prev_left = ledger.lump_left.clone().unwrap_or_else(|| empty.clone());
    let mut new_left = left.clone();
    let mut new_right = right.clone();
    for own in ledger.own_window.values() {
        if own.components.keys().all(|k| new_left.components.contains_key(k)) {
            new_left = new_left.checked_sub(own)?;
        }
        if own.components.keys().all(|k| new_right.components.contains_key(k)) {
            new_right = new_right.checked_sub(own)?;
        }
    }
    // The stale half of each broadcast is exactly the lump taken from the
    // opposite side one round earlier.
    if !prev_right.is_empty() {
        new_left = new_left.checked_sub(&prev_right)?;
    }
    if !prev_left.is_empty() {
        new_right = new_right.checked_sub(&prev_left)?;
    }
    let out = new_left.checked_add(&new_right)?.checked_add(&fresh)?;
    ledger.lump_left = Some(new_left);
    ledger.lump_right = Some(new_right);
    ledger.own_window.insert(round, fresh);
    prune_window(&mut ledger.own_window, round);
    Ok(out)
}

/// What a head remembers between rounds: its own recent cluster aggregates
/// and the extracts it last merged from each side.
#[derive(Debug, Clone, Default)]
pub struct ChLedger {
    own_window: BTreeMap<usize, Parcel>,
    extract_left: Option<Parcel>,
    extract_right: Option<Parcel>,
}

// ---------------------------------------------------------------------------
// Delay matrix and the closed-form oracle
// ---------------------------------------------------------------------------

/// Hop delays along a chain: `y(i,j)` bridges between clusters i and j,
/// `v(i,q)` clusters strictly between cluster i and bridge q.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayMatrix {
    pub y: Vec<Vec<usize>>,
    pub v: Vec<Vec<usize>>,
}

impl DelayMatrix {
    pub fn y(&self, i: usize, j: usize) -> usize {
        self.y[i][j]
    }

    pub fn v(&self, i: usize, q: usize) -> usize {
        self.v[i][q]
    }
}

pub fn compute_delay_matrix(chain: &ClusterCandidate) -> DelayMatrix {
    let c = chain.num_clusters();
    let b = c.saturating_sub(1);
    let y = (0..c)
        .map(|i| (0..c).map(|j| i.abs_diff(j)).collect())
        .collect();
    // Bridge q sits between clusters q and q+1.
    let v = (0..c)
        .map(|i| {
            (0..b)
                .map(|q| if i <= q { q - i } else { i - q - 1 })
                .collect()
        })
        .collect();
    DelayMatrix { y, v }
}

/// Recorded per-round source models: `cluster[j][s]` is cluster j's local
/// aggregate after round s (s = 0 is the initial model), `bridge[q][s-1]`
/// is bridge q's local model after round s ≥ 1.
#[derive(Debug, Clone, Default)]
pub struct SourceHistories {
    pub cluster: Vec<Vec<ModelVector>>,
    pub bridge: Vec<Vec<ModelVector>>,
}

impl SourceHistories {
    fn cluster_at(&self, j: usize, s: usize) -> Result<&ModelVector, ProtocolError> {
        self.cluster
            .get(j)
            .and_then(|h| h.get(s))
            .ok_or(ProtocolError::InsufficientHistory(format!("cluster {j}"), s))
    }

    fn bridge_at(&self, q: usize, s: usize) -> Result<&ModelVector, ProtocolError> {
        if s == 0 {
            return Err(ProtocolError::InsufficientHistory(format!("bridge {q}"), 0));
        }
        self.bridge
            .get(q)
            .and_then(|h| h.get(s - 1))
            .ok_or(ProtocolError::InsufficientHistory(format!("bridge {q}"), s))
    }
}

/// Closed-form broadcast of head `ch` after round `t`: every cluster enters
/// at its bridge-hop delay, every bridge at its cluster-hop delay. Used
/// only to check the message-passing implementation.
pub fn reference_aggregate(
    t: usize,
    ch: usize,
    histories: &SourceHistories,
    delays: &DelayMatrix,
) -> Result<ModelVector, ProtocolError> {
    let c = histories.cluster.len();
    let mut contributions: Vec<&ModelVector> = Vec::new();
    for j in 0..c {
        let s = t
            .checked_sub(delays.y(ch, j))
            .ok_or(ProtocolError::InsufficientHistory(format!("cluster {j}"), 0))?;
        contributions.push(histories.cluster_at(j, s)?);
    }
    for q in 0..c.saturating_sub(1) {
        let s = t
            .checked_sub(delays.v(ch, q))
            .ok_or(ProtocolError::InsufficientHistory(format!("bridge {q}"), 0))?;
        contributions.push(histories.bridge_at(q, s)?);
    }
    weighted_average(&contributions)
}

// ---------------------------------------------------------------------------
// Chain round engine
// ---------------------------------------------------------------------------

/// Who participates in one chain: heads in order, each head's scheduled
/// local devices, and the bridge between each adjacent pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub heads: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub bridges: Vec<usize>,
}

impl ChainSpec {
    pub fn from_plan(plan: &ChainPlan) -> Self {
        let heads = plan.chain.ch_chain.clone();
        let members = heads
            .iter()
            .map(|ch| {
                plan.per_ch
                    .get(ch)
                    .map(|a| a.entries.iter().map(|e| e.device).collect())
                    .unwrap_or_default()
            })
            .collect();
        ChainSpec {
            heads,
            members,
            bridges: plan.chain.bd_between.clone(),
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.heads.len()
    }
}

/// How cluster models start out.
#[derive(Debug, Clone)]
pub enum ModelInit {
    Zero,
    /// One shared vector for every cluster.
    Shared(Vec<f64>),
    /// Distinct per-cluster vectors, by chain position.
    PerCluster(Vec<Vec<f64>>),
}

/// Broadcast models produced by one round, by chain position.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub broadcasts: Vec<ModelVector>,
}

/// Live state of one chain across rounds: ledgers, current broadcasts, and
/// the recorded source histories the oracle replays.
pub struct ChainProtocol {
    spec: ChainSpec,
    model: LossModel,
    train: TrainerConfig,
    round: usize,
    broadcasts: Vec<Parcel>,
    ch_ledgers: Vec<ChLedger>,
    bd_ledgers: Vec<BdLedger>,
    pub histories: SourceHistories,
}

impl ChainProtocol {
    /// `data` maps device id to its local dataset; sample weights are the
    /// dataset sizes. Initial cluster weight counts the head and its
    /// scheduled members.
    pub fn new(
        spec: ChainSpec,
        model: LossModel,
        train: TrainerConfig,
        init: ModelInit,
        data: &BTreeMap<usize, Vec<Sample>>,
    ) -> Result<Self, ProtocolError> {
        let dim = model.num_params();
        let c = spec.num_clusters();
        let weight_of = |n: usize| data.get(&n).map_or(0.0, |d| d.len() as f64);
        let mut broadcasts = Vec::with_capacity(c);
        let mut cluster_hist = Vec::with_capacity(c);
        for (i, head) in spec.heads.iter().enumerate() {
            let params = match &init {
                ModelInit::Zero => vec![0.0; dim],
                ModelInit::Shared(p) => p.clone(),
                ModelInit::PerCluster(ps) => ps[i].clone(),
            };
            assert_eq!(params.len(), dim, "initial model dimension mismatch");
            let weight = weight_of(*head)
                + spec.members[i].iter().map(|&n| weight_of(n)).sum::<f64>();
            let initial = ModelVector::new(params, weight);
            broadcasts.push(Parcel::from_model(Source::Cluster(i), 0, &initial));
            cluster_hist.push(vec![initial]);
        }
        Ok(ChainProtocol {
            ch_ledgers: vec![ChLedger::default(); c],
            bd_ledgers: vec![BdLedger::default(); spec.bridges.len()],
            histories: SourceHistories {
                cluster: cluster_hist,
                bridge: vec![Vec::new(); spec.bridges.len()],
            },
            spec,
            model,
            train,
            round: 0,
            broadcasts,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    /// Head i's current broadcast as a normalized model.
    pub fn broadcast_model(&self, i: usize) -> Result<ModelVector, ProtocolError> {
        self.broadcasts[i].normalized()
    }

    /// One global round over the whole chain: downlink, bridge
    /// clean-train-aggregate, device training, uplink, head
    /// extract-aggregate-broadcast.
    pub fn run_round(
        &mut self,
        data: &BTreeMap<usize, Vec<Sample>>,
    ) -> Result<RoundOutcome, ProtocolError> {
        let t = self.round + 1;
        let c = self.spec.num_clusters();
        let dim = self.model.num_params();
        let no_data: Vec<Sample> = Vec::new();

        // Bridges hear both adjacent broadcasts, remove what they already
        // know, train from the mix, and hand the union back.
        let mut bd_uploads: Vec<Parcel> = Vec::with_capacity(self.spec.bridges.len());
        for (q, &bd) in self.spec.bridges.iter().enumerate() {
            let left = self.broadcasts[q].clone();
            let right = self.broadcasts[q + 1].clone();
            let mix_weight = left.weight + right.weight;
            if mix_weight <= 0.0 {
                return Err(ProtocolError::ZeroTotalWeight);
            }
            let init: Vec<f64> = left
                .value
                .iter()
                .zip(&right.value)
                .map(|(l, r)| (l + r) / mix_weight)
                .collect();
            let bd_data = data.get(&bd).unwrap_or(&no_data);
            let trained = if bd_data.is_empty() {
                init
            } else {
                sgd_local_update(&self.model, &init, bd_data, &self.train, None)?
            };
            let local = ModelVector::new(trained, bd_data.len() as f64);
            self.histories.bridge[q].push(local.clone());
            let fresh = Parcel::from_model(Source::Bridge(q), t, &local);
            let upload =
                bd_clean_and_aggregate(&left, &right, &mut self.bd_ledgers[q], fresh, t)?;
            bd_uploads.push(upload);
        }

        // Devices train from their head's broadcast and upload; heads fold
        // the uploads, extract the novelty from each bridge aggregate, and
        // assemble the next broadcast.
        let mut next = Vec::with_capacity(c);
        for i in 0..c {
            let received = self.broadcasts[i].normalized()?;
            let cluster_grad = if self.train.grad_correction != 0.0 {
                let head_data = data.get(&self.spec.heads[i]).unwrap_or(&no_data);
                if head_data.is_empty() {
                    None
                } else {
                    Some(self.model.grad(&received.params, head_data))
                }
            } else {
                None
            };
            let mut uploads: Vec<ModelVector> = Vec::new();
            for &n in std::iter::once(&self.spec.heads[i]).chain(&self.spec.members[i]) {
                let local = data.get(&n).unwrap_or(&no_data);
                if local.is_empty() {
                    continue;
                }
                let trained = sgd_local_update(
                    &self.model,
                    &received.params,
                    local,
                    &self.train,
                    cluster_grad.as_deref(),
                )?;
                uploads.push(ModelVector::new(trained, local.len() as f64));
            }
            let own_model = if uploads.is_empty() {
                // A cluster with no data this round carries its broadcast
                // forward at zero weight.
                ModelVector::new(received.params.clone(), 0.0)
            } else {
                ch_aggregate_local(&uploads)?
            };
            self.histories.cluster[i].push(own_model.clone());
            let own = Parcel::from_model(Source::Cluster(i), t, &own_model);

            let ledger = &mut self.ch_ledgers[i];
            let prev_own = ledger
                .own_window
                .get(&(t - 1))
                .cloned()
                .unwrap_or_else(|| {
                    Parcel::from_model(
                        Source::Cluster(i),
                        t - 1,
                        &self.histories.cluster[i][t - 1],
                    )
                });
            let empty = Parcel::empty(dim);
            let extract_left = if i > 0 {
                let known_right = ledger.extract_right.clone().unwrap_or_else(|| empty.clone());
                ch_extract_adjacent(&bd_uploads[i - 1], &[&prev_own, &known_right])?
            } else {
                empty.clone()
            };
            let extract_right = if i < c - 1 {
                let known_left = ledger.extract_left.clone().unwrap_or_else(|| empty.clone());
                ch_extract_adjacent(&bd_uploads[i], &[&prev_own, &known_left])?
            } else {
                empty.clone()
            };
            let broadcast = ch_broadcast_model(&own, &[&extract_left, &extract_right])?;
            ledger.own_window.insert(t, own);
            prune_window(&mut ledger.own_window, t);
            ledger.extract_left = Some(extract_left);
            ledger.extract_right = Some(extract_right);
            next.push(broadcast);
        }

        self.broadcasts = next;
        self.round = t;
        let broadcasts = (0..c)
            .map(|i| self.broadcast_model(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RoundOutcome {
            round: t,
            broadcasts,
        })
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mv(params: &[f64], weight: f64) -> ModelVector {
        ModelVector::new(params.to_vec(), weight)
    }

    // -- aggregation primitives --

    #[test]
    fn first_bridge_aggregate_is_the_weighted_mean() {
        let out = bd_aggregate_first(
            &mv(&[2.0], 50.0),
            &[mv(&[1.0], 100.0), mv(&[3.0], 100.0)],
        )
        .unwrap();
        assert!((out.params[0] - 2.0).abs() < 1e-15);
        assert_eq!(out.sample_weight, 250.0);

        let same = bd_aggregate_first(&mv(&[5.0], 10.0), &[mv(&[5.0], 70.0), mv(&[5.0], 20.0)])
            .unwrap();
        assert!((same.params[0] - 5.0).abs() < 1e-15);

        let no_bd = bd_aggregate_first(&mv(&[9.0], 0.0), &[mv(&[1.0], 100.0), mv(&[3.0], 100.0)])
            .unwrap();
        assert!((no_bd.params[0] - 2.0).abs() < 1e-15);

        assert!(bd_aggregate_first(&mv(&[1.0], 0.0), &[mv(&[2.0], 0.0)]).is_err());
    }

    #[test]
    fn head_aggregation_weights_by_sample_count() {
        let out = ch_aggregate_local(&[mv(&[0.0], 100.0), mv(&[4.0], 300.0)]).unwrap();
        assert!((out.params[0] - 3.0).abs() < 1e-15);
        assert_eq!(out.sample_weight, 400.0);

        let single = ch_aggregate_local(&[mv(&[7.0, -1.0], 30.0)]).unwrap();
        assert_eq!(single.params, vec![7.0, -1.0]);

        let equal = ch_aggregate_local(&[mv(&[2.0], 10.0), mv(&[2.0], 90.0)]).unwrap();
        assert!((equal.params[0] - 2.0).abs() < 1e-15);

        assert_eq!(ch_aggregate_local(&[]), Err(ProtocolError::EmptyDataset));
    }

    #[test]
    fn extraction_inverts_the_first_aggregate() {
        // Aggregate of [1]x100, [3]x100, [2]x50; head 2 strips its own
        // share and is left with 100·[1] + 50·[2] = [200].
        let agg = bd_aggregate_first(&mv(&[2.0], 50.0), &[mv(&[1.0], 100.0), mv(&[3.0], 100.0)])
            .unwrap();
        let mut parcel = Parcel::from_model(Source::Cluster(0), 0, &mv(&[1.0], 100.0));
        parcel = parcel
            .checked_add(&Parcel::from_model(Source::Cluster(1), 0, &mv(&[3.0], 100.0)))
            .unwrap();
        parcel = parcel
            .checked_add(&Parcel::from_model(Source::Bridge(0), 1, &mv(&[2.0], 50.0)))
            .unwrap();
        assert!((parcel.normalized().unwrap().params[0] - agg.params[0]).abs() < 1e-15);

        let own = Parcel::from_model(Source::Cluster(1), 0, &mv(&[3.0], 100.0));
        let rest = ch_extract_adjacent(&parcel, &[&own]).unwrap();
        assert!((rest.value[0] - 200.0).abs() < 1e-12);
        assert_eq!(rest.weight, 150.0);
    }

    #[test]
    fn extraction_of_everything_leaves_nothing() {
        let own = Parcel::from_model(Source::Cluster(0), 3, &mv(&[4.0, 1.0], 80.0));
        let rest = ch_extract_adjacent(&own.clone(), &[&own]).unwrap();
        assert!(rest.is_empty());
        assert!(rest.value.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn extraction_round_trips_random_parcels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let dim = 4;
            let a = mv(
                &(0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
                rng.gen_range(1..300) as f64,
            );
            let b = mv(
                &(0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
                rng.gen_range(1..300) as f64,
            );
            let pa = Parcel::from_model(Source::Cluster(0), 2, &a);
            let pb = Parcel::from_model(Source::Cluster(1), 1, &b);
            let sum = pa.checked_add(&pb).unwrap();
            let back = sum.checked_sub(&pb).unwrap();
            for (x, y) in back.value.iter().zip(&pa.value) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            assert_eq!(back.components, pa.components);
        }
    }

    #[test]
    fn subtraction_rejects_unknown_and_mismatched_components() {
        let pa = Parcel::from_model(Source::Cluster(0), 2, &mv(&[1.0], 100.0));
        let stranger = Parcel::from_model(Source::Cluster(1), 2, &mv(&[1.0], 100.0));
        assert!(matches!(
            pa.checked_sub(&stranger),
            Err(ProtocolError::MissingComponent(_))
        ));
        let wrong_weight = Parcel::from_model(Source::Cluster(0), 2, &mv(&[1.0], 90.0));
        assert!(matches!(
            pa.checked_sub(&wrong_weight),
            Err(ProtocolError::WeightMismatch(..))
        ));
        assert!(matches!(
            pa.checked_add(&pa),
            Err(ProtocolError::DoubleCount(_))
        ));
    }

    #[test]
    fn broadcast_assembly_keeps_weights_and_degenerates_gracefully() {
        let own = Parcel::from_model(Source::Cluster(1), 4, &mv(&[2.0], 100.0));
        let unchanged = ch_broadcast_model(&own, &[]).unwrap();
        assert_eq!(unchanged.normalized().unwrap().params, vec![2.0]);

        let left = Parcel::from_model(Source::Cluster(0), 3, &mv(&[2.0], 60.0));
        let all_equal = ch_broadcast_model(&own, &[&left]).unwrap();
        assert!((all_equal.normalized().unwrap().params[0] - 2.0).abs() < 1e-15);
        assert_eq!(all_equal.weight, 160.0);

        let hollow = Parcel::from_model(Source::Cluster(0), 0, &mv(&[1.0], 0.0));
        assert!(ch_broadcast_model(&hollow, &[]).is_err());
    }

    // -- local training --

    #[test]
    fn zero_learning_rate_returns_the_input() {
        let model = LossModel::Quadratic {
            target: vec![1.0, 1.0],
        };
        let train = TrainerConfig {
            learning_rate: 0.0,
            ..TrainerConfig::default()
        };
        let w = sgd_local_update(&model, &[5.0, -3.0], &[], &train, None).unwrap();
        assert_eq!(w, vec![5.0, -3.0]);
    }

    #[test]
    fn one_quadratic_step_moves_toward_the_target() {
        let model = LossModel::Quadratic {
            target: vec![2.0],
        };
        let train = TrainerConfig {
            learning_rate: 0.3,
            local_iters: 1,
            grad_correction: 0.0,
            ..TrainerConfig::default()
        };
        let w = sgd_local_update(&model, &[5.0], &[], &train, None).unwrap();
        // w − δ(w − a) = 5 − 0.3·3.
        assert!((w[0] - 4.1).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_rejected_for_loss() {
        let model = LossModel::Logistic { dim: 2, classes: 10 };
        let w = vec![0.0; model.num_params()];
        assert_eq!(
            local_loss(&model, &w, &[]),
            Err(ProtocolError::EmptyDataset)
        );
        let data = vec![(vec![1.0, -1.0], 3usize)];
        let loss = local_loss(&model, &w, &data).unwrap();
        assert!((loss - 10.0_f64.ln()).abs() < 1e-12);
    }

    // -- delay matrix --

    fn line_chain(c: usize) -> ClusterCandidate {
        // Structure-only candidate; ids are positions along a line.
        let heads: Vec<usize> = (0..c).map(|i| 2 * i).collect();
        let bds: Vec<usize> = (0..c.saturating_sub(1)).map(|i| 2 * i + 1).collect();
        ClusterCandidate {
            ch_chain: heads.clone(),
            bd_between: bds.clone(),
            total_coverage: heads.into_iter().chain(bds).collect(),
        }
    }

    #[test]
    fn delay_matrix_counts_hops_along_the_chain() {
        let d = compute_delay_matrix(&line_chain(3));
        assert_eq!(d.y(0, 1), 1);
        assert_eq!(d.y(0, 2), 2);
        for i in 0..3 {
            assert_eq!(d.y(i, i), 0);
        }
        assert_eq!(d.v(0, 0), 0);
        assert_eq!(d.v(0, 1), 1);
        assert_eq!(d.v(1, 0), 0);
        assert_eq!(d.v(2, 0), 1);
        assert_eq!(d.v(2, 1), 0);
    }

    // -- chain engine --

    fn frozen_train() -> TrainerConfig {
        TrainerConfig {
            learning_rate: 0.0,
            ..TrainerConfig::default()
        }
    }

    /// Chain of `c` clusters over scalar models: heads 0,2,4,..., bridges
    /// odd ids, one extra member per cluster with id 100+i.
    fn scalar_chain(c: usize) -> (ChainSpec, BTreeMap<usize, Vec<Sample>>) {
        let heads: Vec<usize> = (0..c).map(|i| 2 * i).collect();
        let bridges: Vec<usize> = (0..c - 1).map(|i| 2 * i + 1).collect();
        let members: Vec<Vec<usize>> = (0..c).map(|i| vec![100 + i]).collect();
        let mut data = BTreeMap::new();
        let sample = |n: usize| (vec![n as f64], 0usize);
        for &h in &heads {
            data.insert(h, vec![sample(h); 40]);
        }
        for &b in &bridges {
            data.insert(b, vec![sample(b); 25]);
        }
        for m in members.iter().flatten() {
            data.insert(*m, vec![sample(*m); 35]);
        }
        (
            ChainSpec {
                heads,
                members,
                bridges,
            },
            data,
        )
    }

    fn quadratic_protocol(
        c: usize,
        init: ModelInit,
        train: TrainerConfig,
    ) -> (ChainProtocol, BTreeMap<usize, Vec<Sample>>) {
        let (spec, data) = scalar_chain(c);
        let model = LossModel::Quadratic { target: vec![0.0] };
        let proto = ChainProtocol::new(spec, model, train, init, &data).unwrap();
        (proto, data)
    }

    #[test]
    fn two_cluster_first_round_matches_the_hand_trace() {
        // D_c = 40 + 35 = 75 per cluster, D_b = 25. Initials a = 6, b = -3.
        let init = ModelInit::PerCluster(vec![vec![6.0], vec![-3.0]]);
        let (mut proto, data) = quadratic_protocol(2, init, frozen_train());
        let out = proto.run_round(&data).unwrap();
        let m1 = (75.0 * 6.0 + 75.0 * (-3.0)) / 150.0;
        let g1 = (75.0 * 6.0 + 75.0 * (-3.0) + 25.0 * m1) / 175.0;
        for b in &out.broadcasts {
            assert!((b.params[0] - g1).abs() < 1e-12, "{}", b.params[0]);
            assert_eq!(b.sample_weight, 175.0);
        }
    }

    #[test]
    fn frozen_training_from_a_shared_start_stays_at_the_global_mean() {
        let start = vec![0.7];
        let init = ModelInit::Shared(start.clone());
        let (mut proto, data) = quadratic_protocol(3, init, frozen_train());
        for _ in 0..3 {
            proto.run_round(&data).unwrap();
        }
        for i in 0..3 {
            let b = proto.broadcast_model(i).unwrap();
            assert!((b.params[0] - start[0]).abs() < 1e-10);
        }
        // Full reach: 3 clusters of 75 plus 2 bridges of 25.
        let expected_weight = 3.0 * 75.0 + 2.0 * 25.0;
        for i in 0..3 {
            let w = proto.broadcast_model(i).unwrap().sample_weight;
            assert!((w - expected_weight).abs() < 1e-9);
        }
    }

    #[test]
    fn live_broadcasts_match_the_closed_form_oracle() {
        for c in 2..=4usize {
            let inits: Vec<Vec<f64>> = (0..c).map(|i| vec![i as f64 * 2.0 - 1.5]).collect();
            let (mut proto, data) =
                quadratic_protocol(c, ModelInit::PerCluster(inits), frozen_train());
            let delays = compute_delay_matrix(&line_chain(c));
            for _ in 0..c + 5 {
                let out = proto.run_round(&data).unwrap();
                if out.round < c {
                    continue;
                }
                for i in 0..c {
                    let oracle =
                        reference_aggregate(out.round, i, &proto.histories, &delays).unwrap();
                    let live = &out.broadcasts[i];
                    assert!(
                        (oracle.params[0] - live.params[0]).abs() < 1e-12,
                        "chain {c}, head {i}, round {}",
                        out.round
                    );
                    assert!((oracle.sample_weight - live.sample_weight).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn oracle_requires_enough_history() {
        let (mut proto, data) = quadratic_protocol(
            3,
            ModelInit::PerCluster(vec![vec![1.0], vec![2.0], vec![3.0]]),
            frozen_train(),
        );
        proto.run_round(&data).unwrap();
        let delays = compute_delay_matrix(&line_chain(3));
        // Round 1 lacks the 2-hop components at head 0.
        assert!(matches!(
            reference_aggregate(3, 0, &proto.histories, &delays),
            Err(ProtocolError::InsufficientHistory(..))
        ));
    }

    #[test]
    fn broadcasts_stay_in_the_hull_of_contributing_models() {
        let inits: Vec<Vec<f64>> = vec![vec![-2.0], vec![0.5], vec![4.0]];
        let train = TrainerConfig {
            learning_rate: 0.05,
            local_iters: 2,
            ..TrainerConfig::default()
        };
        let (mut proto, data) = quadratic_protocol(3, ModelInit::PerCluster(inits), train);
        for _ in 0..6 {
            let out = proto.run_round(&data).unwrap();
            // Quadratic target 0 pulls everything toward 0; every history
            // value lies in [-2, 4], so broadcasts must too.
            for b in &out.broadcasts {
                assert!(b.params[0] > -2.0 - 1e-12 && b.params[0] < 4.0 + 1e-12);
            }
        }
    }

    #[test]
    fn single_cluster_reduces_to_fedavg() {
        // One head (id 0) and two members, real logistic training.
        let spec = ChainSpec {
            heads: vec![0],
            members: vec![vec![1, 2]],
            bridges: vec![],
        };
        let model = LossModel::Logistic { dim: 2, classes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
        for n in 0..3usize {
            let set: Vec<Sample> = (0..10 + 5 * n)
                .map(|_| {
                    let y = rng.gen_range(0..2usize);
                    let x = vec![
                        rng.sample::<f64, _>(StandardNormal) + y as f64,
                        rng.sample::<f64, _>(StandardNormal),
                    ];
                    (x, y)
                })
                .collect();
            data.insert(n, set);
        }
        let train = TrainerConfig {
            learning_rate: 0.2,
            local_iters: 3,
            grad_correction: 0.0,
            ..TrainerConfig::default()
        };
        let mut proto = ChainProtocol::new(
            spec,
            model.clone(),
            train.clone(),
            ModelInit::Zero,
            &data,
        )
        .unwrap();

        let mut reference = vec![0.0; model.num_params()];
        for _ in 0..5 {
            let out = proto.run_round(&data).unwrap();
            // Plain FedAvg on the same schedule.
            let mut num = vec![0.0; reference.len()];
            let mut den = 0.0;
            for n in 0..3usize {
                let local =
                    sgd_local_update(&model, &reference, &data[&n], &train, None).unwrap();
                let w = data[&n].len() as f64;
                for (a, b) in num.iter_mut().zip(&local) {
                    *a += w * b;
                }
                den += w;
            }
            reference = num.into_iter().map(|v| v / den).collect();
            for (a, b) in out.broadcasts[0].params.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_spec_reads_the_plan_layout() {
        use crate::scheduler::{ScheduleAssignment, ScheduleEntry};
        let chain = ClusterCandidate {
            ch_chain: vec![0, 2],
            bd_between: vec![1],
            total_coverage: [0, 1, 2, 3].into(),
        };
        let plan = ChainPlan {
            chain,
            per_ch: [
                (
                    0,
                    ScheduleAssignment {
                        ch: 0,
                        entries: vec![ScheduleEntry {
                            device: 3,
                            rrb: 0,
                            uplink_rate: 1.0e6,
                            downlink_rate: 1.0e6,
                        }],
                        bd_ids: vec![1],
                        common_downlink_rate: Some(1.0e6),
                    },
                ),
                (
                    2,
                    ScheduleAssignment {
                        ch: 2,
                        entries: vec![],
                        bd_ids: vec![1],
                        common_downlink_rate: Some(2.0e6),
                    },
                ),
            ]
            .into(),
            bds: vec![],
            total_weight_j: 0.0,
        };
        let spec = ChainSpec::from_plan(&plan);
        assert_eq!(spec.heads, vec![0, 2]);
        assert_eq!(spec.members, vec![vec![3], vec![]]);
        assert_eq!(spec.bridges, vec![1]);
    }
}
