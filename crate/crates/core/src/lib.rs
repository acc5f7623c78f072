//! Simulation core for decentralized federated learning over a
//! device-to-device network organized into overlapped cluster chains.
//!
//! The crate is split along the natural seams of the system:
//!
//! * [`radio`] — path loss, shadowing, fading, link rates,
//! * [`topology`] — coverage sets, cluster-chain candidates, conflict graphs,
//! * [`scheduler`] — RRB scheduling (greedy MWIS) and cluster selection,
//! * [`resource`] — FL time / energy accounting and CPU frequency allocation,
//! * [`model`] — trainable losses (multinomial logistic, one-hidden-layer MLP,
//!   quadratic fixtures) and their gradients,
//! * [`protocol`] — the ledger-based aggregate dissemination over chains,
//! * [`baselines`] — star (direct-to-BS) and hierarchical (CH-to-BS) schemes,
//! * [`checkpoint`] — raw binary model vector dumps.

pub mod baselines;
pub mod checkpoint;
pub mod model;
pub mod protocol;
pub mod radio;
pub mod resource;
pub mod scheduler;
pub mod topology;

/// Identifier of a device. Devices are numbered `0..N` within a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct DeviceId(pub usize);

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// A device with its static attributes. Positions are meters in the
/// simulation plane; the base station sits wherever the harness puts it
/// (the default layouts use the disk center).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Device {
    pub id: DeviceId,
    /// Position in meters.
    pub pos: (f64, f64),
    /// Transmit power in watts.
    pub tx_power_w: f64,
    /// Processing density, CPU cycles per sample.
    pub proc_density: f64,
    /// Local dataset size in samples.
    pub num_samples: usize,
    /// CPU frequency bounds in cycles/s.
    pub cpu_min_hz: f64,
    pub cpu_max_hz: f64,
}

/// Euclidean distance between two positions, meters.
pub fn distance_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}
