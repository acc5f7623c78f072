//! Link-level channel model.
//!
//! A link's power gain is the product of three factors: distance path loss,
//! log-normal shadowing, and Rayleigh fast fading,
//!
//! ```text
//!     gain = 10^(-PL(d)/10) * 10^(X/10) * |g|^2
//! ```
//!
//! with `X ~ N(0, sigma^2)` in dB and `|g|^2 ~ Exp(1)` (squared magnitude of
//! a zero-mean unit-variance complex Gaussian). Device-to-device links and
//! device-to-base-station links follow different path-loss laws.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Parameters and errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum RadioError {
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("power and gain must be non-negative")]
    NegativePower,
    #[error("common rate of an empty receiver set is undefined")]
    NoReceivers,
}

/// Which path-loss law a link follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkKind {
    /// Device-to-device sidelink.
    D2d,
    /// Device-to-base-station (either direction).
    Cellular,
}

/// Channel-wide constants. Defaults follow the standard urban micro/macro
/// evaluation assumptions: 148 + 40 log10(d_km) dB for sidelinks,
/// 128.1 + 37.6 log10(d_km) dB for cellular links, 4 dB shadowing,
/// -174 dBm/Hz noise, 2 MHz per resource block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelParams {
    /// (intercept dB, slope per decade of km) for device-to-device links.
    pub d2d_pathloss: (f64, f64),
    /// (intercept dB, slope per decade of km) for cellular links.
    pub cellular_pathloss: (f64, f64),
    pub shadowing_sigma_db: f64,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_per_rrb_hz: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            d2d_pathloss: (148.0, 40.0),
            cellular_pathloss: (128.1, 37.6),
            shadowing_sigma_db: 4.0,
            noise_psd_dbm_hz: -174.0,
            bandwidth_per_rrb_hz: 2.0e6,
        }
    }
}

impl ChannelParams {
    /// Thermal noise integrated over one resource block, watts.
    pub fn noise_power_w(&self) -> f64 {
        10f64.powf(self.noise_psd_dbm_hz / 10.0) / 1000.0 * self.bandwidth_per_rrb_hz
    }
}

// ---------------------------------------------------------------------------
// Path loss and link gains
// ---------------------------------------------------------------------------

/// Path loss in dB at distance `d_m` meters for the given link kind.
pub fn path_loss_db(d_m: f64, kind: LinkKind, params: &ChannelParams) -> Result<f64, RadioError> {
    if d_m <= 0.0 {
        return Err(RadioError::NonPositiveDistance(d_m));
    }
    let d_km = d_m / 1000.0;
    let (a, b) = match kind {
        LinkKind::D2d => params.d2d_pathloss,
        LinkKind::Cellular => params.cellular_pathloss,
    };
    Ok(a + b * d_km.log10())
}

/// One sampled link realization, kept in factored form so the pieces stay
/// inspectable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGain {
    pub path_loss_db: f64,
    pub shadowing_db: f64,
    /// Rayleigh power factor `|g|^2`, unit mean.
    pub fading_power: f64,
}

impl LinkGain {
    pub fn power_gain(&self) -> f64 {
        10f64.powf(-self.path_loss_db / 10.0)
            * 10f64.powf(self.shadowing_db / 10.0)
            * self.fading_power
    }
}

/// Draw shadowing and fading for a link at distance `d_m`.
pub fn sample_link_gain<R: Rng>(
    rng: &mut R,
    d_m: f64,
    kind: LinkKind,
    params: &ChannelParams,
) -> Result<LinkGain, RadioError> {
    let pl = path_loss_db(d_m, kind, params)?;
    let shadow: f64 = StandardNormal.sample(rng);
    let fading: f64 = Exp1.sample(rng);
    Ok(LinkGain {
        path_loss_db: pl,
        shadowing_db: shadow * params.shadowing_sigma_db,
        fading_power: fading,
    })
}

/// Shannon rate of a single link in bits/s over one resource block.
pub fn achievable_rate(
    tx_power_w: f64,
    power_gain: f64,
    params: &ChannelParams,
) -> Result<f64, RadioError> {
    if tx_power_w < 0.0 || power_gain < 0.0 {
        return Err(RadioError::NegativePower);
    }
    let snr = tx_power_w * power_gain / params.noise_power_w();
    Ok(params.bandwidth_per_rrb_hz * (1.0 + snr).log2())
}

/// Broadcast rate a transmitter must use so that every listed receiver can
/// decode: the minimum of the receivers' individual rates.
pub fn common_downlink_rate(rates: &[f64]) -> Result<f64, RadioError> {
    rates
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.min(r))))
        .ok_or(RadioError::NoReceivers)
}

// ---------------------------------------------------------------------------
// Per-iteration gain table
// ---------------------------------------------------------------------------

/// All link gains for one global iteration, sampled up front in a fixed
/// enumeration order so results depend only on the seed, never on the order
/// in which consumers ask for links.
///
/// Shadowing is drawn once per unordered pair (it models geometry);
/// per-direction fading is drawn for the broadcast channel and for every
/// resource block. The same holds for device-to-BS links.
#[derive(Debug, Clone)]
pub struct GainTable {
    n: usize,
    z: usize,
    /// Indexed `(tx * n + rx) * z + rrb`; entries with `tx == rx` stay 0.
    d2d_rrb: Vec<f64>,
    /// Indexed `tx * n + rx`.
    d2d_bcast: Vec<f64>,
    /// Indexed `tx * z + rrb`.
    bs_up_rrb: Vec<f64>,
    /// Indexed by receiver.
    bs_down: Vec<f64>,
}

impl GainTable {
    pub fn sample<R: Rng>(
        rng: &mut R,
        positions: &[(f64, f64)],
        bs_pos: (f64, f64),
        num_rrbs: usize,
        params: &ChannelParams,
    ) -> Result<Self, RadioError> {
        let n = positions.len();
        let z = num_rrbs;
        let mut table = GainTable {
            n,
            z,
            d2d_rrb: vec![0.0; n * n * z],
            d2d_bcast: vec![0.0; n * n],
            bs_up_rrb: vec![0.0; n * z],
            bs_down: vec![0.0; n],
        };
        for i in 0..n {
            for j in (i + 1)..n {
                let d = crate::distance_m(positions[i], positions[j]);
                let pl = path_loss_db(d, LinkKind::D2d, params)?;
                let shadow: f64 = StandardNormal.sample(rng);
                let shadow_db = shadow * params.shadowing_sigma_db;
                for (tx, rx) in [(i, j), (j, i)] {
                    let fading: f64 = Exp1.sample(rng);
                    table.d2d_bcast[tx * n + rx] = LinkGain {
                        path_loss_db: pl,
                        shadowing_db: shadow_db,
                        fading_power: fading,
                    }
                    .power_gain();
                    for rrb in 0..z {
                        let fading: f64 = Exp1.sample(rng);
                        table.d2d_rrb[(tx * n + rx) * z + rrb] = LinkGain {
                            path_loss_db: pl,
                            shadowing_db: shadow_db,
                            fading_power: fading,
                        }
                        .power_gain();
                    }
                }
            }
        }
        for (i, &pos) in positions.iter().enumerate() {
            let d = crate::distance_m(pos, bs_pos);
            let pl = path_loss_db(d, LinkKind::Cellular, params)?;
            let shadow: f64 = StandardNormal.sample(rng);
            let shadow_db = shadow * params.shadowing_sigma_db;
            for rrb in 0..z {
                let fading: f64 = Exp1.sample(rng);
                table.bs_up_rrb[i * z + rrb] = LinkGain {
                    path_loss_db: pl,
                    shadowing_db: shadow_db,
                    fading_power: fading,
                }
                .power_gain();
            }
            let fading: f64 = Exp1.sample(rng);
            table.bs_down[i] = LinkGain {
                path_loss_db: pl,
                shadowing_db: shadow_db,
                fading_power: fading,
            }
            .power_gain();
        }
        Ok(table)
    }

    pub fn num_devices(&self) -> usize {
        self.n
    }

    pub fn num_rrbs(&self) -> usize {
        self.z
    }

    /// Sidelink gain on a specific resource block.
    pub fn d2d(&self, tx: usize, rx: usize, rrb: usize) -> f64 {
        self.d2d_rrb[(tx * self.n + rx) * self.z + rrb]
    }

    /// Sidelink gain on the broadcast channel.
    pub fn d2d_broadcast(&self, tx: usize, rx: usize) -> f64 {
        self.d2d_bcast[tx * self.n + rx]
    }

    /// Uplink gain to the base station on a specific resource block.
    pub fn to_bs(&self, tx: usize, rrb: usize) -> f64 {
        self.bs_up_rrb[tx * self.z + rrb]
    }

    /// Downlink gain from the base station broadcast.
    pub fn from_bs(&self, rx: usize) -> f64 {
        self.bs_down[rx]
    }
}

// ---------------------------------------------------------------------------
