//! Run configuration: a TOML file with nested sections, every field
//! defaulted to the standard desk-scale setup (26 devices in a 900 m disk,
//! 400 m zones, 22 blocks, 72800-bit models, 1 s budget). An empty file is
//! a valid config.

use eocd_core::radio::ChannelParams;
use eocd_core::resource::TrainerConfig;
use eocd_core::scheduler::SchedulerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Radius of the placement disk, meters. Devices are dropped uniformly
    /// over it; the base station sits at `bs_pos`.
    pub area_radius_m: f64,
    pub num_devices: usize,
    /// Coverage-zone radius of a prospective cluster head, meters.
    pub coverage_radius_m: f64,
    /// Resource blocks each head owns.
    pub num_rrbs: usize,
    pub max_chain_len: usize,
    pub max_clusters: usize,
    pub bs_pos: (f64, f64),
    pub bs_power_w: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            area_radius_m: 900.0,
            num_devices: 26,
            coverage_radius_m: 400.0,
            num_rrbs: 22,
            max_chain_len: 3,
            max_clusters: 3,
            bs_pos: (0.0, 0.0),
            bs_power_w: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub d2d_pathloss: (f64, f64),
    pub cellular_pathloss: (f64, f64),
    pub shadowing_sigma_db: f64,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_per_rrb_hz: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let p = ChannelParams::default();
        ChannelSection {
            d2d_pathloss: p.d2d_pathloss,
            cellular_pathloss: p.cellular_pathloss,
            shadowing_sigma_db: p.shadowing_sigma_db,
            noise_psd_dbm_hz: p.noise_psd_dbm_hz,
            bandwidth_per_rrb_hz: p.bandwidth_per_rrb_hz,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub tx_power_w: f64,
    /// Processing density is drawn uniformly from this interval, cycles
    /// per sample.
    pub proc_density_min: f64,
    pub proc_density_max: f64,
    pub cpu_min_hz: f64,
    pub cpu_max_hz: f64,
    /// Local dataset size D_n, samples per device.
    pub samples_per_device: usize,
}

impl Default for DeviceSection {
    fn default() -> Self {
        DeviceSection {
            tx_power_w: 1.0,
            proc_density_min: 400.0,
            proc_density_max: 600.0,
            cpu_min_hz: 3.0e5,
            cpu_max_hz: 1.0e9,
            samples_per_device: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub local_iters: usize,
    pub learning_rate: f64,
    pub grad_correction: f64,
    pub local_accuracy: f64,
    pub global_accuracy: f64,
    pub model_size_bits: f64,
    pub max_global_iters: usize,
    pub fl_time_budget_s: f64,
    pub switched_capacitance: f64,
    pub max_stage1_iters: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainerSection {
            local_iters: t.local_iters,
            learning_rate: t.learning_rate,
            grad_correction: t.grad_correction,
            local_accuracy: t.local_accuracy,
            global_accuracy: t.global_accuracy,
            model_size_bits: t.model_size_bits,
            max_global_iters: t.max_global_iters,
            fl_time_budget_s: t.fl_time_budget_s,
            switched_capacitance: t.switched_capacitance,
            max_stage1_iters: t.max_stage1_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Perceptron,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Distance between synthetic class centers in units of the intra-class
    /// standard deviation. 0 is chance level, large is separable.
    pub separation: f64,
    pub labels_per_device: usize,
    pub max_labels_per_cluster: usize,
    pub model: ModelKind,
    /// Size budget for the perceptron variant, number of parameters.
    pub perceptron_param_budget: usize,
    /// Fraction of the dataset held out for accuracy evaluation, never
    /// assigned to any device.
    pub holdout_frac: f64,
    /// IDX file paths, required when `source = "idx"`.
    pub images_path: Option<String>,
    pub labels_path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: 10,
            dim: 16,
            samples_per_class: 2000,
            separation: 3.0,
            labels_per_device: 2,
            max_labels_per_cluster: 6,
            model: ModelKind::Logistic,
            perceptron_param_budget: 9098,
            holdout_frac: 0.2,
            images_path: None,
            labels_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Eocd,
    Star,
    Hier,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Eocd => "eocd",
            Scheme::Star => "star",
            Scheme::Hier => "hier",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eocd" => Ok(Scheme::Eocd),
            "star" => Ok(Scheme::Star),
            "hier" => Ok(Scheme::Hier),
            other => Err(format!("unknown scheme {other:?} (eocd | star | hier)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub schemes: Vec<Scheme>,
    /// Number of independent repetitions; run k uses seed value k.
    pub seeds: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            schemes: vec![Scheme::Eocd, Scheme::Star, Scheme::Hier],
            seeds: 20,
        }
    }
}

// ---------------------------------------------------------------------------
// Top level
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub network: NetworkSection,
    pub channel: ChannelSection,
    pub device: DeviceSection,
    pub trainer: TrainerSection,
    pub data: DataSection,
    pub experiment: ExperimentSection,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        SimConfig::from_toml(&text)
    }

    /// Every range and cross-field rule; errors name the offending keys.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        let mut require = |ok: bool, key: &str, why: &str| {
            if !ok {
                bad.push(format!("{key}: {why}"));
            }
        };

        let n = &self.network;
        require(n.area_radius_m > 0.0, "network.area_radius_m", "must be > 0");
        require(n.num_devices >= 1, "network.num_devices", "must be >= 1");
        require(
            n.coverage_radius_m > 0.0,
            "network.coverage_radius_m",
            "must be > 0",
        );
        require(n.num_rrbs >= 1, "network.num_rrbs", "must be >= 1");
        require(n.max_chain_len >= 1, "network.max_chain_len", "must be >= 1");
        require(n.max_clusters >= 1, "network.max_clusters", "must be >= 1");
        require(n.bs_power_w > 0.0, "network.bs_power_w", "must be > 0");

        let c = &self.channel;
        require(
            c.bandwidth_per_rrb_hz > 0.0,
            "channel.bandwidth_per_rrb_hz",
            "must be > 0",
        );
        require(
            c.shadowing_sigma_db >= 0.0,
            "channel.shadowing_sigma_db",
            "must be >= 0",
        );

        let d = &self.device;
        require(d.tx_power_w > 0.0, "device.tx_power_w", "must be > 0");
        require(
            d.proc_density_min > 0.0 && d.proc_density_min <= d.proc_density_max,
            "device.proc_density_min",
            "must be > 0 and <= proc_density_max",
        );
        require(
            d.cpu_min_hz > 0.0 && d.cpu_min_hz <= d.cpu_max_hz,
            "device.cpu_min_hz",
            "must be > 0 and <= cpu_max_hz",
        );
        require(
            d.samples_per_device >= 1,
            "device.samples_per_device",
            "must be >= 1",
        );

        let t = &self.trainer;
        require(t.local_iters >= 1, "trainer.local_iters", "must be >= 1");
        require(t.learning_rate >= 0.0, "trainer.learning_rate", "must be >= 0");
        require(t.model_size_bits > 0.0, "trainer.model_size_bits", "must be > 0");
        require(t.fl_time_budget_s > 0.0, "trainer.fl_time_budget_s", "must be > 0");
        require(
            t.switched_capacitance > 0.0,
            "trainer.switched_capacitance",
            "must be > 0",
        );
        require(t.max_stage1_iters >= 1, "trainer.max_stage1_iters", "must be >= 1");

        let da = &self.data;
        require(da.classes >= 2, "data.classes", "must be >= 2");
        require(da.dim >= 1, "data.dim", "must be >= 1");
        require(da.samples_per_class >= 1, "data.samples_per_class", "must be >= 1");
        require(da.separation >= 0.0, "data.separation", "must be >= 0");
        require(
            da.labels_per_device >= 1 && da.labels_per_device <= da.classes,
            "data.labels_per_device",
            "must be in 1..=classes",
        );
        require(
            da.max_labels_per_cluster >= da.labels_per_device,
            "data.max_labels_per_cluster",
            "must be >= labels_per_device",
        );
        require(
            da.holdout_frac > 0.0 && da.holdout_frac < 1.0,
            "data.holdout_frac",
            "must be in (0, 1)",
        );
        if da.source == DataSource::Idx {
            require(da.images_path.is_some(), "data.images_path", "required for idx source");
            require(da.labels_path.is_some(), "data.labels_path", "required for idx source");
        }

        let e = &self.experiment;
        require(!e.schemes.is_empty(), "experiment.schemes", "must not be empty");
        require(e.seeds >= 1, "experiment.seeds", "must be >= 1");

        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    pub fn channel_params(&self) -> ChannelParams {
        ChannelParams {
            d2d_pathloss: self.channel.d2d_pathloss,
            cellular_pathloss: self.channel.cellular_pathloss,
            shadowing_sigma_db: self.channel.shadowing_sigma_db,
            noise_psd_dbm_hz: self.channel.noise_psd_dbm_hz,
            bandwidth_per_rrb_hz: self.channel.bandwidth_per_rrb_hz,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            local_iters: self.trainer.local_iters,
            learning_rate: self.trainer.learning_rate,
            grad_correction: self.trainer.grad_correction,
            local_accuracy: self.trainer.local_accuracy,
            global_accuracy: self.trainer.global_accuracy,
            model_size_bits: self.trainer.model_size_bits,
            max_global_iters: self.trainer.max_global_iters,
            fl_time_budget_s: self.trainer.fl_time_budget_s,
            switched_capacitance: self.trainer.switched_capacitance,
            max_stage1_iters: self.trainer.max_stage1_iters,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            num_rrbs: self.network.num_rrbs,
            max_chain_len: self.network.max_chain_len,
            max_clusters: self.network.max_clusters,
        }
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = SimConfig::from_toml("").unwrap();
        assert_eq!(cfg.network.num_devices, 26);
        assert_eq!(cfg.network.coverage_radius_m, 400.0);
        assert_eq!(cfg.network.num_rrbs, 22);
        assert_eq!(cfg.device.samples_per_device, 200);
        assert_eq!(cfg.device.proc_density_min, 400.0);
        assert_eq!(cfg.device.proc_density_max, 600.0);
        assert_eq!(cfg.device.cpu_min_hz, 3.0e5);
        assert_eq!(cfg.device.cpu_max_hz, 1.0e9);
        assert_eq!(cfg.trainer.model_size_bits, 72800.0);
        assert_eq!(cfg.trainer.fl_time_budget_s, 1.0);
        assert_eq!(cfg.trainer.switched_capacitance, 1.0e-28);
        assert_eq!(cfg.experiment.seeds, 20);
        assert_eq!(cfg.experiment.schemes.len(), 3);
    }

    #[test]
    fn negative_radius_is_rejected_by_name() {
        let err = SimConfig::from_toml("[network]\ncoverage_radius_m = -1.0\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("network.coverage_radius_m"), "{text}");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = SimConfig::from_toml("[network]\ncoverage_radius = 10.0\n").unwrap_err();
        // The key name lives in the source chain, rendered as the CLI does.
        let text = format!("{:#}", anyhow::Error::from(err));
        assert!(text.contains("coverage_radius"), "{text}");
    }

    #[test]
    fn overrides_are_reflected() {
        let cfg = SimConfig::from_toml("[network]\nnum_devices = 50\nnum_rrbs = 25\n").unwrap();
        assert_eq!(cfg.network.num_devices, 50);
        assert_eq!(cfg.network.num_rrbs, 25);
        assert_eq!(cfg.scheduler_config().num_rrbs, 25);
    }

    #[test]
    fn idx_source_requires_paths() {
        let err = SimConfig::from_toml("[data]\nsource = \"idx\"\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("data.images_path"), "{text}");
        assert!(text.contains("data.labels_path"), "{text}");
    }

    #[test]
    fn several_violations_are_listed_together() {
        let toml = "[network]\narea_radius_m = -5.0\nnum_rrbs = 0\n[data]\nlabels_per_device = 99\n";
        let err = SimConfig::from_toml(toml).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("network.area_radius_m"), "{text}");
        assert!(text.contains("network.num_rrbs"), "{text}");
        assert!(text.contains("data.labels_per_device"), "{text}");
    }
}
