//! Metrics emission: one CSV per scheme and seed with a fixed column order,
//! plus a cross-seed summary JSON. Files are written to a temp name in the
//! target directory and renamed into place, so readers never see a partial
//! file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str =
    "t,scheme,seed,acc_mean,acc_worst_ch,energy_cum_J,time_cum_s,scheduled,violations";

/// One per-round row of a run. Cumulative columns carry sums from round 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub scheme: String,
    pub seed: u64,
    pub acc_mean: f64,
    pub acc_worst_ch: f64,
    pub energy_cum_j: f64,
    pub time_cum_s: f64,
    pub scheduled: usize,
    pub violations: usize,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            self.scheme,
            self.seed,
            self.acc_mean,
            self.acc_worst_ch,
            self.energy_cum_j,
            self.time_cum_s,
            self.scheduled,
            self.violations
        )
    }
}

/// Write bytes to `path` atomically: temp file in the same directory, then
/// rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn csv_path(dir: &Path, scheme: &str, seed: u64) -> PathBuf {
    dir.join(format!("{scheme}_seed{seed}.csv"))
}

// ---------------------------------------------------------------------------
// Cross-seed summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn stat(values: &[f64]) -> Stat {
    if values.is_empty() {
        return Stat::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat {
        mean,
        std: var.sqrt(),
    }
}

/// Final-round figures for one scheme on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_acc: f64,
    pub final_acc_worst_ch: f64,
    pub energy_cum_j: f64,
    pub time_cum_s: f64,
    pub scheduled: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub seeds: usize,
    pub final_acc: Stat,
    pub final_acc_worst_ch: Stat,
    pub energy_cum_j: Stat,
    pub time_cum_s: Stat,
    pub scheduled: Stat,
    pub violations_total: usize,
    pub per_seed: Vec<SeedOutcome>,
}

pub fn summarize(outcomes: &[SeedOutcome]) -> SchemeSummary {
    let grab = |f: fn(&SeedOutcome) -> f64| -> Vec<f64> { outcomes.iter().map(f).collect() };
    SchemeSummary {
        seeds: outcomes.len(),
        final_acc: stat(&grab(|o| o.final_acc)),
        final_acc_worst_ch: stat(&grab(|o| o.final_acc_worst_ch)),
        energy_cum_j: stat(&grab(|o| o.energy_cum_j)),
        time_cum_s: stat(&grab(|o| o.time_cum_s)),
        scheduled: stat(&grab(|o| o.scheduled as f64)),
        violations_total: outcomes.iter().map(|o| o.violations).sum(),
        per_seed: outcomes.to_vec(),
    }
}

pub fn write_summary(
    dir: &Path,
    per_scheme: &BTreeMap<String, SchemeSummary>,
) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(per_scheme).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), text.as_bytes())
}

/// Drop a marker file recording why a batch aborted; partial outputs stay.
pub fn write_failure_marker(dir: &Path, reason: &str) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("FAILED"), reason.as_bytes());
}

// ---------------------------------------------------------------------------
