//! Flat `key = value` run configuration.
//!
//! ```text
//! # pulse train
//! period_ps = 3125
//! n_pulses = 1000000
//! # source
//! p1 = 0.03
//! p2 = 0.03
//! visibility = 0.71
//! coherence_width_ps = 4.25
//! tau0_ps = 0
//! seed_delay_ps = 0
//! loop_transmission = 1
//! # detectors: bare keys set all four channels, chN.key overrides one
//! efficiency = 0.1
//! jitter_sigma_ps = 70
//! dark_rate_hz = 0
//! dead_time_ps = 0
//! nominal_offset_ps = 0
//! ch3.efficiency = 0.12
//! # analysis
//! gate_halfwidth_ps = 1280
//! max_lag = 5
//! # reproducibility
//! seed = 0
//! block_size = 262144
//! ```
//!
//! Units are picoseconds, hertz and bare probabilities. Unknown and repeated
//! keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coinc::CoincConfig;
use crate::error::{Error, Result};
use crate::tagsim::{DetectorConfig, Detectors, PulseTrainConfig, SimOptions, SourceConfig};

const DETECTOR_KEYS: [&str; 5] = [
    "efficiency",
    "jitter_sigma_ps",
    "dark_rate_hz",
    "dead_time_ps",
    "nominal_offset_ps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pulse: PulseTrainConfig,
    pub source: SourceConfig,
    pub detectors: Detectors,
    pub gate_halfwidth_ps: u64,
    pub max_lag: u32,
    pub seed: u64,
    pub block_size: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let coinc = CoincConfig::default();
        Self {
            pulse: PulseTrainConfig::default(),
            source: SourceConfig::default(),
            detectors: [DetectorConfig::default(); 4],
            gate_halfwidth_ps: coinc.gate_halfwidth_ps,
            max_lag: coinc.max_lag,
            seed: 0,
            block_size: SimOptions::default().block_size,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
}

impl RunConfig {
    pub fn coinc(&self) -> CoincConfig {
        CoincConfig {
            period_ps: self.pulse.period_ps,
            gate_halfwidth_ps: self.gate_halfwidth_ps,
            max_lag: self.max_lag,
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            block_size: self.block_size,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.pulse.validate()?;
        self.source.validate()?;
        for (i, d) in self.detectors.iter().enumerate() {
            d.validate(i + 1)?;
        }
        if self.block_size == 0 {
            return Err(Error::config("block_size", "must be positive"));
        }
        self.coinc().validate()
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let s = &mut self.source;
        match key {
            "period_ps" => self.pulse.period_ps = parse_value(key, raw)?,
            "n_pulses" => self.pulse.n_pulses = parse_value(key, raw)?,
            "p1" => s.p1 = parse_value(key, raw)?,
            "p2" => s.p2 = parse_value(key, raw)?,
            "visibility" => s.overlap.visibility = parse_value(key, raw)?,
            "coherence_width_ps" => s.overlap.coherence_width_ps = parse_value(key, raw)?,
            "tau0_ps" => s.overlap.center_ps = parse_value(key, raw)?,
            "seed_delay_ps" => s.seed_delay_ps = parse_value(key, raw)?,
            "loop_transmission" => s.loop_transmission = parse_value(key, raw)?,
            "gate_halfwidth_ps" => self.gate_halfwidth_ps = parse_value(key, raw)?,
            "max_lag" => self.max_lag = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "block_size" => self.block_size = parse_value(key, raw)?,
            _ => {
                if DETECTOR_KEYS.contains(&key) {
                    for ch in 0..4 {
                        set_detector(&mut self.detectors[ch], key, key, raw)?;
                    }
                    return Ok(());
                }
                let (ch, field) = key
                    .strip_prefix("ch")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(n, f)| n.parse::<usize>().ok().map(|n| (n, f)))
                    .filter(|(n, f)| (1..=4).contains(n) && DETECTOR_KEYS.contains(f))
                    .ok_or_else(|| Error::config(key, "unknown key"))?;
                set_detector(&mut self.detectors[ch - 1], key, field, raw)?;
            }
        }
        Ok(())
    }

    /// Every key in canonical order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.source;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("period_ps", self.pulse.period_ps.to_string());
        line("n_pulses", self.pulse.n_pulses.to_string());
        line("p1", s.p1.to_string());
        line("p2", s.p2.to_string());
        line("visibility", s.overlap.visibility.to_string());
        line("coherence_width_ps", s.overlap.coherence_width_ps.to_string());
        line("tau0_ps", s.overlap.center_ps.to_string());
        line("seed_delay_ps", s.seed_delay_ps.to_string());
        line("loop_transmission", s.loop_transmission.to_string());
        for (i, d) in self.detectors.iter().enumerate() {
            let c = i + 1;
            line(&format!("ch{c}.efficiency"), d.efficiency.to_string());
            line(&format!("ch{c}.jitter_sigma_ps"), d.jitter_sigma_ps.to_string());
            line(&format!("ch{c}.dark_rate_hz"), d.dark_rate_hz.to_string());
            line(&format!("ch{c}.dead_time_ps"), d.dead_time_ps.to_string());
            line(&format!("ch{c}.nominal_offset_ps"), d.nominal_offset_ps.to_string());
        }
        line("gate_halfwidth_ps", self.gate_halfwidth_ps.to_string());
        line("max_lag", self.max_lag.to_string());
        line("seed", self.seed.to_string());
        line("block_size", self.block_size.to_string());
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn set_detector(d: &mut DetectorConfig, key: &str, field: &str, raw: &str) -> Result<()> {
    match field {
        "efficiency" => d.efficiency = parse_value(key, raw)?,
        "jitter_sigma_ps" => d.jitter_sigma_ps = parse_value(key, raw)?,
        "dark_rate_hz" => d.dark_rate_hz = parse_value(key, raw)?,
        "dead_time_ps" => d.dead_time_ps = parse_value(key, raw)?,
        "nominal_offset_ps" => d.nominal_offset_ps = parse_value(key, raw)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), (i, v)).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }

        let mut cfg = RunConfig::default();
        // bare detector keys first so chN.* overrides them regardless of order
        let (global, rest): (Vec<_>, Vec<_>) = entries.iter().partition(|(k, _)| DETECTOR_KEYS.contains(&k.as_str()));
        for (k, (_, v)) in global.into_iter().chain(rest) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Defaults matching the fiber experiment: 320 MHz pulses, 10% efficiency,
/// 70 ps jitter, about 1 MHz per channel.
pub fn default_config_text() -> String {
    RunConfig::default().to_text()
}
