use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RadioGeometry, MIN_SAMPLES};
use crate::mac_sim::{DsrcMacParams, RunParams, SimOptions, WifiMacParams};
use crate::metrics::GridPoint;
use crate::scenario::{ApPlacement, RoadConfig, TrafficConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WifiMode {
    Off,
    On,
}

impl WifiMode {
    pub fn enabled(self) -> bool {
        self == WifiMode::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbMethod {
    Exact,
    MonteCarlo,
}

/// Restricts the grid to the axes of one report table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Figure {
    /// Outcome shares vs. density and CW, at `report_ibi`.
    Three,
    /// Mean RGB vs. IBI, at `report_cw`.
    Four,
    /// Mean RGB vs. CW, at `report_ibi`.
    Five,
    #[default]
    All,
}

impl std::str::FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "3" => Ok(Figure::Three),
            "4" => Ok(Figure::Four),
            "5" => Ok(Figure::Five),
            "all" => Ok(Figure::All),
            other => Err(format!("unknown figure `{other}`, expected 3, 4, 5 or all")),
        }
    }
}

/// Sweep definition read from a flat TOML file. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Total vehicles on the road.
    pub densities: Vec<u32>,
    /// Inter-broadcast intervals, seconds.
    pub ibis: Vec<f64>,
    pub cws: Vec<u32>,
    pub wifi: Vec<WifiMode>,
    pub seeds: u32,
    pub base_seed: u64,
    /// Simulated seconds per run.
    pub duration: f64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
    pub trace: bool,

    pub rgb_method: RgbMethod,
    /// Points per collision when `rgb_method = "monte_carlo"`.
    pub rgb_samples: usize,

    /// IBI slice used by the outcome and RGB-vs-CW tables, seconds.
    pub report_ibi: f64,
    /// CW slice used by the RGB-vs-IBI table.
    pub report_cw: u32,

    pub r_tx: f64,
    pub r_cs: f64,
    pub r_wifi: f64,

    pub road_length: f64,
    pub lanes: u32,
    pub lane_width: f64,
    pub strip_width: f64,

    pub ap_x: f64,
    pub ap_offset: f64,
    pub wifi_cw_min: u32,
    pub wifi_cw_max: u32,
    /// Range at which the AP defers to DSRC traffic; defaults to `r_cs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wifi_cs_range: Option<f64>,

    /// Seconds between position updates.
    pub mobility_tick: f64,

    // Link-budget figures kept for reference. Ranges above are what the
    // simulator uses.
    pub dsrc_sensitivity_dbm: f64,
    pub dsrc_antenna_gain_dbi: f64,
    pub wifi_sensitivity_dbm: f64,
    pub wifi_tx_power_dbm: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let radio = RadioGeometry::default();
        let road = RoadConfig::default();
        let ap = ApPlacement::default();
        let wifi = WifiMacParams::default();
        Self {
            densities: vec![30, 120, 210, 270],
            ibis: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            cws: vec![15, 31, 63, 127, 255, 511, 1023],
            wifi: vec![WifiMode::Off, WifiMode::On],
            seeds: 30,
            base_seed: 0x5EED,
            duration: 20.0,
            out_dir: PathBuf::from("results"),
            workers: 0,
            trace: false,
            rgb_method: RgbMethod::Exact,
            rgb_samples: crate::geometry::DEFAULT_SAMPLES,
            report_ibi: 0.1,
            report_cw: 63,
            r_tx: radio.r_tx,
            r_cs: radio.r_cs,
            r_wifi: radio.r_wifi,
            road_length: road.length,
            lanes: road.lanes,
            lane_width: road.lane_width,
            strip_width: road.strip_width,
            ap_x: ap.x,
            ap_offset: ap.offset,
            wifi_cw_min: wifi.cw_min,
            wifi_cw_max: wifi.cw_max,
            wifi_cs_range: None,
            mobility_tick: SimOptions::default().mobility_tick,
            dsrc_sensitivity_dbm: -91.0,
            dsrc_antenna_gain_dbi: 0.0,
            wifi_sensitivity_dbm: -82.0,
            wifi_tx_power_dbm: 30.0,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: SweepConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|span| {
                let line = text[..span.start].matches('\n').count() + 1;
                format!("line {line}, `{}`: ", text[span].trim())
            });
            ConfigError::Parse(format!("{}{}", at.unwrap_or_default(), e.message()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Every key with its resolved value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn radio(&self) -> RadioGeometry {
        RadioGeometry {
            r_tx: self.r_tx,
            r_cs: self.r_cs,
            r_wifi: self.r_wifi,
        }
    }

    pub fn road(&self) -> RoadConfig {
        RoadConfig {
            length: self.road_length,
            lanes: self.lanes,
            lane_width: self.lane_width,
            strip_width: self.strip_width,
        }
    }

    pub fn ap(&self) -> ApPlacement {
        ApPlacement {
            x: self.ap_x,
            offset: self.ap_offset,
        }
    }

    pub fn run_params(&self, point: &GridPoint) -> RunParams {
        RunParams {
            dsrc: DsrcMacParams::new(point.ibi_secs(), point.cw),
            wifi: WifiMacParams {
                cw_min: self.wifi_cw_min,
                cw_max: self.wifi_cw_max,
                cs_range: self.wifi_cs_range,
                ..WifiMacParams::enabled(point.wifi)
            },
            duration: self.duration,
            options: SimOptions {
                mobility_tick: self.mobility_tick,
                ..SimOptions::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        non_empty_unique("densities", &self.densities, |v| v.to_string())?;
        non_empty_unique("ibis", &self.ibis, |v| ibi_us(*v).to_string())?;
        non_empty_unique("cws", &self.cws, |v| v.to_string())?;
        non_empty_unique("wifi", &self.wifi, |v| format!("{v:?}"))?;

        let road = self.road();
        road.validate().map_err(|e| invalid("road", e.to_string()))?;
        for (i, &d) in self.densities.iter().enumerate() {
            TrafficConfig::from_total(d, &road).map_err(|e| invalid(format!("densities[{i}]"), e.to_string()))?;
        }
        let air = DsrcMacParams::AIRTIME;
        for (i, &ibi) in self.ibis.iter().enumerate() {
            if !(ibi.is_finite() && ibi > air) {
                return Err(invalid(format!("ibis[{i}]"), format!("must exceed the {air} s airtime")));
            }
            if !(self.duration > ibi) {
                return Err(invalid("duration", format!("must exceed every IBI, got {}", self.duration)));
            }
        }
        for (i, &cw) in self.cws.iter().enumerate() {
            if cw == 0 {
                return Err(invalid(format!("cws[{i}]"), "must be at least 1"));
            }
        }
        if self.seeds == 0 {
            return Err(invalid("seeds", "must be at least 1"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid("duration", "must be positive"));
        }
        if self.rgb_method == RgbMethod::MonteCarlo && self.rgb_samples < MIN_SAMPLES {
            return Err(invalid("rgb_samples", format!("must be at least {MIN_SAMPLES}")));
        }
        if !(self.report_ibi.is_finite() && self.report_ibi > air) {
            return Err(invalid("report_ibi", format!("must exceed the {air} s airtime")));
        }
        if self.report_cw == 0 {
            return Err(invalid("report_cw", "must be at least 1"));
        }
        self.radio().validate().map_err(|e| invalid("r_tx/r_cs/r_wifi", e.to_string()))?;
        if !(self.ap_x.is_finite() && self.ap_offset.is_finite()) {
            return Err(invalid("ap_x/ap_offset", "must be finite"));
        }
        if !(self.mobility_tick.is_finite() && self.mobility_tick > 0.0) {
            return Err(invalid("mobility_tick", "must be positive"));
        }
        let wifi = WifiMacParams {
            cw_min: self.wifi_cw_min,
            cw_max: self.wifi_cw_max,
            cs_range: self.wifi_cs_range,
            ..WifiMacParams::enabled(true)
        };
        wifi.validate().map_err(|e| invalid("wifi_cw_min/wifi_cw_max/wifi_cs_range", e.to_string()))?;
        Ok(())
    }

    /// Grid points of `figure`, sorted.
    pub fn grid(&self, figure: Figure) -> Vec<GridPoint> {
        let (ibis, cws): (Vec<u64>, Vec<u32>) = match figure {
            Figure::All => (self.ibis.iter().map(|&s| ibi_us(s)).collect(), self.cws.clone()),
            Figure::Three | Figure::Five => (vec![ibi_us(self.report_ibi)], self.cws.clone()),
            Figure::Four => (self.ibis.iter().map(|&s| ibi_us(s)).collect(), vec![self.report_cw]),
        };
        let mut out = Vec::new();
        for &density in &self.densities {
            for &ibi in &ibis {
                for &cw in &cws {
                    for &w in &self.wifi {
                        out.push(GridPoint {
                            density,
                            ibi_us: ibi,
                            cw,
                            wifi: w.enabled(),
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn planned_runs(&self, figure: Figure) -> usize {
        self.grid(figure).len() * self.seeds as usize
    }

    /// Hash of every setting that changes a run's result. Grid lists, seed
    /// count and output options are excluded so a sweep can be extended.
    pub fn fingerprint(&self) -> u64 {
        let physics = SweepConfig {
            densities: vec![],
            ibis: vec![],
            cws: vec![],
            wifi: vec![],
            seeds: 0,
            out_dir: PathBuf::new(),
            workers: 0,
            trace: false,
            report_ibi: 0.0,
            report_cw: 0,
            ..self.clone()
        };
        fnv1a(physics.to_toml().as_bytes())
    }
}

/// Seconds to whole microseconds.
pub fn ibi_us(secs: f64) -> u64 {
    (secs * 1e6).round() as u64
}

fn non_empty_unique<T, K: Ord>(field: &str, items: &[T], key: impl Fn(&T) -> K) -> Result<(), ConfigError> {
    if items.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    let mut seen = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        if !seen.insert(key(item)) {
            return Err(invalid(format!("{field}[{i}]"), "duplicate value"));
        }
    }
    Ok(())
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
