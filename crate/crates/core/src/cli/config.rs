//! Experiment files.
//!
//! Powers accept `"<x> dBm"`, `"<x> mW"`, `"<x> W"` or a bare number in
//! watts. Variances accept `"<x> dB"` or a bare linear number. Everything
//! is converted to linear SI units on load.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::closed_form::{PrivateScheme, Transmission};
use crate::error::{Error, Result};
use crate::model::{dbm_to_watt, db_to_linear, CorrelationModel, PathLossModel, PhaseVariances, SystemConfig};

#[derive(Deserialize)]
#[serde(untagged)]
enum RawQuantity {
    Float(f64),
    Int(i64),
    Text(String),
}

fn split_unit(s: &str) -> std::result::Result<(f64, &str), String> {
    let s = s.trim();
    let idx = s.find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E').unwrap_or(s.len());
    let (num, unit) = s.split_at(idx);
    let value = num.trim().parse::<f64>().map_err(|_| format!("cannot read a number from {s:?}"))?;
    Ok((value, unit.trim()))
}

/// Parses a power into watts.
pub fn parse_power(s: &str) -> std::result::Result<f64, String> {
    let (v, unit) = split_unit(s)?;
    match unit {
        "dBm" => Ok(dbm_to_watt(v)),
        "mW" => Ok(v * 1e-3),
        "W" | "" => Ok(v),
        u => Err(format!("unknown power unit {u:?} in {s:?}; use dBm, mW or W")),
    }
}

/// Parses a dimensionless ratio or variance into linear scale.
pub fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let (v, unit) = split_unit(s)?;
    match unit {
        "dB" => Ok(db_to_linear(v)),
        "" => Ok(v),
        u => Err(format!("unknown unit {u:?} in {s:?}; use dB or a bare linear value")),
    }
}

macro_rules! quantity {
    ($name:ident, $parse:ident, $what:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let v = match RawQuantity::deserialize(d)
                    .map_err(|_| de::Error::custom(concat!("expected a number or a string ", $what)))?
                {
                    RawQuantity::Float(x) => x,
                    RawQuantity::Int(x) => x as f64,
                    RawQuantity::Text(s) => $parse(&s).map_err(de::Error::custom)?,
                };
                if !v.is_finite() || v < 0.0 {
                    return Err(de::Error::custom(format!("{} must be finite and non-negative, got {v}", $what)));
                }
                Ok(Self(v))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_f64(self.0)
            }
        }
    };
}

quantity!(Power, parse_power, "power");
quantity!(Ratio, parse_ratio, "variance");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PilotPower {
    One(Power),
    PerUe(Vec<Power>),
}

/// System section as written in files; omitted keys take default values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseSection {
    #[serde(rename = "L")]
    num_aps: usize,
    #[serde(rename = "K")]
    num_ues: usize,
    #[serde(rename = "N")]
    antennas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pilot_power: Option<PilotPower>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    downlink_power: Option<Power>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_ul: Option<Power>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_dl: Option<Power>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    symbol_duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    carrier_frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    osc_const_ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    osc_const_ue: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_variance_ap: Option<Ratio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_variance_ue: Option<Ratio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area_side: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shadowing_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    correlation: Option<CorrelationModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path_loss: Option<PathLossModel>,
}

impl BaseSection {
    fn into_config(self) -> std::result::Result<SystemConfig, String> {
        let defaults = SystemConfig::default();
        let mut c = SystemConfig::with_dims(
            self.num_aps,
            self.num_ues,
            self.antennas,
            self.tau_p.unwrap_or(defaults.tau_p),
            self.tau_c.unwrap_or(defaults.tau_c),
        );
        match self.pilot_power {
            Some(PilotPower::One(p)) => c.pilot_power = vec![p.0; self.num_ues],
            Some(PilotPower::PerUe(v)) => c.pilot_power = v.into_iter().map(|p| p.0).collect(),
            None => {}
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.downlink_power, self.downlink_power.map(|p| p.0));
        set(&mut c.noise_ul, self.noise_ul.map(|p| p.0));
        set(&mut c.noise_dl, self.noise_dl.map(|p| p.0));
        set(&mut c.symbol_duration, self.symbol_duration);
        set(&mut c.carrier_frequency, self.carrier_frequency);
        set(&mut c.osc_const_ap, self.osc_const_ap);
        set(&mut c.osc_const_ue, self.osc_const_ue);
        set(&mut c.area_side, self.area_side);
        c.phase_variances = match (self.phase_variance_ap, self.phase_variance_ue) {
            (Some(ap), Some(ue)) => Some(PhaseVariances { ap: ap.0, ue: ue.0 }),
            (None, None) => None,
            _ => return Err("phase_variance_ap and phase_variance_ue must be given together".into()),
        };
        c.shadowing_db = self.shadowing_db;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.correlation {
            c.correlation = m;
        }
        if let Some(p) = self.path_loss {
            c.path_loss = p;
        }
        Ok(c)
    }

    fn from_config(c: &SystemConfig) -> Self {
        let uniform = c.pilot_power.windows(2).all(|w| w[0] == w[1]) && !c.pilot_power.is_empty();
        let pilot_power = if uniform {
            PilotPower::One(Power(c.pilot_power[0]))
        } else {
            PilotPower::PerUe(c.pilot_power.iter().map(|&p| Power(p)).collect())
        };
        Self {
            num_aps: c.num_aps,
            num_ues: c.num_ues,
            antennas: c.antennas,
            tau_p: Some(c.tau_p),
            tau_c: Some(c.tau_c),
            pilot_power: Some(pilot_power),
            downlink_power: Some(Power(c.downlink_power)),
            noise_ul: Some(Power(c.noise_ul)),
            noise_dl: Some(Power(c.noise_dl)),
            symbol_duration: Some(c.symbol_duration),
            carrier_frequency: Some(c.carrier_frequency),
            osc_const_ap: Some(c.osc_const_ap),
            osc_const_ue: Some(c.osc_const_ue),
            phase_variance_ap: c.phase_variances.map(|v| Ratio(v.ap)),
            phase_variance_ue: c.phase_variances.map(|v| Ratio(v.ue)),
            area_side: Some(c.area_side),
            shadowing_db: c.shadowing_db,
            seed: Some(c.seed),
            correlation: Some(c.correlation),
            path_loss: Some(c.path_loss),
        }
    }
}

mod base_serde {
    use super::*;

    pub fn serialize<S: Serializer>(c: &SystemConfig, s: S) -> std::result::Result<S::Ok, S::Error> {
        BaseSection::from_config(c).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SystemConfig, D::Error> {
        BaseSection::deserialize(d)?.into_config().map_err(de::Error::custom)
    }
}

/// Parameter varied across an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    #[default]
    None,
    /// Phase-increment variance applied to both APs and UEs.
    OscillatorVariance { values: Vec<Ratio> },
    /// Per-AP downlink power.
    TransmitPower { values: Vec<Power> },
    AntennaCount { values: Vec<usize> },
    /// Fixed power splits for the rate-splitting schemes.
    Rho { values: Vec<f64> },
}

/// One point of a [`Sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub kind: &'static str,
    pub value: f64,
}

impl Sweep {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::OscillatorVariance { .. } => "oscillator_variance",
            Self::TransmitPower { .. } => "transmit_power",
            Self::AntennaCount { .. } => "antenna_count",
            Self::Rho { .. } => "rho",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::None => 1,
            Self::OscillatorVariance { values } => values.len(),
            Self::TransmitPower { values } => values.len(),
            Self::AntennaCount { values } => values.len(),
            Self::Rho { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let kind = self.kind();
        let values: Vec<f64> = match self {
            Self::None => vec![0.0],
            Self::OscillatorVariance { values } => values.iter().map(|v| v.0).collect(),
            Self::TransmitPower { values } => values.iter().map(|v| v.0).collect(),
            Self::AntennaCount { values } => values.iter().map(|&v| v as f64).collect(),
            Self::Rho { values } => values.clone(),
        };
        values.into_iter().map(|value| SweepPoint { kind, value }).collect()
    }
}

impl SweepPoint {
    /// Config at this point.
    pub fn apply(&self, base: &SystemConfig) -> SystemConfig {
        let mut c = base.clone();
        match self.kind {
            "oscillator_variance" => c.phase_variances = Some(PhaseVariances { ap: self.value, ue: self.value }),
            "transmit_power" => c.downlink_power = self.value,
            "antenna_count" => c.antennas = self.value as usize,
            _ => {}
        }
        c
    }

    /// Power split imposed by the sweep, if any.
    pub fn rho(&self) -> Option<f64> {
        (self.kind == "rho").then_some(self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    #[default]
    Simple,
    Robust,
}

/// One precoding configuration to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub private: PrivateScheme,
    pub transmission: Transmission,
    /// Rate splitting on; the power split comes from the sweep or the
    /// binary search.
    #[serde(default)]
    pub rs: bool,
    #[serde(default)]
    pub common_weights: WeightsMode,
}

impl SchemeSpec {
    pub fn tag(&self) -> String {
        let rs = if self.rs { "rs" } else { "nors" };
        let w = match self.common_weights {
            WeightsMode::Simple => "simple",
            WeightsMode::Robust => "robust",
        };
        format!("{}-{}-{rs}-{w}", self.private.tag(), self.transmission.tag())
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

fn default_schemes() -> Vec<SchemeSpec> {
    vec![SchemeSpec {
        private: PrivateScheme::DuMr,
        transmission: Transmission::Coherent,
        rs: true,
        common_weights: WeightsMode::Simple,
    }]
}

fn default_repetitions() -> usize {
    1
}

fn default_rho_tolerance() -> f64 {
    crate::optimize::DEFAULT_RHO_TOL
}

fn default_bisection_tolerance() -> f64 {
    1e-6
}

/// A complete experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Monte Carlo realizations for cross-checks; 0 keeps everything closed-form.
    #[serde(default)]
    pub mc_realizations: usize,
    /// Topology re-draws; repetition `r` uses seed `base.seed + r`.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    /// Instant of the max-min problem; defaults to the middle of the data phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxmin_instant: Option<usize>,
    #[serde(default = "default_rho_tolerance")]
    pub rho_tolerance: f64,
    #[serde(default = "default_bisection_tolerance")]
    pub bisection_tolerance: f64,
    #[serde(with = "base_serde")]
    pub base: SystemConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeSpec>,
}

impl ExperimentSpec {
    pub fn new(base: SystemConfig) -> Self {
        Self {
            mc_realizations: 0,
            repetitions: 1,
            output_path: None,
            maxmin_instant: None,
            rho_tolerance: default_rho_tolerance(),
            bisection_tolerance: default_bisection_tolerance(),
            base,
            sweep: Sweep::None,
            schemes: default_schemes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.sweep.is_empty() {
            return Err(Error::InvalidConfig("sweep values must not be empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("at least one scheme is required".into()));
        }
        if !(self.rho_tolerance > 0.0 && self.rho_tolerance < 1.0) {
            return Err(Error::InvalidConfig(format!("rho_tolerance must lie in (0, 1), got {}", self.rho_tolerance)));
        }
        if !(self.bisection_tolerance > 0.0) {
            return Err(Error::InvalidConfig("bisection_tolerance must be positive".into()));
        }
        if let Sweep::Rho { values } = &self.sweep {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidConfig(format!("rho sweep value {v} outside [0, 1]")));
            }
        }
        for p in self.sweep.points() {
            p.apply(&self.base).validate()?;
        }
        Ok(())
    }

    /// Topology seed of repetition `r`.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.base.seed.wrapping_add(r as u64)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Parses and validates an experiment from TOML text.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Reads and parses an experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_spec(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}
