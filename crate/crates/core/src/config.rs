//! Scenario configuration and SNR conventions.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a dB figure of a per-entry power ratio maps to a noise variance.
///
/// Pilot-corruption and label-noise SNRs are defined on a squared magnitude
/// over a variance but written with a `20 log10` prefactor. `Literal20`
/// applies that definition as written; `Power10` uses the usual power-ratio
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DbConvention {
    #[default]
    Literal20,
    Power10,
}

impl DbConvention {
    /// Variance `σ²` such that `|x|²` over `σ²` reads `snr_db` in this convention.
    /// An infinite SNR yields zero variance.
    pub fn variance(self, entry_power: f64, snr_db: f64) -> f64 {
        if snr_db == f64::INFINITY {
            return 0.0;
        }
        let scale = match self {
            DbConvention::Literal20 => 20.0,
            DbConvention::Power10 => 10.0,
        };
        entry_power * 10f64.powf(-snr_db / scale)
    }
}

/// Noise variance for a received SNR of `10 log10(symbol_power / σ²)`.
pub fn noise_power_for_snr(symbol_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        symbol_power * 10f64.powf(-snr_db / 10.0)
    }
}

fn default_angle_range() -> [f64; 2] {
    [-PI, PI]
}

fn default_symbol_power() -> f64 {
    1.0
}

/// System dimensions, path counts, noise level and seed of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// BS antennas.
    #[serde(rename = "M")]
    pub m: usize,
    /// LIS elements.
    #[serde(rename = "L")]
    pub l: usize,
    /// Single-antenna users.
    #[serde(rename = "K")]
    pub k: usize,
    /// Phase-I pilot count.
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N_D")]
    pub n_d: usize,
    #[serde(rename = "N_A")]
    pub n_a: usize,
    #[serde(rename = "N_H")]
    pub n_h: usize,
    #[serde(default = "default_angle_range")]
    pub angle_range: [f64; 2],
    /// Receiver noise variance σ_n² (linear).
    pub noise_power: f64,
    pub seed: u64,
    /// Per-entry pilot power.
    #[serde(default = "default_symbol_power")]
    pub symbol_power: f64,
    #[serde(default)]
    pub db_convention: DbConvention,
}

impl ScenarioConfig {
    /// The reduced scenario used for desk-scale experiments.
    pub fn desk() -> Self {
        ScenarioConfig {
            m: 16,
            l: 8,
            k: 2,
            p: 16,
            n_d: 10,
            n_a: 10,
            n_h: 10,
            angle_range: default_angle_range(),
            noise_power: 0.0,
            seed: 2020,
            symbol_power: 1.0,
            db_convention: DbConvention::Literal20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("M", self.m),
            ("L", self.l),
            ("K", self.k),
            ("P", self.p),
            ("N_D", self.n_d),
            ("N_A", self.n_a),
            ("N_H", self.n_h),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.p < self.m {
            return Err(Error::config(format!(
                "P = {} must be at least M = {}",
                self.p, self.m
            )));
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return Err(Error::config("noise_power must be finite and nonnegative"));
        }
        if !(self.symbol_power > 0.0 && self.symbol_power.is_finite()) {
            return Err(Error::config("symbol_power must be positive"));
        }
        let [lo, hi] = self.angle_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("angle_range must be a finite [lo, hi] with lo <= hi"));
        }
        Ok(())
    }

    /// Received SNR in dB implied by the configured noise power.
    pub fn snr_db(&self) -> f64 {
        if self.noise_power == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.symbol_power / self.noise_power).log10()
        }
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_power = noise_power_for_snr(self.symbol_power, snr_db);
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Serde adapter for dB values where `null` or `"inf"` means no noise.
pub mod snr_db {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    pub(crate) enum Repr {
        Num(f64),
        Text(String),
        Null(()),
    }

    pub(crate) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Null(()) => Ok(f64::INFINITY),
            Repr::Text(s) if matches!(s.as_str(), "inf" | "+inf" | "infinity") => {
                Ok(f64::INFINITY)
            }
            Repr::Text(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(s) => Err(E::custom(format!("invalid dB value `{s}`"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else if v.is_infinite() {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    /// The same adapter for lists.
    pub mod list {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            struct One(f64);
            impl serde::Serialize for One {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::serialize(&self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&One(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<super::Repr>::deserialize(d)?
                .into_iter()
                .map(super::from_repr)
                .collect()
        }
    }
}
