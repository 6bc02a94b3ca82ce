//! Run configuration, read from a JSON file.
//!
//! Every numeric field accepts either a JSON number or a decimal string
//! (`"64"`, `"1.1875"`). Integer fields reject fractional values.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::engine::IterationCaps;
use crate::error::{Error, Result};
use crate::grid::ImageMode;
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};
use crate::search::{RegionPolicy, SearchConfig};

mod num {
    use super::*;

    struct Lenient<T>(T);

    impl<'de, T> Deserialize<'de> for Lenient<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
            let text = match serde_json::Value::deserialize(d)? {
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::String(s) => s,
                other => return Err(serde::de::Error::custom(format!("expected a number, got {other}"))),
            };
            text.trim()
                .parse()
                .map(Lenient)
                .map_err(|e| serde::de::Error::custom(format!("invalid number {text:?}: {e}")))
        }
    }

    pub fn one<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Lenient::<T>::deserialize(d).map(|v| v.0)
    }

    pub fn opt<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(Option::<Lenient<T>>::deserialize(d)?.map(|v| v.0))
    }

    pub fn vec<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(Vec::<Lenient<T>>::deserialize(d)?.into_iter().map(|v| v.0).collect())
    }

    pub fn mat<'de, D, T>(d: D) -> std::result::Result<Vec<Vec<T>>, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(Vec::<Vec<Lenient<T>>>::deserialize(d)?
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.0).collect())
            .collect())
    }
}

/// The shaping filter, either as a rational transfer function or as a
/// realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Coefficients from the highest power of `z` down.
    TransferFunction {
        #[serde(deserialize_with = "num::vec")]
        num: Vec<f64>,
        #[serde(deserialize_with = "num::vec")]
        den: Vec<f64>,
    },
    /// Row-major `A`, column `B`, row `C`.
    Matrices {
        #[serde(deserialize_with = "num::mat")]
        a: Vec<Vec<f64>>,
        #[serde(deserialize_with = "num::vec")]
        b: Vec<f64>,
        #[serde(deserialize_with = "num::vec")]
        c: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<SystemModel> {
        match self {
            ModelSpec::TransferFunction { num, den } => SystemModel::canonical_realization(num, den),
            ModelSpec::Matrices { a, b, c } => SystemModel::from_rows(a, b, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    #[serde(deserialize_with = "num::one")]
    pub gamma_lo: f64,
    #[serde(deserialize_with = "num::one")]
    pub gamma_hi: f64,
    #[serde(deserialize_with = "num::one")]
    pub tol_gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsSpec {
    #[serde(deserialize_with = "num::one")]
    pub max_iters: usize,
    #[serde(deserialize_with = "num::one")]
    pub tile_cap: u64,
    /// `None` uses the sum of the positive stage payoffs, which no
    /// convergent iteration can exceed.
    #[serde(deserialize_with = "num::opt")]
    pub divergence_threshold: Option<f64>,
    #[serde(deserialize_with = "num::one")]
    pub conv_tol: f64,
    #[serde(deserialize_with = "num::one")]
    pub memory_cap_bytes: u64,
    /// Tile layers added per face on each region expansion.
    #[serde(deserialize_with = "num::one")]
    pub growth: i64,
    #[serde(deserialize_with = "num::one")]
    pub max_expansions: usize,
}

impl Default for CapsSpec {
    fn default() -> Self {
        let it = IterationCaps::default();
        let rp = RegionPolicy::default();
        Self {
            max_iters: it.max_iters,
            tile_cap: rp.tile_cap,
            divergence_threshold: it.divergence_threshold,
            conv_tol: it.conv_tol,
            memory_cap_bytes: crate::engine::TableOptions::default().memory_cap_bytes,
            growth: rp.growth,
            max_expansions: rp.max_expansions,
        }
    }
}

/// An explicit starting box for the tile region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    #[serde(deserialize_with = "num::vec")]
    pub lo: Vec<f64>,
    #[serde(deserialize_with = "num::vec")]
    pub hi: Vec<f64>,
}

/// Replaces the derived invariant set by `{x : |normal · x| <= halfwidth}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripSpec {
    #[serde(deserialize_with = "num::vec")]
    pub normal: Vec<f64>,
    #[serde(deserialize_with = "num::one")]
    pub halfwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    FirstOrderDsm,
    /// Always emits the level nearest 0 (0 itself when it is a level).
    ConstantZero,
    /// Emits the same level every step.
    Constant(#[serde(deserialize_with = "num::one")] f64),
}

impl AdversarySpec {
    pub fn label(&self) -> String {
        match self {
            AdversarySpec::FirstOrderDsm => "first_order_dsm".into(),
            AdversarySpec::ConstantZero => "constant_zero".into(),
            AdversarySpec::Constant(v) => format!("constant({v})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(deserialize_with = "num::one")]
    pub horizon: usize,
    pub adversaries: Vec<AdversarySpec>,
    /// Rows of per-step trace written per adversary; 0 disables traces.
    #[serde(deserialize_with = "num::one")]
    pub trace_rows: usize,
    /// Allowed shortfall of the simulated average below the certified bound.
    #[serde(deserialize_with = "num::one")]
    pub tolerance: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            horizon: 100_000,
            adversaries: vec![AdversarySpec::FirstOrderDsm, AdversarySpec::ConstantZero],
            trace_rows: 0,
            tolerance: 0.05,
        }
    }
}

fn default_eps0() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(deserialize_with = "num::vec")]
    pub alphabet: Vec<f64>,
    pub penalty: Penalty,
    /// Grid density; tiles have side `1/D`.
    #[serde(rename = "D", deserialize_with = "num::one")]
    pub d: u32,
    pub search: SearchSpec,
    #[serde(default)]
    pub caps: CapsSpec,
    #[serde(default)]
    pub region: Option<BoxSpec>,
    #[serde(default)]
    pub strip: Option<StripSpec>,
    /// Margin above `γ` defining the seed region.
    #[serde(default = "default_eps0", deserialize_with = "num::one")]
    pub eps0: f64,
    #[serde(default)]
    pub image_mode: ImageMode,
    /// Fixed certificate slack; derived per probe when absent.
    #[serde(default, deserialize_with = "num::opt")]
    pub eta: Option<f64>,
    #[serde(default)]
    pub simulation: SimulationSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(reason) => Error::Parse {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    /// Checks everything that can be checked without building tables.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("D must be at least 1".into()));
        }
        self.alphabet()?;
        let model = self.model.build()?;
        self.search_config().validate()?;
        let c = &self.caps;
        if c.tile_cap == 0 || c.growth < 1 || c.memory_cap_bytes == 0 {
            return Err(Error::Config("tile_cap, growth and memory_cap_bytes must be positive".into()));
        }
        if let Some(t) = c.divergence_threshold {
            if !(t > 0.0) {
                return Err(Error::Config("divergence_threshold must be positive".into()));
            }
        }
        if !(self.eps0 > 0.0) || !self.eps0.is_finite() {
            return Err(Error::Config("eps0 must be positive".into()));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0) || !eta.is_finite() {
                return Err(Error::Config("eta must be a nonnegative number".into()));
            }
        }
        let m = model.dim();
        if let Some(b) = &self.region {
            if b.lo.len() != m || b.hi.len() != m {
                return Err(Error::Config(format!("region box must have {m} coordinates")));
            }
            if b.lo.iter().zip(&b.hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::Config("region box bounds must be finite and ordered".into()));
            }
        }
        if let Some(s) = &self.strip {
            if s.normal.len() != m {
                return Err(Error::Config(format!("strip normal must have {m} coordinates")));
            }
        }
        let alphabet = self.alphabet()?;
        for a in &self.simulation.adversaries {
            if let AdversarySpec::Constant(v) = a {
                if !alphabet.contains(*v) {
                    return Err(Error::Config(format!("constant adversary level {v} is not in the alphabet")));
                }
            }
        }
        if self.simulation.horizon == 0 {
            return Err(Error::Config("simulation horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Result<QuantizerAlphabet> {
        QuantizerAlphabet::new(self.alphabet.clone())
    }

    pub fn iteration_caps(&self) -> IterationCaps {
        IterationCaps {
            max_iters: self.caps.max_iters,
            divergence_threshold: self.caps.divergence_threshold,
            conv_tol: self.caps.conv_tol,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            gamma_lo: self.search.gamma_lo,
            gamma_hi: self.search.gamma_hi,
            tol_gamma: self.search.tol_gamma,
            caps: self.iteration_caps(),
            eta: self.eta,
        }
    }

    pub fn region_policy(&self) -> RegionPolicy {
        RegionPolicy {
            tile_cap: self.caps.tile_cap,
            growth: self.caps.growth,
            max_expansions: self.caps.max_expansions,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
