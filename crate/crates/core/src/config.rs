//! Training configuration: TOML files plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{AffinityNorm, Shape3};
use crate::error::{Error, Result};
use crate::losses::{LossOptions, LossWeights};
use crate::network::TDNetConfig;

/// Floating-point type used for parameters and activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory containing `manifest.json`.
    pub dataset: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the run record.
    pub output_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub t_max: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub patch_size: Shape3,
    pub alpha: f64,
    pub beta: f64,
    pub uncertainty_weighting: bool,
    pub mpcc: bool,
    pub affinity_norm: AffinityNorm,
    /// Iterations between validations; 0 selects `max(t_max / 20, 100)`.
    pub validation_interval: usize,
    /// Sliding-window stride at validation; defaults to half the patch.
    pub inference_stride: Option<Shape3>,
    pub network: TDNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("runs/tdnet"),
            seed: 0,
            precision: Precision::F32,
            t_max: 60_000,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            batch_size: 1,
            patch_size: [80, 96, 96],
            alpha: 10.0,
            beta: 1.0,
            uncertainty_weighting: true,
            mpcc: true,
            affinity_norm: AffinityNorm::L1,
            validation_interval: 0,
            inference_stride: None,
            network: TDNetConfig::default(),
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl TrainConfig {
    /// Reads a TOML file (if given), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_error("config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Table = text.parse().map_err(|e: toml::de::Error| config_error("config", e.to_string()))?;
        let defaults = Value::try_from(TrainConfig::default()).expect("defaults serialize");
        for o in overrides {
            apply_override(&mut user, defaults.as_table().expect("table"), o)?;
        }
        let explicit_lists = user
            .get("network")
            .and_then(Value::as_table)
            .map(|n| (n.contains_key("dilation_rates"), n.contains_key("init_schemes")))
            .unwrap_or((false, false));
        let mut cfg: TrainConfig = Value::Table(user)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(&unknown_key(&e), e.message().to_string()))?;
        // a changed decoder count resizes the per-decoder lists unless they were given
        let net = &mut cfg.network;
        let (rates, inits) = (net.dilation_rates.clone(), net.init_schemes.clone());
        net.fit_lists_to_decoders();
        if explicit_lists.0 {
            net.dilation_rates = rates;
        }
        if explicit_lists.1 {
            net.init_schemes = inits;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate().map_err(|e| match e {
            Error::Config { key, message } => config_error(&format!("network.{key}"), message),
            other => other,
        })?;
        let positive = [
            ("lr0", self.lr0),
            ("poly_power", self.poly_power),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(key, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(key, format!("must be non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(config_error("momentum", "must be below 1"));
        }
        if self.t_max < 1 {
            return Err(config_error("t_max", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(config_error("batch_size", "must be at least 1"));
        }
        let div = self.network.size_divisor();
        if let Some(axis) = (0..3).find(|&a| self.patch_size[a] == 0 || self.patch_size[a] % div != 0) {
            return Err(config_error(
                "patch_size",
                format!("axis {axis} size {} must be a positive multiple of {div}", self.patch_size[axis]),
            ));
        }
        if let Some(stride) = self.inference_stride {
            if (0..3).any(|a| stride[a] == 0 || stride[a] > self.patch_size[a]) {
                return Err(config_error("inference_stride", "each axis must be in 1..=patch_size"));
            }
        }
        Ok(())
    }

    /// The dataset directory, or a config error naming `dataset`.
    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| config_error("dataset", "a dataset directory is required"))
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            uncertainty_weighting: self.uncertainty_weighting,
            mpcc: self.mpcc,
            affinity_norm: self.affinity_norm,
        }
    }

    pub fn loss_weights(&self, t: usize) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            t,
            t_max: self.t_max,
        }
    }

    pub fn validation_every(&self) -> usize {
        if self.validation_interval > 0 {
            self.validation_interval
        } else {
            (self.t_max / 20).max(100)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn unknown_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string())
}

/// Applies `key=value`. Dotted keys address nested tables; an undotted key that is
/// not a top-level field resolves to the unique nested table that has it.
fn apply_override(user: &mut Table, defaults: &Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.len() == 1 && !defaults.contains_key(key) {
        let owners: Vec<&String> = defaults
            .iter()
            .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(k, _)| k)
            .collect();
        // unknown top-level keys are reported during deserialization
        match owners.as_slice() {
            [one] => path.insert(0, (*one).clone()),
            [] => {}
            _ => return Err(config_error(key, "ambiguous key; use a dotted path")),
        }
    }
    let value = parse_value(raw);
    let mut table = user;
    for seg in &path[..path.len() - 1] {
        let entry = table.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(key, format!("`{seg}` is not a table")))?;
    }
    table.insert(path.last().expect("non-empty").clone(), value);
    Ok(())
}

/// TOML literal if it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_validate() {
        let cfg = TrainConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.validation_every(), 3000);
        let short = TrainConfig { t_max: 10, ..cfg };
        assert_eq!(short.validation_every(), 100);
    }

    #[test]
    fn baseline_override_shrinks_decoder_lists() {
        let cfg = TrainConfig::from_toml_str("", &overrides(&["num_decoders=1", "alpha=0", "beta=0"])).unwrap();
        assert_eq!(cfg.network.num_decoders, 1);
        assert_eq!(cfg.network.dilation_rates, vec![1]);
        assert_eq!(cfg.alpha, 0.0);
    }

    #[test]
    fn same_dilation_override() {
        let cfg = TrainConfig::from_toml_str("", &overrides(&["dilation_rates=[1,1,1]", "uncertainty_weighting=false"])).unwrap();
        assert_eq!(cfg.network.dilation_rates, vec![1, 1, 1]);
        assert!(!cfg.uncertainty_weighting);
        let cfg = TrainConfig::from_toml_str("", &overrides(&["network.num_decoders=4"])).unwrap();
        assert_eq!(cfg.network.dilation_rates, vec![1, 3, 6, 9]);
    }

    #[test]
    fn explicit_list_length_mismatch_names_key() {
        let err = TrainConfig::from_toml_str("", &overrides(&["num_decoders=2", "dilation_rates=[1,2,3]"])).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "network.dilation_rates"), "{err}");
    }

    #[test]
    fn file_and_override_precedence() {
        let text = "t_max = 500\ndataset = \"/data/x\"\n[network]\nbase_channels = 8\ndepth = 4\n";
        let cfg = TrainConfig::from_toml_str(text, &overrides(&["t_max=20", "patch_size=[32,32,32]"])).unwrap();
        assert_eq!(cfg.t_max, 20);
        assert_eq!(cfg.network.base_channels, 8);
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("/data/x")));
        let cfg = TrainConfig::from_toml_str("", &overrides(&["dataset=/tmp/ds", "output_dir=runs/a"])).unwrap();
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("/tmp/ds")));
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |r: Result<TrainConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(key_of(TrainConfig::from_toml_str("", &overrides(&["lr0=0"]))), "lr0");
        assert_eq!(key_of(TrainConfig::from_toml_str("", &overrides(&["bogus=1"]))), "bogus");
        assert_eq!(key_of(TrainConfig::from_toml_str("bogus = 1", &[])), "bogus");
        assert_eq!(key_of(TrainConfig::from_toml_str("", &overrides(&["patch_size=[30,32,32]"]))), "patch_size");
        assert_eq!(key_of(TrainConfig::from_toml_str("", &overrides(&["network.depth=1"]))), "network.depth");
        assert_eq!(key_of(Ok(TrainConfig::default()).and_then(|c| c.require_dataset().map(|_| c.clone()))), "dataset");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = TrainConfig::from_toml_str("", &overrides(&["mpcc=false", "affinity_norm=\"frobenius\""])).unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.affinity_norm, AffinityNorm::Frobenius);
    }
}
