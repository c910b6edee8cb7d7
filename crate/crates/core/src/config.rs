//! Run configuration: one JSON file describing the space, latency model,
//! objective, optimizer, and training stages of a run. Every constant
//! defaults to the standard setting, so a minimal config names only the
//! space, the mode, and an evaluator source.

use serde::{Deserialize, Serialize};

use crate::bundled;
use crate::error::{Error, Result};
use crate::latency::LatencyMode;
use crate::objective::ObjectiveConfig;
use crate::supernet::{ToyDatasetConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Tabular,
    Supernet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub throughput_mbps: f64,
    pub bits_per_element: f64,
    pub loss_prob: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            throughput_mbps: 8.0,
            bits_per_element: 32.0,
            loss_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    /// Measured per-block latency table (tabular mode).
    pub table: Option<String>,
    /// Device-power file (flops mode).
    pub device_power: Option<String>,
    pub head_device: String,
    pub tail_device: String,
    pub link: LinkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsngSection {
    pub alpha: f64,
    pub delta_init: f64,
    pub delta_max: f64,
    pub lambda_x: usize,
    pub lambda_theta: usize,
    /// Explicit simplex floor; absent means 1/(D * K_d) per dimension.
    pub theta_min: Option<f64>,
    pub count_redundant_params: bool,
    /// Distribution-update budget as a raw iteration count (tabular
    /// objectives have no dataset, so epochs do not apply).
    pub update_iterations: Option<u64>,
    /// Budget in passes over the evaluation minibatches (supernet mode).
    pub update_epochs: Option<u64>,
    /// Thinning factor for the parameter snapshot trace.
    pub trace_every: u64,
}

impl Default for AsngSection {
    fn default() -> Self {
        AsngSection {
            alpha: 1.5,
            delta_init: 1.0,
            delta_max: 1000.0,
            lambda_x: 2,
            lambda_theta: 2,
            theta_min: None,
            count_redundant_params: true,
            update_iterations: None,
            update_epochs: None,
            trace_every: 1,
        }
    }
}

impl AsngSection {
    pub fn to_asng_config(&self) -> crate::asng::AsngConfig {
        crate::asng::AsngConfig {
            alpha: self.alpha,
            delta_init: self.delta_init,
            delta_max: self.delta_max,
            lambda_theta: self.lambda_theta,
            count_redundant_params: self.count_redundant_params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSection {
    pub scores: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: String,
    pub mode: LatencyMode,
    pub evaluator: EvaluatorKind,
    pub latency: LatencySection,
    pub objective: ObjectiveConfig,
    pub asng: AsngSection,
    pub train: TrainConfig,
    pub tabular: Option<TabularSection>,
    pub dataset: Option<ToyDatasetConfig>,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: String::new(),
            mode: LatencyMode::Tabular,
            evaluator: EvaluatorKind::Tabular,
            latency: LatencySection::default(),
            objective: ObjectiveConfig::default(),
            asng: AsngSection::default(),
            train: TrainConfig::default(),
            tabular: None,
            dataset: None,
            seed: 42,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "config".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.space.is_empty() {
            return Err(Error::config("space", "a space file is required"));
        }
        if self.latency.head_device.is_empty() || self.latency.tail_device.is_empty() {
            return Err(Error::config(
                "latency.head_device/tail_device",
                "both devices must be named",
            ));
        }
        if !(self.latency.link.throughput_mbps > 0.0) {
            return Err(Error::config("latency.link.throughput_mbps", "must be > 0"));
        }
        if !(self.latency.link.bits_per_element > 0.0) {
            return Err(Error::config(
                "latency.link.bits_per_element",
                "must be > 0",
            ));
        }
        if !(0.0..1.0).contains(&self.latency.link.loss_prob) {
            return Err(Error::config("latency.link.loss_prob", "must be in [0, 1)"));
        }
        match self.mode {
            LatencyMode::Tabular if self.latency.table.is_none() => {
                return Err(Error::config("latency.table", "required in tabular mode"));
            }
            LatencyMode::Flops if self.latency.device_power.is_none() => {
                return Err(Error::config(
                    "latency.device_power",
                    "required in flops mode",
                ));
            }
            _ => {}
        }
        self.objective.validate()?;
        self.train.validate()?;
        self.asng.to_asng_config().validate()?;
        if self.asng.lambda_x == 0 {
            return Err(Error::config("asng.lambda_x", "must be positive"));
        }
        if self.asng.trace_every == 0 {
            return Err(Error::config("asng.trace_every", "must be positive"));
        }
        if let Some(floor) = self.asng.theta_min {
            if !(0.0..1.0).contains(&floor) {
                return Err(Error::config("asng.theta_min", "must be in [0, 1)"));
            }
        }
        match self.evaluator {
            EvaluatorKind::Tabular => {
                if self.tabular.is_none() {
                    return Err(Error::config(
                        "tabular.scores",
                        "the tabular evaluator needs a score table",
                    ));
                }
                if self.asng.update_iterations.is_none() {
                    return Err(Error::config(
                        "asng.update_iterations",
                        "tabular objectives take an iteration budget",
                    ));
                }
            }
            EvaluatorKind::Supernet => {
                if self.dataset.is_none() {
                    return Err(Error::config(
                        "dataset",
                        "the supernet evaluator needs a dataset block",
                    ));
                }
                self.dataset.as_ref().unwrap().validate()?;
                if self.asng.update_iterations.is_none() && self.asng.update_epochs.is_none() {
                    return Err(Error::config(
                        "asng.update_epochs",
                        "supernet mode takes an epoch or iteration budget",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hash over every semantically meaningful field: the canonical (sorted
    /// key) JSON with the output directory removed, digested by FNV-1a.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out");
        }
        let canonical = canonical_json(&value);
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

/// Resolve a data-source string: `bundled:<name>` for compiled-in assets,
/// anything else as a filesystem path.
pub fn resolve_source(source: &str) -> Result<String> {
    if let Some(name) = source.strip_prefix("bundled:") {
        return bundled::get(name)
            .map(str::to_string)
            .ok_or_else(|| Error::config("source", format!("unknown bundled asset '{name}'")));
    }
    std::fs::read_to_string(source)
        .map_err(|e| Error::config("source", format!("cannot read '{source}': {e}")))
}

fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let fields: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", k, canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", fields.join(","))
        }
        serde_json::Value::Array(items) => {
            let fields: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", fields.join(","))
        }
        other => other.to_string(),
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_validate() {
        for name in ["config/toy-tabular", "config/toy-supernet", "config/fbnet-flops"] {
            let config = RunConfig::from_json(bundled::get(name).unwrap())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            config.validate().unwrap();
        }
    }

    #[test]
    fn defaults_carry_the_standard_constants() {
        let config = RunConfig::default();
        assert_eq!(config.asng.alpha, 1.5);
        assert_eq!(config.asng.delta_init, 1.0);
        assert_eq!(config.asng.lambda_x, 2);
        assert_eq!(config.asng.lambda_theta, 2);
        assert_eq!(config.objective.eps_loss, 1.0);
        assert_eq!(config.objective.eps_lat, 1.0);
        assert_eq!(config.latency.link.throughput_mbps, 8.0);
        assert_eq!(config.latency.link.bits_per_element, 32.0);
        assert_eq!(
            config.objective.dropout_rates,
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
        );
        assert_eq!(config.objective.train_dropout_rate, 0.5);
    }

    #[test]
    fn zero_throughput_is_rejected_before_any_work() {
        let mut config =
            RunConfig::from_json(bundled::get("config/toy-tabular").unwrap()).unwrap();
        config.latency.link.throughput_mbps = 0.0;
        let err = config.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("throughput"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_json(r#"{ "space": "x", "typo_field": 1 }"#).unwrap_err();
        assert!(err.to_string().contains("typo_field"));
    }

    #[test]
    fn hash_changes_iff_meaningful_fields_change() {
        let base = RunConfig::from_json(bundled::get("config/toy-tabular").unwrap()).unwrap();
        let h0 = base.hash();
        assert_eq!(h0, base.clone().hash());

        let mut out_changed = base.clone();
        out_changed.out = Some("elsewhere".into());
        assert_eq!(h0, out_changed.hash());

        let mut seed_changed = base.clone();
        seed_changed.seed = 43;
        assert_ne!(h0, seed_changed.hash());

        let mut threshold_changed = base.clone();
        threshold_changed.objective.t_th_ms = 13.0;
        assert_ne!(h0, threshold_changed.hash());
    }

    #[test]
    fn resolve_bundled_and_missing_sources() {
        assert!(resolve_source("bundled:space/toy-tabular").is_ok());
        assert!(resolve_source("bundled:space/nope").is_err());
        assert!(resolve_source("/definitely/not/a/file.json").is_err());
    }
}
