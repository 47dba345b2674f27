use std::fmt::Display;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ec_block::{PropagationConfig, RefineConfig};
use crate::error::{Error, Result};
use crate::federation::{
    FederationConfig, Method, ModelDims, PropagationScope, PrototypeDistance, TrainConfig, Weighting,
};
use crate::hypergraph::{Bandwidth, KernelConfig};
use crate::ue_block::{SplitMode, WeightRegConfig};

/// Every knob of one experiment. Serialized as the resolved-config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub client_count: usize,
    pub rounds: usize,
    pub participation: f64,
    pub dirichlet_alpha: f64,

    /// Embeddings CSV; synthetic data when unset.
    pub csv_path: Option<String>,
    pub classes: usize,
    pub feature_dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub spread: f64,
    pub noise_rate: f64,
    pub corruption_rate: f64,
    pub corruption_severity: f64,

    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub prototype_distance: PrototypeDistance,
    pub eta: f64,
    pub zeta: f64,
    pub zeta_mode: SplitMode,
    pub delta: f64,
    pub lambda: f64,
    pub neighbors: usize,
    /// Fixed kernel bandwidth; median heuristic when unset.
    pub sigma: Option<f64>,
    pub propagation_scope: PropagationScope,

    pub hgnn_layers: usize,
    pub deep_dim: usize,
    pub compact_dim: usize,
    pub relational_dim: usize,
    pub estimator_hidden: usize,
    pub expr_dim: usize,

    pub aggregation: Weighting,
    pub broadcast_all: bool,
    pub reset_labels: bool,
    pub checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::UeEc,
            client_count: 10,
            rounds: 100,
            participation: 0.5,
            dirichlet_alpha: 0.5,
            csv_path: None,
            classes: 7,
            feature_dim: 32,
            per_class: 300,
            separation: 2.0,
            spread: 1.0,
            noise_rate: 0.2,
            corruption_rate: 0.0,
            corruption_severity: 0.0,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
            lambda1: 0.8,
            lambda2: 1.0,
            prototype_distance: PrototypeDistance::L1Mean,
            eta: 0.2,
            zeta: 0.7,
            zeta_mode: SplitMode::Fraction,
            delta: 0.6,
            lambda: 0.5,
            neighbors: 10,
            sigma: None,
            propagation_scope: PropagationScope::Batch,
            hgnn_layers: 2,
            deep_dim: 64,
            compact_dim: 64,
            relational_dim: 64,
            estimator_hidden: 32,
            expr_dim: 64,
            aggregation: Weighting::DataSize,
            broadcast_all: false,
            reset_labels: false,
            checkpoint: false,
        }
    }
}

fn range_error(key: &str, value: impl Display, range: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: format!("value {value} outside accepted range {range}"),
    }
}

fn open_unit(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(range_error(key, v, "(0,1)"))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range_error(key, v, "(0,inf)"))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range_error(key, v, "[0,inf)"))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(range_error(key, v, &format!("[{min},inf)")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        at_least("client_count", self.client_count, 1)?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(range_error("participation", self.participation, "(0,1]"));
        }
        positive("dirichlet_alpha", self.dirichlet_alpha)?;
        at_least("classes", self.classes, 2)?;
        at_least("feature_dim", self.feature_dim, 1)?;
        at_least("per_class", self.per_class, 1)?;
        non_negative("separation", self.separation)?;
        non_negative("spread", self.spread)?;
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(range_error("noise_rate", self.noise_rate, "[0,1)"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(range_error("corruption_rate", self.corruption_rate, "[0,1]"));
        }
        non_negative("corruption_severity", self.corruption_severity)?;
        at_least("local_epochs", self.local_epochs, 1)?;
        at_least("batch_size", self.batch_size, 1)?;
        non_negative("learning_rate", self.learning_rate)?;
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("eta", self.eta)?;
        open_unit("zeta", self.zeta)?;
        open_unit("delta", self.delta)?;
        positive("lambda", self.lambda)?;
        at_least("neighbors", self.neighbors, 1)?;
        if let Some(s) = self.sigma {
            positive("sigma", s)?;
        }
        at_least("hgnn_layers", self.hgnn_layers, 1)?;
        for (key, v) in [
            ("deep_dim", self.deep_dim),
            ("compact_dim", self.compact_dim),
            ("relational_dim", self.relational_dim),
            ("estimator_hidden", self.estimator_hidden),
            ("expr_dim", self.expr_dim),
        ] {
            at_least(key, v, 1)?;
        }
        Ok(())
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            neighbor_count: self.neighbors,
            bandwidth: match self.sigma {
                Some(s) => Bandwidth::Fixed(s),
                None => Bandwidth::Median,
            },
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            participation: self.participation,
            weighting: self.aggregation,
            broadcast_all: self.broadcast_all,
            reset_labels: self.reset_labels,
            train: TrainConfig {
                method: self.method,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                local_epochs: self.local_epochs,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                prototype_distance: self.prototype_distance,
                weight_reg: WeightRegConfig {
                    margin: self.eta,
                    certain_fraction: self.zeta,
                    split: self.zeta_mode,
                },
                ue_kernel: self.kernel(),
                propagation: PropagationConfig {
                    lambda: self.lambda,
                    kernel: self.kernel(),
                },
                refine: RefineConfig { threshold: self.delta },
                propagation_scope: self.propagation_scope,
            },
        }
    }

    pub fn dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            deep: self.deep_dim,
            compact: self.compact_dim,
            relational: self.relational_dim,
            estimator_hidden: self.estimator_hidden,
            hgnn_layers: self.hgnn_layers,
            expr: self.expr_dim,
            classes,
        }
    }
}

/// `KEY=VALUE` with the value read as JSON, or as a bare string when it is
/// not valid JSON.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text.split_once('=').ok_or_else(|| Error::Config {
        key: text.to_string(),
        msg: "expected KEY=VALUE".into(),
    })?;
    Ok((key.trim().to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sweep values: `[a,b,c]` expands to a list, anything else is one value.
pub fn parse_sweep_values(raw: &str) -> Vec<Value> {
    let raw = raw.trim();
    if let Some(inner) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(raw) {
            return items;
        }
        return inner.split(',').map(|s| parse_value(s.trim())).collect();
    }
    vec![parse_value(raw)]
}

fn default_object() -> Map<String, Value> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    }
}

fn set_key(doc: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    match doc.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::Config {
            key: key.to_string(),
            msg: "unknown key".into(),
        }),
    }
}

/// Deserializes a merged document, naming the first offending key on a
/// type error, then validates ranges.
pub fn from_document(doc: Map<String, Value>) -> Result<ExperimentConfig> {
    match serde_json::from_value::<ExperimentConfig>(Value::Object(doc.clone())) {
        Ok(cfg) => {
            cfg.validate()?;
            Ok(cfg)
        }
        Err(err) => {
            let defaults = default_object();
            for (key, value) in doc {
                let mut probe = defaults.clone();
                probe.insert(key.clone(), value);
                if let Err(e) = serde_json::from_value::<ExperimentConfig>(Value::Object(probe)) {
                    return Err(Error::Config { key, msg: e.to_string() });
                }
            }
            Err(Error::Config {
                key: "<document>".into(),
                msg: err.to_string(),
            })
        }
    }
}

/// Defaults, then the JSON file (if any), then `KEY=VALUE` overrides.
pub fn resolve_document(path: Option<&Path>, sets: &[(String, Value)]) -> Result<Map<String, Value>> {
    let mut doc = default_object();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "--config".into(),
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        if !text.trim().is_empty() {
            let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
                key: "--config".into(),
                msg: format!("{} is not valid JSON: {e}", path.display()),
            })?;
            let Value::Object(map) = parsed else {
                return Err(Error::Config {
                    key: "--config".into(),
                    msg: "top level must be a JSON object".into(),
                });
            };
            for (k, v) in map {
                set_key(&mut doc, &k, v)?;
            }
        }
    }
    for (k, v) in sets {
        set_key(&mut doc, k, v.clone())?;
    }
    Ok(doc)
}

pub fn parse_config(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let sets = sets.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    from_document(resolve_document(path, &sets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "").unwrap();
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), ExperimentConfig::default());
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn protocol_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.client_count, c.rounds, c.batch_size, c.neighbors, c.hgnn_layers), (10, 100, 32, 10, 2));
        assert_eq!((c.participation, c.learning_rate), (0.5, 0.1));
        assert_eq!((c.eta, c.zeta, c.delta, c.lambda1, c.lambda2), (0.2, 0.7, 0.6, 0.8, 1.0));
    }

    #[test]
    fn single_override_changes_one_field() {
        let c = parse_config(None, &["dirichlet_alpha=5".into()]).unwrap();
        let expected = ExperimentConfig {
            dirichlet_alpha: 5.0,
            ..ExperimentConfig::default()
        };
        assert_eq!(c, expected);
        let c = parse_config(None, &["method=baseline".into()]).unwrap();
        assert_eq!(c.method, Method::Baseline);
    }

    #[test]
    fn range_error_names_key_and_range() {
        let err = parse_config(None, &["zeta=1.5".into()]).unwrap_err().to_string();
        assert!(err.contains("zeta") && err.contains("(0,1)"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let err = parse_config(None, &["zeta_typo=0.5".into()]).unwrap_err().to_string();
        assert!(err.contains("zeta_typo") && err.contains("unknown"), "{err}");
        let err = parse_config(None, &["rounds=many".into()]).unwrap_err().to_string();
        assert!(err.contains("`rounds`"), "{err}");
        let err = parse_config(None, &["method=best".into()]).unwrap_err().to_string();
        assert!(err.contains("`method`"), "{err}");
        assert!(parse_config(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = parse_config(None, &["seed=9".into(), "sigma=0.5".into(), "method=ue".into()]).unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        std::fs::write(&p, text).unwrap();
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn sweep_lists() {
        assert_eq!(
            parse_sweep_values("[baseline,ue,ue_ec]"),
            vec![Value::from("baseline"), Value::from("ue"), Value::from("ue_ec")]
        );
        assert_eq!(parse_sweep_values("[0.5,5]"), vec![Value::from(0.5), Value::from(5)]);
        assert_eq!(parse_sweep_values("3"), vec![Value::from(3)]);
    }
}
