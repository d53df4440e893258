//! Run configuration: built-in profiles, TOML files and `--set` overrides.

use std::path::Path;

use dkit::classical::ClassicalConfig;
use dkit::net::NetConfig;
use dkit::oracle::OracleConfig;
use dkit::penalty::PenaltyConfig;
use dkit::problem::{DatasetSpec, Family, Split};
use dkit::train::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub family: Family,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub r_min_range: (f64, f64),
}

impl DatasetSection {
    pub fn spec(&self, split: Split) -> DatasetSpec {
        let count = match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        };
        DatasetSpec {
            family: self.family,
            n: self.n,
            n_eq: self.n_eq,
            n_ineq: self.n_ineq,
            count,
            seed: self.seed,
            r_min_range: self.r_min_range,
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub layers: Vec<usize>,
    pub stages: Vec<usize>,
    /// PGM iterations for the reference subproblem minimizer.
    pub trace_ref_iters: usize,
    /// Test instances used by the subproblem trace.
    pub trace_instances: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            layers: vec![1, 2, 3],
            stages: vec![1, 2, 4, 8],
            trace_ref_iters: 20_000,
            trace_instances: 50,
        }
    }
}

/// Everything a command needs; the serialized form lists every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub classical: ClassicalConfig,
    pub oracle: OracleConfig,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.spec(Split::Train).validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.classical.validate()?;
        self.oracle.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn net(stages: usize, layers: usize, hidden: usize, epsilon: f64) -> NetConfig {
    let penalty = PenaltyConfig { epsilon, ..PenaltyConfig::default() };
    NetConfig { stages, layers, hidden, penalty, alpha_cap: 1e3 / penalty.m, ..NetConfig::default() }
}

fn qp_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr_milestones: vec![50, 100, 150], ..TrainConfig::default() }
}

fn portfolio_train(epochs: usize, lr_beta: f64, milestones: Vec<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_net: 1e-3,
        lr_beta,
        lr_milestones: milestones,
        decay_beta: true,
        beta_optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    }
}

fn dataset(family: Family, n: usize, n_eq: usize, n_ineq: usize, train_count: usize, test_count: usize) -> DatasetSection {
    DatasetSection { family, n, n_eq, n_ineq, train_count, test_count, seed: 2024, r_min_range: (0.05, 0.4) }
}

fn base(dataset: DatasetSection, net: NetConfig, train: TrainConfig) -> RunConfig {
    RunConfig {
        dataset,
        net,
        train,
        classical: ClassicalConfig::default(),
        oracle: OracleConfig::default(),
        ablation: AblationSection::default(),
    }
}

pub const PROFILE_NAMES: &[&str] = &[
    "qp-100",
    "qp-1000",
    "nonconvex-100",
    "portfolio-100",
    "portfolio-800",
    "qp-desk",
    "nonconvex-desk",
    "portfolio-desk",
];

/// Built-in profiles. The `-desk` ones are reduced sizes that train on a
/// laptop CPU in minutes.
pub fn profile(name: &str) -> Option<RunConfig> {
    use Family::*;
    let cfg = match name {
        "qp-100" => base(dataset(Qp, 100, 50, 50, 10_000, 833), net(8, 3, 300, 5e-4), qp_train(150)),
        "qp-1000" => base(dataset(Qp, 1000, 500, 500, 10_000, 833), net(5, 1, 3000, 5e-4), qp_train(300)),
        "nonconvex-100" => base(dataset(Nonconvex, 100, 50, 50, 10_000, 833), net(10, 3, 300, 5e-4), qp_train(150)),
        "portfolio-100" => base(
            dataset(Portfolio, 100, 1, 101, 10_000, 1000),
            net(3, 1, 800, 1e-4),
            portfolio_train(300, 0.1, vec![100, 150, 200]),
        ),
        "portfolio-800" => base(
            dataset(Portfolio, 800, 1, 801, 10_000, 1000),
            net(2, 1, 1200, 1e-4),
            portfolio_train(300, 0.1, vec![100, 150, 200]),
        ),
        "qp-desk" => base(dataset(Qp, 50, 25, 25, 2000, 500), net(8, 3, 150, 5e-4), qp_train(150)),
        "nonconvex-desk" => base(
            dataset(Nonconvex, 50, 25, 25, 2000, 500),
            net(10, 3, 150, 5e-4),
            TrainConfig { grad_clip: Some(1.0), ..qp_train(150) },
        ),
        "portfolio-desk" => base(
            dataset(Portfolio, 50, 1, 51, 6000, 500),
            net(8, 1, 400, 1e-4),
            portfolio_train(100, 0.1, vec![33, 50, 66]),
        ),
        _ => return None,
    };
    Some(cfg)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses one `key.path=value` override; the value is TOML, with bare words
/// taken as strings.
fn override_value(assignment: &str) -> Result<toml::Value, CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .map(|mut t| t.remove("v").expect("key present"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut v = value;
    for key in path.trim().split('.').rev() {
        if key.is_empty() {
            return Err(CliError::Config(format!("override '{assignment}' has an empty key")));
        }
        let mut t = toml::Table::new();
        t.insert(key.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(v)
}

/// Profile, then config file, then overrides, each layered over the last.
pub fn resolve(profile_name: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let prof = profile(profile_name).ok_or_else(|| {
        CliError::Config(format!("unknown profile '{profile_name}' (known: {})", PROFILE_NAMES.join(", ")))
    })?;
    let mut value = toml::Value::try_from(&prof).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(parsed));
    }
    for o in overrides {
        merge(&mut value, override_value(o)?);
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_validates_and_round_trips() {
        for name in PROFILE_NAMES {
            let cfg = profile(name).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = resolve("qp-desk", None, &["train.epochs=3".into(), "net.penalty.m=10.0".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.net.penalty.m, 10.0);
        let cfg = resolve("qp-desk", None, &["net.step=inv_m".into()]).unwrap();
        assert_eq!(cfg.net.step, dkit::net::StepStrategy::InvM);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(resolve("nope", None, &[]), Err(CliError::Config(_))));
        assert!(matches!(resolve("qp-desk", None, &["train.bogus=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(resolve("qp-desk", None, &["train.batch_size=0".into()]), Err(CliError::Config(_))));
    }
}
