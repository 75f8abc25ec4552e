//! Run configuration: a flat TOML file of `key = value` lines.
//!
//! Run keys are listed in [`RUN_KEYS`]; every other key must be a
//! [`Hyperparams`] field. Unset hyperparameters take data-driven defaults.

use std::path::Path;

use npmix::model::{Dataset, Hyperparams};
use npmix::sampler::SweepPlan;
use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{input, CliError, CliResult, Context};

pub const RUN_KEYS: [&str; 7] = ["iters", "burnin", "thin", "seed", "threads", "mh_step", "adapt_mh"];

/// Hyperparameter fields holding one value per data coordinate.
const VECTOR_KEYS: [&str; 4] = ["mu0", "eta", "sigma0", "iw_scale"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunControls {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_mh_step")]
    pub mh_step: f64,
    #[serde(default = "default_adapt")]
    pub adapt_mh: bool,
}

fn default_iters() -> usize {
    2000
}
fn default_burnin() -> usize {
    1000
}
fn default_thin() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_threads() -> usize {
    1
}
fn default_mh_step() -> f64 {
    0.5
}
fn default_adapt() -> bool {
    true
}

impl RunControls {
    pub fn validate(&self) -> CliResult<()> {
        if self.iters <= self.burnin {
            return input(format!("iters ({}) must exceed burnin ({})", self.iters, self.burnin));
        }
        if self.thin == 0 {
            return input("thin must be at least 1");
        }
        Ok(())
    }

    pub fn plan(&self) -> SweepPlan {
        let mut plan = if self.threads == 1 { SweepPlan::sequential() } else { SweepPlan::parallel(self.threads) };
        plan.mh_step = self.mh_step;
        plan.adapt_mh = self.adapt_mh;
        plan.with_env_override()
    }
}

/// Parsed configuration before it meets the data.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub run: Table,
    pub model: Table,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Input(e.to_string()))?;
        let mut cfg = Self::default();
        for (k, v) in table {
            cfg.set(&k, v);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        if RUN_KEYS.contains(&key) {
            self.run.insert(key.to_string(), value);
        } else {
            self.model.insert(key.to_string(), value);
        }
    }

    /// Apply a `KEY=VALUE` override; the value is read as TOML, falling back to a string.
    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return input(format!("--set expects KEY=VALUE, got '{assignment}'"));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return input(format!("--set expects KEY=VALUE, got '{assignment}'"));
        }
        let value = format!("v = {v}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(v.to_string()));
        self.set(k, value);
        Ok(())
    }

    pub fn run_controls(&self) -> CliResult<RunControls> {
        let rc: RunControls = Value::Table(self.run.clone()).try_into().map_err(|e: toml::de::Error| CliError::Input(format!("config: {e}")))?;
        rc.validate()?;
        Ok(rc)
    }

    /// The number of components: the `k` key, which is required.
    pub fn k(&self) -> CliResult<usize> {
        match self.model.get("k") {
            Some(Value::Integer(k)) if *k >= 1 => Ok(*k as usize),
            Some(v) => input(format!("config: k must be a positive integer, got {v}")),
            None => input("the number of components is required (-k or `k = ...` in the config)"),
        }
    }

    /// Data-driven defaults overlaid with the configured keys.
    pub fn hyperparams(&self, data: &Dataset) -> CliResult<Hyperparams> {
        let k = self.k()?;
        let defaults = Hyperparams::for_data(data, k);
        let mut table = Table::try_from(&defaults).map_err(|e| CliError::Input(format!("config: {e}")))?;
        for (key, v) in &self.model {
            let v = match v {
                // A bare number stands for a one-element vector in 1-D.
                Value::Integer(_) | Value::Float(_) if VECTOR_KEYS.contains(&key.as_str()) => Value::Array(vec![v.clone()]),
                _ => v.clone(),
            };
            table.insert(key.clone(), v);
        }
        let hp: Hyperparams = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Input(format!("config: {e}")))?;
        if hp.dim != data.dim() {
            return input(format!("config sets dim = {} but the data have {} columns", hp.dim, data.dim()));
        }
        hp.validate()?;
        Ok(hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        Dataset::from_scalars(&[-1.0, 0.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn overlay_and_defaults() {
        let cfg = RawConfig::parse("k = 2\niters = 30\nburnin = 10\ntau = 3.5\nmu0 = 1.0\nsigma0 = [0.25]\n").unwrap();
        let rc = cfg.run_controls().unwrap();
        assert_eq!((rc.iters, rc.burnin, rc.thin, rc.seed), (30, 10, 1, 1));
        let hp = cfg.hyperparams(&data()).unwrap();
        let defaults = Hyperparams::for_data(&data(), 2);
        assert_eq!(hp.tau, 3.5);
        assert_eq!(hp.mu0, vec![1.0]);
        assert_eq!(hp.sigma0, vec![0.25]);
        assert_eq!(hp.eta, defaults.eta);
        assert_eq!(hp.dirichlet_conc, None);
    }

    #[test]
    fn unknown_keys_fail() {
        let cfg = RawConfig::parse("k = 2\ntua = 3.5\n").unwrap();
        let err = cfg.hyperparams(&data()).unwrap_err();
        assert!(err.to_string().contains("tua"), "{err}");
        assert!(RawConfig::parse("not toml at all = = 1").is_err());
    }

    #[test]
    fn fixed_regions_and_overrides() {
        let mut cfg = RawConfig::parse(
            "k = 2\nregions_fixed = true\nfixed_regions = [{ center = [-1], halfwidth = 1 }, { center = [3], halfwidth = 1 }]\n",
        )
        .unwrap();
        cfg.set_assignment("separation_axis=location").unwrap();
        cfg.set_assignment("dirichlet_conc = 0.5").unwrap();
        cfg.set_assignment("seed=9").unwrap();
        let hp = cfg.hyperparams(&data()).unwrap();
        assert_eq!(hp.fixed_regions.len(), 2);
        assert_eq!(hp.fixed_regions[1].center, vec![3.0]);
        assert_eq!(hp.dirichlet_conc, Some(0.5));
        assert_eq!(cfg.run_controls().unwrap().seed, 9);

        cfg.set_assignment("k=3").unwrap();
        assert!(cfg.hyperparams(&data()).is_err());
        assert!(cfg.set_assignment("novalue").is_err());
    }

    #[test]
    fn run_controls_are_checked() {
        assert!(RawConfig::parse("iters = 10\nburnin = 10").unwrap().run_controls().is_err());
        assert!(RawConfig::parse("thin = 0").unwrap().run_controls().is_err());
        assert!(RawConfig::parse("k = 0").unwrap().k().is_err());
        assert!(RawConfig::default().k().is_err());
    }
}
