//! Flat TOML run configuration with `key=value` overrides.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dsarf::forecast::Assimilation;
use dsarf::synthgen::{LorenzParams, PendulumParams};
use dsarf::{Activation, InitStrategy, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model.
    pub factors: usize,
    pub states: usize,
    pub lags: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub obs_noise: f64,
    pub activation: String,

    // Training.
    pub epochs: usize,
    pub learning_rate: f64,
    pub anneal_start: f64,
    pub anneal_epochs: usize,
    pub mc_samples: usize,
    /// Omit for the automatic choice.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub init: String,
    /// Cut each training sequence into consecutive pieces of this length
    /// (leading remainder dropped). Useful for one long recording.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_chunk: Option<usize>,

    // Split: at most one of these is nonzero.
    pub holdout_sequences: usize,
    pub holdout_steps: usize,

    // Forecasting.
    pub assimilation: String,
    pub assimilation_iterations: usize,
    pub assimilation_learning_rate: f64,
    pub rollouts: usize,
    pub forecast_seed: u64,

    // Simulation.
    pub system: String,
    pub sim_sequences: usize,
    /// Omit for the system's default length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_steps: Option<usize>,
    pub sim_dim: usize,
    pub projection_noise: f64,
    pub lorenz_alpha: f64,
    pub lorenz_beta: f64,
    pub lorenz_gamma: f64,
    pub lorenz_dt: f64,
    pub lorenz_burn_in: usize,
    pub lorenz_init: Vec<f64>,
    pub pendulum_g: f64,
    pub pendulum_dt: f64,
    pub pendulum_stride: usize,
    pub pendulum_init: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(2, 2, 10, vec![1, 2, 3]);
        let train = TrainConfig::default();
        let lorenz = LorenzParams::default();
        let pendulum = PendulumParams::default();
        Self {
            factors: model.factors,
            states: model.states,
            lags: model.lags,
            latent_dim: model.latent_dim,
            hidden: model.hidden,
            obs_noise: model.obs_noise,
            activation: model.activation.name().into(),
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            anneal_start: train.anneal_start,
            anneal_epochs: train.anneal_epochs,
            mc_samples: train.mc_samples,
            batch_size: train.batch_size,
            seed: train.seed,
            init: train.init.name().into(),
            train_chunk: None,
            holdout_sequences: 0,
            holdout_steps: 0,
            assimilation: "conjugate".into(),
            assimilation_iterations: 20,
            assimilation_learning_rate: 0.01,
            rollouts: 50,
            forecast_seed: 0,
            system: "toy".into(),
            sim_sequences: 200,
            sim_steps: None,
            sim_dim: 10,
            projection_noise: 0.0,
            lorenz_alpha: lorenz.alpha,
            lorenz_beta: lorenz.beta,
            lorenz_gamma: lorenz.gamma,
            lorenz_dt: lorenz.dt,
            lorenz_burn_in: 1000,
            lorenz_init: vec![1.0, 1.0, 1.0],
            pendulum_g: pendulum.g,
            pendulum_dt: pendulum.dt,
            pendulum_stride: pendulum.stride,
            pendulum_init: vec![FRAC_PI_2, FRAC_PI_2, 0.0, 0.0],
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Re-applies `overrides` on top of this configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("configuration always serializes");
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train_config()?.validate()?;
        self.assimilation()?;
        if self.holdout_sequences > 0 && self.holdout_steps > 0 {
            bail!("set at most one of holdout_sequences and holdout_steps");
        }
        if self.train_chunk == Some(0) {
            bail!("train_chunk must be positive");
        }
        if self.lorenz_init.len() != 3 {
            bail!("lorenz_init needs 3 values");
        }
        if self.pendulum_init.len() != 4 {
            bail!("pendulum_init needs 4 values (θ1, θ2, θ̇1, θ̇2)");
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.factors, self.states, 1, self.lags.clone());
        cfg.latent_dim = self.latent_dim;
        cfg.hidden = self.hidden;
        cfg.obs_noise = self.obs_noise;
        cfg.activation = Activation::parse(&self.activation).ok_or_else(|| anyhow!("unknown activation {:?}", self.activation))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            anneal_start: self.anneal_start,
            anneal_epochs: self.anneal_epochs,
            mc_samples: self.mc_samples,
            batch_size: self.batch_size,
            seed: self.seed,
            init: InitStrategy::parse(&self.init).ok_or_else(|| anyhow!("unknown init {:?}", self.init))?,
        })
    }

    pub fn assimilation(&self) -> Result<Assimilation> {
        Ok(match self.assimilation.as_str() {
            "conjugate" => Assimilation::Conjugate,
            "gradient" => Assimilation::Gradient {
                iterations: self.assimilation_iterations,
                learning_rate: self.assimilation_learning_rate,
            },
            "none" => Assimilation::None,
            other => bail!("unknown assimilation {other:?} (conjugate, gradient, none)"),
        })
    }

    pub fn lorenz(&self) -> LorenzParams {
        LorenzParams {
            alpha: self.lorenz_alpha,
            beta: self.lorenz_beta,
            gamma: self.lorenz_gamma,
            dt: self.lorenz_dt,
        }
    }

    pub fn pendulum(&self) -> PendulumParams {
        PendulumParams {
            g: self.pendulum_g,
            dt: self.pendulum_dt,
            stride: self.pendulum_stride,
        }
    }
}

/// `key=value` with the value in TOML syntax; bare words are taken as
/// strings, so `--set system=lorenz` works without quotes.
fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override {item:?} is not key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        table.insert(key.to_string(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_table(cfg.to_toml().parse().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_parse_toml_values() {
        let cfg = RunConfig::load(None, &["lags=[1, 2]".into(), "system=lorenz".into(), "batch_size=8".into()]).unwrap();
        assert_eq!(cfg.lags, vec![1, 2]);
        assert_eq!(cfg.system, "lorenz");
        assert_eq!(cfg.batch_size, Some(8));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::load(None, &["factorz=3".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("factorz"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::load(None, &["activation=sigmoid".into()]).is_err());
        assert!(RunConfig::load(None, &["lags=[2, 1]".into()]).is_err());
        assert!(RunConfig::load(None, &["holdout_steps=5".into(), "holdout_sequences=2".into()]).is_err());
    }
}
