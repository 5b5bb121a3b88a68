use std::path::Path;

use dymesh_core::eval::SWEEP_RATIOS;
use dymesh_core::flow::{FlowConfig, FlowTrainConfig};
use dymesh_core::numerics::LrSchedule;
use dymesh_core::text::TextProviderConfig;
use dymesh_core::vae::{VaeConfig, VaeTrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Window length in frames.
    pub window: usize,
    /// Frame-0 merge tolerance; 0 merges only bit-equal positions.
    pub merge_tol: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 16,
            merge_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ratios: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratios: SWEEP_RATIOS.to_vec(),
        }
    }
}

/// Every tunable of every command. Defaults are the desk-scale presets;
/// the full-size architecture is reachable by overriding fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
    pub text: TextProviderConfig,
    pub eval: EvalConfig,
    /// Steps between periodic checkpoint writes during training.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let flow = FlowConfig::desk();
        Self {
            dataset: DatasetConfig::default(),
            vae: VaeConfig::desk(),
            vae_train: VaeTrainConfig {
                lr: 1e-3,
                token_ratio: Some((1.0 / 32.0, 0.5)),
                schedule: LrSchedule::Cosine,
                ..VaeTrainConfig::default()
            },
            text: TextProviderConfig::Stub {
                width: flow.text_dim,
                seed: 0,
            },
            flow,
            flow_train: FlowTrainConfig {
                lr: 1e-3,
                schedule: LrSchedule::Cosine,
                ..FlowTrainConfig::default()
            },
            eval: EvalConfig::default(),
            checkpoint_every: 50,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| CliError::input(format!("configuration: {m}"));
        self.vae.validate().map_err(|e| bad(e.to_string()))?;
        self.flow.validate().map_err(|e| bad(e.to_string()))?;
        if self.dataset.window == 0 {
            return Err(bad("dataset.window must be positive".into()));
        }
        if !(self.dataset.merge_tol >= 0.0) {
            return Err(bad("dataset.merge_tol must be non-negative".into()));
        }
        if self.flow.shape_dim != self.vae.hidden_dim
            || self.flow.latent_channels != self.vae.latent_channels
        {
            return Err(bad(format!(
                "flow expects shape/latent widths {}/{}, the VAE produces {}/{}",
                self.flow.shape_dim,
                self.flow.latent_channels,
                self.vae.hidden_dim,
                self.vae.latent_channels
            )));
        }
        if let TextProviderConfig::Stub { width, .. } = self.text {
            if width != self.flow.text_dim {
                return Err(bad(format!(
                    "text width {width} differs from flow.text_dim {}",
                    self.flow.text_dim
                )));
            }
        }
        if self.eval.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(bad("eval.ratios must lie in (0, 1]".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(bad("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"vae_train": {"steps": 3}}"#).unwrap();
        assert_eq!(cfg.vae_train.steps, 3);
        assert_eq!(cfg.vae, VaeConfig::desk());
    }

    #[test]
    fn unknown_fields_and_width_mismatch_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"vea": {}}"#).is_err());
        let mut cfg = RunConfig::default();
        cfg.flow.shape_dim = 8;
        assert!(matches!(cfg.validate(), Err(CliError::Input(_))));
    }
}
