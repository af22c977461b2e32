use std::path::Path;

use anyhow::{Context, Result};
use free_core::describe::PromptConfig;
use free_core::eval::{AuxConfig, BenchmarkConfig, ExperimentConfig, ModelPreset, ProbeConfig, TransferConfig};
use free_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Experiment-only settings of [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub id: String,
    pub include_scratch: bool,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub m_values: Vec<usize>,
    pub feature_label_fraction: f64,
    pub aux: AuxConfig,
    pub transfer: TransferConfig,
    pub probe: ProbeConfig,
    pub workers: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            id: d.id,
            include_scratch: d.include_scratch,
            seeds: d.seeds,
            fractions: d.fractions,
            m_values: d.m_values,
            feature_label_fraction: d.feature_label_fraction,
            aux: d.aux,
            transfer: d.transfer,
            probe: d.probe,
            workers: d.workers,
        }
    }
}

/// Every setting a subcommand may read. Loaded from one JSON file; keys
/// left out take their defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub benchmark: BenchmarkConfig,
    pub prompt: PromptConfig,
    pub model: ModelPreset,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub scratch: TrainConfig,
    pub experiment: ExperimentSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            benchmark: d.benchmark,
            prompt: PromptConfig::default(),
            model: d.model,
            pretrain: d.pretrain,
            finetune: d.finetune,
            scratch: d.scratch,
            experiment: ExperimentSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Routes `--seed` into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.benchmark.weather.seed = seed;
        self.benchmark.perturb.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.scratch.seed = seed;
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let e = self.experiment.clone();
        ExperimentConfig {
            id: e.id,
            benchmark: self.benchmark.clone(),
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            scratch: self.scratch.clone(),
            include_scratch: e.include_scratch,
            seeds: e.seeds,
            fractions: e.fractions,
            m_values: e.m_values,
            feature_label_fraction: e.feature_label_fraction,
            aux: e.aux,
            transfer: e.transfer,
            probe: e.probe,
            workers: e.workers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_mirror_experiment_defaults() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.experiment_config(), ExperimentConfig::default());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"pretrain": {"epochs": 3}, "experiment": {"seeds": [7]}}"#).unwrap();
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.pretrain.lr, RunConfig::default().pretrain.lr);
        assert_eq!(c.experiment.seeds, vec![7]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"pretrian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"pretrain": {"epoch": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"benchmark": {"weather": {"sead": 1}}}"#).is_err());
    }
}
