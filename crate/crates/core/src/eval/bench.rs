use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{split_by_date, Dataset};
use crate::encode::EncoderConfig;
use crate::model::ModelConfig;
use crate::simulate::{
    generate_weather, perturb_to_observations, simulate_stream_temperature, PerturbParams, SimParams,
    WeatherGenParams,
};
use crate::train::{LrDecay, Phase, TrainConfig};

use super::EvalError;

/// The synthetic benchmark: sites, horizon, generator settings and the
/// train/test boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub sites: usize,
    pub days: usize,
    /// Days from the start that form the training range.
    pub train_days: usize,
    /// Days after the training range that are scored; the rest of the
    /// horizon when absent.
    pub test_days: Option<usize>,
    pub weather: WeatherGenParams,
    pub simulator: SimParams,
    pub perturb: PerturbParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sites: 8,
            days: 2400,
            train_days: 1200,
            test_days: Some(365),
            weather: WeatherGenParams { seed: 2024, ..Default::default() },
            simulator: SimParams::default(),
            perturb: PerturbParams { seed: 2024, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    /// Every generated sample, with simulated and observed labels.
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub train_end: NaiveDate,
}

impl BenchmarkConfig {
    pub fn site_ids(&self) -> Vec<String> {
        (1..=self.sites).map(|i| format!("s{i}")).collect()
    }

    pub fn generate(&self) -> Result<Dataset, EvalError> {
        if self.sites == 0 {
            return Err(EvalError::Argument("benchmark needs at least one site".into()));
        }
        let drivers = generate_weather(&self.site_ids(), self.days, &self.weather)?;
        let sim = simulate_stream_temperature(&drivers, &self.simulator)?;
        Ok(perturb_to_observations(&sim, &self.perturb)?)
    }

    pub fn build(&self) -> Result<Benchmark, EvalError> {
        Benchmark::from_dataset(self.generate()?, self.train_days, self.test_days)
    }
}

impl Benchmark {
    pub fn from_dataset(full: Dataset, train_days: usize, test_days: Option<usize>) -> Result<Self, EvalError> {
        let (start, end) =
            full.date_range().ok_or_else(|| EvalError::Argument("empty dataset".into()))?;
        if train_days == 0 {
            return Err(EvalError::Argument("train_days must be >= 1".into()));
        }
        let train_end = start + Duration::days(train_days as i64 - 1);
        if train_end >= end {
            return Err(EvalError::Argument(format!(
                "training range ends {train_end}, leaving no test days before {end}"
            )));
        }
        let (train, rest) = split_by_date(&full, train_end)?;
        let test = match test_days {
            Some(n) if train_end + Duration::days(n as i64) < end => {
                split_by_date(&rest, train_end + Duration::days(n as i64))?.0
            }
            _ => rest,
        };
        Ok(Self { full, train, test, train_end })
    }

    pub fn restrict(&self, sites: &[String]) -> Self {
        Self {
            full: self.full.filter_sites(sites),
            train: self.train.filter_sites(sites),
            test: self.test.filter_sites(sites),
            train_end: self.train_end,
        }
    }
}

/// Architecture without the vocabulary size, which is fixed by the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelPreset {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub lstm_hidden: usize,
}

impl Default for ModelPreset {
    /// The compact preset used by the experiment protocols.
    fn default() -> Self {
        Self { d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, max_len: 160, lstm_hidden: 32 }
    }
}

impl ModelPreset {
    /// Full-size defaults of the encoder and LSTM.
    pub fn standard() -> Self {
        let e = EncoderConfig::with_vocab(3);
        Self {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_len: e.max_len,
            lstm_hidden: ModelConfig::with_vocab(3).lstm_hidden,
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                d_model: self.d_model,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_ff: self.d_ff,
                max_len: self.max_len,
            },
            lstm_hidden: self.lstm_hidden,
        }
    }
}

/// Settings of the previous-day observation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    /// Fraction of training labels kept for both arms.
    pub label_fraction: f64,
    /// Fraction of test-range observations that may appear in descriptions.
    pub test_observable_fraction: f64,
    /// When set, no previous-day value is ever shown.
    pub withhold_all: bool,
    /// Share of pre-training descriptions that carry the simulated
    /// previous-day value.
    pub pretrain_keep: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { label_fraction: 1.0, test_observable_fraction: 1.0, withhold_all: false, pretrain_keep: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub source_sites: Vec<String>,
    pub target_site: String,
    pub fractions: Vec<f64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            source_sites: (1..=7).map(|i| format!("s{i}")).collect(),
            target_site: "s8".into(),
            fractions: vec![0.01],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub samples_per_season: usize,
    /// Share of each season used to fit the classifier.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { samples_per_season: 100, train_fraction: 0.5 }
    }
}

/// Everything an experiment run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub id: String,
    pub benchmark: BenchmarkConfig,
    pub model: ModelPreset,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Training of the comparison arm that starts from random weights.
    pub scratch: TrainConfig,
    pub include_scratch: bool,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub m_values: Vec<usize>,
    /// Label fraction used by the feature-set protocol.
    pub feature_label_fraction: f64,
    pub aux: AuxConfig,
    pub transfer: TransferConfig,
    pub probe: ProbeConfig,
    /// Parallel run slots.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let finetune = TrainConfig { epochs: 10, batch_size: 1, ..TrainConfig::finetune() };
        Self {
            id: "default".into(),
            benchmark: BenchmarkConfig::default(),
            model: ModelPreset::default(),
            pretrain: TrainConfig {
                phase: Phase::Pretrain,
                epochs: 40,
                batch_size: 1,
                lr_decay: LrDecay::Cosine,
                patience: 40,
                ..TrainConfig::pretrain()
            },
            scratch: TrainConfig { lr: 1e-3, ..finetune.clone() },
            finetune,
            include_scratch: true,
            seeds: (1..=5).collect(),
            fractions: vec![0.01, 0.02, 0.04],
            m_values: vec![0, 4],
            feature_label_fraction: 0.1,
            aux: AuxConfig::default(),
            transfer: TransferConfig::default(),
            probe: ProbeConfig::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.scratch.validate()?;
        if self.seeds.is_empty() {
            return Err(EvalError::Argument("at least one seed is required".into()));
        }
        for &f in self.fractions.iter().chain(&self.transfer.fractions).chain([&self.feature_label_fraction]) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(EvalError::Argument(format!("label fraction {f} outside (0, 1]")));
            }
        }
        if self.workers == 0 {
            return Err(EvalError::Argument("workers must be >= 1".into()));
        }
        Ok(())
    }
}
