//! Metrics, experiment protocols and the embedding probe.

mod bench;
mod probe;
mod protocols;
mod report;

use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::linearize::LinearizeError;
use crate::simulate::SimError;
use crate::train::{predict_corpus, Checkpoint, Corpus, LabelSource, TrainError};

pub use bench::{
    AuxConfig, Benchmark, BenchmarkConfig, ExperimentConfig, ModelPreset, ProbeConfig, TransferConfig,
};
pub use probe::{export_embeddings_csv, probe_embeddings, random_checkpoint, season_of, season_samples, ProbeResult, Season};
pub use protocols::{
    auxiliary_texts, pretrain_shared, pretraining_texts, run_auxiliary, run_feature_sets, run_sparsity, run_transfer,
    transfer_arms, Protocol,
};
pub use report::{ConditionSummary, ExperimentOutput, ExperimentReport, RunRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `sqrt` of the masked mean squared error.
pub fn rmse(predictions: &[f64], observations: &[f64], mask: &[bool]) -> Result<f64, EvalError> {
    match crate::train::masked_mse(predictions, observations, mask) {
        Ok(mse) => Ok(mse.sqrt()),
        Err(TrainError::EmptyMask) => Err(EvalError::EmptyMask),
        Err(e) => Err(e.into()),
    }
}

/// Predictions for every sample of `ds`, in dataset order.
pub fn predict_dataset(ck: &Checkpoint, ds: &Dataset, texts: &[String], window: usize) -> Result<Vec<f64>, EvalError> {
    let vocab = ck.vocabulary()?;
    let corpus = Corpus::build(ds, texts, &vocab, ck.meta.max_len, LabelSource::Observed)?;
    let preds = predict_corpus(&ck.model, &ck.meta.target_scale, &corpus, window)?;
    let mut lookup = std::collections::HashMap::new();
    for (s, p) in corpus.series.iter().zip(&preds) {
        for (d, v) in s.dates.iter().zip(p) {
            lookup.insert((s.site_id.as_str(), *d), *v);
        }
    }
    Ok(ds.samples().iter().map(|s| lookup[&(s.site_id.as_str(), s.date)]).collect())
}

/// Test RMSE of `ck` against the observed labels of `ds`.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset, texts: &[String], window: usize) -> Result<f64, EvalError> {
    let preds = predict_dataset(ck, ds, texts, window)?;
    let obs: Vec<f64> = ds.samples().iter().map(|s| s.observed_label.unwrap_or(0.0)).collect();
    let mask: Vec<bool> = ds.samples().iter().map(|s| s.observed_label.is_some()).collect();
    rmse(&preds, &obs, &mask)
}
