//! The trainable stack: text encoder followed by the LSTM head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{EncodeError, EncoderConfig, EncoderParams};
use crate::temporal::{LstmConfig, LstmParams, TemporalError};
use crate::tensor::{ParamSet, Real, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error("{0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lstm_hidden: usize,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self { encoder: EncoderConfig::with_vocab(vocab_size), lstm_hidden: 64 }
    }

    pub fn lstm(&self) -> LstmConfig {
        LstmConfig { input_dim: self.encoder.d_model, hidden: self.lstm_hidden }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeModel<T> {
    pub encoder: EncoderParams<T>,
    pub lstm: LstmParams<T>,
}

impl<T: Real> ParamSet<T> for FreeModel<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let enc = self.encoder.named().into_iter().map(|(n, t)| (format!("encoder.{n}"), t));
        let lstm = self.lstm.named().into_iter().map(|(n, t)| (format!("lstm.{n}"), t));
        enc.chain(lstm).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.lstm.tensors_mut());
        v
    }
}

impl<T: Real> FreeModel<T> {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let encoder = EncoderParams::init(&config.encoder, rng)?;
        let lstm = LstmParams::init(&config.lstm(), rng);
        Ok(Self { encoder, lstm })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self { encoder: EncoderParams::zeros(&config.encoder), lstm: LstmParams::zeros(&config.lstm()) }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.config.clone(), lstm_hidden: self.lstm.config.hidden }
    }

    pub fn cast<U: Real>(&self) -> FreeModel<U> {
        FreeModel { encoder: self.encoder.cast(), lstm: self.lstm.cast() }
    }

    pub fn embed_all(&self, steps: &[Vec<u32>]) -> Result<Vec<Vec<T>>, ModelError> {
        steps.iter().map(|t| self.encoder.encode(t).map_err(ModelError::from)).collect()
    }

    /// Raw head outputs for every step of a window.
    pub fn predict_window(&self, steps: &[Vec<u32>]) -> Result<Vec<T>, ModelError> {
        let emb = self.embed_all(steps)?;
        Ok(self.lstm.predict(&emb)?)
    }

    /// One window of the masked squared-error objective.
    ///
    /// Accumulates `grad_scale · ∂/∂θ Σ_masked (ŷ − y)² / 2`-style gradients,
    /// i.e. upstream `grad_scale · (ŷ_t − y_t)` at labeled steps, and returns
    /// the unscaled sum of squared errors. Steps after the last label cannot
    /// influence the loss and are not evaluated.
    pub fn window_backward(
        &self,
        steps: &[Vec<u32>],
        targets: &[Option<T>],
        grad_scale: T,
        grads: &mut FreeModel<T>,
        train_encoder: bool,
    ) -> Result<f64, ModelError> {
        if steps.len() != targets.len() {
            return Err(ModelError::Shape(format!(
                "{} steps but {} targets",
                steps.len(),
                targets.len()
            )));
        }
        let Some(last) = targets.iter().rposition(Option::is_some) else {
            return Ok(0.0);
        };
        let steps = &steps[..=last];
        let mut embeddings = Vec::with_capacity(steps.len());
        let mut tapes = Vec::with_capacity(steps.len());
        for s in steps {
            if train_encoder {
                let (e, tape) = self.encoder.forward(s)?;
                embeddings.push(e);
                tapes.push(tape);
            } else {
                embeddings.push(self.encoder.encode(s)?);
            }
        }
        let (preds, ltape) = self.lstm.forward(&embeddings)?;
        let mut sse = 0.0;
        let upstream: Vec<T> = preds
            .iter()
            .zip(targets)
            .map(|(&p, t)| match t {
                Some(y) => {
                    let r = p - *y;
                    sse += r.to_f64() * r.to_f64();
                    grad_scale * r
                }
                None => T::ZERO,
            })
            .collect();
        let d_emb = self.lstm.backward(&embeddings, &ltape, &upstream, &mut grads.lstm)?;
        if train_encoder {
            for (tape, de) in tapes.iter().zip(&d_emb) {
                self.encoder.backward(tape, de, &mut grads.encoder);
            }
        }
        Ok(sse)
    }
}
