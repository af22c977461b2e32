//! Pre-training on simulated labels and fine-tuning on sparse observations.

mod checkpoint;
mod corpus;
mod optim;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::encode::{EncodeError, Vocabulary};
use crate::model::{FreeModel, ModelConfig, ModelError};
use crate::tensor::ParamSet;

pub use checkpoint::{Checkpoint, CheckpointMeta, ProvenanceRecord, TargetScale, FORMAT_VERSION, MAGIC};
pub use corpus::{Corpus, LabelSource, SiteSeries, WindowRef};
pub use optim::{clip_global_norm, masked_mse, Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no {0} labels to train on")]
    NoLabels(&'static str),
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("training diverged at epoch {0} (non-finite loss)")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Cosine from `lr` down to 5% of `lr` over the configured epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub window: usize,
    /// Fraction of windows kept for training (drawn once per run).
    pub sample_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: LrDecay::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            patience: 10,
            val_fraction: 0.1,
            seed: 1,
            freeze_encoder: false,
            window: 30,
            sample_fraction: 1.0,
        }
    }

    pub fn finetune() -> Self {
        Self { phase: Phase::Finetune, lr: 1e-4, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 && self.phase == Phase::Pretrain {
            return bad("pretraining needs epochs >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} outside [0, 0.5]", self.val_fraction));
        }
        if self.batch_size == 0 || self.window == 0 {
            return bad("batch size and window must be >= 1".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample fraction {} outside (0, 1]", self.sample_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid moment hyperparameters".into());
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let progress = (epoch - 1) as f64 / self.epochs.max(2).saturating_sub(1) as f64;
                self.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Writes one JSON object per epoch when given a sink.
pub struct TrainLog<'a>(pub Option<&'a mut dyn Write>);

impl TrainLog<'_> {
    pub fn none() -> Self {
        TrainLog(None)
    }

    fn record(&mut self, r: &EpochRecord) -> Result<(), TrainError> {
        if let Some(w) = self.0.as_mut() {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn normalized(targets: &[Option<f64>], scale: &TargetScale) -> Vec<Option<f32>> {
    targets.iter().map(|t| t.map(|y| scale.normalize(y) as f32)).collect()
}

/// Root mean squared error in label units over the labeled steps of `windows`.
pub fn window_rmse(
    model: &FreeModel<f32>,
    scale: &TargetScale,
    corpus: &Corpus,
    windows: &[WindowRef],
) -> Result<f64, TrainError> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for w in windows {
        let preds = model.predict_window(corpus.tokens(w))?;
        for (p, t) in preds.iter().zip(corpus.targets(w)) {
            if let Some(y) = t {
                let r = scale.denormalize(*p as f64) - y;
                sse += r * r;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok((sse / n as f64).sqrt())
}

/// Predictions in label units for every step of every series, using
/// consecutive windows that each start from a zero state.
pub fn predict_corpus(
    model: &FreeModel<f32>,
    scale: &TargetScale,
    corpus: &Corpus,
    window: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out: Vec<Vec<f64>> = corpus.series.iter().map(|s| Vec::with_capacity(s.dates.len())).collect();
    for w in corpus.windows(window) {
        let preds = model.predict_window(corpus.tokens(&w))?;
        out[w.series].extend(preds.iter().map(|&p| scale.denormalize(p as f64)));
    }
    Ok(out)
}

/// Runs the optimization loop in place and leaves the best-validation
/// parameters in `model`.
pub fn fit(
    model: &mut FreeModel<f32>,
    scale: &TargetScale,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log: &mut TrainLog<'_>,
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut windows: Vec<WindowRef> =
        corpus.windows(cfg.window).into_iter().filter(|w| corpus.has_label(w)).collect();
    if windows.is_empty() {
        return Err(TrainError::NoLabels("training"));
    }
    if cfg.sample_fraction < 1.0 {
        windows.shuffle(&mut rng);
        let keep = ((cfg.sample_fraction * windows.len() as f64).round() as usize).max(1);
        windows.truncate(keep);
    }
    windows.shuffle(&mut rng);
    let mut n_val = (cfg.val_fraction * windows.len() as f64).round() as usize;
    if n_val >= windows.len() {
        n_val = windows.len() - 1;
    }
    let val: Vec<WindowRef> = windows[..n_val].to_vec();
    let mut train: Vec<WindowRef> = windows[n_val..].to_vec();

    let n_encoder = model.encoder.tensors_mut().len();
    let freeze = cfg.freeze_encoder;
    let mut opt = Adam::new(&*model, cfg.adam());
    let mut grads = FreeModel::<f32>::zeros(&model.config());
    let targets: Vec<Vec<Option<f32>>> = corpus.series.iter().map(|s| normalized(&s.targets, scale)).collect();

    let mut best = FitReport { history: vec![], best_epoch: 0, best_val_rmse: f64::INFINITY };
    let mut best_model = model.clone();
    let mut since_best = 0;
    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sse = 0.0;
        let mut count = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            let m: usize = batch.iter().map(|w| corpus.targets(w).iter().flatten().count()).sum();
            if m == 0 {
                log::warn!("skipping a batch without labels");
                continue;
            }
            grads.zero_all();
            let g = 2.0 / m as f32;
            for w in batch {
                let t = &targets[w.series][w.start..w.start + w.len];
                sse += model.window_backward(corpus.tokens(w), t, g, &mut grads, !freeze)?;
            }
            count += m;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(model, &mut grads, lr, |i| !(freeze && i < n_encoder));
        }
        let train_loss = sse / count.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let val_rmse = if val.is_empty() {
            train_loss.sqrt() * scale.std
        } else {
            window_rmse(model, scale, corpus, &val)?
        };
        let rec = EpochRecord { epoch, train_loss, val_rmse, lr, wall_s: started.elapsed().as_secs_f64() };
        log.record(&rec)?;
        best.history.push(rec);
        if val_rmse < best.best_val_rmse {
            best.best_val_rmse = val_rmse;
            best.best_epoch = epoch;
            best_model.clone_from(model);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if cfg.epochs > 0 {
        *model = best_model;
    }
    Ok(best)
}

fn provenance(cfg: &TrainConfig, report: &FitReport, corpus: &Corpus, parent: Option<String>) -> ProvenanceRecord {
    ProvenanceRecord {
        phase: cfg.phase,
        seed: cfg.seed,
        epochs_run: report.history.len(),
        best_epoch: report.best_epoch,
        data_hash: corpus.hash(),
        parent,
    }
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) on `labels`.
pub fn train_new(
    ds: &Dataset,
    texts: &[String],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    labels: LabelSource,
    log: &mut TrainLog<'_>,
) -> Result<(Checkpoint, FitReport), TrainError> {
    if model_cfg.encoder.vocab_size != vocab.len() {
        return Err(TrainError::Architecture(format!(
            "vocabulary has {} tokens, encoder expects {}",
            vocab.len(),
            model_cfg.encoder.vocab_size
        )));
    }
    let corpus = Corpus::build(ds, texts, vocab, model_cfg.encoder.max_len, labels)?;
    if corpus.label_count() == 0 {
        return Err(TrainError::NoLabels(match labels {
            LabelSource::Simulated => "simulated",
            LabelSource::Observed => "observed",
        }));
    }
    let scale = TargetScale::fit(corpus.labels());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut model = FreeModel::init(model_cfg, &mut rng)?;
    let report = fit(&mut model, &scale, &corpus, cfg, log)?;
    let meta = CheckpointMeta {
        model: model_cfg.clone(),
        vocab: vocab.tokens().to_vec(),
        target_scale: scale,
        max_len: model_cfg.encoder.max_len,
        provenance: vec![provenance(cfg, &report, &corpus, None)],
    };
    Ok((Checkpoint { meta, model }, report))
}

/// Supervised pre-training on simulated labels.
pub fn pretrain(
    ds: &Dataset,
    texts: &[String],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog<'_>,
) -> Result<(Checkpoint, FitReport), TrainError> {
    train_new(ds, texts, vocab, model_cfg, cfg, LabelSource::Simulated, log)
}

/// Continues training `start` on observed labels with a fresh optimizer.
pub fn finetune(
    start: &Checkpoint,
    ds: &Dataset,
    texts: &[String],
    cfg: &TrainConfig,
    log: &mut TrainLog<'_>,
) -> Result<(Checkpoint, FitReport), TrainError> {
    let vocab = start.vocabulary()?;
    let corpus = Corpus::build(ds, texts, &vocab, start.meta.max_len, LabelSource::Observed)?;
    if corpus.label_count() == 0 {
        return Err(TrainError::NoLabels("observed"));
    }
    let mut model = start.model.clone();
    let report = fit(&mut model, &start.meta.target_scale, &corpus, cfg, log)?;
    let mut meta = start.meta.clone();
    meta.provenance.push(provenance(cfg, &report, &corpus, Some(start.hash())));
    Ok((Checkpoint { meta, model }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::describe::template_text;
    use crate::encode::EncoderConfig;
    use crate::linearize::linearize;
    use crate::simulate::{generate_weather, perturb_to_observations, simulate_stream_temperature, PerturbParams, SimParams, WeatherGenParams};

    fn tiny_task(days: usize) -> (Dataset, Vec<String>, Vocabulary, ModelConfig) {
        let sites = vec!["s1".to_string(), "s2".to_string()];
        let w = generate_weather(&sites, days, &WeatherGenParams { seed: 5, ..Default::default() }).unwrap();
        let sim = simulate_stream_temperature(&w, &SimParams::default()).unwrap();
        let ds = perturb_to_observations(&sim, &PerturbParams { seed: 5, ..Default::default() }).unwrap();
        let texts: Vec<String> = ds.samples().iter().map(|s| template_text(&linearize(s, None))).collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str));
        let cfg = ModelConfig {
            encoder: EncoderConfig { vocab_size: vocab.len(), d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 160 },
            lstm_hidden: 6,
        };
        (ds, texts, vocab, cfg)
    }

    fn quick(phase: Phase) -> TrainConfig {
        TrainConfig { phase, epochs: 2, batch_size: 4, window: 10, lr: 3e-3, ..TrainConfig::pretrain() }
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let (ds, texts, vocab, mcfg) = tiny_task(10);
        let cfg = TrainConfig { epochs: 1, lr: 0.0, val_fraction: 0.0, ..quick(Phase::Pretrain) };
        let (ck, _) = pretrain(&ds, &texts, &vocab, &mcfg, &cfg, &mut TrainLog::none()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let init = FreeModel::<f32>::init(&mcfg, &mut rng).unwrap();
        assert_eq!(ck.model, init);
    }

    #[test]
    fn pretraining_is_deterministic_and_logs() {
        let (ds, texts, vocab, mcfg) = tiny_task(40);
        let cfg = quick(Phase::Pretrain);
        let mut buf = Vec::new();
        let (a, report) = pretrain(&ds, &texts, &vocab, &mcfg, &cfg, &mut TrainLog(Some(&mut buf))).unwrap();
        let (b, _) = pretrain(&ds, &texts, &vocab, &mcfg, &cfg, &mut TrainLog::none()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
        assert_eq!(lines.len(), report.history.len());
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for k in ["epoch", "train_loss", "val_rmse", "lr", "wall_s"] {
            assert!(rec.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn finetune_contracts() {
        let (ds, texts, vocab, mcfg) = tiny_task(40);
        let (start, _) = pretrain(&ds, &texts, &vocab, &mcfg, &quick(Phase::Pretrain), &mut TrainLog::none()).unwrap();

        let zero = TrainConfig { epochs: 0, ..quick(Phase::Finetune) };
        let (same, _) = finetune(&start, &ds, &texts, &zero, &mut TrainLog::none()).unwrap();
        assert_eq!(same.model, start.model);
        assert_eq!(same.meta.provenance.len(), 2);
        assert_eq!(same.meta.provenance[1].parent.as_deref(), Some(start.hash().as_str()));

        let frozen = TrainConfig { freeze_encoder: true, ..quick(Phase::Finetune) };
        let (f, _) = finetune(&start, &ds, &texts, &frozen, &mut TrainLog::none()).unwrap();
        assert_eq!(f.model.encoder, start.model.encoder);
        assert_ne!(f.model.lstm, start.model.lstm);

        let unlabeled = ds.map_samples(|s| s.observed_label = None);
        assert!(matches!(
            finetune(&start, &unlabeled, &texts, &quick(Phase::Finetune), &mut TrainLog::none()),
            Err(TrainError::NoLabels("observed"))
        ));
        let no_sim = ds.map_samples(|s| s.simulated_label = None);
        assert!(pretrain(&no_sim, &texts, &vocab, &mcfg, &quick(Phase::Pretrain), &mut TrainLog::none()).is_err());
    }

    #[test]
    fn unlabeled_steps_do_not_change_gradients() {
        let (ds, texts, vocab, mcfg) = tiny_task(12);
        let corpus = Corpus::build(&ds, &texts, &vocab, mcfg.encoder.max_len, LabelSource::Observed).unwrap();
        let model = FreeModel::<f64>::init(&mcfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let toks = &corpus.series[0].tokens;
        let mut targets: Vec<Option<f64>> = vec![None; 12];
        targets[3] = Some(0.4);
        targets[6] = Some(-0.2);
        let mut with_tail = FreeModel::zeros(&mcfg);
        model.window_backward(toks, &targets, 1.0, &mut with_tail, true).unwrap();
        let mut cut = FreeModel::zeros(&mcfg);
        model.window_backward(&toks[..7], &targets[..7], 1.0, &mut cut, true).unwrap();
        assert_eq!(with_tail, cut);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { epochs: 11, lr: 1e-3, lr_decay: LrDecay::Cosine, ..TrainConfig::pretrain() };
        assert!((cfg.lr_at(1) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(11) - 5e-5).abs() < 1e-15);
        assert!(cfg.lr_at(6) < cfg.lr_at(5));
        assert_eq!(TrainConfig::pretrain().lr_at(7), 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { val_fraction: 0.6, ..TrainConfig::pretrain() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::pretrain() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::finetune() }.validate().is_ok());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::pretrain() }.validate().is_err());
        let json = r#"{"phase":"finetune","epochs":3,"bogus":1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}
