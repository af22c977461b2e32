use std::io::Write;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::encode::tokenize;
use crate::model::FreeModel;
use crate::train::Checkpoint;

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Season {
    Summer,
    Winter,
}

/// June to August is summer, December to February winter.
pub fn season_of(date: NaiveDate) -> Option<Season> {
    match date.month() {
        6..=8 => Some(Season::Summer),
        12 | 1 | 2 => Some(Season::Winter),
        _ => None,
    }
}

/// Indices of `per_season` seeded draws from each season, ascending.
pub fn season_samples(ds: &Dataset, per_season: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(17);
    let mut chosen = Vec::new();
    for season in [Season::Summer, Season::Winter] {
        let idx: Vec<usize> =
            (0..ds.len()).filter(|&i| season_of(ds.samples()[i].date) == Some(season)).collect();
        if idx.len() < per_season {
            return Err(EvalError::Argument(format!(
                "{} {season:?} samples available, {per_season} requested",
                idx.len()
            )));
        }
        chosen.extend(idx.choose_multiple(&mut rng, per_season).copied());
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn embeddings(ck: &Checkpoint, texts: &[String]) -> Result<Vec<Vec<f32>>, EvalError> {
    let vocab = ck.vocabulary()?;
    let tokens = texts
        .iter()
        .map(|t| tokenize(t, &vocab, ck.meta.max_len))
        .collect::<Result<Vec<_>, _>>()
        .map_err(crate::train::TrainError::from)?;
    Ok(ck.model.embed_all(&tokens).map_err(crate::train::TrainError::from)?)
}

/// Held-out accuracy of a least-squares linear classifier from
/// description embeddings to season.
pub fn probe_embeddings(
    ck: &Checkpoint,
    samples: &[Sample],
    texts: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    if texts.len() != samples.len() {
        return Err(EvalError::Argument(format!("{} descriptions for {} samples", texts.len(), samples.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EvalError::Argument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut classes: [Vec<usize>; 2] = [vec![], vec![]];
    for (i, s) in samples.iter().enumerate() {
        match season_of(s.date) {
            Some(Season::Summer) => classes[0].push(i),
            Some(Season::Winter) => classes[1].push(i),
            None => return Err(EvalError::Argument(format!("{} is neither summer nor winter", s.date))),
        }
    }
    if classes.iter().any(|c| c.len() < 2) {
        return Err(EvalError::Argument("probe needs at least two samples of each season".into()));
    }
    let emb = embeddings(ck, texts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(19);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, idx) in classes.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let k = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let y = if label == 0 { 1.0 } else { -1.0 };
        train.extend(idx[..k].iter().map(|&i| (i, y)));
        test.extend(idx[k..].iter().map(|&i| (i, y)));
    }
    let d = emb[0].len();
    let x = DMatrix::from_fn(train.len(), d + 1, |r, c| if c == d { 1.0 } else { emb[train[r].0][c] as f64 });
    let y = DVector::from_iterator(train.len(), train.iter().map(|t| t.1));
    let w = x
        .svd(true, true)
        .solve(&y, 1e-9)
        .map_err(|e| EvalError::Argument(format!("least squares: {e}")))?;
    let correct = test
        .iter()
        .filter(|&&(i, y)| {
            let score: f64 = emb[i].iter().zip(w.iter()).map(|(a, b)| *a as f64 * b).sum::<f64>() + w[d];
            (score >= 0.0) == (y > 0.0)
        })
        .count();
    Ok(ProbeResult { accuracy: correct as f64 / test.len() as f64, n_train: train.len(), n_test: test.len() })
}

/// Same architecture and vocabulary as `like`, with fresh weights.
pub fn random_checkpoint(like: &Checkpoint, seed: u64) -> Result<Checkpoint, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let model = FreeModel::init(&like.meta.model, &mut rng).map_err(crate::train::TrainError::from)?;
    let mut meta = like.meta.clone();
    meta.provenance.clear();
    Ok(Checkpoint { meta, model })
}

/// Writes `site_id,date,season,e0..` rows; returns the row count.
pub fn export_embeddings_csv<W: Write>(
    ck: &Checkpoint,
    samples: &[Sample],
    texts: &[String],
    out: W,
) -> Result<usize, EvalError> {
    let emb = embeddings(ck, texts)?;
    let mut wr = csv::Writer::from_writer(out);
    let d = emb.first().map_or(0, Vec::len);
    let mut header = vec!["site_id".to_string(), "date".to_string(), "season".to_string()];
    header.extend((0..d).map(|j| format!("e{j}")));
    let io = |e: csv::Error| EvalError::Io(std::io::Error::other(e));
    wr.write_record(&header).map_err(io)?;
    for (s, e) in samples.iter().zip(&emb) {
        let season = match season_of(s.date) {
            Some(Season::Summer) => "summer",
            Some(Season::Winter) => "winter",
            None => "",
        };
        let mut row = vec![s.site_id.clone(), s.date.to_string(), season.to_string()];
        row.extend(e.iter().map(|v| v.to_string()));
        wr.write_record(&row).map_err(io)?;
    }
    wr.flush()?;
    Ok(emb.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::Vocabulary;
    use crate::model::ModelConfig;
    use crate::pipeline::{template_texts, FeatureRule};
    use crate::simulate::{generate_weather, simulate_stream_temperature, SimParams, WeatherGenParams};
    use crate::train::{CheckpointMeta, TargetScale};

    fn fixture() -> (Vec<Sample>, Vec<String>, Checkpoint) {
        let w = generate_weather(&["s1".into()], 400, &WeatherGenParams::default()).unwrap();
        let ds = simulate_stream_temperature(&w, &SimParams::default()).unwrap();
        let all = template_texts(&ds, &FeatureRule::All, None).unwrap();
        let picked = season_samples(&ds, 40, 3).unwrap();
        let samples: Vec<Sample> = picked.iter().map(|&i| ds.samples()[i].clone()).collect();
        let texts: Vec<String> = picked.iter().map(|&i| all[i].clone()).collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str));
        let mut cfg = ModelConfig::with_vocab(vocab.len());
        cfg.encoder.d_model = 8;
        cfg.encoder.n_heads = 2;
        cfg.encoder.d_ff = 16;
        cfg.encoder.max_len = 160;
        cfg.lstm_hidden = 4;
        let meta = CheckpointMeta {
            model: cfg.clone(),
            vocab: vocab.tokens().to_vec(),
            target_scale: TargetScale { mean: 0.0, std: 1.0 },
            max_len: 160,
            provenance: vec![],
        };
        let ck = Checkpoint { meta, model: FreeModel::zeros(&cfg) };
        (samples, texts, ck)
    }

    #[test]
    fn seasons() {
        let d = |m| NaiveDate::from_ymd_opt(2001, m, 10).unwrap();
        assert_eq!(season_of(d(7)), Some(Season::Summer));
        assert_eq!(season_of(d(1)), Some(Season::Winter));
        assert_eq!(season_of(d(12)), Some(Season::Winter));
        assert_eq!(season_of(d(4)), None);
    }

    #[test]
    fn identical_embeddings_give_chance() {
        let (samples, texts, ck) = fixture();
        // All-zero weights embed every description to the same vector.
        let r = probe_embeddings(&ck, &samples, &texts, 0.5, 1).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.n_train + r.n_test, 80);
    }

    #[test]
    fn single_class_is_an_error() {
        let (samples, texts, ck) = fixture();
        let (s, t): (Vec<Sample>, Vec<String>) = samples
            .into_iter()
            .zip(texts)
            .filter(|(s, _)| season_of(s.date) == Some(Season::Summer))
            .unzip();
        assert!(matches!(probe_embeddings(&ck, &s, &t, 0.5, 1), Err(EvalError::Argument(_))));
    }

    #[test]
    fn export_has_one_row_per_sample() {
        let (samples, texts, ck) = fixture();
        let mut buf = Vec::new();
        let n = export_embeddings_csv(&ck, &samples, &texts, &mut buf).unwrap();
        assert_eq!(n, samples.len());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), samples.len() + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("s1,"));
    }

    #[test]
    fn too_few_season_samples() {
        let w = generate_weather(&["s1".into()], 60, &WeatherGenParams::default()).unwrap();
        let ds = simulate_stream_temperature(&w, &SimParams::default()).unwrap();
        assert!(season_samples(&ds, 100, 1).is_err());
    }
}
