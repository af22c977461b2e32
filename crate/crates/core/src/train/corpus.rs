use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Sample};
use crate::encode::{tokenize, Vocabulary};

use super::TrainError;

/// Which label column supervises a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Simulated,
    Observed,
}

impl LabelSource {
    pub fn get(self, s: &Sample) -> Option<f64> {
        match self {
            LabelSource::Simulated => s.simulated_label,
            LabelSource::Observed => s.observed_label,
        }
    }
}

/// Token sequences and targets of one site, in date order.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSeries {
    pub site_id: String,
    pub dates: Vec<NaiveDate>,
    pub tokens: Vec<Vec<u32>>,
    pub targets: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub series: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub series: Vec<SiteSeries>,
}

impl Corpus {
    /// `texts[i]` is the description of `ds.samples()[i]`.
    pub fn build(
        ds: &Dataset,
        texts: &[String],
        vocab: &Vocabulary,
        max_len: usize,
        labels: LabelSource,
    ) -> Result<Self, TrainError> {
        if texts.len() != ds.len() {
            return Err(TrainError::Shape(format!("{} descriptions for {} samples", texts.len(), ds.len())));
        }
        let mut series: Vec<SiteSeries> = Vec::new();
        let mut by_site = std::collections::HashMap::new();
        for (s, text) in ds.samples().iter().zip(texts) {
            let idx = *by_site.entry(s.site_id.clone()).or_insert_with(|| {
                series.push(SiteSeries {
                    site_id: s.site_id.clone(),
                    dates: vec![],
                    tokens: vec![],
                    targets: vec![],
                });
                series.len() - 1
            });
            let entry = &mut series[idx];
            entry.dates.push(s.date);
            entry.tokens.push(tokenize(text, vocab, max_len)?);
            entry.targets.push(labels.get(s));
        }
        series.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        Ok(Self { series })
    }

    pub fn label_count(&self) -> usize {
        self.series.iter().map(|s| s.targets.iter().flatten().count()).sum()
    }

    pub fn sample_count(&self) -> usize {
        self.series.iter().map(|s| s.dates.len()).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.series.iter().flat_map(|s| s.targets.iter().flatten().copied())
    }

    /// Consecutive windows of length `w` (the last per site may be shorter).
    pub fn windows(&self, w: usize) -> Vec<WindowRef> {
        let mut out = Vec::new();
        for (si, s) in self.series.iter().enumerate() {
            let mut start = 0;
            while start < s.dates.len() {
                let len = w.min(s.dates.len() - start);
                out.push(WindowRef { series: si, start, len });
                start += len;
            }
        }
        out
    }

    pub fn tokens(&self, w: &WindowRef) -> &[Vec<u32>] {
        &self.series[w.series].tokens[w.start..w.start + w.len]
    }

    pub fn targets(&self, w: &WindowRef) -> &[Option<f64>] {
        &self.series[w.series].targets[w.start..w.start + w.len]
    }

    pub fn has_label(&self, w: &WindowRef) -> bool {
        self.targets(w).iter().any(Option::is_some)
    }

    /// Content hash over sites, dates, tokens and targets.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.series {
            h.update(s.site_id.as_bytes());
            for ((d, t), y) in s.dates.iter().zip(&s.tokens).zip(&s.targets) {
                h.update(d.to_string().as_bytes());
                for id in t {
                    h.update(id.to_le_bytes());
                }
                match y {
                    Some(v) => h.update(v.to_le_bytes()),
                    None => h.update([0xff]),
                }
            }
        }
        hex::encode(h.finalize())
    }
}
