//! Dataset → linearized records → description texts.

use std::collections::BTreeSet;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::describe::template_text;
use crate::linearize::{linearize_with_auxiliary, AuxObservation, LinearizeError, LinearizedRecord, Relation};
use crate::simulate::{ADDITIONAL, METEOROLOGICAL};
use crate::train::LabelSource;

pub const TARGET_NAME: &str = "water temperature";

/// Which features each description mentions.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureRule {
    All,
    /// Meteorological features plus `m` additional features drawn per sample.
    Additional { m: usize, seed: u64 },
    /// Like `Additional`, with `m` itself drawn uniformly per sample.
    AnyAdditional { seed: u64 },
}

impl FeatureRule {
    pub fn subsets(&self, n: usize) -> Vec<Option<BTreeSet<String>>> {
        let seed = match self {
            FeatureRule::All => return vec![None; n],
            FeatureRule::Additional { seed, .. } | FeatureRule::AnyAdditional { seed } => *seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        (0..n)
            .map(|_| {
                let m = match self {
                    FeatureRule::Additional { m, .. } => *m,
                    _ => rng.gen_range(0..=ADDITIONAL.len()),
                };
                let mut set: BTreeSet<String> = METEOROLOGICAL.iter().map(|s| s.to_string()).collect();
                set.extend(ADDITIONAL.choose_multiple(&mut rng, m).map(|s| s.to_string()));
                Some(set)
            })
            .collect()
    }
}

/// Where previous-day observations come from.
#[derive(Clone, Debug)]
pub struct AuxRule<'a> {
    /// Observation table looked up at (site, date − 1).
    pub source: &'a Dataset,
    pub labels: LabelSource,
    /// Probability that an available value is shown.
    pub keep: f64,
    pub seed: u64,
}

impl AuxRule<'_> {
    pub fn previous_day(&self, ds: &Dataset) -> Vec<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(11);
        ds.samples()
            .iter()
            .map(|s| {
                let prev = self.source.get(&s.site_id, s.date - Duration::days(1)).and_then(|p| self.labels.get(p));
                let shown = self.keep >= 1.0 || rng.gen::<f64>() < self.keep;
                prev.filter(|_| shown)
            })
            .collect()
    }
}

pub fn records(
    ds: &Dataset,
    features: &FeatureRule,
    aux: Option<&AuxRule<'_>>,
) -> Result<Vec<LinearizedRecord>, LinearizeError> {
    let subsets = features.subsets(ds.len());
    let prev = match aux {
        Some(a) => a.previous_day(ds),
        None => vec![None; ds.len()],
    };
    ds.samples()
        .iter()
        .zip(subsets)
        .zip(prev)
        .map(|((s, subset), p)| {
            let aux = [AuxObservation {
                source_site: s.site_id.clone(),
                date: s.date - Duration::days(1),
                value: p,
                relation: Relation::CurrentSite,
            }];
            linearize_with_auxiliary(s, &aux, TARGET_NAME, subset.as_ref())
        })
        .collect()
}

/// Template descriptions for every sample, in dataset order.
pub fn template_texts(
    ds: &Dataset,
    features: &FeatureRule,
    aux: Option<&AuxRule<'_>>,
) -> Result<Vec<String>, LinearizeError> {
    Ok(records(ds, features, aux)?.iter().map(template_text).collect())
}
