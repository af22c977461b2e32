//! Canonical key-value linearization of samples, with optional auxiliary
//! observations from earlier dates.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, DATE_FORMAT};

/// Physical unit attached to a linearized pair. Consumed by the template
/// renderer; never part of the rendered value string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    Millimeters,
    DegreesCelsius,
    WattsPerSquareMeter,
    Fraction,
}

/// Units of the feature names this crate knows about.
pub fn unit_for(feature: &str) -> Option<Unit> {
    match feature {
        "rainfall" | "potential_evapotranspiration" => Some(Unit::Millimeters),
        "air_temperature" | "groundwater_temperature" | "subsurface_temperature" => {
            Some(Unit::DegreesCelsius)
        }
        "solar_radiation" => Some(Unit::WattsPerSquareMeter),
        "cloud_cover" => Some(Unit::Fraction),
        _ => None,
    }
}

/// What a pair carries, so the renderer never has to re-parse key text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PairKind {
    Date,
    Feature { name: String, unit: Option<Unit> },
    Auxiliary { site: String, relation: Relation },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub key: String,
    pub value: String,
    pub kind: PairKind,
}

impl Pair {
    fn date(d: NaiveDate) -> Self {
        Self { key: "date".into(), value: render_date(d), kind: PairKind::Date }
    }
}

/// Ordered (key, rendered value) pairs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedRecord {
    pub site_id: String,
    pub date: NaiveDate,
    pub pairs: Vec<Pair>,
}

#[derive(Serialize)]
struct RecordJson<'a> {
    sample: (&'a str, String),
    pairs: Vec<(&'a str, &'a str)>,
}

impl LinearizedRecord {
    /// `{"sample": [site, date], "pairs": [[k, v], ...]}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&RecordJson {
            sample: (&self.site_id, render_date(self.date)),
            pairs: self.pairs.iter().map(|p| (p.key.as_str(), p.value.as_str())).collect(),
        })
        .expect("serializable")
    }

    /// `[key: value]` lines, as used in remote prompts.
    pub fn bracketed_lines(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("[{}: {}]", p.key, p.value))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    CurrentSite,
    Neighbor,
}

/// A previously collected target measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxObservation {
    pub source_site: String,
    pub date: NaiveDate,
    /// `None` when the observation was not collected; such entries are
    /// skipped.
    pub value: Option<f64>,
    pub relation: Relation,
}

#[derive(Debug, thiserror::Error)]
pub enum LinearizeError {
    #[error("auxiliary observation dated {aux} does not precede sample date {sample}")]
    AuxNotBefore { aux: NaiveDate, sample: NaiveDate },
}

/// Fixed point with two fractional digits; integral values (after rounding)
/// drop the fraction. Negative zero renders as `0`.
pub fn render_number(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.strip_suffix(".00").map(str::to_string).unwrap_or(s);
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn render_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

/// Display form of a feature column name (`solar_radiation` → `solar radiation`).
pub fn display_name(feature: &str) -> String {
    feature.replace('_', " ")
}

/// `[date: t]` followed by one pair per present feature, in stored order.
/// Features outside `subset` (when given) are skipped, as are absent ones.
pub fn linearize(sample: &Sample, subset: Option<&BTreeSet<String>>) -> LinearizedRecord {
    let mut pairs = vec![Pair::date(sample.date)];
    pairs.extend(feature_pairs(sample, subset));
    LinearizedRecord { site_id: sample.site_id.clone(), date: sample.date, pairs }
}

fn feature_pairs<'a>(
    sample: &'a Sample,
    subset: Option<&'a BTreeSet<String>>,
) -> impl Iterator<Item = Pair> + 'a {
    sample
        .features
        .iter()
        .filter(move |(name, _)| subset.map_or(true, |s| s.contains(*name)))
        .map(|(name, v)| Pair {
            key: display_name(name),
            value: render_number(v),
            kind: PairKind::Feature { name: name.to_string(), unit: unit_for(name) },
        })
}

/// Key text of an auxiliary observation pair.
pub fn aux_key(target: &str, site: &str, relation: Relation) -> String {
    match relation {
        Relation::CurrentSite => format!("observed {target} at site {site}"),
        Relation::Neighbor => format!("observed {target} at neighbor site {site}"),
    }
}

/// Prepends auxiliary observations grouped by date. With no available aux
/// values the result equals [`linearize`].
///
/// `aux` must already be in canonical order (current site first, then
/// neighbors in graph order). Entries without a value are dropped.
pub fn linearize_with_auxiliary(
    sample: &Sample,
    aux: &[AuxObservation],
    target: &str,
    subset: Option<&BTreeSet<String>>,
) -> Result<LinearizedRecord, LinearizeError> {
    if let Some(a) = aux.iter().find(|a| a.date >= sample.date) {
        return Err(LinearizeError::AuxNotBefore { aux: a.date, sample: sample.date });
    }
    let mut pairs = Vec::new();
    let mut current_date = None;
    for a in aux {
        let Some(v) = a.value else { continue };
        if current_date != Some(a.date) {
            pairs.push(Pair::date(a.date));
            current_date = Some(a.date);
        }
        pairs.push(Pair {
            key: aux_key(target, &a.source_site, a.relation),
            value: render_number(v),
            kind: PairKind::Auxiliary { site: a.source_site.clone(), relation: a.relation },
        });
    }
    pairs.push(Pair::date(sample.date));
    pairs.extend(feature_pairs(sample, subset));
    Ok(LinearizedRecord { site_id: sample.site_id.clone(), date: sample.date, pairs })
}
