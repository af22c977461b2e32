//! Data model for daily per-site records: samples, datasets, the site
//! neighborhood graph, CSV ingestion, label subsampling and date splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: malformed date {value:?}")]
    BadDate { row: usize, value: String },
    #[error("row {row}: column {column:?} holds non-numeric value {value:?}")]
    BadNumber { row: usize, column: String, value: String },
    #[error("row {row}: column {column:?} holds non-finite value")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: duplicate record for site {site:?} on {date}")]
    Duplicate { row: usize, site: String, date: NaiveDate },
    #[error("gap at row {row} for site {site:?} (expected {expected}, found {found})")]
    Gap { row: usize, site: String, expected: NaiveDate, found: NaiveDate },
    #[error("row {row}: wrong field count ({found}, header has {expected})")]
    FieldCount { row: usize, expected: usize, found: usize },
    #[error("header is missing required column {0:?}")]
    MissingColumn(String),
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("neighbor file row {row}: {message}")]
    Neighbor { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered feature map: insertion order is preserved and names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Features(Vec<(String, f64)>);

impl Features {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Inserts a feature; rejects duplicates and non-finite values.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<(), DataError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(DataError::Argument(format!("feature {name:?} is not finite")));
        }
        if self.get(&name).is_some() {
            return Err(DataError::DuplicateFeature(name));
        }
        self.0.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn set(&mut self, name: &str, value: f64) {
        if let Some(slot) = self.0.iter_mut().find(|(k, _)| k == name) {
            slot.1 = value;
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<f64> {
        let idx = self.0.iter().position(|(k, _)| k == name)?;
        Some(self.0.remove(idx).1)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.0.retain(|(k, _)| keep(k));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, f64)> for Features {
    /// Later duplicates are dropped; non-finite values are skipped.
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        let mut f = Features::new();
        for (k, v) in iter {
            let _ = f.insert(k, v);
        }
        f
    }
}

/// One (site, date) record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub site_id: String,
    pub date: NaiveDate,
    pub features: Features,
    pub observed_label: Option<f64>,
    pub simulated_label: Option<f64>,
}

impl Sample {
    pub fn new(site_id: impl Into<String>, date: NaiveDate) -> Self {
        Self {
            site_id: site_id.into(),
            date,
            features: Features::new(),
            observed_label: None,
            simulated_label: None,
        }
    }

    pub fn with_feature(mut self, name: &str, value: f64) -> Self {
        self.features.insert(name, value).expect("valid feature");
        self
    }
}

/// A collection of samples with at most one record per (site, date) and a
/// contiguous daily sequence per site.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<(String, NaiveDate), usize>,
    /// Column order used when serializing back to CSV.
    schema: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, validating uniqueness and per-site contiguity.
    /// Samples keep the given order; rows are numbered from 2 in errors
    /// (row 1 is the header) to match file line numbers.
    pub fn from_samples(samples: Vec<Sample>, schema: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(samples.len());
        let mut last: HashMap<&str, NaiveDate> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            let row = i + 2;
            if index.insert((s.site_id.clone(), s.date), i).is_some() {
                return Err(DataError::Duplicate { row, site: s.site_id.clone(), date: s.date });
            }
            if let Some(prev) = last.get(s.site_id.as_str()) {
                let expected = prev.succ_opt().expect("date in range");
                if s.date != expected {
                    return Err(DataError::Gap {
                        row,
                        site: s.site_id.clone(),
                        expected,
                        found: s.date,
                    });
                }
            }
            last.insert(&s.site_id, s.date);
        }
        Ok(Self { samples, index, schema })
    }

    pub fn empty(schema: Vec<String>) -> Self {
        Self { samples: Vec::new(), index: HashMap::new(), schema }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, site: &str, date: NaiveDate) -> Option<&Sample> {
        self.index.get(&(site.to_string(), date)).map(|&i| &self.samples[i])
    }

    /// Site ids in lexicographic order.
    pub fn sites(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.site_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let min = self.samples.iter().map(|s| s.date).min()?;
        let max = self.samples.iter().map(|s| s.date).max()?;
        Some((min, max))
    }

    /// Samples of one site in date order.
    pub fn site_series(&self, site: &str) -> Vec<&Sample> {
        let mut v: Vec<&Sample> = self.samples.iter().filter(|s| s.site_id == site).collect();
        v.sort_by_key(|s| s.date);
        v
    }

    pub fn labeled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.observed_label.is_some()).count()
    }

    /// Applies `f` to every sample. Site ids and dates must not change.
    pub fn map_samples(&self, mut f: impl FnMut(&mut Sample)) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            let key = (s.site_id.clone(), s.date);
            f(s);
            debug_assert_eq!(key, (s.site_id.clone(), s.date));
        }
        out
    }

    /// Keeps only the given sites (set semantics).
    pub fn filter_sites(&self, keep: &[String]) -> Dataset {
        let keep: BTreeSet<&str> = keep.iter().map(String::as_str).collect();
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(s.site_id.as_str()))
            .cloned()
            .collect();
        Dataset::from_samples(samples, self.schema.clone()).expect("subset of a valid dataset")
    }

    /// Writes the canonical CSV form
    /// (`site_id,date,<schema...>,observed_label,simulated_label`).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["site_id".to_string(), "date".to_string()];
        header.extend(self.schema.iter().cloned());
        header.push("observed_label".into());
        header.push("simulated_label".into());
        wr.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.site_id.clone(), s.date.format(DATE_FORMAT).to_string()];
            for name in &self.schema {
                rec.push(s.features.get(name).map(fmt_f64).unwrap_or_default());
            }
            rec.push(s.observed_label.map(fmt_f64).unwrap_or_default());
            rec.push(s.simulated_label.map(fmt_f64).unwrap_or_default());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Reads a dataset from CSV. The header must contain `site_id`, `date` and
/// every schema name; `observed_label` and `simulated_label` are optional.
pub fn read_dataset<R: Read>(reader: R, schema: &[String]) -> Result<Dataset, DataError> {
    {
        let mut seen = BTreeSet::new();
        for name in schema {
            if !seen.insert(name) {
                return Err(DataError::DuplicateFeature(name.clone()));
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let site_col = col("site_id").ok_or_else(|| DataError::MissingColumn("site_id".into()))?;
    let date_col = col("date").ok_or_else(|| DataError::MissingColumn("date".into()))?;
    let feature_cols = schema
        .iter()
        .map(|n| col(n).ok_or_else(|| DataError::MissingColumn(n.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let obs_col = col("observed_label");
    let sim_col = col("simulated_label");

    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        if rec.len() != header.len() {
            return Err(DataError::FieldCount { row, expected: header.len(), found: rec.len() });
        }
        let date_str = rec[date_col].trim();
        let date = NaiveDate::parse_from_str(date_str, DATE_FORMAT)
            .map_err(|_| DataError::BadDate { row, value: date_str.to_string() })?;
        let mut sample = Sample::new(rec[site_col].trim(), date);
        for (name, &c) in schema.iter().zip(&feature_cols) {
            if let Some(v) = parse_cell(&rec[c], row, name)? {
                sample.features.insert(name.clone(), v)?;
            }
        }
        if let Some(c) = obs_col {
            sample.observed_label = parse_cell(&rec[c], row, "observed_label")?;
        }
        if let Some(c) = sim_col {
            sample.simulated_label = parse_cell(&rec[c], row, "simulated_label")?;
        }
        samples.push(sample);
    }
    Dataset::from_samples(samples, schema.to_vec())
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<Option<f64>, DataError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| DataError::BadNumber {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(DataError::NonFinite { row, column: column.to_string() });
    }
    Ok(Some(v))
}

pub fn load_dataset(csv_path: &Path, schema: &[String]) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(csv_path)?;
    read_dataset(std::io::BufReader::new(f), schema)
}

/// Reads the header of a dataset CSV and returns the feature columns, i.e.
/// everything except `site_id`, `date` and the two label columns.
pub fn infer_schema(csv_path: &Path) -> Result<Vec<String>, DataError> {
    let mut rdr = csv::Reader::from_path(csv_path)?;
    Ok(rdr
        .headers()?
        .iter()
        .map(str::trim)
        .filter(|h| !matches!(*h, "site_id" | "date" | "observed_label" | "simulated_label"))
        .map(String::from)
        .collect())
}

/// Keeps exactly `round(fraction × L)` of the `L` observed labels, chosen
/// uniformly without replacement.
pub fn subsample_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Argument(format!("label fraction {fraction} outside (0, 1]")));
    }
    let labeled: Vec<usize> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.observed_label.is_some())
        .map(|(i, _)| i)
        .collect();
    let keep = (fraction * labeled.len() as f64).round() as usize;
    if keep == labeled.len() {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = sample_indices(&mut rng, labeled.len(), keep)
        .into_iter()
        .map(|j| labeled[j])
        .collect();
    let mut out = ds.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        if s.observed_label.is_some() && !chosen.contains(&i) {
            s.observed_label = None;
        }
    }
    Ok(out)
}

/// Splits into (date ≤ boundary, date > boundary).
pub fn split_by_date(ds: &Dataset, boundary: NaiveDate) -> Result<(Dataset, Dataset), DataError> {
    let (min, max) = ds
        .date_range()
        .ok_or_else(|| DataError::Argument("cannot split an empty dataset".into()))?;
    if boundary < min || boundary > max {
        return Err(DataError::Argument(format!(
            "split boundary {boundary} outside date range [{min}, {max}]"
        )));
    }
    let (a, b): (Vec<Sample>, Vec<Sample>) =
        ds.samples.iter().cloned().partition(|s| s.date <= boundary);
    Ok((
        Dataset::from_samples(a, ds.schema.clone())?,
        Dataset::from_samples(b, ds.schema.clone())?,
    ))
}

/// Label subsampling and temporal split parameters for one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: NaiveDate,
    pub label_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, ds: &Dataset) -> Result<(), DataError> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(DataError::Argument(format!(
                "label fraction {} outside (0, 1]",
                self.label_fraction
            )));
        }
        match ds.date_range() {
            Some((lo, hi)) if self.train_end >= lo && self.train_end <= hi => Ok(()),
            _ => Err(DataError::Argument(format!("train_end {} outside date range", self.train_end))),
        }
    }

    /// Splits at `train_end` and subsamples the training labels.
    pub fn apply(&self, ds: &Dataset) -> Result<(Dataset, Dataset), DataError> {
        self.validate(ds)?;
        let (train, test) = split_by_date(ds, self.train_end)?;
        Ok((subsample_labels(&train, self.label_fraction, self.seed)?, test))
    }
}

/// Directed neighbor lists with canonical (lexicographic) ordering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteGraph {
    neighbors: BTreeMap<String, Vec<String>>,
}

impl SiteGraph {
    /// Builds a graph from directed edges, validating against the known sites.
    pub fn from_edges<'a>(
        edges: impl IntoIterator<Item = (&'a str, &'a str)>,
        sites: &[String],
    ) -> Result<Self, DataError> {
        let known: BTreeSet<&str> = sites.iter().map(String::as_str).collect();
        let mut neighbors: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (row, (a, b)) in edges.into_iter().enumerate() {
            let row = row + 2;
            if a == b {
                return Err(DataError::Neighbor { row, message: format!("self-loop on {a:?}") });
            }
            for s in [a, b] {
                if !known.contains(s) {
                    return Err(DataError::Neighbor { row, message: format!("unknown site {s:?}") });
                }
            }
            let list = neighbors.entry(a.to_string()).or_default();
            if !list.iter().any(|x| x == b) {
                list.push(b.to_string());
            }
        }
        for list in neighbors.values_mut() {
            list.sort();
        }
        Ok(Self { neighbors })
    }

    pub fn load(path: &Path, sites: &[String]) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut edges = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(DataError::Neighbor {
                    row: edges.len() + 2,
                    message: "expected site_id,neighbor_id".into(),
                });
            }
            edges.push((rec[0].trim().to_string(), rec[1].trim().to_string()));
        }
        Self::from_edges(edges.iter().map(|(a, b)| (a.as_str(), b.as_str())), sites)
    }

    pub fn neighbors(&self, site: &str) -> &[String] {
        self.neighbors.get(site).map(Vec::as_slice).unwrap_or(&[])
    }
}
