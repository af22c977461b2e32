use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use chrono::NaiveDate;
use free_core::data::{infer_schema, load_dataset, Dataset};
use free_core::describe::Description;
use free_core::linearize::LinearizedRecord;
use serde::{Deserialize, Serialize};

pub fn load(path: &Path) -> Result<Dataset> {
    let schema = infer_schema(path).with_context(|| format!("reading {}", path.display()))?;
    load_dataset(path, &schema).with_context(|| format!("loading {}", path.display()))
}

/// One line of a descriptions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionLine {
    pub site_id: String,
    pub date: NaiveDate,
    pub text: String,
    pub cache_key: String,
    pub source: String,
    pub version: String,
}

pub fn write_descriptions(path: &Path, recs: &[LinearizedRecord], descs: &[Description]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (r, d) in recs.iter().zip(descs) {
        let line = DescriptionLine {
            site_id: r.site_id.clone(),
            date: r.date,
            text: d.text.clone(),
            cache_key: d.cache_key.clone(),
            source: d.provenance.source.as_str().into(),
            version: d.provenance.version.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_descriptions(path: &Path) -> Result<Vec<DescriptionLine>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Description texts in the row order of `ds`.
pub fn aligned_texts(path: &Path, ds: &Dataset) -> Result<Vec<String>> {
    let lines = read_descriptions(path)?;
    let by_key: HashMap<(String, NaiveDate), String> =
        lines.into_iter().map(|l| ((l.site_id, l.date), l.text)).collect();
    ds.samples()
        .iter()
        .map(|s| {
            by_key
                .get(&(s.site_id.clone(), s.date))
                .cloned()
                .ok_or_else(|| anyhow!("no description for site {} on {}", s.site_id, s.date))
        })
        .collect()
}

pub fn write_predictions(path: &Path, ds: &Dataset, preds: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "site_id,date,prediction")?;
    for (s, p) in ds.samples().iter().zip(preds) {
        writeln!(w, "{},{},{}", s.site_id, s.date, p)?;
    }
    w.flush()?;
    Ok(())
}
