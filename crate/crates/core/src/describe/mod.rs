//! Natural-language descriptions of linearized records.
//!
//! The default source is a deterministic template engine. A chat-completion
//! client is available for remote generation; both go through the same
//! content-addressed cache.

mod cache;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linearize::{LinearizedRecord, PairKind, Relation, Unit};

pub use cache::DescriptionCache;
pub use remote::{RemoteClient, API_KEY_ENV, BASE_URL_ENV};

pub const DEFAULT_TEMPLATE_VERSION: &str = "stream-template-v1";

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("prompt configuration: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}; fall back to the template source if policy allows")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}; fall back to the template source if policy allows")]
    Protocol(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Template,
    RemoteLlm,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Template => "template",
            Source::RemoteLlm => "remote_llm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles after each failed attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Log request bodies verbatim at debug level.
    #[serde(default)]
    pub log_requests: bool,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_parallelism() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub prefix: String,
    pub suffix: String,
    pub template_version: String,
    pub source: Source,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    /// Name of the predicted variable, used in auxiliary pairs.
    #[serde(default = "default_target")]
    pub target_name: String,
}

fn default_target() -> String {
    "water temperature".into()
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prefix: "The following are daily weather drivers and related measurements for a \
                     river segment in a river basin."
                .into(),
            suffix: "Summarize the data in 2-4 fluent sentences, preserving all numeric values \
                     exactly."
                .into(),
            template_version: DEFAULT_TEMPLATE_VERSION.into(),
            source: Source::Template,
            remote: None,
            target_name: default_target(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), DescribeError> {
        if self.prefix.trim().is_empty() || self.suffix.trim().is_empty() {
            return Err(DescribeError::Config("prefix and suffix must be nonempty".into()));
        }
        if self.source == Source::RemoteLlm && self.remote.is_none() {
            return Err(DescribeError::Config("remote source requires a remote section".into()));
        }
        Ok(())
    }

    /// Template version for the template source, model id for the remote one.
    pub fn version_tag(&self) -> &str {
        match (self.source, &self.remote) {
            (Source::RemoteLlm, Some(r)) => &r.model_id,
            _ => &self.template_version,
        }
    }

    /// Full prompt sent to a chat-completion model.
    pub fn assemble_prompt(&self, rec: &LinearizedRecord) -> String {
        format!("{}\n{}\n{}", self.prefix, rec.bracketed_lines(), self.suffix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    /// Template version or model id.
    pub version: String,
    pub created: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub cache_key: String,
    pub provenance: Provenance,
}

/// SHA-256 (hex) of the version tag, prefix, pairs and suffix.
pub fn cache_key(cfg: &PromptConfig, rec: &LinearizedRecord) -> String {
    let pairs: Vec<(&str, &str)> =
        rec.pairs.iter().map(|p| (p.key.as_str(), p.value.as_str())).collect();
    let canonical = serde_json::to_vec(&(cfg.version_tag(), &cfg.prefix, pairs, &cfg.suffix))
        .expect("serializable");
    hex::encode(Sha256::digest(canonical))
}

fn long_date(d: NaiveDate) -> String {
    d.format("%B %-d, %Y").to_string()
}

fn unit_words(unit: Unit) -> &'static str {
    match unit {
        Unit::Millimeters => "millimeters",
        Unit::DegreesCelsius => "degrees Celsius",
        Unit::WattsPerSquareMeter => "watts per square meter",
        Unit::Fraction => "",
    }
}

/// A phrase appended when a feature falls below a threshold.
struct PhraseRule {
    feature: &'static str,
    below: f64,
    phrase: &'static str,
}

const PHRASE_RULES: &[PhraseRule] = &[PhraseRule {
    feature: "air_temperature",
    below: 0.0,
    phrase: "where freezing-thawing and phase change may occur",
}];

fn feature_sentence(name: &str, key: &str, value: &str, unit: Option<Unit>) -> String {
    let numeric: f64 = value.parse().unwrap_or(f64::NAN);
    let mut s = match (name, unit) {
        ("rainfall", _) if numeric == 0.0 => "There was no recorded rainfall".to_string(),
        ("air_temperature", Some(u)) => {
            format!("The average air temperature was {value} {}", unit_words(u))
        }
        ("solar_radiation", Some(u)) => {
            format!("The solar radiation measured was {value} {}", unit_words(u))
        }
        (_, Some(Unit::Fraction)) => format!("The {key} fraction was {value}"),
        (_, Some(u)) => format!("The {key} was {value} {}", unit_words(u)),
        (_, None) => {
            log::warn!("no unit metadata for {name:?}; rendering a unitless sentence");
            format!("The {key} was {value}")
        }
    };
    for rule in PHRASE_RULES {
        if rule.feature == name && numeric < rule.below {
            s.push_str(", ");
            s.push_str(rule.phrase);
        }
    }
    s.push('.');
    s
}

/// Deterministic template text for a record (one paragraph).
pub fn template_text(rec: &LinearizedRecord) -> String {
    let mut sentences: Vec<String> = Vec::with_capacity(rec.pairs.len());
    let mut pending_date: Option<NaiveDate> = None;
    for pair in &rec.pairs {
        match &pair.kind {
            PairKind::Date => {
                let d = NaiveDate::parse_from_str(&pair.value, crate::data::DATE_FORMAT)
                    .unwrap_or(rec.date);
                if d == rec.date {
                    sentences.push(format!("Conditions on {}.", long_date(d)));
                } else {
                    pending_date = Some(d);
                }
            }
            PairKind::Auxiliary { relation, site } => {
                let d = pending_date.unwrap_or(rec.date);
                let at = match relation {
                    Relation::CurrentSite => format!("site {site}"),
                    Relation::Neighbor => format!("neighbor site {site}"),
                };
                let target = pair
                    .key
                    .strip_prefix("observed ")
                    .and_then(|k| k.split(" at ").next())
                    .unwrap_or("water temperature");
                sentences.push(format!(
                    "On {}, the observed {target} at {at} was {} degrees Celsius.",
                    long_date(d),
                    pair.value
                ));
            }
            PairKind::Feature { name, unit } => {
                sentences.push(feature_sentence(name, &pair.key, &pair.value, *unit));
            }
        }
    }
    sentences.join(" ")
}

/// Renders a record with the template engine.
pub fn render_template(cfg: &PromptConfig, rec: &LinearizedRecord) -> Result<Description, DescribeError> {
    cfg.validate()?;
    if cfg.source != Source::Template {
        return Err(DescribeError::Config("render_template requires the template source".into()));
    }
    Ok(Description {
        text: template_text(rec),
        cache_key: cache_key(cfg, rec),
        provenance: Provenance {
            source: Source::Template,
            version: cfg.template_version.clone(),
            created: Utc::now(),
        },
    })
}

/// Routes records to the configured source, consulting the cache first.
pub struct Describer {
    cfg: PromptConfig,
    cache: Option<DescriptionCache>,
    client: Option<RemoteClient>,
    cache_hits: AtomicUsize,
}

impl Describer {
    pub fn new(
        cfg: PromptConfig,
        cache: Option<DescriptionCache>,
        client: Option<RemoteClient>,
    ) -> Result<Self, DescribeError> {
        cfg.validate()?;
        if cfg.source == Source::RemoteLlm && client.is_none() {
            return Err(DescribeError::Config("remote source requires a client".into()));
        }
        Ok(Self { cfg, cache, client, cache_hits: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.cfg
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn remote_calls(&self) -> usize {
        self.client.as_ref().map_or(0, RemoteClient::calls)
    }

    pub fn describe(&self, rec: &LinearizedRecord) -> Result<Description, DescribeError> {
        let key = cache_key(&self.cfg, rec);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let desc = match self.cfg.source {
            Source::Template => render_template(&self.cfg, rec)?,
            Source::RemoteLlm => self.client.as_ref().expect("checked in new").describe(&self.cfg, rec)?,
        };
        if let Some(cache) = &self.cache {
            cache.put(&desc)?;
        }
        Ok(desc)
    }

    /// Describes many records with up to `parallelism` in-flight requests.
    /// Output order matches input order.
    pub fn describe_many(
        &self,
        recs: &[LinearizedRecord],
        parallelism: usize,
    ) -> Result<Vec<Description>, DescribeError> {
        let workers = parallelism.max(1).min(recs.len().max(1));
        if workers == 1 {
            return recs.iter().map(|r| self.describe(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<Description, DescribeError>>> =
            (0..recs.len()).map(|_| None).collect();
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= recs.len() {
                        break;
                    }
                    let r = self.describe(&recs[i]);
                    results.lock().expect("poisoned")[i] = Some(r);
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::linearize::{linearize, linearize_with_auxiliary, AuxObservation};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, crate::data::DATE_FORMAT).unwrap()
    }

    fn delaware() -> Sample {
        Sample::new("s1", d("2006-12-04"))
            .with_feature("rainfall", 0.0)
            .with_feature("air_temperature", -3.36)
            .with_feature("solar_radiation", 108.26)
    }

    #[test]
    fn delaware_description() {
        let cfg = PromptConfig::default();
        let desc = render_template(&cfg, &linearize(&delaware(), None)).unwrap();
        assert_eq!(
            desc.text,
            "Conditions on December 4, 2006. There was no recorded rainfall. The average air \
             temperature was -3.36 degrees Celsius, where freezing-thawing and phase change may \
             occur. The solar radiation measured was 108.26 watts per square meter."
        );
        assert_eq!(desc.cache_key.len(), 64);
    }

    #[test]
    fn date_only_record() {
        let cfg = PromptConfig::default();
        let desc = render_template(&cfg, &linearize(&Sample::new("s1", d("2006-12-04")), None)).unwrap();
        assert_eq!(desc.text, "Conditions on December 4, 2006.");
    }

    #[test]
    fn deterministic_text_and_key() {
        let cfg = PromptConfig::default();
        let rec = linearize(&delaware(), None);
        let a = render_template(&cfg, &rec).unwrap();
        let b = render_template(&cfg, &rec).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.cache_key, b.cache_key);
    }

    #[test]
    fn key_depends_on_every_input() {
        let cfg = PromptConfig::default();
        let rec = linearize(&delaware(), None);
        let base = cache_key(&cfg, &rec);
        let mut c2 = cfg.clone();
        c2.template_version = "v2".into();
        assert_ne!(base, cache_key(&c2, &rec));
        let mut c3 = cfg.clone();
        c3.prefix.push('!');
        assert_ne!(base, cache_key(&c3, &rec));
        let mut c4 = cfg.clone();
        c4.suffix.push('!');
        assert_ne!(base, cache_key(&c4, &rec));
        let mut rec2 = rec.clone();
        rec2.pairs[1].value = "0.01".into();
        assert_ne!(base, cache_key(&cfg, &rec2));
    }

    #[test]
    fn aux_sentence() {
        let aux = [AuxObservation {
            source_site: "s1".into(),
            date: d("2006-12-03"),
            value: Some(4.21),
            relation: Relation::CurrentSite,
        }];
        let rec = linearize_with_auxiliary(&delaware(), &aux, "water temperature", None).unwrap();
        let text = template_text(&rec);
        assert!(text.starts_with(
            "On December 3, 2006, the observed water temperature at site s1 was 4.21 degrees \
             Celsius. Conditions on December 4, 2006."
        ));
        let empty = linearize_with_auxiliary(&delaware(), &[], "water temperature", None).unwrap();
        assert_eq!(template_text(&empty), template_text(&linearize(&delaware(), None)));
    }

    #[test]
    fn unknown_unit_falls_back() {
        let s = Sample::new("s1", d("2006-12-04")).with_feature("soil_moisture", 0.3);
        let text = template_text(&linearize(&s, None));
        assert!(text.ends_with("The soil moisture was 0.30."));
    }

    #[test]
    fn rejects_empty_prefix_and_wrong_source() {
        let rec = linearize(&delaware(), None);
        let mut cfg = PromptConfig::default();
        cfg.prefix.clear();
        assert!(render_template(&cfg, &rec).is_err());
        let mut cfg = PromptConfig::default();
        cfg.source = Source::RemoteLlm;
        cfg.remote = Some(RemoteConfig {
            base_url: "http://127.0.0.1:1".into(),
            model_id: "m".into(),
            timeout_s: 1.0,
            max_retries: 0,
            backoff_ms: 1,
            parallelism: 1,
            log_requests: false,
        });
        assert!(render_template(&cfg, &rec).is_err());
    }
}
