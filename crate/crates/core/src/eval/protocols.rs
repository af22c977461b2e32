use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{subsample_labels, Dataset};
use crate::encode::Vocabulary;
use crate::pipeline::{template_texts, AuxRule, FeatureRule};
use crate::simulate::ADDITIONAL;
use crate::train::{finetune, pretrain, train_new, Checkpoint, LabelSource, Phase, TrainConfig, TrainLog};

use super::{evaluate, AuxConfig, Benchmark, EvalError, ExperimentConfig, ExperimentOutput, ExperimentReport, RunRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Sparsity,
    Auxiliary,
    FeatureSets,
    Transfer,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Sparsity, Protocol::Auxiliary, Protocol::FeatureSets, Protocol::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Sparsity => "sparsity",
            Protocol::Auxiliary => "auxiliary",
            Protocol::FeatureSets => "feature-sets",
            Protocol::Transfer => "transfer",
        }
    }
}

impl FromStr for Protocol {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| EvalError::Argument(format!("unknown protocol {s:?} (expected sparsity, auxiliary, feature-sets or transfer)")))
    }
}

/// Pre-training descriptions: a random subset of the additional features
/// per sample, and the simulated previous-day value on a `keep` share.
pub fn pretraining_texts(ds: &Dataset, keep: f64, seed: u64) -> Result<Vec<String>, EvalError> {
    let features = FeatureRule::AnyAdditional { seed };
    let rule = AuxRule { source: ds, labels: LabelSource::Simulated, keep, seed };
    let aux = (keep > 0.0).then_some(&rule);
    Ok(template_texts(ds, &features, aux)?)
}

/// Pre-trains on the simulated labels of `train` with the experiment's
/// model preset and pre-training settings.
pub fn pretrain_shared(cfg: &ExperimentConfig, train: &Dataset) -> Result<Checkpoint, EvalError> {
    let texts = pretraining_texts(train, cfg.aux.pretrain_keep, cfg.pretrain.seed)?;
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let model_cfg = cfg.model.with_vocab(vocab.len());
    let pre = TrainConfig { phase: Phase::Pretrain, ..cfg.pretrain.clone() };
    let (ck, report) = pretrain(train, &texts, &vocab, &model_cfg, &pre, &mut TrainLog::none())?;
    log::info!("pretrained {} epochs, best val rmse {:.3}", report.history.len(), report.best_val_rmse);
    Ok(ck)
}

/// How a run obtains its model.
enum Start<'a> {
    From(&'a Checkpoint),
    /// Fresh weights with the architecture and vocabulary of the given
    /// checkpoint.
    Scratch(&'a Checkpoint),
}

struct Job<'a> {
    condition: String,
    arm: String,
    seed: u64,
    fraction: Option<f64>,
    m: Option<usize>,
    descriptions: String,
    start: Start<'a>,
    train: &'a Dataset,
    train_texts: &'a [String],
    test: &'a Dataset,
    test_texts: &'a [String],
    cfg: TrainConfig,
}

impl Job<'_> {
    fn run(&self) -> Result<(RunRecord, Checkpoint), EvalError> {
        let started = Instant::now();
        let mut log = TrainLog::none();
        let (ck, fit) = match self.start {
            Start::From(start) => finetune(start, self.train, self.train_texts, &self.cfg, &mut log)?,
            Start::Scratch(like) => train_new(
                self.train,
                self.train_texts,
                &like.vocabulary()?,
                &like.meta.model,
                &self.cfg,
                LabelSource::Observed,
                &mut log,
            )?,
        };
        let rmse = evaluate(&ck, self.test, self.test_texts, self.cfg.window)?;
        let rec = RunRecord {
            condition: self.condition.clone(),
            arm: self.arm.clone(),
            seed: self.seed,
            fraction: self.fraction,
            m: self.m,
            rmse,
            descriptions: self.descriptions.clone(),
            checkpoint: ck.hash(),
            epochs_run: fit.history.len(),
            best_epoch: fit.best_epoch,
            wall_s: started.elapsed().as_secs_f64(),
        };
        log::info!("{} {} seed {}: rmse {:.4}", rec.condition, rec.arm, rec.seed, rec.rmse);
        Ok((rec, ck))
    }
}

fn run_jobs(jobs: &[Job<'_>], workers: usize) -> Result<Vec<(RunRecord, Checkpoint)>, EvalError> {
    if workers <= 1 {
        return jobs.iter().map(Job::run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EvalError::Argument(format!("worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(Job::run).collect())
}

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { phase: Phase::Finetune, seed, ..base.clone() }
}

fn assemble(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    results: Vec<(RunRecord, Checkpoint)>,
    mut provenance: BTreeMap<String, String>,
    mut checkpoints: BTreeMap<String, Checkpoint>,
    bench: &Benchmark,
) -> ExperimentOutput {
    let mut runs = Vec::with_capacity(results.len());
    for (rec, ck) in results {
        checkpoints.insert(rec.key(), ck);
        runs.push(rec);
    }
    provenance.insert("train_data".into(), dataset_hash(&bench.train));
    provenance.insert("test_data".into(), dataset_hash(&bench.test));
    let config = serde_json::to_value(cfg).expect("config serializes");
    ExperimentOutput { report: ExperimentReport::new(&cfg.id, protocol.name(), config, runs, provenance), checkpoints }
}

fn dataset_hash(ds: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).expect("in-memory csv");
    hex::encode(Sha256::digest(&buf))
}

/// Fine-tunes `pretrained` and, when enabled, trains a fresh model, for
/// every label fraction and seed.
pub fn run_sparsity(cfg: &ExperimentConfig, bench: &Benchmark, pretrained: &Checkpoint) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    let train_texts = template_texts(&bench.train, &FeatureRule::All, None)?;
    let test_texts = template_texts(&bench.test, &FeatureRule::All, None)?;
    let mut subsets = Vec::new();
    for &f in &cfg.fractions {
        for &seed in &cfg.seeds {
            subsets.push((f, seed, subsample_labels(&bench.train, f, seed)?));
        }
    }
    let mut jobs = Vec::new();
    for (f, seed, sub) in &subsets {
        let mut arms = vec![("pretrained", Start::From(pretrained), &cfg.finetune)];
        if cfg.include_scratch {
            arms.push(("scratch", Start::Scratch(pretrained), &cfg.scratch));
        }
        for (arm, start, base) in arms {
            jobs.push(Job {
                condition: format!("f={f}"),
                arm: arm.into(),
                seed: *seed,
                fraction: Some(*f),
                m: None,
                descriptions: "all".into(),
                start,
                train: sub,
                train_texts: &train_texts,
                test: &bench.test,
                test_texts: &test_texts,
                cfg: seeded(base, *seed),
            });
        }
    }
    let results = run_jobs(&jobs, cfg.workers)?;
    let provenance = BTreeMap::from([("pretrained".to_string(), pretrained.hash())]);
    let checkpoints = BTreeMap::from([("pretrained".to_string(), pretrained.clone())]);
    Ok(assemble(cfg, Protocol::Sparsity, results, provenance, checkpoints, bench))
}

/// Observed labels that previous-day sentences may quote: the run's
/// training labels, plus a seeded share of the test range.
fn observation_source(bench: &Benchmark, train: &Dataset, test_fraction: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(13);
    bench.full.map_samples(|s| {
        s.observed_label = if s.date <= bench.train_end {
            train.get(&s.site_id, s.date).and_then(|t| t.observed_label)
        } else {
            let shown = test_fraction >= 1.0 || rng.gen::<f64>() < test_fraction;
            s.observed_label.filter(|_| shown)
        };
    })
}

/// FREE-C descriptions for a run's training labels `train` and for the
/// test range of `bench`.
pub fn auxiliary_texts(
    bench: &Benchmark,
    train: &Dataset,
    aux: &AuxConfig,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), EvalError> {
    let observable = if aux.withhold_all { 0.0 } else { aux.test_observable_fraction };
    let source = observation_source(bench, train, observable, seed);
    let keep = if aux.withhold_all { 0.0 } else { 1.0 };
    let rule = AuxRule { source: &source, labels: LabelSource::Observed, keep, seed };
    let train_texts = template_texts(train, &FeatureRule::All, Some(&rule))?;
    let test_texts = template_texts(&bench.test, &FeatureRule::All, Some(&rule))?;
    Ok((train_texts, test_texts))
}

/// FREE against FREE-C: the same fine-tuning, with and without the
/// previous-day observation in each description.
pub fn run_auxiliary(cfg: &ExperimentConfig, bench: &Benchmark, pretrained: &Checkpoint) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    let a = &cfg.aux;
    if !(a.label_fraction > 0.0 && a.label_fraction <= 1.0) || !(0.0..=1.0).contains(&a.test_observable_fraction) {
        return Err(EvalError::Argument("auxiliary fractions must lie in [0, 1]".into()));
    }
    if bench.train.labeled_count() == 0 {
        return Err(EvalError::Argument("no observed labels on the training range".into()));
    }
    let plain_train = template_texts(&bench.train, &FeatureRule::All, None)?;
    let plain_test = template_texts(&bench.test, &FeatureRule::All, None)?;
    struct SeedData {
        seed: u64,
        sub: Dataset,
        train: Vec<String>,
        test: Vec<String>,
    }
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let sub = subsample_labels(&bench.train, a.label_fraction, seed)?;
        let (train, test) = auxiliary_texts(bench, &sub, a, seed)?;
        per_seed.push(SeedData { seed, sub, train, test });
    }
    let mut jobs = Vec::new();
    for d in &per_seed {
        for (arm, train_texts, test_texts, descriptions) in [
            ("FREE", &plain_train, &plain_test, "all"),
            ("FREE-C", &d.train, &d.test, "all+previous-day"),
        ] {
            jobs.push(Job {
                condition: format!("f={}", a.label_fraction),
                arm: arm.into(),
                seed: d.seed,
                fraction: Some(a.label_fraction),
                m: None,
                descriptions: descriptions.into(),
                start: Start::From(pretrained),
                train: &d.sub,
                train_texts,
                test: &bench.test,
                test_texts,
                cfg: seeded(&cfg.finetune, d.seed),
            });
        }
    }
    let results = run_jobs(&jobs, cfg.workers)?;
    let provenance = BTreeMap::from([("pretrained".to_string(), pretrained.hash())]);
    let checkpoints = BTreeMap::from([("pretrained".to_string(), pretrained.clone())]);
    Ok(assemble(cfg, Protocol::Auxiliary, results, provenance, checkpoints, bench))
}

/// FREE-A`m`: each description keeps the meteorological features and `m`
/// of the additional ones, drawn per sample.
pub fn run_feature_sets(cfg: &ExperimentConfig, bench: &Benchmark, pretrained: &Checkpoint) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    if let Some(&m) = cfg.m_values.iter().find(|&&m| m > ADDITIONAL.len()) {
        return Err(EvalError::Argument(format!("m = {m} exceeds the {} additional features", ADDITIONAL.len())));
    }
    for f in ADDITIONAL {
        if !bench.train.schema().iter().any(|s| s == f) {
            return Err(EvalError::Argument(format!("dataset lacks additional feature {f:?}")));
        }
    }
    struct Cell {
        seed: u64,
        m: usize,
        sub: usize,
        train: Vec<String>,
        test: Vec<String>,
    }
    let subs: Vec<Dataset> = cfg
        .seeds
        .iter()
        .map(|&seed| subsample_labels(&bench.train, cfg.feature_label_fraction, seed))
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        for &m in &cfg.m_values {
            let train = template_texts(&subs[si], &FeatureRule::Additional { m, seed }, None)?;
            let test = template_texts(&bench.test, &FeatureRule::Additional { m, seed: seed ^ 0x7e57 }, None)?;
            cells.push(Cell { seed, m, sub: si, train, test });
        }
    }
    let jobs: Vec<Job> = cells
        .iter()
        .map(|c| Job {
            condition: format!("A{}", c.m),
            arm: "pretrained".into(),
            seed: c.seed,
            fraction: Some(cfg.feature_label_fraction),
            m: Some(c.m),
            descriptions: format!("meteorological+{}", c.m),
            start: Start::From(pretrained),
            train: &subs[c.sub],
            train_texts: &c.train,
            test: &bench.test,
            test_texts: &c.test,
            cfg: seeded(&cfg.finetune, c.seed),
        })
        .collect();
    let results = run_jobs(&jobs, cfg.workers)?;
    let provenance = BTreeMap::from([("pretrained".to_string(), pretrained.hash())]);
    let checkpoints = BTreeMap::from([("pretrained".to_string(), pretrained.clone())]);
    Ok(assemble(cfg, Protocol::FeatureSets, results, provenance, checkpoints, bench))
}

/// Pre-trains on the source sites and on the target site, then runs
/// [`transfer_arms`].
pub fn run_transfer(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    let t = &cfg.transfer;
    let source: BTreeSet<&String> = t.source_sites.iter().collect();
    if source.is_empty() {
        return Err(EvalError::Argument("no source sites".into()));
    }
    if source.contains(&t.target_site) {
        return Err(EvalError::Argument(format!("target site {} is also a source site", t.target_site)));
    }
    let known = bench.full.sites();
    for s in source.iter().copied().chain([&t.target_site]) {
        if !known.contains(s) {
            return Err(EvalError::Argument(format!("unknown site {s}")));
        }
    }
    let source_ck = pretrain_shared(cfg, &bench.restrict(&t.source_sites).train)?;
    let target = bench.restrict(std::slice::from_ref(&t.target_site));
    let target_ck = pretrain_shared(cfg, &target.train)?;
    transfer_arms(cfg, &target, &source_ck, &target_ck)
}

/// The three transfer arms on the target benchmark `target`, from given
/// starting checkpoints.
pub fn transfer_arms(
    cfg: &ExperimentConfig,
    target: &Benchmark,
    source_ck: &Checkpoint,
    target_ck: &Checkpoint,
) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    let fractions = &cfg.transfer.fractions;
    let train_texts = template_texts(&target.train, &FeatureRule::All, None)?;
    let test_texts = template_texts(&target.test, &FeatureRule::All, None)?;
    let mut subsets = Vec::new();
    for &f in fractions {
        for &seed in &cfg.seeds {
            subsets.push((f, seed, subsample_labels(&target.train, f, seed)?));
        }
    }
    let mut jobs = Vec::new();
    for (f, seed, sub) in &subsets {
        for (arm, start, base) in [
            ("source-pretrained", Start::From(source_ck), &cfg.finetune),
            ("target-pretrained", Start::From(target_ck), &cfg.finetune),
            ("scratch", Start::Scratch(target_ck), &cfg.scratch),
        ] {
            jobs.push(Job {
                condition: format!("f={f}"),
                arm: arm.into(),
                seed: *seed,
                fraction: Some(*f),
                m: None,
                descriptions: "all".into(),
                start,
                train: sub,
                train_texts: &train_texts,
                test: &target.test,
                test_texts: &test_texts,
                cfg: seeded(base, *seed),
            });
        }
    }
    let results = run_jobs(&jobs, cfg.workers)?;
    let provenance = BTreeMap::from([
        ("source_pretrained".to_string(), source_ck.hash()),
        ("target_pretrained".to_string(), target_ck.hash()),
    ]);
    let checkpoints = BTreeMap::from([
        ("source_pretrained".to_string(), source_ck.clone()),
        ("target_pretrained".to_string(), target_ck.clone()),
    ]);
    Ok(assemble(cfg, Protocol::Transfer, results, provenance, checkpoints, target))
}
