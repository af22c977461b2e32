//! `free`: data generation, description, training, prediction,
//! evaluation and experiments from the command line.

mod config;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use free_core::data::split_by_date;
use free_core::describe::{Describer, DescriptionCache, RemoteClient, Source};
use free_core::encode::Vocabulary;
use free_core::eval::{
    evaluate, export_embeddings_csv, predict_dataset, pretrain_shared, pretraining_texts, probe_embeddings,
    run_auxiliary, run_feature_sets, run_sparsity, run_transfer, season_samples, Protocol,
};
use free_core::gradcheck::{run_suite, TOLERANCE};
use free_core::pipeline::{records, AuxRule, FeatureRule};
use free_core::train::{finetune, train_new, Checkpoint, LabelSource, Phase, TrainConfig, TrainLog};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "free", version, about = "Describe environmental records as text and learn from them")]
struct Cli {
    /// JSON run configuration; omitted keys take defaults, unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel worker slots (experiment runs, remote description requests).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark as a dataset CSV.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Turn dataset rows into descriptions (JSON lines).
    Describe {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append-only description cache.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Overrides `prompt.source` from the config.
        #[arg(long, value_parser = ["template", "remote"])]
        source: Option<String>,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Build a vocabulary JSON from a descriptions file.
    BuildVocab {
        #[arg(long)]
        descriptions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on simulated labels.
    Pretrain {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Descriptions to train on; generated when omitted.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// Vocabulary JSON; built from the descriptions when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Per-epoch JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Continue training a checkpoint on observed labels.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Train fresh weights with the checkpoint's architecture instead.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Write `site_id,date,prediction` for every row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        window: usize,
    },
    /// RMSE against observed labels.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        window: usize,
        /// Score only rows dated after this day (YYYY-MM-DD).
        #[arg(long)]
        after: Option<NaiveDate>,
    },
    /// Run an experiment protocol: sparsity, auxiliary, feature-sets or transfer.
    Experiment {
        protocol: String,
        /// Parent directory of `<experiment id>/`.
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Use this checkpoint instead of pre-training (not for transfer).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Export description embeddings of seasonal samples and probe them.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_season: usize,
    },
    /// Finite-difference check of the encoder and LSTM gradients.
    Gradcheck {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        count: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct TextArgs {
    /// Keep the meteorological features plus this many additional ones.
    #[arg(long)]
    additional: Option<usize>,
    /// Insert the previous-day label of the same site.
    #[arg(long, value_parser = ["observed", "simulated"])]
    previous_day: Option<String>,
}

impl TextArgs {
    fn features(&self, seed: u64) -> FeatureRule {
        match self.additional {
            Some(m) => FeatureRule::Additional { m, seed },
            None => FeatureRule::All,
        }
    }

    fn labels(&self) -> Option<LabelSource> {
        self.previous_day.as_deref().map(|p| if p == "observed" { LabelSource::Observed } else { LabelSource::Simulated })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolved(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.experiment.workers = w;
    }
    Ok(cfg)
}

/// Writes the resolved configuration beside `out`.
fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    std::fs::write(out.with_file_name(name), cfg.to_json())?;
    Ok(())
}

fn texts_for(
    descriptions: Option<&Path>,
    ds: &free_core::data::Dataset,
    fallback: impl FnOnce() -> Result<Vec<String>>,
) -> Result<Vec<String>> {
    match descriptions {
        Some(p) => io::aligned_texts(p, ds),
        None => fallback(),
    }
}

fn plain_texts(ds: &free_core::data::Dataset) -> Result<Vec<String>> {
    Ok(free_core::pipeline::template_texts(ds, &FeatureRule::All, None)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolved(&cli)?;
    match &cli.command {
        Command::GenSynth { out, sites, days } => {
            let mut cfg = cfg.clone();
            if let Some(s) = sites {
                cfg.benchmark.sites = *s;
            }
            if let Some(d) = days {
                cfg.benchmark.days = *d;
            }
            let ds = cfg.benchmark.generate()?;
            ds.save_csv(out)?;
            write_config(&cfg, out)?;
            println!("wrote {} rows for {} sites to {}", ds.len(), ds.sites().len(), out.display());
        }
        Command::Describe { input, out, cache, source, text } => {
            let mut cfg = cfg.clone();
            if let Some(src) = source {
                cfg.prompt.source = if src == "remote" { Source::RemoteLlm } else { Source::Template };
            }
            let ds = io::load(input)?;
            let seed = cli.seed.unwrap_or(0);
            let labels = text.labels();
            let rule = labels.map(|l| AuxRule { source: &ds, labels: l, keep: 1.0, seed });
            let recs = records(&ds, &text.features(seed), rule.as_ref())?;
            let cache = cache.as_deref().map(DescriptionCache::open).transpose()?;
            let client = match cfg.prompt.source {
                Source::RemoteLlm => Some(RemoteClient::from_env(
                    cfg.prompt.remote.as_ref().context("remote source needs a prompt.remote section")?,
                )?),
                Source::Template => None,
            };
            let parallel = cli.workers.or(cfg.prompt.remote.as_ref().map(|r| r.parallelism)).unwrap_or(1);
            let describer = Describer::new(cfg.prompt.clone(), cache, client)?;
            let descs = describer.describe_many(&recs, parallel)?;
            io::write_descriptions(out, &recs, &descs)?;
            write_config(&cfg, out)?;
            println!(
                "wrote {} descriptions ({} cache hits, {} remote calls)",
                descs.len(),
                describer.cache_hits(),
                describer.remote_calls()
            );
        }
        Command::BuildVocab { descriptions, out } => {
            let texts: Vec<String> = io::read_descriptions(descriptions)?.into_iter().map(|d| d.text).collect();
            let vocab = Vocabulary::build(texts.iter().map(String::as_str));
            std::fs::write(out, vocab.to_json())?;
            println!("vocabulary of {} tokens", vocab.len());
        }
        Command::Pretrain { input, out, descriptions, vocab, log } => {
            let ds = io::load(input)?;
            let train_cfg = TrainConfig { phase: Phase::Pretrain, ..cfg.pretrain.clone() };
            let texts = texts_for(descriptions.as_deref(), &ds, || {
                Ok(pretraining_texts(&ds, cfg.experiment.aux.pretrain_keep, train_cfg.seed)?)
            })?;
            let vocab = match vocab {
                Some(p) => Vocabulary::from_json(&std::fs::read_to_string(p)?)?,
                None => Vocabulary::build(texts.iter().map(String::as_str)),
            };
            let model_cfg = cfg.model.with_vocab(vocab.len());
            let mut file = log.as_deref().map(std::fs::File::create).transpose()?;
            let mut tl = TrainLog(file.as_mut().map(|f| f as &mut dyn std::io::Write));
            let (ck, report) =
                train_new(&ds, &texts, &vocab, &model_cfg, &train_cfg, LabelSource::Simulated, &mut tl)?;
            ck.save(out)?;
            write_config(&cfg, out)?;
            println!(
                "pretrained {} epochs, best validation RMSE {:.4} at epoch {}; checkpoint {}",
                report.history.len(),
                report.best_val_rmse,
                report.best_epoch,
                ck.hash()
            );
        }
        Command::Finetune { model, input, out, descriptions, log, from_scratch } => {
            let start = Checkpoint::load(model)?;
            let ds = io::load(input)?;
            let texts = texts_for(descriptions.as_deref(), &ds, || plain_texts(&ds))?;
            let base = if *from_scratch { &cfg.scratch } else { &cfg.finetune };
            let train_cfg = TrainConfig { phase: Phase::Finetune, ..base.clone() };
            let mut file = log.as_deref().map(std::fs::File::create).transpose()?;
            let mut tl = TrainLog(file.as_mut().map(|f| f as &mut dyn std::io::Write));
            let (ck, report) = if *from_scratch {
                let vocab = start.vocabulary()?;
                train_new(&ds, &texts, &vocab, &start.meta.model, &train_cfg, LabelSource::Observed, &mut tl)?
            } else {
                finetune(&start, &ds, &texts, &train_cfg, &mut tl)?
            };
            ck.save(out)?;
            write_config(&cfg, out)?;
            println!(
                "trained {} epochs, best validation RMSE {:.4}; checkpoint {}",
                report.history.len(),
                report.best_val_rmse,
                ck.hash()
            );
        }
        Command::Predict { model, input, out, descriptions, window } => {
            let ck = Checkpoint::load(model)?;
            let ds = io::load(input)?;
            let texts = texts_for(descriptions.as_deref(), &ds, || plain_texts(&ds))?;
            let preds = predict_dataset(&ck, &ds, &texts, *window)?;
            io::write_predictions(out, &ds, &preds)?;
            write_config(&cfg, out)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Evaluate { model, input, descriptions, window, after } => {
            let ck = Checkpoint::load(model)?;
            let full = io::load(input)?;
            let texts = texts_for(descriptions.as_deref(), &full, || plain_texts(&full))?;
            let (ds, texts) = match after {
                Some(d) => {
                    let (_, rest) = split_by_date(&full, *d)?;
                    let keep: Vec<String> = full
                        .samples()
                        .iter()
                        .zip(texts)
                        .filter(|(s, _)| s.date > *d)
                        .map(|(_, t)| t)
                        .collect();
                    (rest, keep)
                }
                None => (full, texts),
            };
            let rmse = evaluate(&ck, &ds, &texts, *window)?;
            let n = ds.labeled_count();
            println!("{}", serde_json::json!({ "rmse": rmse, "labels": n, "checkpoint": ck.hash() }));
        }
        Command::Experiment { protocol, out_dir, pretrained } => {
            let protocol: Protocol = protocol.parse()?;
            let exp = cfg.experiment_config();
            exp.validate()?;
            let bench = exp.benchmark.build()?;
            let output = match protocol {
                Protocol::Transfer => {
                    if pretrained.is_some() {
                        bail!("transfer pre-trains its own source and target checkpoints");
                    }
                    run_transfer(&exp, &bench)?
                }
                _ => {
                    let ck = match pretrained {
                        Some(p) => Checkpoint::load(p)?,
                        None => pretrain_shared(&exp, &bench.train)?,
                    };
                    match protocol {
                        Protocol::Sparsity => run_sparsity(&exp, &bench, &ck)?,
                        Protocol::Auxiliary => run_auxiliary(&exp, &bench, &ck)?,
                        _ => run_feature_sets(&exp, &bench, &ck)?,
                    }
                }
            };
            let dir = out_dir.join(&exp.id);
            output.write(&dir)?;
            bench.full.save_csv(&dir.join("data.csv"))?;
            std::fs::write(dir.join("config.json"), cfg.to_json())?;
            print!("{}", output.report.summary_csv());
            println!("report written to {}", dir.display());
        }
        Command::ExportEmbeddings { model, input, out, per_season } => {
            let ck = Checkpoint::load(model)?;
            let ds = io::load(input)?;
            let seed = cli.seed.unwrap_or(1);
            let all = plain_texts(&ds)?;
            let idx = season_samples(&ds, *per_season, seed)?;
            let samples: Vec<_> = idx.iter().map(|&i| ds.samples()[i].clone()).collect();
            let texts: Vec<String> = idx.iter().map(|&i| all[i].clone()).collect();
            let rows = export_embeddings_csv(&ck, &samples, &texts, std::fs::File::create(out)?)?;
            let probe = probe_embeddings(&ck, &samples, &texts, cfg.experiment.probe.train_fraction, seed)?;
            write_config(&cfg, out)?;
            println!("wrote {rows} embeddings; season probe accuracy {:.4}", probe.accuracy);
        }
        Command::Gradcheck { count } => {
            let seed = cli.seed.unwrap_or(1);
            let reports = run_suite(seed, *count);
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            for r in &reports {
                println!("seed {} {:<12} {:>6} entries  max rel error {:.3e}", r.seed, r.component, r.entries, r.max_rel_error);
            }
            println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
            if worst >= TOLERANCE {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
