//! Shared fixtures of the acceptance suite: the default benchmark, its
//! pre-trained checkpoint and the majority rule.

use std::sync::OnceLock;
use std::time::Instant;

use free_core::eval::{Benchmark, ExperimentConfig};
use free_core::train::Checkpoint;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

pub fn config() -> &'static ExperimentConfig {
    static CFG: OnceLock<ExperimentConfig> = OnceLock::new();
    CFG.get_or_init(|| ExperimentConfig { id: "acceptance".into(), ..Default::default() })
}

pub fn bench() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(|| config().benchmark.build().expect("benchmark builds"))
}

/// Shared pre-trained checkpoint and the seconds it took.
pub fn pretrained() -> &'static (Checkpoint, f64) {
    static P: OnceLock<(Checkpoint, f64)> = OnceLock::new();
    P.get_or_init(|| {
        let t = Instant::now();
        let ck = free_core::eval::pretrain_shared(config(), &bench().train).expect("pretraining");
        let secs = t.elapsed().as_secs_f64();
        println!("  (shared pre-training: {secs:.0} s)");
        (ck, secs)
    })
}

pub fn majority(wins: usize, total: usize) -> bool {
    total == 5 && wins >= 4
}
