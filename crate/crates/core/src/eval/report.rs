use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::Checkpoint;

use super::EvalError;

/// One trained-and-evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub condition: String,
    pub arm: String,
    pub seed: u64,
    pub fraction: Option<f64>,
    pub m: Option<usize>,
    pub rmse: f64,
    /// Which description rule produced the texts the model saw.
    pub descriptions: String,
    pub checkpoint: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub wall_s: f64,
}

impl RunRecord {
    /// Stable file stem for the run's checkpoint.
    pub fn key(&self) -> String {
        let cond: String =
            self.condition.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
        format!("{cond}__{}__seed{}", self.arm, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub arm: String,
    pub n: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub protocol: String,
    pub config: serde_json::Value,
    pub summary: Vec<ConditionSummary>,
    pub runs: Vec<RunRecord>,
    /// Hashes of the data and of the shared starting checkpoints.
    pub provenance: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn new(
        id: &str,
        protocol: &str,
        config: serde_json::Value,
        runs: Vec<RunRecord>,
        provenance: BTreeMap<String, String>,
    ) -> Self {
        let summary = summarize(&runs);
        Self { id: id.into(), protocol: protocol.into(), config, summary, runs, provenance }
    }

    /// RMSE by seed for one (condition, arm).
    pub fn rmse_by_seed(&self, condition: &str, arm: &str) -> BTreeMap<u64, f64> {
        self.runs
            .iter()
            .filter(|r| r.condition == condition && r.arm == arm)
            .map(|r| (r.seed, r.rmse))
            .collect()
    }

    /// Seeds where `better` has strictly lower (or, with `allow_ties`, not
    /// higher) RMSE than `worse`.
    pub fn wins(&self, better: (&str, &str), worse: (&str, &str), allow_ties: bool) -> (usize, usize) {
        let a = self.rmse_by_seed(better.0, better.1);
        let b = self.rmse_by_seed(worse.0, worse.1);
        let mut wins = 0;
        let mut total = 0;
        for (seed, ra) in &a {
            if let Some(rb) = b.get(seed) {
                total += 1;
                if ra < rb || (allow_ties && ra <= rb) {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }

    /// Copy with wall-clock fields zeroed, for rerun comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.runs {
            r.wall_s = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("condition,arm,n,mean_rmse,std_rmse\n");
        for c in &self.summary {
            s.push_str(&format!("{},{},{},{},{}\n", c.condition, c.arm, c.n, c.mean_rmse, c.std_rmse));
        }
        s
    }

    /// Plot-ready rows: one per run.
    pub fn long_csv(&self) -> String {
        let mut s = String::from("condition,arm,seed,rmse\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{},{}\n", r.condition, r.arm, r.seed, r.rmse));
        }
        s
    }

    /// Writes `report.json`, `table.csv` and `long.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("table.csv"), self.summary_csv())?;
        fs::write(dir.join("long.csv"), self.long_csv())?;
        Ok(())
    }
}

fn summarize(runs: &[RunRecord]) -> Vec<ConditionSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        let k = (r.condition.clone(), r.arm.clone());
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r.rmse);
    }
    order
        .into_iter()
        .map(|k| {
            let v = &groups[&k];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            ConditionSummary { condition: k.0, arm: k.1, n, mean_rmse: mean, std_rmse: var.sqrt() }
        })
        .collect()
}

/// A report together with the checkpoints its runs produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    /// Keyed by [`RunRecord::key`], plus shared starting points under
    /// their provenance names.
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

impl ExperimentOutput {
    /// Report files plus `checkpoints/<key>.ckpt`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        self.report.write(dir)?;
        let ck_dir = dir.join("checkpoints");
        fs::create_dir_all(&ck_dir)?;
        for (k, ck) in &self.checkpoints {
            ck.save(&ck_dir.join(format!("{k}.ckpt")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(condition: &str, arm: &str, seed: u64, rmse: f64) -> RunRecord {
        RunRecord {
            condition: condition.into(),
            arm: arm.into(),
            seed,
            fraction: None,
            m: None,
            rmse,
            descriptions: "all".into(),
            checkpoint: String::new(),
            epochs_run: 1,
            best_epoch: 1,
            wall_s: seed as f64,
        }
    }

    #[test]
    fn summary_and_wins() {
        let runs = vec![
            rec("f=0.01", "pretrained", 1, 1.0),
            rec("f=0.01", "scratch", 1, 2.0),
            rec("f=0.01", "pretrained", 2, 3.0),
            rec("f=0.01", "scratch", 2, 2.0),
        ];
        let r = ExperimentReport::new("t", "sparsity", serde_json::Value::Null, runs, BTreeMap::new());
        assert_eq!(r.summary.len(), 2);
        assert_eq!(r.summary[0].arm, "pretrained");
        assert_eq!(r.summary[0].mean_rmse, 2.0);
        assert!((r.summary[0].std_rmse - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.wins(("f=0.01", "pretrained"), ("f=0.01", "scratch"), false), (1, 2));
        assert_eq!(r.long_csv().lines().count(), 5);
        assert_eq!(r.without_timing().runs[1].wall_s, 0.0);
        let back: ExperimentReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn keys_are_file_safe() {
        assert_eq!(rec("f=0.01", "scratch", 3, 0.0).key(), "f_0.01__scratch__seed3");
    }
}
