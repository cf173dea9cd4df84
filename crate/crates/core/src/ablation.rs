//! Loss-group ablation on a synthetic benchmark.
//!
//! One run trains a network for an experiment label and seed, then records the pooled
//! segmentation mIOU on the held-out split. Runs are stored as CSV rows `label,seed,miou_seg`
//! so a long protocol can be resumed.

use std::collections::BTreeMap;

use crate::annotation::SceneSpec;
use crate::dataset::{synth_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train, TrainConfig};

pub const RUNS_HEADER: &str = "label,seed,miou_seg";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub class_count: usize,
    pub side: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub scribble_width: usize,
    pub superpixels: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            side: 64,
            train_count: 200,
            test_count: 60,
            scribble_width: 20,
            superpixels: 50,
            epochs: 30,
            seeds: (0..5).collect(),
            train_data_seed: 2024,
            test_data_seed: 7,
        }
    }
}

impl AblationSpec {
    /// G1, G2, G3 on the scribble/superpixel setting, then the fully supervised reference.
    pub fn labels(&self) -> Vec<String> {
        let base = format!("E-SCR{}-SUP{}-N", self.scribble_width, self.superpixels);
        let mut labels: Vec<String> = ["G1", "G2", "G3"].iter().map(|g| format!("{base}-{g}")).collect();
        labels.push("E-FULL".to_string());
        labels
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let make = |count, seed| {
            synth_dataset(&SynthSpec {
                scene: SceneSpec::new(self.side, self.side, self.class_count),
                count,
                scribble_width: self.scribble_width,
                seed,
            })
        };
        Ok((make(self.train_count, self.train_data_seed)?, make(self.test_count, self.test_data_seed)?))
    }

    pub fn train_config(&self, label: &str, seed: u64) -> TrainConfig {
        TrainConfig {
            experiment_label: label.to_string(),
            epochs: self.epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub miou: f64,
}

impl AblationRun {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.label, self.seed, self.miou)
    }
}

pub fn parse_runs(text: &str) -> Result<Vec<AblationRun>> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("runs line {line}: {msg}"));
    let mut runs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == RUNS_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [label, seed, miou] = fields[..] else {
            return Err(bad(i + 1, "expected 3 fields"));
        };
        runs.push(AblationRun {
            label: label.to_string(),
            seed: seed.parse().map_err(|_| bad(i + 1, "bad seed"))?,
            miou: miou.parse().map_err(|_| bad(i + 1, "bad miou"))?,
        });
    }
    Ok(runs)
}

pub fn render_runs(runs: &[AblationRun]) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in runs {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Trains one label/seed pair and scores it on the test split.
pub fn run_one(spec: &AblationSpec, train_set: &Dataset, test_set: &Dataset, label: &str, seed: u64) -> Result<AblationRun> {
    let model = train(train_set, &spec.train_config(label, seed), None, |_| {})?;
    let eval = evaluate(&model.network, test_set, false)?;
    Ok(AblationRun {
        label: label.to_string(),
        seed,
        miou: eval.seg.miou,
    })
}

/// Runs every label/seed pair missing from `done`, seed-major, calling `on_run` after each.
pub fn run_ablation(
    spec: &AblationSpec,
    done: &[AblationRun],
    mut on_run: impl FnMut(&AblationRun) -> Result<()>,
) -> Result<Vec<AblationRun>> {
    let (train_set, test_set) = spec.datasets()?;
    let mut runs = done.to_vec();
    for &seed in &spec.seeds {
        for label in spec.labels() {
            if runs.iter().any(|r| r.label == label && r.seed == seed) {
                continue;
            }
            let run = run_one(spec, &train_set, &test_set, &label, seed)?;
            on_run(&run)?;
            runs.push(run);
        }
    }
    Ok(runs)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median mIOU and run count per label.
pub fn medians(runs: &[AblationRun]) -> BTreeMap<String, (f64, usize)> {
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_label.entry(r.label.clone()).or_default().push(r.miou);
    }
    by_label
        .into_iter()
        .map(|(l, v)| {
            let m = median(&v).expect("non-empty");
            (l, (m, v.len()))
        })
        .collect()
}

/// Outcome of the ordering check `G3 ≥ G2 ≥ G1` and `FULL ≥ G3` on medians.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub full: f64,
    pub g2_ge_g1: bool,
    pub g3_ge_g2: bool,
    pub full_ge_g3: bool,
}

impl Ordering {
    pub fn holds(&self) -> bool {
        self.g2_ge_g1 && self.g3_ge_g2 && self.full_ge_g3
    }
}

/// Checks the orderings; every label needs one run per seed.
pub fn check_ordering(spec: &AblationSpec, runs: &[AblationRun]) -> Result<Ordering> {
    let meds = medians(runs);
    let labels = spec.labels();
    let mut values = Vec::with_capacity(4);
    for label in &labels {
        match meds.get(label) {
            Some(&(m, n)) if n == spec.seeds.len() => values.push(m),
            Some(&(_, n)) => {
                return Err(Error::InvalidArgument(format!(
                    "{label}: {n} runs, expected {}",
                    spec.seeds.len()
                )))
            }
            None => return Err(Error::InvalidArgument(format!("{label}: no runs"))),
        }
    }
    let (g1, g2, g3, full) = (values[0], values[1], values[2], values[3]);
    Ok(Ordering {
        g1,
        g2,
        g3,
        full,
        g2_ge_g1: g2 >= g1,
        g3_ge_g2: g3 >= g2,
        full_ge_g3: full >= g3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs(rows: &[(&str, u64, f64)]) -> Vec<AblationRun> {
        rows.iter()
            .map(|&(l, s, m)| AblationRun {
                label: l.to_string(),
                seed: s,
                miou: m,
            })
            .collect()
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn labels_follow_setting() {
        let spec = AblationSpec::default();
        assert_eq!(
            spec.labels(),
            ["E-SCR20-SUP50-N-G1", "E-SCR20-SUP50-N-G2", "E-SCR20-SUP50-N-G3", "E-FULL"]
        );
        for l in spec.labels() {
            spec.train_config(&l, 0).resolve().unwrap();
        }
    }

    #[test]
    fn runs_round_trip() {
        let r = runs(&[("E-FULL", 3, 0.1 + 0.2), ("E-SCR20-SUP50-N-G1", 0, 1.0 / 3.0)]);
        assert_eq!(parse_runs(&render_runs(&r)).unwrap(), r);
        assert!(parse_runs("a,b").is_err());
        assert!(parse_runs("a,x,0.5").is_err());
    }

    #[test]
    fn ordering_on_medians_tolerates_single_inversions() {
        let spec = AblationSpec {
            seeds: vec![0, 1, 2],
            ..AblationSpec::default()
        };
        let l = spec.labels();
        let mut rows = Vec::new();
        for (i, base) in [0.5, 0.6, 0.7, 0.9].into_iter().enumerate() {
            rows.push((l[i].as_str(), 0, base));
            rows.push((l[i].as_str(), 1, base + 0.01));
            rows.push((l[i].as_str(), 2, if i == 2 { 0.1 } else { base }));
        }
        let ord = check_ordering(&spec, &runs(&rows)).unwrap();
        assert!(ord.holds(), "{ord:?}");
        rows.retain(|r| !(r.0 == l[3] && r.1 == 2));
        assert!(check_ordering(&spec, &runs(&rows)).is_err());
    }

    #[test]
    fn ordering_failure_is_reported() {
        let spec = AblationSpec {
            seeds: vec![0],
            ..AblationSpec::default()
        };
        let l = spec.labels();
        let rows = [(l[0].as_str(), 0, 0.6), (l[1].as_str(), 0, 0.5), (l[2].as_str(), 0, 0.7), (l[3].as_str(), 0, 0.8)];
        let ord = check_ordering(&spec, &runs(&rows)).unwrap();
        assert!(!ord.g2_ge_g1 && ord.g3_ge_g2 && ord.full_ge_g3 && !ord.holds());
    }

    #[test]
    fn tiny_protocol_runs_and_resumes() {
        let spec = AblationSpec {
            side: 32,
            train_count: 4,
            test_count: 2,
            scribble_width: 5,
            superpixels: 30,
            epochs: 1,
            seeds: vec![0],
            ..AblationSpec::default()
        };
        let mut seen = 0;
        let first = run_ablation(&spec, &[], |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 4);
        assert!(first.iter().all(|r| (0.0..=1.0).contains(&r.miou)));
        let again = run_ablation(&spec, &first, |_| panic!("nothing left to run")).unwrap();
        assert_eq!(again, first);
    }
}
