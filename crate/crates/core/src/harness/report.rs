use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

pub const CSV_COLUMNS: [&str; 13] = [
    "run_id",
    "seed",
    "loss_kind",
    "tau",
    "metric",
    "epoch_or_eps",
    "phase",
    "clean_acc",
    "robust_acc",
    "asr",
    "stoch_mean",
    "second_argmax_rate",
    "noise_rate",
];

/// Clean-accuracy gap above which two runs are not considered matched.
pub const MATCHED_ACCURACY_GAP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Test metrics after each epoch of clean training (epoch 0 = init).
    Train,
    /// Attack sweep of the final clean model, keyed by ε.
    Attack,
    /// Test metrics after each epoch of training on noisy labels.
    Noise,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Attack => "attack",
            Phase::Noise => "noise",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "attack" => Ok(Phase::Attack),
            "noise" => Ok(Phase::Noise),
            other => Err(Error::Consistency(format!("unknown phase {other:?}"))),
        }
    }
}

/// One per-seed line of metrics.csv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub epoch_or_eps: f64,
    pub phase: Phase,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub asr: Option<f64>,
    pub stoch_mean: Option<f64>,
    pub second_argmax_rate: Option<f64>,
    pub noise_rate: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, phase: Phase, epoch_or_eps: f64) -> Self {
        Self {
            seed,
            epoch_or_eps,
            phase,
            clean_acc: None,
            robust_acc: None,
            asr: None,
            stoch_mean: None,
            second_argmax_rate: None,
            noise_rate: 0.0,
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.clean_acc, self.robust_acc, self.asr, self.stoch_mean, self.second_argmax_rate]
    }
}

/// Mean and sample standard deviation over seeds of one (phase, key) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub phase: Phase,
    pub epoch_or_eps: f64,
    pub seeds: usize,
    pub mean: [Option<f64>; 5],
    pub std: [Option<f64>; 5],
    pub noise_rate: f64,
}

/// All metrics of one run, identified by its config hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub loss_kind: String,
    pub tau: Option<f64>,
    pub metric: Option<String>,
    pub rows: Vec<MetricsRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, column: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Consistency(format!("column {column}: {s:?} is not a number")))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct seeds in order of first appearance.
    pub fn seeds(&self) -> Vec<u64> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.seed) {
                seen.push(r.seed);
            }
        }
        seen
    }

    pub fn rows_for(&self, phase: Phase) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// Distinct keys of `phase` in order of first appearance.
    pub fn keys(&self, phase: Phase) -> Vec<f64> {
        let mut keys: Vec<f64> = Vec::new();
        for r in self.rows_for(phase) {
            if !keys.iter().any(|k| k.to_bits() == r.epoch_or_eps.to_bits()) {
                keys.push(r.epoch_or_eps);
            }
        }
        keys
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.keys(Phase::Attack)
    }

    /// Human-readable arm name, e.g. `drsl τ=0.5`.
    pub fn label(&self) -> String {
        match self.tau {
            Some(t) => format!("{} τ={t}", self.loss_kind),
            None => self.loss_kind.clone(),
        }
    }

    /// Groups rows by (phase, key) in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for phase in [Phase::Train, Phase::Attack, Phase::Noise] {
            for key in self.keys(phase) {
                let group: Vec<&MetricsRow> = self
                    .rows_for(phase)
                    .filter(|r| r.epoch_or_eps.to_bits() == key.to_bits())
                    .collect();
                let mut mean = [None; 5];
                let mut std = [None; 5];
                for col in 0..5 {
                    let vals: Vec<f64> = group.iter().filter_map(|r| r.values()[col]).collect();
                    if !vals.is_empty() {
                        let (m, s) = mean_std(&vals);
                        mean[col] = Some(m);
                        std[col] = Some(s);
                    }
                }
                out.push(Aggregate {
                    phase,
                    epoch_or_eps: key,
                    seeds: group.len(),
                    mean,
                    std,
                    noise_rate: group[0].noise_rate,
                });
            }
        }
        out
    }

    /// Mean over seeds of `column(row)` for rows of `phase` at `key`.
    pub fn mean_at(&self, phase: Phase, key: f64, column: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows_for(phase)
            .filter(|r| r.epoch_or_eps.to_bits() == key.to_bits())
            .filter_map(column)
            .collect();
        (!vals.is_empty()).then(|| mean_std(&vals).0)
    }

    /// Per-seed test accuracy after the last epoch of `phase`.
    pub fn final_accuracies(&self, phase: Phase) -> Vec<(u64, f64)> {
        let Some(last) = self.keys(phase).into_iter().reduce(f64::max) else {
            return Vec::new();
        };
        self.rows_for(phase)
            .filter(|r| r.epoch_or_eps == last)
            .filter_map(|r| r.clean_acc.map(|a| (r.seed, a)))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        let tau = fmt_opt(self.tau);
        let metric = self.metric.clone().unwrap_or_default();
        let mut emit = |seed: String, phase: Phase, key: f64, vals: [Option<f64>; 5], noise: f64| {
            let mut rec = vec![
                self.run_id.clone(),
                seed,
                self.loss_kind.clone(),
                tau.clone(),
                metric.clone(),
                key.to_string(),
                phase.as_str().to_string(),
            ];
            rec.extend(vals.iter().map(|v| fmt_opt(*v)));
            rec.push(noise.to_string());
            w.write_record(&rec)
        };
        for r in &self.rows {
            emit(r.seed.to_string(), r.phase, r.epoch_or_eps, r.values(), r.noise_rate)?;
        }
        for a in self.aggregates() {
            emit("mean".into(), a.phase, a.epoch_or_eps, a.mean, a.noise_rate)?;
            emit("std".into(), a.phase, a.epoch_or_eps, a.std, a.noise_rate)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Consistency(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses metrics.csv, checking that aggregate rows agree with the
    /// per-seed rows to 1e-12.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if headers != CSV_COLUMNS {
            return Err(Error::Consistency(format!("unexpected metrics header {headers:?}")));
        }
        let mut report: Option<MetricsReport> = None;
        let mut stored = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let current = report.get_or_insert_with(|| MetricsReport {
                run_id: field(0).to_string(),
                loss_kind: field(2).to_string(),
                tau: None,
                metric: (!field(4).is_empty()).then(|| field(4).to_string()),
                rows: Vec::new(),
            });
            if current.tau.is_none() {
                current.tau = parse_opt(field(3), "tau")?;
            }
            if field(0) != current.run_id || field(2) != current.loss_kind {
                return Err(Error::Consistency("metrics.csv mixes several runs".into()));
            }
            let phase = Phase::parse(field(6))?;
            let key = parse_opt(field(5), "epoch_or_eps")?
                .ok_or_else(|| Error::Consistency("missing epoch_or_eps".into()))?;
            let mut vals = [None; 5];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = parse_opt(field(7 + k), CSV_COLUMNS[7 + k])?;
            }
            let noise = parse_opt(field(12), "noise_rate")?.unwrap_or(0.0);
            match field(1) {
                "mean" | "std" => stored.push((field(1) == "mean", phase, key, vals)),
                s => {
                    let seed = s
                        .parse()
                        .map_err(|_| Error::Consistency(format!("bad seed {s:?}")))?;
                    current.rows.push(MetricsRow {
                        seed,
                        epoch_or_eps: key,
                        phase,
                        clean_acc: vals[0],
                        robust_acc: vals[1],
                        asr: vals[2],
                        stoch_mean: vals[3],
                        second_argmax_rate: vals[4],
                        noise_rate: noise,
                    });
                }
            }
        }
        let report = report.ok_or_else(|| Error::Consistency("metrics.csv has no rows".into()))?;
        let recomputed = report.aggregates();
        for (is_mean, phase, key, vals) in stored {
            let agg = recomputed
                .iter()
                .find(|a| a.phase == phase && a.epoch_or_eps.to_bits() == key.to_bits())
                .ok_or_else(|| Error::Consistency(format!("aggregate for {phase:?} {key} has no rows")))?;
            let expect = if is_mean { agg.mean } else { agg.std };
            for (got, want) in vals.iter().zip(expect) {
                let ok = match (got, want) {
                    (Some(g), Some(w)) => (g - w).abs() <= 1e-12,
                    (None, None) => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::Consistency(format!(
                        "stored aggregate for {phase:?} {key} disagrees with per-seed rows"
                    )));
                }
            }
        }
        Ok(report)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_csv()?.as_bytes())
    }
}

/// Robust accuracy of two runs at one ε.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub epsilon: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b`.
    pub difference: f64,
    pub a_better: usize,
    pub b_better: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
    /// |mean final clean accuracy of a − that of b|.
    pub clean_accuracy_gap: Option<f64>,
    /// Whether the gap is within [`MATCHED_ACCURACY_GAP`].
    pub matched: bool,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epsilon", "mean_a", "mean_b", "difference", "a_better", "b_better", "ties"])?;
        for r in &self.rows {
            w.write_record([
                r.epsilon.to_string(),
                r.mean_a.to_string(),
                r.mean_b.to_string(),
                r.difference.to_string(),
                r.a_better.to_string(),
                r.b_better.to_string(),
                r.ties.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Consistency(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// `a` at least as robust as `b` at every ε.
    pub fn a_dominates(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.mean_a >= r.mean_b)
    }
}

/// Per-ε robust-accuracy comparison of two runs over the same seeds and grid.
pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison> {
    let grid_a = a.epsilons();
    let grid_b = b.epsilons();
    if grid_a.is_empty() || grid_a.iter().map(|e| e.to_bits()).ne(grid_b.iter().map(|e| e.to_bits())) {
        return Err(Error::Comparison(format!("ε grids differ: {grid_a:?} vs {grid_b:?}")));
    }
    let seeds_a: BTreeSet<u64> = a.seeds().into_iter().collect();
    let seeds_b: BTreeSet<u64> = b.seeds().into_iter().collect();
    if seeds_a != seeds_b {
        return Err(Error::Comparison(format!("seed sets differ: {seeds_a:?} vs {seeds_b:?}")));
    }
    let robust = |report: &MetricsReport, seed: u64, eps: f64| {
        report
            .rows_for(Phase::Attack)
            .find(|r| r.seed == seed && r.epoch_or_eps.to_bits() == eps.to_bits())
            .and_then(|r| r.robust_acc)
            .ok_or_else(|| Error::Comparison(format!("no robust accuracy for seed {seed} at ε = {eps}")))
    };
    let mut rows = Vec::new();
    for &eps in &grid_a {
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        let (mut a_better, mut b_better, mut ties) = (0, 0, 0);
        for &seed in &seeds_a {
            let ra = robust(a, seed, eps)?;
            let rb = robust(b, seed, eps)?;
            sum_a += ra;
            sum_b += rb;
            match ra.partial_cmp(&rb) {
                Some(std::cmp::Ordering::Greater) => a_better += 1,
                Some(std::cmp::Ordering::Less) => b_better += 1,
                _ => ties += 1,
            }
        }
        let n = seeds_a.len() as f64;
        let (mean_a, mean_b) = (sum_a / n, sum_b / n);
        rows.push(ComparisonRow {
            epsilon: eps,
            mean_a,
            mean_b,
            difference: mean_a - mean_b,
            a_better,
            b_better,
            ties,
        });
    }
    let mean_final = |r: &MetricsReport| {
        let accs = r.final_accuracies(Phase::Train);
        (!accs.is_empty()).then(|| accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len() as f64)
    };
    let clean_accuracy_gap = match (mean_final(a), mean_final(b)) {
        (Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    };
    let matched = clean_accuracy_gap.is_some_and(|g| g <= MATCHED_ACCURACY_GAP);
    if let Some(gap) = clean_accuracy_gap.filter(|_| !matched) {
        log::warn!(
            "{} vs {}: clean accuracy gap {:.4} exceeds {MATCHED_ACCURACY_GAP}",
            a.label(),
            b.label(),
            gap
        );
    }
    Ok(Comparison {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        label_a: a.label(),
        label_b: b.label(),
        rows,
        clean_accuracy_gap,
        matched,
    })
}
