//! Episodic evaluation with normal-approximation confidence intervals, and
//! the parameter sweeps built on top of it.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ops;
use crate::data::{reserve_exemplars, sample_episode, DataError, Dataset, Episode, EpisodeSpec};
use crate::losses::MethodKind;
use crate::model::{compute_prototypes, embed, predict, ModelError, ModelSnapshot, ParamStore};
use crate::trainer::{train_incremental, TrainConfig, TrainError};

/// z for a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confidence interval needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("n_episodes must be >= 2, got {0}")]
    Episodes(usize),
    #[error("sweep needs at least one value")]
    EmptySweep,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci_halfwidth: f64,
    pub spec: EpisodeSpec,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,n,mean,ci,ways,shots,seed";

    /// One CSV row; floats use the shortest exact representation.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{},{},{}",
            self.split,
            self.n_episodes,
            self.mean_acc,
            self.ci_halfwidth,
            self.spec.ways,
            self.spec.shots,
            self.seed
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// Parses the rows of a report CSV (header required). The query count
    /// is not stored and comes back as 0.
    pub fn parse_csv(text: &str) -> Result<Vec<EvalReport>, String> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| e.to_string())?;
        if header.iter().collect::<Vec<_>>().join(",") != Self::CSV_HEADER {
            return Err(format!("expected header `{}`", Self::CSV_HEADER));
        }
        let mut out = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let line = i + 2;
            let field = |j: usize| {
                rec.get(j)
                    .ok_or_else(|| format!("line {line}: missing field {j}"))
            };
            let num = |j: usize| -> Result<f64, String> {
                field(j)?
                    .parse::<f64>()
                    .map_err(|e| format!("line {line}: {e}"))
            };
            let int = |j: usize| -> Result<u64, String> {
                field(j)?
                    .parse::<u64>()
                    .map_err(|e| format!("line {line}: {e}"))
            };
            out.push(EvalReport {
                split: field(0)?.to_string(),
                n_episodes: int(1)? as usize,
                mean_acc: num(2)?,
                ci_halfwidth: num(3)?,
                spec: EpisodeSpec::new(int(4)? as usize, int(5)? as usize, 0),
                seed: int(6)?,
            });
        }
        Ok(out)
    }

    /// `74.65 ± 0.49` style cell in percent.
    pub fn cell(&self) -> String {
        format_cell(self.mean_acc, self.ci_halfwidth)
    }
}

pub fn format_cell(mean: f64, ci: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * ci)
}

/// Mean and `1.96 · sd / √n` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64), EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, Z_95 * var.sqrt() / (n as f64).sqrt()))
}

/// The rng for episode `index` of an evaluation seeded by `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Fraction of query rows assigned to their own class by the nearest
/// support prototype.
pub fn episode_accuracy(params: &ParamStore, episode: &Episode) -> Result<f64, EvalError> {
    let zs = embed(params, &episode.support_x)?;
    let protos = compute_prototypes(&zs, &episode.support_y, episode.ways())?;
    let zq = embed(params, &episode.query_x)?;
    let pred = predict(&zq, &protos)?;
    let correct = pred
        .iter()
        .zip(&episode.query_y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / episode.query_y.len() as f64)
}

/// Episodic cross-entropy without a tape, for logging.
pub fn episode_xent(
    params: &ParamStore,
    episode: &Episode,
    temperature: f64,
) -> Result<f64, EvalError> {
    let zs = embed(params, &episode.support_x)?;
    let protos = compute_prototypes(&zs, &episode.support_y, episode.ways())?;
    let zq = embed(params, &episode.query_x)?;
    let d = ops::pairwise_sqdist(&zq, &protos).map_err(ModelError::from)?;
    let lp = ops::log_softmax(&ops::scale(&d, -1.0 / temperature)).map_err(ModelError::from)?;
    let picked = ops::gather(&lp, &episode.query_y).map_err(ModelError::from)?;
    Ok(-picked.data().iter().sum::<f64>() / picked.numel() as f64)
}

fn per_episode<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, EvalError>
where
    T: Send,
    F: Fn(usize) -> Result<T, EvalError> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let mut parts: Vec<Vec<(usize, Result<T, EvalError>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| (i, f(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut slots: Vec<Option<Result<T, EvalError>>> = (0..n).map(|_| None).collect();
    for part in parts.iter_mut() {
        for (i, r) in part.drain(..) {
            slots[i] = Some(r);
        }
    }
    slots
        .into_iter()
        .map(|s| s.expect("every episode evaluated"))
        .collect()
}

/// Per-episode accuracies, in episode order.
pub fn episode_accuracies(
    params: &ParamStore,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<f64>, EvalError> {
    spec.check(dataset)?;
    per_episode(n_episodes, workers, |i| {
        let ep = sample_episode(dataset, spec, &mut episode_rng(seed, i as u64))?;
        episode_accuracy(params, &ep)
    })
}

/// Accuracy and cross-entropy of each episode, in episode order.
pub fn episode_metrics(
    params: &ParamStore,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    temperature: f64,
    workers: usize,
) -> Result<Vec<(f64, f64)>, EvalError> {
    spec.check(dataset)?;
    per_episode(n_episodes, workers, |i| {
        let ep = sample_episode(dataset, spec, &mut episode_rng(seed, i as u64))?;
        Ok((
            episode_accuracy(params, &ep)?,
            episode_xent(params, &ep, temperature)?,
        ))
    })
}

pub fn evaluate_params(
    params: &ParamStore,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    if n_episodes < 2 {
        return Err(EvalError::Episodes(n_episodes));
    }
    let accs = episode_accuracies(params, dataset, spec, n_episodes, seed, workers)?;
    let (mean_acc, ci_halfwidth) = confidence_interval(&accs)?;
    Ok(EvalReport {
        split: dataset.split_name().to_string(),
        n_episodes,
        mean_acc,
        ci_halfwidth,
        spec: *spec,
        seed,
    })
}

/// Evaluates `snapshot` on `n_episodes` episodes of `dataset`. Episode `i`
/// depends only on `(seed, i)`, so the report does not depend on `workers`.
pub fn evaluate(
    snapshot: &ModelSnapshot,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    evaluate_params(snapshot.params(), dataset, spec, n_episodes, seed, workers)
}

/// How sweeps evaluate each trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: String,
    pub column: String,
    pub report: EvalReport,
}

/// Reports indexed by sweep value (rows) and column (split or episode shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub values: Vec<String>,
    pub columns: Vec<String>,
    pub entries: Vec<SweepEntry>,
}

impl SweepTable {
    pub fn new(axis: impl Into<String>) -> Self {
        Self {
            axis: axis.into(),
            values: Vec::new(),
            columns: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        value: impl Into<String>,
        column: impl Into<String>,
        report: EvalReport,
    ) {
        let (value, column) = (value.into(), column.into());
        if !self.values.contains(&value) {
            self.values.push(value.clone());
        }
        if !self.columns.contains(&column) {
            self.columns.push(column.clone());
        }
        self.entries.push(SweepEntry {
            value,
            column,
            report,
        });
    }

    pub fn get(&self, value: &str, column: &str) -> Option<&EvalReport> {
        self.entries
            .iter()
            .find(|e| e.value == value && e.column == column)
            .map(|e| &e.report)
    }

    /// Every (value, column) pair has a report.
    pub fn is_complete(&self) -> bool {
        self.values
            .iter()
            .all(|v| self.columns.iter().all(|c| self.get(v, c).is_some()))
    }

    /// `max - min` of the mean accuracy over values, per column.
    pub fn range_row(&self) -> Vec<(String, f64)> {
        self.columns
            .iter()
            .map(|c| {
                let means: Vec<f64> = self
                    .values
                    .iter()
                    .filter_map(|v| self.get(v, c))
                    .map(|r| r.mean_acc)
                    .collect();
                let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = means.iter().copied().fold(f64::INFINITY, f64::min);
                (c.clone(), if means.is_empty() { 0.0 } else { max - min })
            })
            .collect()
    }

    /// Plot-ready CSV: the axis value, the column, then the report fields.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},column,{}\n", self.axis, EvalReport::CSV_HEADER);
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.value, e.column, e.report.csv_row());
        }
        out
    }

    /// Markdown table of `mean ± ci` cells, with a closing range row when
    /// `with_range` is set.
    pub fn to_markdown(&self, with_range: bool) -> String {
        let mut out = format!("| {} | {} |\n", self.axis, self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for v in &self.values {
            let cells: Vec<String> = self
                .columns
                .iter()
                .map(|c| {
                    self.get(v, c)
                        .map_or_else(|| "-".to_string(), EvalReport::cell)
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", v, cells.join(" | "));
        }
        if with_range {
            let cells: Vec<String> = self
                .range_row()
                .iter()
                .map(|(_, r)| format!("{:.2}", 100.0 * r))
                .collect();
            let _ = writeln!(out, "| Range | {} |", cells.join(" | "));
        }
        out
    }
}

/// Default grid for [`sweep_lambda`].
pub const DEFAULT_LAMBDAS: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 5.0, 10.0];
/// Default grid for [`sweep_exemplars`].
pub const DEFAULT_EXEMPLAR_COUNTS: [usize; 4] = [15, 30, 60, 120];

fn eval_splits(
    table: &mut SweepTable,
    value: &str,
    params: &ParamStore,
    splits: &[&Dataset],
    eval: &EvalSettings,
) -> Result<(), EvalError> {
    for split in splits {
        let report = evaluate_params(
            params,
            split,
            &eval.spec,
            eval.n_episodes,
            eval.seed,
            eval.workers,
        )?;
        table.push(value, split.split_name(), report);
    }
    Ok(())
}

/// One IDA incremental run per weight, all with the seed in `cfg`.
pub fn sweep_lambda(
    base: &ModelSnapshot,
    new_train: &Dataset,
    new_val: &Dataset,
    splits: &[&Dataset],
    values: &[f64],
    cfg: &TrainConfig,
    eval: &EvalSettings,
) -> Result<SweepTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut table = SweepTable::new("lambda");
    for &lambda in values {
        let run_cfg = TrainConfig {
            lambda,
            ..cfg.clone()
        };
        let out = train_incremental(base, new_train, new_val, MethodKind::Ida, &run_cfg, None)?;
        eval_splits(
            &mut table,
            &format!("{lambda}"),
            out.snapshot.params(),
            splits,
            eval,
        )?;
    }
    Ok(table)
}

/// One EIML incremental run per exemplar budget. Exemplars are reserved
/// from `old_train` with a stream that depends only on the seed, so runs
/// differ only in how many rows each class keeps.
#[allow(clippy::too_many_arguments)]
pub fn sweep_exemplars(
    base: &ModelSnapshot,
    old_train: &Dataset,
    new_train: &Dataset,
    new_val: &Dataset,
    splits: &[&Dataset],
    counts: &[usize],
    cfg: &TrainConfig,
    eval: &EvalSettings,
) -> Result<SweepTable, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut table = SweepTable::new("exemplars");
    for &count in counts {
        let mut rng = crate::trainer::exemplar_reserve_rng(cfg.seed);
        let exemplars = reserve_exemplars(old_train, count, &mut rng)?;
        let run_cfg = TrainConfig {
            exemplars_per_class: count,
            ..cfg.clone()
        };
        let out = train_incremental(
            base,
            new_train,
            new_val,
            MethodKind::Eiml,
            &run_cfg,
            Some(&exemplars),
        )?;
        eval_splits(
            &mut table,
            &count.to_string(),
            out.snapshot.params(),
            splits,
            eval,
        )?;
    }
    Ok(table)
}

/// Evaluates every model under every (ways, shots) pair. Columns are named
/// like `5w1s`; [`SweepTable::range_row`] gives the spread across models.
#[allow(clippy::too_many_arguments)]
pub fn cross_way_shot(
    models: &[(String, &ModelSnapshot)],
    ways: &[usize],
    shots: &[usize],
    queries: usize,
    dataset: &Dataset,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<SweepTable, EvalError> {
    if models.is_empty() || ways.is_empty() || shots.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut table = SweepTable::new("model");
    for (name, snap) in models {
        for &w in ways {
            for &s in shots {
                let spec = EpisodeSpec::new(w, s, queries);
                let report = evaluate(snap, dataset, &spec, n_episodes, seed, workers)?;
                table.push(name.clone(), format!("{w}w{s}s"), report);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::{init_backbone, BackboneConfig, Layer};

    #[test]
    fn ci_closed_forms() {
        assert_eq!(confidence_interval(&[1.0; 10]).unwrap(), (1.0, 0.0));
        let (m, h) = confidence_interval(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        let expect = 1.96 * 0.5f64.sqrt() / 2f64.sqrt();
        assert!((h - expect).abs() < 1e-15);
        assert!((h - 0.98).abs() < 1e-12);
        assert!(confidence_interval(&[0.3]).is_err());
    }

    #[test]
    fn ci_shrinks_as_inverse_sqrt() {
        let base: Vec<f64> = (0..50).map(|i| (i % 7) as f64 / 7.0).collect();
        let big: Vec<f64> = base.iter().cycle().take(200).copied().collect();
        let (_, h1) = confidence_interval(&base).unwrap();
        let (_, h4) = confidence_interval(&big).unwrap();
        // the n-1 divisor makes the replicated sample sd differ by sqrt(4(n-1)/(4n-1))
        let sd_ratio = (4.0 * 49.0 / 199.0f64).sqrt();
        assert!((h4 / h1 - 0.5 * sd_ratio).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let r = EvalReport {
            split: "old".into(),
            n_episodes: 500,
            mean_acc: 0.7465,
            ci_halfwidth: 0.0049,
            spec: EpisodeSpec::new(5, 1, 15),
            seed: 3,
        };
        assert_eq!(r.cell(), "74.65 ± 0.49");
        let back = EvalReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(back[0].mean_acc, r.mean_acc);
        assert_eq!(back[0].split, "old");
    }

    fn identity(dim: usize) -> ParamStore {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        ParamStore::from_layers(vec![Layer {
            weight: Tensor::matrix(dim, dim, w).unwrap(),
            bias: Tensor::zeros(vec![dim]),
        }])
    }

    #[test]
    fn separated_points_are_perfect() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..6 {
            for _ in 0..20 {
                rows.push(vec![10.0 * c as f64 + 1.0, 1.0]);
                labels.push(c);
            }
        }
        let d = Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, "sep").unwrap();
        let r = evaluate_params(&identity(2), &d, &EpisodeSpec::new(5, 1, 5), 50, 1, 1).unwrap();
        assert_eq!((r.mean_acc, r.ci_halfwidth), (1.0, 0.0));
    }

    #[test]
    fn workers_do_not_change_results() {
        let config = BackboneConfig::new(3, vec![4], 3);
        let p = init_backbone(&config, 1).unwrap();
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|i| vec![(i % 7) as f64, (i % 5) as f64 * 0.3, (i % 11) as f64 * 0.1])
            .collect();
        let labels = (0..120).map(|i| i % 6).collect();
        let d = Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, "x").unwrap();
        let spec = EpisodeSpec::new(3, 2, 3);
        let a = evaluate_params(&p, &d, &spec, 64, 9, 1).unwrap();
        let b = evaluate_params(&p, &d, &spec, 64, 9, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_table_range_and_markdown() {
        let rep = |m: f64| EvalReport {
            split: "s".into(),
            n_episodes: 2,
            mean_acc: m,
            ci_halfwidth: 0.01,
            spec: EpisodeSpec::new(5, 1, 15),
            seed: 0,
        };
        let mut t = SweepTable::new("model");
        t.push("a", "5w1s", rep(0.5));
        t.push("b", "5w1s", rep(0.8));
        t.push("a", "5w5s", rep(0.7));
        assert!(!t.is_complete());
        t.push("b", "5w5s", rep(0.7));
        assert!(t.is_complete());
        let r = t.range_row();
        assert!((r[0].1 - 0.3).abs() < 1e-12 && r[1].1 == 0.0);
        let md = t.to_markdown(true);
        assert!(md.contains("| a | 50.00 ± 1.00 | 70.00 ± 1.00 |"), "{md}");
        assert!(md.contains("| Range | 30.00 | 0.00 |"), "{md}");
    }
}
