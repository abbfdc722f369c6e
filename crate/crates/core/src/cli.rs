//! Config-driven command line. Every command works inside one run directory:
//!
//! ```text
//! <out_dir>/config.resolved   the fully expanded config of the last command
//! <out_dir>/data/             split CSVs written by `gen-data`
//! <out_dir>/snapshots/        <label>.imlsnap
//! <out_dir>/logs/             <label>.csv training logs
//! <out_dir>/reports/          eval CSVs, sweep tables, tables.md
//! ```
//!
//! Data is rebuilt deterministically from the config by every command, so
//! `gen-data` is only needed to inspect or export the splits.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorstore::{load_snapshot, save_snapshot};
use crate::benchmark::{Benchmark, BenchmarkSpec};
use crate::data::{
    load_dataset, reserve_exemplars, save_dataset, Dataset, EpisodeSpec, SyntheticSpec,
};
use crate::evaluator::{
    cross_way_shot, evaluate, sweep_exemplars, sweep_lambda, EvalReport, EvalSettings,
    DEFAULT_EXEMPLAR_COUNTS, DEFAULT_LAMBDAS,
};
use crate::losses::{KlOrder, MethodKind};
use crate::model::ModelSnapshot;
use crate::trainer::{
    exemplar_reserve_rng, log_to_csv, run_rounds, train_base, train_incremental, train_paragon,
    Round, TrainConfig, TrainOutput,
};

/// Overrides the top-level `seed` of any config.
pub const SEED_ENV: &str = "IML_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    Override(String),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    PaperScale,
}

impl Profile {
    fn epochs(self) -> usize {
        match self {
            Profile::Desk => 30,
            Profile::PaperScale => 200,
        }
    }

    fn tasks_per_epoch(self) -> usize {
        match self {
            Profile::Desk => 100,
            Profile::PaperScale => 800,
        }
    }

    fn eval_episodes(self) -> usize {
        match self {
            Profile::Desk => 500,
            Profile::PaperScale => 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

// On-disk layout. Every field is optional; `resolve` fills the defaults and
// `RunConfig::to_toml` writes the same layout back fully populated.

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    methods: Option<Vec<MethodKind>>,
    data: Option<RawData>,
    train: Option<RawTrain>,
    eval: Option<RawEval>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<DataSource>,
    classes_per_domain: Option<usize>,
    dim: Option<usize>,
    cluster_std: Option<f64>,
    offset: Option<f64>,
    samples_per_class: Option<usize>,
    train_fraction: Option<f64>,
    train_csv: Option<PathBuf>,
    val_csv: Option<PathBuf>,
    test_csv: Option<PathBuf>,
    fractions: Option<[f64; 3]>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    ways: Option<usize>,
    shots: Option<usize>,
    queries: Option<usize>,
    epochs: Option<usize>,
    tasks_per_epoch: Option<usize>,
    lambda: Option<f64>,
    lambda_old: Option<f64>,
    lambda_new: Option<f64>,
    temperature: Option<f64>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    patience: Option<usize>,
    exemplars_per_class: Option<usize>,
    kl_order: Option<KlOrder>,
    hidden_dims: Option<Vec<usize>>,
    embed_dim: Option<usize>,
    val_episodes: Option<usize>,
    workers: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    episodes: Option<usize>,
    workers: Option<usize>,
    ways: Option<usize>,
    shots: Option<usize>,
    queries: Option<usize>,
    lambdas: Option<Vec<f64>>,
    exemplar_counts: Option<Vec<usize>>,
    cross_ways: Option<Vec<usize>>,
    cross_shots: Option<Vec<usize>>,
    rounds: Option<usize>,
}

/// Where the old, new and unseen splits come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    Synthetic(BenchmarkSpec),
    /// Class ids of `train` are split by `fractions` (old, new, unseen);
    /// validation and test rows are cut along the same ids.
    Csv {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        fractions: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub settings: EvalSettings,
    pub lambdas: Vec<f64>,
    pub exemplar_counts: Vec<usize>,
    pub cross_ways: Vec<usize>,
    pub cross_shots: Vec<usize>,
    pub rounds: usize,
}

/// A fully validated experiment config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub methods: Vec<MethodKind>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        resolve(RawConfig::default()).expect("defaults are valid")
    }
}

/// Parses and validates a config file. `IML_SEED`, when set, replaces the
/// file's seed.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, &[], std::env::var(SEED_ENV).ok().as_deref())
}

/// Parses config text, applies `key=value` overrides in order, then the
/// seed override.
pub fn parse_config_str(
    text: &str,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = if overrides.is_empty() && env_seed.is_none() {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
    } else {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        if let Some(s) = env_seed {
            let seed: i64 = s.trim().parse().map_err(|_| {
                invalid(
                    SEED_ENV,
                    format!("expected a non-negative integer, got {s:?}"),
                )
            })?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let merged = toml::to_string(&table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        toml::from_str(&merged).map_err(|e| ConfigError::Parse(e.to_string()))?
    };
    resolve(raw)
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(item.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(item.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(item.into()))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn resolve(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    let profile = raw.profile.unwrap_or_default();
    let seed = raw.seed.unwrap_or(0);
    if seed > i64::MAX as u64 {
        return Err(invalid("seed", "must be below 2^63"));
    }
    let methods = raw.methods.unwrap_or_else(|| MethodKind::ALL.to_vec());
    if methods.is_empty() {
        return Err(invalid("methods", "needs at least one method"));
    }
    let data = resolve_data(raw.data.unwrap_or_default(), seed)?;
    let train = resolve_train(raw.train.unwrap_or_default(), profile, seed)?;
    let eval = resolve_eval(raw.eval.unwrap_or_default(), profile, seed, &train)?;
    Ok(RunConfig {
        profile,
        out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("runs/iml")),
        seed,
        methods,
        data,
        train,
        eval,
    })
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(invalid(key, "must be >= 1"));
    }
    Ok(v)
}

fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(invalid(key, format!("λ ≥ 0 required, got {v}")));
    }
    Ok(v)
}

fn resolve_data(d: RawData, seed: u64) -> Result<DataConfig, ConfigError> {
    match d.source.unwrap_or_default() {
        DataSource::Synthetic => {
            for (key, set) in [
                ("data.train_csv", d.train_csv.is_some()),
                ("data.val_csv", d.val_csv.is_some()),
                ("data.test_csv", d.test_csv.is_some()),
                ("data.fractions", d.fractions.is_some()),
            ] {
                if set {
                    return Err(invalid(key, "only used when data.source = \"csv\""));
                }
            }
            let classes = d.classes_per_domain.unwrap_or(32);
            if classes < 4 {
                return Err(invalid("data.classes_per_domain", "must be >= 4"));
            }
            let dim = positive("data.dim", d.dim.unwrap_or(16))?;
            let std = d.cluster_std.unwrap_or(0.5);
            if !(std >= 0.0) || !std.is_finite() {
                return Err(invalid("data.cluster_std", "must be finite and >= 0"));
            }
            let offset = d.offset.unwrap_or(3.0);
            if !(offset >= 0.0) || !offset.is_finite() {
                return Err(invalid("data.offset", "must be finite and >= 0"));
            }
            let samples = positive("data.samples_per_class", d.samples_per_class.unwrap_or(100))?;
            let fraction = d.train_fraction.unwrap_or(0.5);
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(invalid("data.train_fraction", "must be in (0, 1)"));
            }
            Ok(DataConfig::Synthetic(BenchmarkSpec {
                synthetic: SyntheticSpec {
                    classes_per_domain: classes,
                    dim,
                    cluster_std: std,
                    domain_offset: SyntheticSpec::uniform_offset(dim, offset),
                    samples_per_class: samples,
                    seed,
                    sample_stream: 0,
                },
                train_fraction: fraction,
                split_seed: seed,
            }))
        }
        DataSource::Csv => {
            for (key, set) in [
                ("data.classes_per_domain", d.classes_per_domain.is_some()),
                ("data.dim", d.dim.is_some()),
                ("data.cluster_std", d.cluster_std.is_some()),
                ("data.offset", d.offset.is_some()),
                ("data.samples_per_class", d.samples_per_class.is_some()),
                ("data.train_fraction", d.train_fraction.is_some()),
            ] {
                if set {
                    return Err(invalid(key, "only used when data.source = \"synthetic\""));
                }
            }
            let need = |key: &str, p: Option<PathBuf>| {
                p.ok_or_else(|| invalid(key, "required for csv data"))
            };
            let fractions = d.fractions.unwrap_or([0.5, 0.25, 0.25]);
            if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
                || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(invalid("data.fractions", "must lie in [0, 1] and sum to 1"));
            }
            Ok(DataConfig::Csv {
                train: need("data.train_csv", d.train_csv)?,
                val: need("data.val_csv", d.val_csv)?,
                test: need("data.test_csv", d.test_csv)?,
                fractions,
            })
        }
    }
}

fn resolve_train(t: RawTrain, profile: Profile, seed: u64) -> Result<TrainConfig, ConfigError> {
    let def = TrainConfig::default();
    let ways = t.ways.unwrap_or(def.episode.ways);
    if ways < 2 {
        return Err(invalid("train.ways", "must be >= 2"));
    }
    let temperature = t.temperature.unwrap_or(def.temperature);
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid("train.temperature", "must be > 0"));
    }
    let lr = t.lr.unwrap_or(def.lr);
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(invalid("train.lr", "must be > 0"));
    }
    let lr_decay = t.lr_decay.unwrap_or(def.lr_decay);
    if !(lr_decay > 0.0 && lr_decay < 1.0) {
        return Err(invalid("train.lr_decay", "must be in (0, 1)"));
    }
    let hidden_dims = t.hidden_dims.unwrap_or(def.hidden_dims);
    if hidden_dims.contains(&0) {
        return Err(invalid("train.hidden_dims", "every width must be >= 1"));
    }
    let val_episodes = t.val_episodes.unwrap_or(def.val_episodes);
    if val_episodes < 2 {
        return Err(invalid("train.val_episodes", "must be >= 2"));
    }
    let cfg = TrainConfig {
        epochs: positive("train.epochs", t.epochs.unwrap_or(profile.epochs()))?,
        tasks_per_epoch: positive(
            "train.tasks_per_epoch",
            t.tasks_per_epoch.unwrap_or(profile.tasks_per_epoch()),
        )?,
        episode: EpisodeSpec::new(
            ways,
            positive("train.shots", t.shots.unwrap_or(def.episode.shots))?,
            positive("train.queries", t.queries.unwrap_or(def.episode.queries))?,
        ),
        lambda: non_negative("train.lambda", t.lambda.unwrap_or(def.lambda))?,
        lambda_old: t
            .lambda_old
            .map(|v| non_negative("train.lambda_old", v))
            .transpose()?,
        lambda_new: t
            .lambda_new
            .map(|v| non_negative("train.lambda_new", v))
            .transpose()?,
        temperature,
        lr,
        lr_decay,
        patience: t.patience.unwrap_or(def.patience),
        seed,
        exemplars_per_class: positive(
            "train.exemplars_per_class",
            t.exemplars_per_class.unwrap_or(def.exemplars_per_class),
        )?,
        kl_order: t.kl_order.unwrap_or(def.kl_order),
        hidden_dims,
        embed_dim: positive("train.embed_dim", t.embed_dim.unwrap_or(def.embed_dim))?,
        val_episodes,
        workers: positive("train.workers", t.workers.unwrap_or(def.workers))?,
    };
    cfg.validate()
        .map_err(|e| invalid("train", e.to_string()))?;
    Ok(cfg)
}

fn resolve_eval(
    e: RawEval,
    profile: Profile,
    seed: u64,
    train: &TrainConfig,
) -> Result<EvalConfig, ConfigError> {
    let episodes = e.episodes.unwrap_or(profile.eval_episodes());
    if episodes < 2 {
        return Err(invalid("eval.episodes", "must be >= 2"));
    }
    let ways = e.ways.unwrap_or(train.episode.ways);
    if ways < 2 {
        return Err(invalid("eval.ways", "must be >= 2"));
    }
    let lambdas = e.lambdas.unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    if lambdas.is_empty() {
        return Err(invalid("eval.lambdas", "needs at least one value"));
    }
    for &l in &lambdas {
        non_negative("eval.lambdas", l)?;
    }
    let exemplar_counts = e
        .exemplar_counts
        .unwrap_or_else(|| DEFAULT_EXEMPLAR_COUNTS.to_vec());
    if exemplar_counts.is_empty() || exemplar_counts.contains(&0) {
        return Err(invalid(
            "eval.exemplar_counts",
            "needs at least one value, each >= 1",
        ));
    }
    let cross_ways = e.cross_ways.unwrap_or_else(|| vec![5, 10, 20]);
    if cross_ways.is_empty() || cross_ways.iter().any(|&w| w < 2) {
        return Err(invalid(
            "eval.cross_ways",
            "needs at least one value, each >= 2",
        ));
    }
    let cross_shots = e.cross_shots.unwrap_or_else(|| vec![1, 5]);
    if cross_shots.is_empty() || cross_shots.contains(&0) {
        return Err(invalid(
            "eval.cross_shots",
            "needs at least one value, each >= 1",
        ));
    }
    Ok(EvalConfig {
        settings: EvalSettings {
            spec: EpisodeSpec::new(
                ways,
                positive("eval.shots", e.shots.unwrap_or(train.episode.shots))?,
                positive("eval.queries", e.queries.unwrap_or(train.episode.queries))?,
            ),
            n_episodes: episodes,
            seed,
            workers: positive("eval.workers", e.workers.unwrap_or(1))?,
        },
        lambdas,
        exemplar_counts,
        cross_ways,
        cross_shots,
        rounds: positive("eval.rounds", e.rounds.unwrap_or(2))?,
    })
}

impl RunConfig {
    fn to_raw(&self) -> RawConfig {
        let data = match &self.data {
            DataConfig::Synthetic(spec) => {
                let s = &spec.synthetic;
                RawData {
                    source: Some(DataSource::Synthetic),
                    classes_per_domain: Some(s.classes_per_domain),
                    dim: Some(s.dim),
                    cluster_std: Some(s.cluster_std),
                    offset: Some(s.domain_offset.iter().map(|v| v * v).sum::<f64>().sqrt()),
                    samples_per_class: Some(s.samples_per_class),
                    train_fraction: Some(spec.train_fraction),
                    ..RawData::default()
                }
            }
            DataConfig::Csv {
                train,
                val,
                test,
                fractions,
            } => RawData {
                source: Some(DataSource::Csv),
                train_csv: Some(train.clone()),
                val_csv: Some(val.clone()),
                test_csv: Some(test.clone()),
                fractions: Some(*fractions),
                ..RawData::default()
            },
        };
        let t = &self.train;
        let e = &self.eval;
        RawConfig {
            profile: Some(self.profile),
            out_dir: Some(self.out_dir.clone()),
            seed: Some(self.seed),
            methods: Some(self.methods.clone()),
            data: Some(data),
            train: Some(RawTrain {
                ways: Some(t.episode.ways),
                shots: Some(t.episode.shots),
                queries: Some(t.episode.queries),
                epochs: Some(t.epochs),
                tasks_per_epoch: Some(t.tasks_per_epoch),
                lambda: Some(t.lambda),
                lambda_old: t.lambda_old,
                lambda_new: t.lambda_new,
                temperature: Some(t.temperature),
                lr: Some(t.lr),
                lr_decay: Some(t.lr_decay),
                patience: Some(t.patience),
                exemplars_per_class: Some(t.exemplars_per_class),
                kl_order: Some(t.kl_order),
                hidden_dims: Some(t.hidden_dims.clone()),
                embed_dim: Some(t.embed_dim),
                val_episodes: Some(t.val_episodes),
                workers: Some(t.workers),
            }),
            eval: Some(RawEval {
                episodes: Some(e.settings.n_episodes),
                workers: Some(e.settings.workers),
                ways: Some(e.settings.spec.ways),
                shots: Some(e.settings.spec.shots),
                queries: Some(e.settings.spec.queries),
                lambdas: Some(e.lambdas.clone()),
                exemplar_counts: Some(e.exemplar_counts.clone()),
                cross_ways: Some(e.cross_ways.clone()),
                cross_shots: Some(e.cross_shots.clone()),
                rounds: Some(e.rounds),
            }),
        }
    }

    /// The config with every default written out; parses back to `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("config serializes")
    }

    /// Builds the old, new and unseen splits.
    pub fn benchmark(&self) -> anyhow::Result<Benchmark> {
        match &self.data {
            DataConfig::Synthetic(spec) => Ok(Benchmark::build(spec)?),
            DataConfig::Csv {
                train,
                val,
                test,
                fractions,
            } => {
                let load =
                    |p: &Path| load_dataset(p).with_context(|| format!("loading {}", p.display()));
                let [fo, fn_, fu] = *fractions;
                Ok(Benchmark::from_datasets(
                    &load(train)?,
                    &load(val)?,
                    &load(test)?,
                    (fo, fn_, fu),
                    self.seed,
                )?)
            }
        }
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn snapshot(&self, label: &str) -> PathBuf {
        self.snapshots().join(format!("{label}.imlsnap"))
    }

    /// Creates the layout and writes `config.resolved`.
    pub fn prepare(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        for dir in [self.data(), self.snapshots(), self.logs(), self.reports()] {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_file(&self.root.join("config.resolved"), &cfg.to_toml())
    }

    /// Snapshot files in name order.
    pub fn list_snapshots(&self) -> anyhow::Result<Vec<PathBuf>> {
        list_files(&self.snapshots(), |name| name.ends_with(".imlsnap"))
    }
}

fn list_files(dir: &Path, keep: impl Fn(&str) -> bool) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(&keep) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IncrMethod {
    Ft,
    Dfa,
    Ida,
    Eiml,
}

impl From<IncrMethod> for MethodKind {
    fn from(m: IncrMethod) -> Self {
        match m {
            IncrMethod::Ft => MethodKind::Ft,
            IncrMethod::Dfa => MethodKind::Dfa,
            IncrMethod::Ida => MethodKind::Ida,
            IncrMethod::Eiml => MethodKind::Eiml,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Old,
    New,
    Unseen,
}

impl Split {
    const ALL: [Split; 3] = [Split::Old, Split::New, Split::Unseen];

    fn pick(self, b: &Benchmark) -> &Dataset {
        match self {
            Split::Old => &b.old_test,
            Split::New => &b.new_test,
            Split::Unseen => &b.unseen_test,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "iml", about = "Incremental meta-learning experiments", version)]
struct Cli {
    /// Experiment config (TOML). Without it every default applies.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the old/new/unseen split CSVs to data/.
    GenData,
    /// Meta-train on the old classes (snapshot `nu`).
    TrainBase,
    /// Train one incremental method from the base snapshot.
    TrainIncr {
        #[arg(long, value_enum)]
        method: IncrMethod,
        /// Teacher snapshot; defaults to snapshots/nu.imlsnap.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Meta-train on old and new classes together (snapshot `par`).
    TrainParagon,
    /// Evaluate snapshots on test splits and write one CSV per pair.
    Eval {
        /// Defaults to every snapshot in the run directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Defaults to old, new and unseen.
        #[arg(long, value_enum)]
        split: Option<Split>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// One IDA run per configured lambda.
    SweepLambda {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// One EIML run per configured exemplar count.
    SweepExemplars {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate snapshots under every configured (ways, shots) pair.
    CrossWayShot {
        /// Defaults to every snapshot in the run directory.
        #[arg(long)]
        snapshot: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "unseen")]
        split: Split,
    },
    /// Chain incremental rounds over equal groups of the new classes.
    Rounds {
        /// Defaults to the incremental methods in the config.
        #[arg(long, value_enum)]
        method: Option<IncrMethod>,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Collect eval CSVs into reports/tables.md.
    Report,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for usage and config errors, 2 for runtime failures.
pub fn cmd_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides, std::env::var(SEED_ENV).ok().as_deref())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_run_config(cli.config.as_deref(), &cli.overrides)?;
    let dir = RunDir::new(&cfg.out_dir);
    dir.prepare(&cfg)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &dir),
        Command::TrainBase => {
            let b = cfg.benchmark()?;
            let out = train_base(&b.old_train, &b.old_val, &cfg.train)?;
            store_run(&dir, "nu", &out)
        }
        Command::TrainParagon => {
            let b = cfg.benchmark()?;
            let out = train_paragon(&b.union_train(), &b.union_val(), &cfg.train)?;
            store_run(&dir, "par", &out)
        }
        Command::TrainIncr { method, base } => {
            let b = cfg.benchmark()?;
            let teacher = load_base(&dir, base.as_deref())?;
            let method = MethodKind::from(method);
            let exemplars = if method == MethodKind::Eiml {
                let mut rng = exemplar_reserve_rng(cfg.seed);
                Some(reserve_exemplars(
                    &b.old_train,
                    cfg.train.exemplars_per_class,
                    &mut rng,
                )?)
            } else {
                None
            };
            let out = train_incremental(
                &teacher,
                &b.new_train,
                &b.new_val,
                method,
                &cfg.train,
                exemplars.as_ref(),
            )?;
            store_run(&dir, method.name(), &out)
        }
        Command::Eval {
            snapshot,
            split,
            ways,
            shots,
        } => {
            let b = cfg.benchmark()?;
            let mut spec = cfg.eval.settings.spec;
            spec.ways = ways.unwrap_or(spec.ways);
            spec.shots = shots.unwrap_or(spec.shots);
            let paths = match snapshot {
                Some(p) => vec![p],
                None => dir.list_snapshots()?,
            };
            if paths.is_empty() {
                return Err(anyhow!("no snapshots in {}", dir.snapshots().display()));
            }
            let splits = split.map_or_else(|| Split::ALL.to_vec(), |s| vec![s]);
            for path in &paths {
                let snap = load_snapshot(path)?;
                let label = file_label(path);
                for s in &splits {
                    let data = s.pick(&b);
                    let s_ = &cfg.eval.settings;
                    let report = evaluate(&snap, data, &spec, s_.n_episodes, s_.seed, s_.workers)?;
                    let file = dir.reports().join(format!(
                        "eval-{label}-{}-{}w{}s.csv",
                        data.split_name(),
                        spec.ways,
                        spec.shots
                    ));
                    write_file(&file, &report.to_csv())?;
                    println!("{label} {} {}", data.split_name(), report.cell());
                }
            }
            Ok(())
        }
        Command::SweepLambda { base } => {
            let b = cfg.benchmark()?;
            let teacher = load_base(&dir, base.as_deref())?;
            let table = sweep_lambda(
                &teacher,
                &b.new_train,
                &b.new_val,
                &b.test_splits(),
                &cfg.eval.lambdas,
                &cfg.train,
                &cfg.eval.settings,
            )?;
            write_file(&dir.reports().join("sweep-lambda.csv"), &table.to_csv())?;
            write_file(
                &dir.reports().join("sweep-lambda.md"),
                &table.to_markdown(false),
            )?;
            print!("{}", table.to_markdown(false));
            Ok(())
        }
        Command::SweepExemplars { base } => {
            let b = cfg.benchmark()?;
            let teacher = load_base(&dir, base.as_deref())?;
            let table = sweep_exemplars(
                &teacher,
                &b.old_train,
                &b.new_train,
                &b.new_val,
                &b.test_splits(),
                &cfg.eval.exemplar_counts,
                &cfg.train,
                &cfg.eval.settings,
            )?;
            write_file(&dir.reports().join("sweep-exemplars.csv"), &table.to_csv())?;
            write_file(
                &dir.reports().join("sweep-exemplars.md"),
                &table.to_markdown(true),
            )?;
            print!("{}", table.to_markdown(true));
            Ok(())
        }
        Command::CrossWayShot { snapshot, split } => {
            let b = cfg.benchmark()?;
            let paths = if snapshot.is_empty() {
                dir.list_snapshots()?
            } else {
                snapshot
            };
            if paths.is_empty() {
                return Err(anyhow!("no snapshots in {}", dir.snapshots().display()));
            }
            let snaps: Vec<(String, ModelSnapshot)> = paths
                .iter()
                .map(|p| Ok((file_label(p), load_snapshot(p)?)))
                .collect::<anyhow::Result<_>>()?;
            let models: Vec<(String, &ModelSnapshot)> =
                snaps.iter().map(|(l, s)| (l.clone(), s)).collect();
            let data = split.pick(&b);
            let s = &cfg.eval.settings;
            let table = cross_way_shot(
                &models,
                &cfg.eval.cross_ways,
                &cfg.eval.cross_shots,
                s.spec.queries,
                data,
                s.n_episodes,
                s.seed,
                s.workers,
            )?;
            let stem = format!("cross-way-shot-{}", data.split_name());
            write_file(&dir.reports().join(format!("{stem}.csv")), &table.to_csv())?;
            write_file(
                &dir.reports().join(format!("{stem}.md")),
                &table.to_markdown(true),
            )?;
            print!("{}", table.to_markdown(true));
            Ok(())
        }
        Command::Rounds { method, base } => {
            let b = cfg.benchmark()?;
            let teacher = load_base(&dir, base.as_deref())?;
            let methods: Vec<MethodKind> = match method {
                Some(m) => vec![m.into()],
                None => cfg
                    .methods
                    .iter()
                    .copied()
                    .filter(|m| m.is_incremental())
                    .collect(),
            };
            if methods.is_empty() {
                return Err(ConfigError::Invalid {
                    key: "methods".into(),
                    message: "lists no incremental method".into(),
                }
                .into());
            }
            let groups = b.new_rounds(cfg.eval.rounds);
            let rounds: Vec<Round<'_>> = groups
                .iter()
                .map(|(train, val)| Round { train, val })
                .collect();
            for m in methods {
                let exemplars = if m == MethodKind::Eiml {
                    let mut rng = exemplar_reserve_rng(cfg.seed);
                    Some(reserve_exemplars(
                        &b.old_train,
                        cfg.train.exemplars_per_class,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                let outs = run_rounds(&teacher, &rounds, m, &cfg.train, exemplars.as_ref())?;
                for (k, out) in outs.iter().enumerate() {
                    let label = format!("{}_r{}", m.name(), k + 1);
                    store_run(&dir, &label, out)?;
                    println!("{label}: {} anchors", out.snapshot.anchors().len());
                }
            }
            Ok(())
        }
        Command::Report => {
            let path = emit_report(dir.root())?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<()> {
    let b = cfg.benchmark()?;
    let parts: [(&str, &Dataset); 7] = [
        ("old_train", &b.old_train),
        ("new_train", &b.new_train),
        ("old_val", &b.old_val),
        ("new_val", &b.new_val),
        ("old_test", &b.old_test),
        ("new_test", &b.new_test),
        ("unseen_test", &b.unseen_test),
    ];
    for (name, ds) in parts {
        let path = dir.data().join(format!("{name}.csv"));
        save_dataset(ds, &path)?;
        println!("{name}: {} classes, {} rows", ds.num_classes(), ds.len());
    }
    Ok(())
}

fn load_base(dir: &RunDir, base: Option<&Path>) -> anyhow::Result<ModelSnapshot> {
    let path = base.map_or_else(|| dir.snapshot("nu"), Path::to_path_buf);
    load_snapshot(&path).with_context(|| {
        format!(
            "loading base snapshot {} (run train-base first)",
            path.display()
        )
    })
}

fn store_run(dir: &RunDir, label: &str, out: &TrainOutput) -> anyhow::Result<()> {
    let path = dir.snapshot(label);
    save_snapshot(&out.snapshot, &path)?;
    write_file(
        &dir.logs().join(format!("{label}.csv")),
        &log_to_csv(&out.log),
    )?;
    println!("{}", path.display());
    Ok(())
}

/// Sort key: table position, then the name itself.
type RankedName = (u8, String);

/// Row, then column, of one (ways, shots) table.
type TableCells<'a> = BTreeMap<RankedName, BTreeMap<RankedName, &'a EvalReport>>;

fn row_rank(label: &str) -> RankedName {
    let rank = match label.parse::<MethodKind>() {
        Ok(MethodKind::Nu) => 0,
        Ok(MethodKind::Ft) => 1,
        Ok(MethodKind::Dfa) => 2,
        Ok(MethodKind::Eiml) => 3,
        Ok(MethodKind::Ida) => 4,
        Ok(MethodKind::Par) => 6,
        Err(_) => 5,
    };
    (rank, label.to_string())
}

fn row_name(label: &str) -> String {
    label
        .parse::<MethodKind>()
        .map_or_else(|_| label.to_string(), |m| m.label().to_string())
}

fn split_rank(split: &str) -> RankedName {
    let rank = match split {
        "old" => 0,
        "new" => 1,
        "unseen" => 2,
        _ => 3,
    };
    (rank, split.to_string())
}

/// One markdown table per (ways, shots): rows are labels (NU first, PAR
/// last), columns are splits, cells are `mean ± ci` in percent. In each
/// column the highest displayed mean among rows other than NU and PAR is
/// bold, every tied row included.
pub fn render_tables(entries: &[(String, EvalReport)]) -> String {
    let mut groups: BTreeMap<(usize, usize), TableCells> = BTreeMap::new();
    for (label, r) in entries {
        groups
            .entry((r.spec.ways, r.spec.shots))
            .or_default()
            .entry(row_rank(label))
            .or_default()
            .insert(split_rank(&r.split), r);
    }
    let mut out = String::new();
    for ((ways, shots), rows) in &groups {
        let mut columns: Vec<&RankedName> = rows.values().flat_map(|m| m.keys()).collect();
        columns.sort();
        columns.dedup();
        let best: Vec<Option<String>> = columns
            .iter()
            .map(|c| {
                rows.iter()
                    .filter(|((rank, _), _)| *rank != 0 && *rank != 6)
                    .filter_map(|(_, m)| m.get(*c))
                    .map(|r| format!("{:.2}", 100.0 * r.mean_acc))
                    .max_by(|a, b| {
                        a.parse::<f64>()
                            .unwrap()
                            .total_cmp(&b.parse::<f64>().unwrap())
                    })
            })
            .collect();
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "### {ways}-way {shots}-shot\n");
        let names: Vec<&str> = columns.iter().map(|(_, s)| s.as_str()).collect();
        let _ = writeln!(out, "| method | {} |", names.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
        for ((rank, label), cells) in rows {
            let shown: Vec<String> = columns
                .iter()
                .zip(&best)
                .map(|(c, best)| match cells.get(*c) {
                    None => "-".to_string(),
                    Some(r) => {
                        let mean = format!("{:.2}", 100.0 * r.mean_acc);
                        let bold =
                            *rank != 0 && *rank != 6 && best.as_deref() == Some(mean.as_str());
                        if bold {
                            format!("**{}**", r.cell())
                        } else {
                            r.cell()
                        }
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", row_name(label), shown.join(" | "));
        }
    }
    out
}

/// Reads every `reports/eval-<label>-<split>-<W>w<S>s.csv` of a run and
/// writes `reports/tables.md`.
pub fn emit_report(run_dir: &Path) -> anyhow::Result<PathBuf> {
    let reports = run_dir.join("reports");
    let files = list_files(&reports, |n| n.starts_with("eval-") && n.ends_with(".csv"))?;
    if files.is_empty() {
        return Err(anyhow!("no eval reports in {}", reports.display()));
    }
    let mut entries = Vec::new();
    for path in files {
        let stem = file_label(&path);
        let body = stem.trim_start_matches("eval-");
        let label = body
            .rsplitn(3, '-')
            .nth(2)
            .ok_or_else(|| anyhow!("unexpected report name {}", path.display()))?
            .to_string();
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rows = EvalReport::parse_csv(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        entries.extend(rows.into_iter().map(|r| (label.clone(), r)));
    }
    let out = reports.join("tables.md");
    write_file(&out, &render_tables(&entries))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(split: &str, mean: f64) -> EvalReport {
        EvalReport {
            split: split.into(),
            n_episodes: 500,
            mean_acc: mean,
            ci_halfwidth: 0.0049,
            spec: EpisodeSpec::new(5, 1, 0),
            seed: 0,
        }
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config_str("", &[], None).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.train.lambda, 1.0);
        assert_eq!(cfg.train.temperature, 2.0);
        assert_eq!(cfg.train.episode.queries, 15);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.eval.settings.n_episodes, 500);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn paper_scale_profile() {
        let cfg = parse_config_str("profile = \"paper-scale\"", &[], None).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.tasks_per_epoch), (200, 800));
        assert_eq!(cfg.eval.settings.n_episodes, 2000);
        let cfg =
            parse_config_str("profile = \"paper-scale\"\n[train]\nepochs = 3", &[], None).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.tasks_per_epoch), (3, 800));
    }

    #[test]
    fn negative_lambda_names_the_key() {
        let err = parse_config_str("[train]\nlambda = -1", &[], None)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("train.lambda") && err.contains("λ ≥ 0"),
            "{err}"
        );
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = parse_config_str("[train]\nlamda = 1.0", &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lamda"), "{err}");
        let err = parse_config_str("[eval]\nepisodes = \"many\"", &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("episodes"), "{err}");
    }

    #[test]
    fn overrides_and_env_seed() {
        let sets = vec![
            "train.lambda=0.25".to_string(),
            "out_dir=elsewhere".to_string(),
        ];
        let cfg = parse_config_str("seed = 4", &sets, Some("9")).unwrap();
        assert_eq!(cfg.train.lambda, 0.25);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(
            (cfg.seed, cfg.train.seed, cfg.eval.settings.seed),
            (9, 9, 9)
        );
        assert!(parse_config_str("", &["nokey".into()], None).is_err());
        assert!(parse_config_str("", &[], Some("-3")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse_config_str(
            "seed = 7\n[train]\nlambda_old = 2.0\n[data]\noffset = 2.0",
            &[],
            None,
        )
        .unwrap();
        let again = parse_config_str(&cfg.to_toml(), &[], None).unwrap();
        assert_eq!(again, cfg);
        let csv = "[data]\nsource = \"csv\"\ntrain_csv = \"a.csv\"\nval_csv = \"b.csv\"\ntest_csv = \"c.csv\"";
        let cfg = parse_config_str(csv, &[], None).unwrap();
        assert_eq!(parse_config_str(&cfg.to_toml(), &[], None).unwrap(), cfg);
    }

    #[test]
    fn csv_keys_need_csv_source() {
        let err = parse_config_str("[data]\ntrain_csv = \"a.csv\"", &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("data.train_csv"), "{err}");
        let err = parse_config_str("[data]\nsource = \"csv\"", &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("data.train_csv"), "{err}");
    }

    #[test]
    fn single_method_gives_one_row() {
        let md = render_tables(&[("ida".into(), report("old", 0.7465))]);
        assert!(md.contains("### 5-way 1-shot"));
        assert!(md.contains("| IDA | **74.65 ± 0.49** |"), "{md}");
        assert_eq!(md.lines().filter(|l| l.starts_with("| IDA")).count(), 1);
    }

    #[test]
    fn rows_are_ordered_and_best_is_bold() {
        let entries = vec![
            ("par".to_string(), report("old", 0.99)),
            ("ida".to_string(), report("old", 0.81)),
            ("ft".to_string(), report("old", 0.64)),
            ("nu".to_string(), report("old", 0.95)),
            ("eiml".to_string(), report("old", 0.81004)),
            ("ida".to_string(), report("unseen", 0.5)),
        ];
        let md = render_tables(&entries);
        let rows: Vec<&str> = md
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| method"))
            .collect();
        let names: Vec<&str> = rows
            .iter()
            .map(|l| l.split('|').nth(1).unwrap().trim())
            .collect();
        assert_eq!(names, ["NU", "FT", "EIML", "IDA", "PAR"]);
        assert!(rows[0].contains("| 95.00 ± 0.49 |"));
        assert!(rows[2].contains("**81.00 ± 0.49**"));
        assert!(rows[3].contains("**81.00 ± 0.49**") && rows[3].contains("**50.00 ± 0.49**"));
        assert!(!rows[4].contains("**"));
        assert!(rows[1].contains("| 64.00 ± 0.49 | - |"));
    }

    #[test]
    fn tables_split_by_episode_shape() {
        let mut five = report("old", 0.5);
        five.spec = EpisodeSpec::new(5, 5, 0);
        let md = render_tables(&[("ft".into(), report("old", 0.4)), ("ft".into(), five)]);
        assert!(md.contains("### 5-way 1-shot") && md.contains("### 5-way 5-shot"));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cmd_dispatch(["iml"]), EXIT_USAGE);
        assert_eq!(
            cmd_dispatch(["iml", "train-incr", "--method", "nu"]),
            EXIT_USAGE
        );
        assert_eq!(cmd_dispatch(["iml", "bogus"]), EXIT_USAGE);
        assert_eq!(cmd_dispatch(["iml", "--help"]), EXIT_OK);
    }
}
