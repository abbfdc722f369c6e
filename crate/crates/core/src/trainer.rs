//! Optimization loops: base meta-training, incremental training for each
//! method, the paragon, and chained rounds.
//!
//! Every run draws from separate ChaCha streams for episodes, anchor
//! subsets and exemplar episodes, so methods that share a seed see the same
//! new-data episodes whatever auxiliary inputs they consume.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorstore::{extract_anchors, StoreError};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{
    reserve_exemplars, sample_anchor_subset, sample_episode, sample_exemplar_episode, DataError,
    Dataset, EpisodeSpec, ExemplarSet,
};
use crate::evaluator::{episode_accuracy, episode_metrics, EvalError};
use crate::losses::{
    incremental_objective, Aux, KlOrder, LossBreakdown, LossError, MethodKind, ObjectiveConfig,
};
use crate::model::{
    freeze_snapshot, init_backbone, BackboneConfig, ModelError, ModelSnapshot, ParamStore,
    SnapshotMeta,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    Diverged {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("non-finite gradient in parameter tensor {tensor} at optimizer step {step}")]
    NonFiniteGradient { tensor: usize, step: u64 },
    #[error("gradient list has {got} tensors, expected {expected}")]
    GradientCount { got: usize, expected: usize },
    #[error("{0} cannot be trained incrementally")]
    Method(MethodKind),
    #[error("EIML needs reserved exemplars")]
    MissingExemplars,
    #[error("old snapshot has no anchors")]
    NoAnchors,
    #[error("at least one round is required")]
    NoRounds,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub episode: EpisodeSpec,
    pub lambda: f64,
    pub lambda_old: Option<f64>,
    pub lambda_new: Option<f64>,
    pub temperature: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub exemplars_per_class: usize,
    pub kl_order: KlOrder,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Validation episodes per epoch.
    pub val_episodes: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            tasks_per_epoch: 100,
            episode: EpisodeSpec::new(5, 1, 15),
            lambda: 1.0,
            lambda_old: None,
            lambda_new: None,
            temperature: 2.0,
            lr: 1e-3,
            lr_decay: 0.5,
            patience: 3,
            seed: 0,
            exemplars_per_class: 15,
            kl_order: KlOrder::StudentFirst,
            hidden_dims: vec![32],
            embed_dim: 16,
            val_episodes: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.tasks_per_epoch == 0 {
            return bad("epochs and tasks_per_epoch must be >= 1");
        }
        if !(self.lambda >= 0.0)
            || self.lambda_old.is_some_and(|v| !(v >= 0.0))
            || self.lambda_new.is_some_and(|v| !(v >= 0.0))
        {
            return bad("lambda, lambda_old and lambda_new must be >= 0");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be > 0");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must be in (0, 1)");
        }
        if self.exemplars_per_class == 0 {
            return bad("exemplars_per_class must be >= 1");
        }
        if self.val_episodes < 2 {
            return bad("val_episodes must be >= 2");
        }
        self.episode.validate()?;
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            lambda_old: self.lambda_old,
            lambda_new: self.lambda_new,
            temperature: self.temperature,
            kl_order: self.kl_order,
        }
    }

    pub fn backbone(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig::new(input_dim, self.hidden_dims.clone(), self.embed_dim)
    }
}

/// Adam moments plus the plateau-schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub best: f64,
    pub since_improvement: usize,
}

impl OptimState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(Tensor::zeros_like).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            best: f64::NEG_INFINITY,
            since_improvement: 0,
        }
    }
}

/// One bias-corrected Adam update at the state's current learning rate.
/// Rejects non-finite gradients before touching anything.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<(), TrainError> {
    if grads.len() != params.num_tensors() {
        return Err(TrainError::GradientCount {
            got: grads.len(),
            expected: params.num_tensors(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            tensor: i,
            step: state.step + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plateau schedule: an epoch that does not beat the best metric so far
/// bumps a counter; once the counter exceeds `patience` the learning rate
/// is multiplied by `decay` and the counter resets. Returns whether a decay
/// happened.
pub fn lr_schedule_update(
    state: &mut OptimState,
    val_metric: f64,
    patience: usize,
    decay: f64,
) -> bool {
    if val_metric > state.best {
        state.best = val_metric;
        state.since_improvement = 0;
        return false;
    }
    state.since_improvement += 1;
    if state.since_improvement > patience {
        state.lr *= decay;
        state.since_improvement = 0;
        return true;
    }
    false
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,acc,lr";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for l in log {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            l.epoch, l.split, l.loss, l.acc, l.lr
        );
    }
    out
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub snapshot: ModelSnapshot,
    pub log: Vec<EpochLog>,
}

const STREAM_EPISODES: u64 = 0;
const STREAM_ANCHORS: u64 = 1;
const STREAM_EXEMPLAR_EPISODES: u64 = 2;

fn stream_rng(seed: u64, round: u32, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(round) << 8) | stream);
    rng
}

/// Stream used to reserve exemplars for a run seeded with `seed`.
pub fn exemplar_reserve_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Seed of the fixed validation episodes of round `round`.
pub fn validation_seed(seed: u64, round: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (0xA5A5_0000 + u64::from(round))
}

enum Mode<'a> {
    Meta,
    Incremental {
        method: MethodKind,
        old: &'a ModelSnapshot,
        exemplars: Option<&'a ExemplarSet>,
    },
}

/// A training run that can be advanced one optimizer step at a time.
pub struct Session<'a> {
    mode: Mode<'a>,
    train: &'a Dataset,
    val: &'a Dataset,
    cfg: TrainConfig,
    round: u32,
    params: ParamStore,
    opt: OptimState,
    episodes: ChaCha8Rng,
    anchor_rng: ChaCha8Rng,
    exemplar_rng: ChaCha8Rng,
    epoch: usize,
    step_in_epoch: usize,
    epoch_loss: Vec<f64>,
    epoch_acc: Vec<f64>,
    log: Vec<EpochLog>,
}

impl<'a> Session<'a> {
    /// Plain episodic meta-training from a fresh initialization.
    pub fn meta(
        train: &'a Dataset,
        val: &'a Dataset,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.episode.check(train)?;
        cfg.episode.check(val)?;
        let params = init_backbone(&cfg.backbone(train.dim()), cfg.seed)?;
        Ok(Self::build(Mode::Meta, train, val, cfg, 0, params))
    }

    /// Incremental training initialized from `old`.
    pub fn incremental(
        old: &'a ModelSnapshot,
        train: &'a Dataset,
        val: &'a Dataset,
        method: MethodKind,
        cfg: &TrainConfig,
        exemplars: Option<&'a ExemplarSet>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if !method.is_incremental() {
            return Err(TrainError::Method(method));
        }
        if old.anchors().is_empty() {
            return Err(TrainError::NoAnchors);
        }
        if method == MethodKind::Eiml && exemplars.is_none_or(|e| e.num_classes() == 0) {
            return Err(TrainError::MissingExemplars);
        }
        cfg.episode.check(train)?;
        cfg.episode.check(val)?;
        if train.dim() != old.config().input_dim {
            return Err(TrainError::Config(format!(
                "dataset width {} does not match backbone input_dim {}",
                train.dim(),
                old.config().input_dim
            )));
        }
        let mode = Mode::Incremental {
            method,
            old,
            exemplars,
        };
        Ok(Self::build(
            mode,
            train,
            val,
            cfg,
            old.meta().round + 1,
            old.params().clone(),
        ))
    }

    fn build(
        mode: Mode<'a>,
        train: &'a Dataset,
        val: &'a Dataset,
        cfg: &TrainConfig,
        round: u32,
        params: ParamStore,
    ) -> Self {
        let opt = OptimState::new(&params, cfg.lr);
        Self {
            mode,
            train,
            val,
            cfg: cfg.clone(),
            round,
            params,
            opt,
            episodes: stream_rng(cfg.seed, round, STREAM_EPISODES),
            anchor_rng: stream_rng(cfg.seed, round, STREAM_ANCHORS),
            exemplar_rng: stream_rng(cfg.seed, round, STREAM_EXEMPLAR_EPISODES),
            epoch: 0,
            step_in_epoch: 0,
            epoch_loss: Vec::new(),
            epoch_acc: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn optim(&self) -> &OptimState {
        &self.opt
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// One episode, one gradient step.
    pub fn step(&mut self) -> Result<LossBreakdown, TrainError> {
        let spec = self.cfg.episode;
        let episode = sample_episode(self.train, &spec, &mut self.episodes)?;
        let (method, old) = match &self.mode {
            Mode::Meta => (MethodKind::Par, None),
            Mode::Incremental { method, old, .. } => (*method, Some(*old)),
        };
        let anchors = match (&self.mode, method) {
            (Mode::Incremental { old, .. }, MethodKind::Ida | MethodKind::Eiml) => {
                let k = spec.ways.min(old.anchors().len());
                Some(sample_anchor_subset(
                    old.anchors(),
                    k,
                    &mut self.anchor_rng,
                )?)
            }
            _ => None,
        };
        let exemplar_episode = match &self.mode {
            Mode::Incremental {
                method: MethodKind::Eiml,
                exemplars: Some(ex),
                ..
            } => {
                let ways = spec.ways.min(ex.num_classes());
                Some(sample_exemplar_episode(
                    ex,
                    ways,
                    spec.rows_per_class(),
                    &mut self.exemplar_rng,
                )?)
            }
            _ => None,
        };
        let aux = Aux {
            anchors: anchors.as_ref(),
            batch_x: None,
            exemplars: exemplar_episode.as_ref(),
        };

        let train_acc = episode_accuracy(&self.params, &episode)?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let (total, breakdown) = incremental_objective(
            &mut tape,
            &vars,
            method,
            old,
            &episode,
            &aux,
            &self.cfg.objective(),
        )?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch: self.epoch,
                step: self.step_in_epoch,
                value: breakdown.total,
            });
        }
        let grads = tape.backward(total, &vars.all())?;
        adam_step(&mut self.params, &grads.collect(&vars.all()), &mut self.opt)?;
        self.epoch_loss.push(breakdown.total);
        self.epoch_acc.push(train_acc);
        self.step_in_epoch += 1;
        Ok(breakdown)
    }

    /// Validates, logs and applies the learning-rate schedule.
    pub fn end_epoch(&mut self) -> Result<(), TrainError> {
        let lr = self.opt.lr;
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        self.log.push(EpochLog {
            epoch: self.epoch,
            split: "train".into(),
            loss: mean(&self.epoch_loss),
            acc: mean(&self.epoch_acc),
            lr,
        });
        let metrics = episode_metrics(
            &self.params,
            self.val,
            &self.cfg.episode,
            self.cfg.val_episodes,
            validation_seed(self.cfg.seed, self.round),
            self.cfg.temperature,
            self.cfg.workers,
        )?;
        let accs: Vec<f64> = metrics.iter().map(|m| m.0).collect();
        let losses: Vec<f64> = metrics.iter().map(|m| m.1).collect();
        let val_acc = mean(&accs);
        self.log.push(EpochLog {
            epoch: self.epoch,
            split: self.val.split_name().to_string(),
            loss: mean(&losses),
            acc: val_acc,
            lr,
        });
        lr_schedule_update(&mut self.opt, val_acc, self.cfg.patience, self.cfg.lr_decay);
        self.epoch += 1;
        self.step_in_epoch = 0;
        self.epoch_loss.clear();
        self.epoch_acc.clear();
        Ok(())
    }

    /// Runs every remaining epoch and returns the trained parameters.
    pub fn run(mut self) -> Result<(ParamStore, Vec<EpochLog>), TrainError> {
        while self.epoch < self.cfg.epochs {
            while self.step_in_epoch < self.cfg.tasks_per_epoch {
                self.step()?;
            }
            self.end_epoch()?;
        }
        Ok((self.params, self.log))
    }
}

fn meta_snapshot(
    train: &Dataset,
    params: &ParamStore,
    cfg: &TrainConfig,
    method: MethodKind,
) -> Result<ModelSnapshot, TrainError> {
    let anchors = extract_anchors(params, train, 0)?;
    let meta = SnapshotMeta {
        seed: cfg.seed,
        round: 0,
        method: method.name().into(),
    };
    Ok(freeze_snapshot(
        &cfg.backbone(train.dim()),
        params,
        anchors,
        meta,
    )?)
}

/// Meta-trains on `old_train` and keeps one anchor per old class.
pub fn train_base(
    old_train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let (params, log) = Session::meta(old_train, val, cfg)?.run()?;
    let snapshot = meta_snapshot(old_train, &params, cfg, MethodKind::Nu)?;
    Ok(TrainOutput { snapshot, log })
}

/// Meta-trains on the union of old and new data.
pub fn train_paragon(
    union_train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let (params, log) = Session::meta(union_train, val, cfg)?.run()?;
    let snapshot = meta_snapshot(union_train, &params, cfg, MethodKind::Par)?;
    Ok(TrainOutput { snapshot, log })
}

/// Trains `method` on `new_train` starting from `old`. The result keeps
/// every old anchor untouched and adds anchors for the new classes.
pub fn train_incremental(
    old: &ModelSnapshot,
    new_train: &Dataset,
    val: &Dataset,
    method: MethodKind,
    cfg: &TrainConfig,
    exemplars: Option<&ExemplarSet>,
) -> Result<TrainOutput, TrainError> {
    let session = Session::incremental(old, new_train, val, method, cfg, exemplars)?;
    let round = session.round();
    let (params, log) = session.run()?;
    let new_anchors = extract_anchors(&params, new_train, round)?;
    let anchors = old.anchors().union(&new_anchors)?;
    let meta = SnapshotMeta {
        seed: cfg.seed,
        round,
        method: method.name().into(),
    };
    let snapshot = freeze_snapshot(old.config(), &params, anchors, meta)?;
    Ok(TrainOutput { snapshot, log })
}

/// One incremental round: training data and validation data.
pub struct Round<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

/// Chains incremental rounds, each output becoming the next teacher. For
/// EIML the exemplar pool grows with every round's training classes.
pub fn run_rounds(
    base: &ModelSnapshot,
    rounds: &[Round<'_>],
    method: MethodKind,
    cfg: &TrainConfig,
    exemplars: Option<&ExemplarSet>,
) -> Result<Vec<TrainOutput>, TrainError> {
    if rounds.is_empty() {
        return Err(TrainError::NoRounds);
    }
    let mut outputs: Vec<TrainOutput> = Vec::with_capacity(rounds.len());
    let mut pool = exemplars.cloned();
    for round in rounds {
        let teacher = outputs.last().map_or(base, |o| &o.snapshot);
        let out = train_incremental(teacher, round.train, round.val, method, cfg, pool.as_ref())?;
        if method == MethodKind::Eiml {
            let mut rng = exemplar_reserve_rng(cfg.seed);
            let more = reserve_exemplars(round.train, cfg.exemplars_per_class, &mut rng)?;
            pool = Some(match pool {
                Some(p) => p.union(&more)?,
                None => more,
            });
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Mean IDA divergence between `params` and `old` over every old anchor,
/// measured on fixed episodes of `dataset`. Used to compare how closely
/// runs track their teacher.
#[allow(clippy::too_many_arguments)]
pub fn alignment_probe(
    old: &ModelSnapshot,
    params: &ParamStore,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    temperature: f64,
    order: KlOrder,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for i in 0..n_episodes {
        let ep = sample_episode(
            dataset,
            spec,
            &mut crate::evaluator::episode_rng(seed, i as u64),
        )?;
        let x = ep.all_x();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let l =
            crate::losses::ida_loss(&mut tape, &vars, old, &x, old.anchors(), temperature, order)?;
        total += tape.value(l).item();
    }
    Ok(total / n_episodes as f64)
}
