//! Episodic cross-entropy and the alignment penalties used by the
//! incremental methods. Every function records onto a caller-owned tape so
//! the trainer can differentiate the combined objective in one sweep. The
//! old model always enters as a constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ops, AutodiffError, Tape, Tensor, Var};
use crate::data::{Episode, ExemplarEpisode};
use crate::model::{embed_on_tape, AnchorSet, ModelError, ModelSnapshot, ParamVars};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{method} needs {what}")]
    MissingAux {
        method: MethodKind,
        what: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Nu,
    Ft,
    Dfa,
    Eiml,
    Ida,
    Par,
}

impl MethodKind {
    /// Table order: baselines first, paragon last.
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Nu,
        MethodKind::Ft,
        MethodKind::Dfa,
        MethodKind::Eiml,
        MethodKind::Ida,
        MethodKind::Par,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Nu => "nu",
            MethodKind::Ft => "ft",
            MethodKind::Dfa => "dfa",
            MethodKind::Eiml => "eiml",
            MethodKind::Ida => "ida",
            MethodKind::Par => "par",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Nu => "NU",
            MethodKind::Ft => "FT",
            MethodKind::Dfa => "DFA",
            MethodKind::Eiml => "EIML",
            MethodKind::Ida => "IDA",
            MethodKind::Par => "PAR",
        }
    }

    /// Methods trained by `train_incremental`.
    pub fn is_incremental(self) -> bool {
        matches!(
            self,
            MethodKind::Ft | MethodKind::Dfa | MethodKind::Eiml | MethodKind::Ida
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?} (expected nu, ft, dfa, eiml, ida or par)"))
    }
}

/// Argument order of the KL term between new (student) and old (teacher)
/// discriminants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(p_new || p_old)`
    #[default]
    StudentFirst,
    /// `KL(p_old || p_new)`
    TeacherFirst,
}

/// Weights and temperature of the incremental objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// EIML weight on the exemplar term; `lambda` when unset.
    pub lambda_old: Option<f64>,
    /// EIML weight on the new-data term; `lambda` when unset.
    pub lambda_new: Option<f64>,
    pub temperature: f64,
    pub kl_order: KlOrder,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_old: None,
            lambda_new: None,
            temperature: 2.0,
            kl_order: KlOrder::StudentFirst,
        }
    }
}

impl ObjectiveConfig {
    pub fn eiml_weights(&self) -> (f64, f64) {
        (
            self.lambda_old.unwrap_or(self.lambda),
            self.lambda_new.unwrap_or(self.lambda),
        )
    }
}

/// Scalar parts of one objective evaluation.
///
/// For EIML, `align = lambda_old * align_old + lambda_new * align_new` and
/// `lambda = 1`; for the other methods `align_old = 0` and
/// `align_new = align`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub meta_ce: f64,
    pub align: f64,
    pub align_old: f64,
    pub align_new: f64,
    pub total: f64,
    pub lambda: f64,
    pub lambda_old: f64,
    pub lambda_new: f64,
}

/// Method-specific inputs beside the new-data episode.
#[derive(Clone, Copy, Debug, Default)]
pub struct Aux<'a> {
    /// Old anchors compared against (IDA, EIML).
    pub anchors: Option<&'a AnchorSet>,
    /// Alignment batch (IDA, DFA, EIML). Defaults to the episode's support
    /// and query rows, whose embeddings are then reused.
    pub batch_x: Option<&'a Tensor>,
    /// Exemplar rows of old classes (EIML).
    pub exemplars: Option<&'a ExemplarEpisode>,
}

fn check_temperature(t: f64) -> Result<(), LossError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::Temperature(t).into())
    }
}

/// `mean_i [ D[i, y_i] / T + logsumexp_k(-D[i, k] / T) ]` with `D` the squared
/// distances from query embeddings to support prototypes.
pub fn meta_xent_on_tape(
    tape: &mut Tape,
    z_support: Var,
    support_y: &[usize],
    z_query: Var,
    query_y: &[usize],
    ways: usize,
    temperature: f64,
) -> Result<Var, LossError> {
    check_temperature(temperature)?;
    if query_y.is_empty() {
        return Err(LossError::Invalid("episode has no query rows".into()));
    }
    let protos = tape.group_mean(z_support, support_y, ways)?;
    let d = tape.pairwise_sqdist(z_query, protos)?;
    let own = tape.gather(d, query_y)?;
    let own = tape.scale(own, 1.0 / temperature)?;
    let logits = tape.scale(d, -1.0 / temperature)?;
    let lse = tape.logsumexp(logits)?;
    let per_query = tape.add(own, lse)?;
    Ok(tape.mean(per_query)?)
}

/// Mean over rows of the KL between the row distributions with log
/// probabilities `student` (on tape) and `teacher` (constant).
fn kl_rows(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    order: KlOrder,
) -> Result<Var, LossError> {
    let rows = teacher.rows() as f64;
    let lt = tape.constant(teacher.clone());
    let per_entry = match order {
        KlOrder::StudentFirst => {
            let p = tape.exp(student)?;
            let diff = tape.sub(student, lt)?;
            tape.mul(p, diff)?
        }
        KlOrder::TeacherFirst => {
            let p = tape.constant(ops::exp(teacher));
            let diff = tape.sub(lt, student)?;
            tape.mul(p, diff)?
        }
    };
    let total = tape.sum(per_entry)?;
    Ok(tape.scale(total, 1.0 / rows)?)
}

fn log_discriminant(z: &Tensor, centers: &Tensor, temperature: f64) -> Result<Tensor, LossError> {
    let d = ops::pairwise_sqdist(z, centers)?;
    Ok(ops::log_softmax(&ops::scale(&d, -1.0 / temperature))?)
}

fn log_discriminant_on_tape(
    tape: &mut Tape,
    z: Var,
    centers: Var,
    temperature: f64,
) -> Result<Var, LossError> {
    let d = tape.pairwise_sqdist(z, centers)?;
    let logits = tape.scale(d, -1.0 / temperature)?;
    Ok(tape.log_softmax(logits)?)
}

/// IDA on precomputed embeddings: mean KL between the discriminants over
/// `anchors` of the new embeddings `z_new` and the old embeddings `z_old`.
pub fn ida_on_tape(
    tape: &mut Tape,
    z_new: Var,
    z_old: &Tensor,
    anchors: &Tensor,
    temperature: f64,
    order: KlOrder,
) -> Result<Var, LossError> {
    check_temperature(temperature)?;
    if anchors.rows() == 0 || anchors.numel() == 0 {
        return Err(AutodiffError::Empty("anchor subset").into());
    }
    let c = tape.constant(anchors.clone());
    let student = log_discriminant_on_tape(tape, z_new, c, temperature)?;
    let teacher = log_discriminant(z_old, anchors, temperature)?;
    kl_rows(tape, student, &teacher, order)
}

/// DFA on precomputed embeddings: `mean_i ||z_new_i - z_old_i||²`.
pub fn dfa_on_tape(tape: &mut Tape, z_new: Var, z_old: &Tensor) -> Result<Var, LossError> {
    let old = tape.constant(z_old.clone());
    let diff = tape.sub(z_new, old)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, 1.0 / z_old.rows() as f64)?)
}

/// Exemplar term: prototypes are rebuilt from the exemplars through each
/// backbone and the old discriminant is compared against the new one,
/// `KL(p_old || p_new)`, averaged over exemplar rows.
pub fn eiml_old_on_tape(
    tape: &mut Tape,
    z_new: Var,
    z_old: &Tensor,
    labels: &[usize],
    ways: usize,
    temperature: f64,
) -> Result<Var, LossError> {
    check_temperature(temperature)?;
    let c_new = tape.group_mean(z_new, labels, ways)?;
    let student = log_discriminant_on_tape(tape, z_new, c_new, temperature)?;
    let c_old = ops::group_mean(z_old, labels, ways)?;
    let teacher = log_discriminant(z_old, &c_old, temperature)?;
    kl_rows(tape, student, &teacher, KlOrder::TeacherFirst)
}

fn embed_rows(tape: &mut Tape, params: &ParamVars, x: &Tensor) -> Result<Var, LossError> {
    let xv = tape.constant(x.clone());
    Ok(embed_on_tape(tape, params, xv)?)
}

fn nonempty(x: &Tensor, what: &'static str) -> Result<(), LossError> {
    if x.rows() == 0 || x.numel() == 0 {
        return Err(AutodiffError::Empty(what).into());
    }
    Ok(())
}

/// Episodic cross-entropy of the backbone `params` on `episode`.
pub fn meta_xent_loss(
    tape: &mut Tape,
    params: &ParamVars,
    episode: &Episode,
    temperature: f64,
) -> Result<Var, LossError> {
    let zs = embed_rows(tape, params, &episode.support_x)?;
    let zq = embed_rows(tape, params, &episode.query_x)?;
    meta_xent_on_tape(
        tape,
        zs,
        &episode.support_y,
        zq,
        &episode.query_y,
        episode.ways(),
        temperature,
    )
}

/// IDA penalty of the new backbone on `batch_x` against `old` over `anchors`.
pub fn ida_loss(
    tape: &mut Tape,
    new_params: &ParamVars,
    old: &ModelSnapshot,
    batch_x: &Tensor,
    anchors: &AnchorSet,
    temperature: f64,
    order: KlOrder,
) -> Result<Var, LossError> {
    nonempty(batch_x, "alignment batch")?;
    let z_new = embed_rows(tape, new_params, batch_x)?;
    let z_old = old.embed(batch_x)?;
    ida_on_tape(tape, z_new, &z_old, anchors.centers(), temperature, order)
}

/// Mean squared feature distance between new and old backbones on `batch_x`.
pub fn dfa_loss(
    tape: &mut Tape,
    new_params: &ParamVars,
    old: &ModelSnapshot,
    batch_x: &Tensor,
) -> Result<Var, LossError> {
    nonempty(batch_x, "alignment batch")?;
    let z_new = embed_rows(tape, new_params, batch_x)?;
    let z_old = old.embed(batch_x)?;
    dfa_on_tape(tape, z_new, &z_old)
}

/// `(align_old, align_new)` for exemplar-based alignment. `align_new` is
/// exactly [`ida_loss`] on the same batch and anchors.
#[allow(clippy::too_many_arguments)]
pub fn eiml_loss(
    tape: &mut Tape,
    new_params: &ParamVars,
    old: &ModelSnapshot,
    exemplars: &ExemplarEpisode,
    new_batch_x: &Tensor,
    anchors: &AnchorSet,
    temperature: f64,
    order: KlOrder,
) -> Result<(Var, Var), LossError> {
    nonempty(&exemplars.x, "exemplar episode")?;
    let z_new = embed_rows(tape, new_params, &exemplars.x)?;
    let z_old = old.embed(&exemplars.x)?;
    let align_old = eiml_old_on_tape(
        tape,
        z_new,
        &z_old,
        &exemplars.labels,
        exemplars.class_map.len(),
        temperature,
    )?;
    let align_new = ida_loss(
        tape,
        new_params,
        old,
        new_batch_x,
        anchors,
        temperature,
        order,
    )?;
    Ok((align_old, align_new))
}

fn require<'a, T>(
    v: Option<&'a T>,
    method: MethodKind,
    what: &'static str,
) -> Result<&'a T, LossError> {
    v.ok_or(LossError::MissingAux { method, what })
}

/// New-backbone embeddings of the alignment batch plus the matching old ones.
fn alignment_batch(
    tape: &mut Tape,
    params: &ParamVars,
    old: &ModelSnapshot,
    episode_x: &Tensor,
    z_episode: Var,
    batch_x: Option<&Tensor>,
) -> Result<(Var, Tensor), LossError> {
    match batch_x {
        Some(x) => {
            nonempty(x, "alignment batch")?;
            Ok((embed_rows(tape, params, x)?, old.embed(x)?))
        }
        None => Ok((z_episode, old.embed(episode_x)?)),
    }
}

/// The full training objective of `method` on one episode.
///
/// Returns the scalar to differentiate and its breakdown. A zero weight
/// leaves the corresponding penalty off the tape, so the gradient is
/// exactly that of the cross-entropy term.
pub fn incremental_objective(
    tape: &mut Tape,
    params: &ParamVars,
    method: MethodKind,
    old: Option<&ModelSnapshot>,
    episode: &Episode,
    aux: &Aux<'_>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown), LossError> {
    let t = cfg.temperature;
    if !(cfg.lambda >= 0.0) {
        return Err(LossError::Invalid(format!(
            "lambda must be >= 0, got {}",
            cfg.lambda
        )));
    }
    let ns = episode.support_y.len();
    let nq = episode.query_y.len();
    let all_x = episode.all_x();
    let z_all = embed_rows(tape, params, &all_x)?;
    let support_idx: Vec<usize> = (0..ns).collect();
    let query_idx: Vec<usize> = (ns..ns + nq).collect();
    let zs = tape.select_rows(z_all, &support_idx)?;
    let zq = tape.select_rows(z_all, &query_idx)?;
    let ce = meta_xent_on_tape(
        tape,
        zs,
        &episode.support_y,
        zq,
        &episode.query_y,
        episode.ways(),
        t,
    )?;
    let meta_ce = tape.value(ce).item();

    let mut out = LossBreakdown {
        meta_ce,
        total: meta_ce,
        lambda: cfg.lambda,
        ..LossBreakdown::default()
    };

    let total = match method {
        MethodKind::Nu | MethodKind::Par => {
            out.lambda = 0.0;
            ce
        }
        MethodKind::Ft => ce,
        MethodKind::Ida | MethodKind::Dfa => {
            let old = require(old, method, "an old snapshot")?;
            let (z_new, z_old) = alignment_batch(tape, params, old, &all_x, z_all, aux.batch_x)?;
            let align = if method == MethodKind::Ida {
                let anchors = require(aux.anchors, method, "an anchor subset")?;
                ida_on_tape(tape, z_new, &z_old, anchors.centers(), t, cfg.kl_order)?
            } else {
                dfa_on_tape(tape, z_new, &z_old)?
            };
            out.align = tape.value(align).item();
            out.align_new = out.align;
            if cfg.lambda == 0.0 {
                ce
            } else {
                let weighted = tape.scale(align, cfg.lambda)?;
                let total = tape.add(ce, weighted)?;
                out.total = tape.value(total).item();
                total
            }
        }
        MethodKind::Eiml => {
            let old = require(old, method, "an old snapshot")?;
            let anchors = require(aux.anchors, method, "an anchor subset")?;
            let ex = require(aux.exemplars, method, "an exemplar episode")?;
            let (lo, ln) = cfg.eiml_weights();
            if !(lo >= 0.0 && ln >= 0.0) {
                return Err(LossError::Invalid(
                    "lambda_old and lambda_new must be >= 0".into(),
                ));
            }
            let (z_new, z_old) = alignment_batch(tape, params, old, &all_x, z_all, aux.batch_x)?;
            let an = ida_on_tape(tape, z_new, &z_old, anchors.centers(), t, cfg.kl_order)?;
            nonempty(&ex.x, "exemplar episode")?;
            let ze_new = embed_rows(tape, params, &ex.x)?;
            let ze_old = old.embed(&ex.x)?;
            let ao = eiml_old_on_tape(tape, ze_new, &ze_old, &ex.labels, ex.class_map.len(), t)?;
            out.align_old = tape.value(ao).item();
            out.align_new = tape.value(an).item();
            out.lambda = 1.0;
            out.lambda_old = lo;
            out.lambda_new = ln;
            out.align = lo * out.align_old + ln * out.align_new;
            let mut total = ce;
            for (term, w) in [(ao, lo), (an, ln)] {
                if w != 0.0 {
                    let weighted = tape.scale(term, w)?;
                    total = tape.add(total, weighted)?;
                }
            }
            out.total = tape.value(total).item();
            total
        }
    };
    Ok((total, out))
}
