//! Embedding backbone, prototypes and the squared-distance discriminant.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ops, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("input width {actual} does not match backbone input_dim {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error("anchor set: {0}")]
    Anchors(String),
    #[error("parameter layout does not match backbone config")]
    Layout,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Shape of the relu MLP used as the embedding function. Every layer,
/// including the last, is followed by a relu.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::Config("input_dim must be > 0".into()));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::Config("embed_dim must be > 0".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("hidden_dims entries must be > 0".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.embed_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Trainable backbone parameters, one weight/bias pair per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    layers: Vec<Layer>,
}

/// Tape handles for a [`ParamStore`], in the same order as [`ParamStore::tensors`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    layers: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Regroups handles given in [`ParamVars::all`] order (weight, bias, ...).
    /// Returns `None` for an odd or empty list.
    pub fn from_vars(vars: &[Var]) -> Option<Self> {
        if vars.is_empty() || !vars.len().is_multiple_of(2) {
            return None;
        }
        Some(Self {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }
}

impl ParamStore {
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Weight, bias, weight, bias, ... in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Checks every layer against `config`.
    pub fn matches(&self, config: &BackboneConfig) -> bool {
        let dims = config.layer_dims();
        dims.len() == self.layers.len()
            && dims
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.weight.shape() == [i, o] && l.bias.shape() == [o])
    }

    /// Records every tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Bitwise equality of all values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// SHA-256 over shapes and IEEE bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            hash_tensor(&mut h, t);
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// He-uniform weights (`U(-a, a)`, `a = sqrt(6 / fan_in)`, variance
/// `2 / fan_in`) and zero biases, drawn from a ChaCha stream seeded by `seed`.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamStore, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                weight: Tensor::with_shape(vec![fan_in, fan_out], w),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(ParamStore { layers })
}

fn check_input(params: &ParamStore, x: &Tensor) -> Result<(), ModelError> {
    let expected = params.layers.first().map_or(0, |l| l.weight.shape()[0]);
    if x.ndim() != 2 || x.cols() != expected {
        return Err(ModelError::InputWidth {
            expected,
            actual: x.cols(),
        });
    }
    Ok(())
}

/// Embeds rows of `x` without recording anything.
pub fn embed(params: &ParamStore, x: &Tensor) -> Result<Tensor, ModelError> {
    check_input(params, x)?;
    let mut h = x.clone();
    for l in &params.layers {
        h = ops::relu(&ops::add_bias(&ops::matmul(&h, &l.weight)?, &l.bias)?);
    }
    Ok(h)
}

/// Differentiable embedding of the rows of `x`.
pub fn embed_on_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var, ModelError> {
    let mut h = x;
    for &(w, b) in &vars.layers {
        let lin = tape.matmul(h, w)?;
        let pre = tape.add_bias(lin, b)?;
        h = tape.relu(pre)?;
    }
    Ok(h)
}

/// Per-class mean of `z` over `labels` in `0..k`.
pub fn compute_prototypes(z: &Tensor, labels: &[usize], k: usize) -> Result<Tensor, ModelError> {
    Ok(ops::group_mean(z, labels, k)?)
}

/// `χ(z, c) = -||z - c||²`.
pub fn chi(z: &Tensor, c: &Tensor) -> Result<f64, ModelError> {
    if z.numel() != c.numel() {
        return Err(AutodiffError::ShapeMismatch {
            op: "chi",
            lhs: z.shape().to_vec(),
            rhs: c.shape().to_vec(),
        }
        .into());
    }
    Ok(-z
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>())
}

/// Class posterior `softmax(-||z - c_k||² / T)` for every row of `z`.
pub fn discriminant(z: &Tensor, anchors: &Tensor, temperature: f64) -> Result<Tensor, ModelError> {
    let d = ops::pairwise_sqdist(z, anchors)?;
    Ok(ops::softmax(&ops::scale(&d, -1.0), temperature)?)
}

/// Nearest anchor by squared distance, lowest index on ties.
pub fn predict(z: &Tensor, anchors: &Tensor) -> Result<Vec<usize>, ModelError> {
    Ok(ops::argmin_rows(&ops::pairwise_sqdist(z, anchors)?))
}

/// Retained class centers in the embedding space of the round that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    class_ids: Vec<usize>,
    centers: Tensor,
    round_tags: Vec<u32>,
}

impl AnchorSet {
    pub fn new(
        class_ids: Vec<usize>,
        centers: Tensor,
        round_tags: Vec<u32>,
    ) -> Result<Self, ModelError> {
        if centers.ndim() != 2 || centers.rows() != class_ids.len() {
            return Err(ModelError::Anchors(format!(
                "{} class ids but centers of shape {:?}",
                class_ids.len(),
                centers.shape()
            )));
        }
        if round_tags.len() != class_ids.len() {
            return Err(ModelError::Anchors(
                "one round tag per class required".into(),
            ));
        }
        let unique: BTreeSet<_> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(ModelError::Anchors("duplicate class id".into()));
        }
        Ok(Self {
            class_ids,
            centers,
            round_tags,
        })
    }

    /// All anchors tagged with the same round.
    pub fn uniform_round(
        class_ids: Vec<usize>,
        centers: Tensor,
        round: u32,
    ) -> Result<Self, ModelError> {
        let tags = vec![round; class_ids.len()];
        Self::new(class_ids, centers, tags)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn round_tags(&self) -> &[u32] {
        &self.round_tags
    }

    pub fn embed_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<AnchorSet, ModelError> {
        AnchorSet::new(
            indices.iter().map(|&i| self.class_ids[i]).collect(),
            self.centers.select_rows(indices),
            indices.iter().map(|&i| self.round_tags[i]).collect(),
        )
    }

    /// Appends `other`; class ids must not overlap.
    pub fn union(&self, other: &AnchorSet) -> Result<AnchorSet, ModelError> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.embed_dim() != other.embed_dim() {
            return Err(ModelError::Anchors("embedding widths differ".into()));
        }
        let mut ids = self.class_ids.clone();
        ids.extend_from_slice(&other.class_ids);
        let mut tags = self.round_tags.clone();
        tags.extend_from_slice(&other.round_tags);
        let centers = Tensor::vstack(&[&self.centers, &other.centers])?;
        AnchorSet::new(ids, centers, tags)
    }

    pub fn bit_eq(&self, other: &AnchorSet) -> bool {
        self.class_ids == other.class_ids
            && self.round_tags == other.round_tags
            && self.centers.bit_eq(&other.centers)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub seed: u64,
    pub round: u32,
    pub method: String,
}

/// A frozen `(params, anchors)` pair. Nothing hands out mutable access, so a
/// snapshot used as a teacher cannot change under training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    config: BackboneConfig,
    params: ParamStore,
    anchors: AnchorSet,
    meta: SnapshotMeta,
}

impl ModelSnapshot {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn meta(&self) -> &SnapshotMeta {
        &self.meta
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        embed(&self.params, x)
    }

    /// SHA-256 over config, params, anchors and meta.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.meta).expect("meta serializes"));
        for t in self.params.tensors() {
            hash_tensor(&mut h, t);
        }
        for (&id, &tag) in self.anchors.class_ids.iter().zip(&self.anchors.round_tags) {
            h.update((id as u64).to_le_bytes());
            h.update(tag.to_le_bytes());
        }
        hash_tensor(&mut h, &self.anchors.centers);
        hex::encode(h.finalize())
    }

    pub fn bit_eq(&self, other: &ModelSnapshot) -> bool {
        self.config == other.config
            && self.meta == other.meta
            && self.params.bit_eq(&other.params)
            && self.anchors.bit_eq(&other.anchors)
    }
}

/// Deep-copies `params` into an immutable snapshot.
pub fn freeze_snapshot(
    config: &BackboneConfig,
    params: &ParamStore,
    anchors: AnchorSet,
    meta: SnapshotMeta,
) -> Result<ModelSnapshot, ModelError> {
    config.validate()?;
    if !params.matches(config) {
        return Err(ModelError::Layout);
    }
    if !anchors.is_empty() && anchors.embed_dim() != config.embed_dim {
        return Err(ModelError::Anchors(format!(
            "anchor width {} does not match embed_dim {}",
            anchors.embed_dim(),
            config.embed_dim
        )));
    }
    Ok(ModelSnapshot {
        config: config.clone(),
        params: params.clone(),
        anchors,
        meta,
    })
}
