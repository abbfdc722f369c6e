//! Fixtures and scalar reference implementations shared by the test targets.
#![allow(dead_code)]

use iml::benchmark::{Benchmark, BenchmarkSpec};
use iml::data::{sample_episode, Dataset, Episode, EpisodeSpec, SyntheticSpec};
use iml::model::{init_backbone, BackboneConfig, ModelSnapshot, ParamStore, SnapshotMeta};
use iml::trainer::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compensated (Neumaier) summation.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Unshifted softmax; inputs must keep `v / t` well inside the exp range.
pub fn softmax_oracle(row: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| (v / t).exp()).collect();
    let z = neumaier(e.iter().copied());
    e.iter().map(|v| v / z).collect()
}

pub fn lse_oracle(row: &[f64]) -> f64 {
    neumaier(row.iter().map(|v| v.exp())).ln()
}

pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    neumaier(
        p.iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln())),
    )
}

pub fn sqdist_oracle(a: &[f64], b: &[f64]) -> f64 {
    neumaier(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

/// `|a - b| / max(1, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// A small two-domain benchmark: 12 classes per domain, dim 8.
pub fn tiny_benchmark(seed: u64) -> Benchmark {
    let spec = BenchmarkSpec {
        synthetic: SyntheticSpec {
            classes_per_domain: 12,
            dim: 8,
            cluster_std: 0.5,
            domain_offset: SyntheticSpec::uniform_offset(8, 3.0),
            samples_per_class: 30,
            seed,
            sample_stream: 0,
        },
        train_fraction: 0.5,
        split_seed: seed,
    };
    Benchmark::build(&spec).expect("valid tiny benchmark")
}

/// A few seconds of training at most.
pub fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        tasks_per_epoch: 10,
        episode: EpisodeSpec::new(5, 2, 3),
        hidden_dims: vec![16],
        embed_dim: 8,
        val_episodes: 4,
        seed,
        ..TrainConfig::default()
    }
}

pub fn two_layer(input_dim: usize) -> BackboneConfig {
    BackboneConfig::new(input_dim, vec![8], 8)
}

pub fn episode(dataset: &Dataset, spec: &EpisodeSpec, seed: u64) -> Episode {
    sample_episode(dataset, spec, &mut ChaCha8Rng::seed_from_u64(seed))
        .expect("dataset supports the spec")
}

/// Randomly initialized teacher with one anchor per class of `dataset`.
pub fn random_teacher(dataset: &Dataset, config: &BackboneConfig, seed: u64) -> ModelSnapshot {
    let params: ParamStore = init_backbone(config, seed).expect("valid config");
    let anchors =
        iml::anchorstore::extract_anchors(&params, dataset, 0).expect("non-empty dataset");
    let meta = SnapshotMeta {
        seed,
        round: 0,
        method: "nu".into(),
    };
    iml::model::freeze_snapshot(config, &params, anchors, meta).expect("consistent snapshot")
}
