//! Incremental meta-learning for metric-based few-shot classifiers.
//!
//! A prototypical-network style learner is meta-trained on an "old" set of
//! classes, after which only its parameters and one anchor per class are kept.
//! Later rounds train on new classes while a KL penalty keeps the new
//! backbone's discriminant over the stored anchors close to the old one
//! (indirect discriminant alignment). Baselines (no update, fine-tuning,
//! direct feature alignment, exemplar replay, full-data paragon), episodic
//! evaluation with confidence intervals and the parameter sweeps live beside it.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchorstore;
pub mod autodiff;
pub mod benchmark;
pub mod cli;
pub mod data;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod trainer;
