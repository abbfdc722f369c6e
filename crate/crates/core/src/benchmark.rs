//! The synthetic domain-shift benchmark: old and new classes come from two
//! different domains, and each domain keeps half of its classes unseen.

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, split_classes, DataError, Dataset, SyntheticSpec};

/// Stream indices of the three independent sample draws.
pub const TRAIN_STREAM: u64 = 0;
pub const VAL_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub synthetic: SyntheticSpec,
    /// Fraction of each domain's classes used for training (old in domain
    /// A, new in domain B); the rest is unseen.
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl BenchmarkSpec {
    /// 16 + 16 classes per domain, dim 16, offset norm 3.0, std 0.5.
    pub fn standard(seed: u64) -> Self {
        Self {
            synthetic: SyntheticSpec {
                classes_per_domain: 32,
                dim: 16,
                cluster_std: 0.5,
                domain_offset: SyntheticSpec::uniform_offset(16, 3.0),
                samples_per_class: 100,
                seed,
                sample_stream: TRAIN_STREAM,
            },
            train_fraction: 0.5,
            split_seed: seed,
        }
    }
}

/// Train, validation and test draws of the old, new and unseen classes.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub old_train: Dataset,
    pub new_train: Dataset,
    pub old_val: Dataset,
    pub new_val: Dataset,
    pub old_test: Dataset,
    pub new_test: Dataset,
    pub unseen_test: Dataset,
}

impl Benchmark {
    pub fn build(spec: &BenchmarkSpec) -> Result<Self, DataError> {
        let draw = |stream: u64| {
            gen_synthetic(&SyntheticSpec {
                sample_stream: stream,
                ..spec.synthetic.clone()
            })
        };
        let train = draw(TRAIN_STREAM)?;
        let f = spec.train_fraction;
        let domain_a = train.restrict(&spec.synthetic.domain_a_classes(), "a");
        let domain_b = train.restrict(&spec.synthetic.domain_b_classes(), "b");
        let (old, _, unseen_a) = split_classes(&domain_a, (f, 0.0, 1.0 - f), spec.split_seed)?;
        let (_, new, unseen_b) = split_classes(&domain_b, (0.0, f, 1.0 - f), spec.split_seed)?;
        let (old_ids, new_ids) = (old.class_ids(), new.class_ids());
        let unseen_ids: Vec<usize> = [unseen_a.class_ids(), unseen_b.class_ids()].concat();
        let val = draw(VAL_STREAM)?;
        let test = draw(TEST_STREAM)?;
        Ok(Self {
            old_train: old.with_name("old"),
            new_train: new.with_name("new"),
            old_val: val.restrict(&old_ids, "old"),
            new_val: val.restrict(&new_ids, "new"),
            old_test: test.restrict(&old_ids, "old"),
            new_test: test.restrict(&new_ids, "new"),
            unseen_test: test.restrict(&unseen_ids, "unseen"),
        })
    }

    /// Splits the classes of `train` into old, new and unseen by `fractions`
    /// and cuts the validation and test draws along the same class ids.
    pub fn from_datasets(
        train: &Dataset,
        val: &Dataset,
        test: &Dataset,
        fractions: (f64, f64, f64),
        split_seed: u64,
    ) -> Result<Self, DataError> {
        let (old, new, unseen) = split_classes(train, fractions, split_seed)?;
        let (old_ids, new_ids) = (old.class_ids(), new.class_ids());
        Ok(Self {
            old_val: val.restrict(&old_ids, "old"),
            new_val: val.restrict(&new_ids, "new"),
            old_test: test.restrict(&old_ids, "old"),
            new_test: test.restrict(&new_ids, "new"),
            unseen_test: test.restrict(&unseen.class_ids(), "unseen"),
            old_train: old,
            new_train: new,
        })
    }

    /// Old and new training classes together, for the paragon.
    pub fn union_train(&self) -> Dataset {
        self.old_train
            .union(&self.new_train, "union")
            .expect("class-disjoint")
    }

    pub fn union_val(&self) -> Dataset {
        self.old_val
            .union(&self.new_val, "union")
            .expect("class-disjoint")
    }

    /// Test splits in table order.
    pub fn test_splits(&self) -> [&Dataset; 3] {
        [&self.old_test, &self.new_test, &self.unseen_test]
    }

    /// Splits the new training and validation classes into `rounds` equal
    /// groups of consecutive class ids.
    pub fn new_rounds(&self, rounds: usize) -> Vec<(Dataset, Dataset)> {
        let ids = self.new_train.class_ids();
        let per = ids.len() / rounds.max(1);
        (0..rounds)
            .map(|r| {
                let chunk = &ids[r * per..(r + 1) * per];
                (
                    self.new_train.restrict(chunk, "new"),
                    self.new_val.restrict(chunk, "new"),
                )
            })
            .collect()
    }
}
