//! Episodic few-shot pipeline: class-disjoint splits, N-way K-shot
//! episode sampling, dataset loading, noise injection, and the training
//! and evaluation loops.

mod data;
mod train;

pub use data::{
    add_gaussian_noise, load_event_dataset, load_image_dataset, make_synthetic_glyphs,
    read_pgm, read_spk, write_pgm, write_spk, DataError, Dataset, DatasetKind, Item,
};
pub use train::{
    episode_losses, evaluate, train, EvalOptions, EvalReport, MetricsRecord, MetricsSink,
    TrainConfig, TrainError, TrainOutcome,
};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("split requests unknown class name {0:?}")]
    UnknownClass(String),
    #[error("class {name:?} has {available} items, episode needs {needed} (k + q)")]
    NotEnoughItems {
        name: String,
        available: usize,
        needed: usize,
    },
    #[error("split partition has {available} classes, episode needs {needed}")]
    NotEnoughClasses { available: usize, needed: usize },
    #[error("split partitions overlap on class {0:?}")]
    OverlappingSplit(String),
    #[error("episode parameters must be positive (n={n}, k={k}, q={q})")]
    BadShape { n: usize, k: usize, q: usize },
}

/// Class-disjoint train/val/test partition, by dataset class id.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Which partition an episode samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    /// Deterministic split by sorted class order: the first `n_train`
    /// classes train, the next `n_val` validate, the rest (capped at
    /// `n_test`) test.
    pub fn by_count(
        dataset: &Dataset,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<Self, EpisodeError> {
        let total = dataset.num_classes();
        if n_train + n_val + n_test > total {
            return Err(EpisodeError::NotEnoughClasses {
                available: total,
                needed: n_train + n_val + n_test,
            });
        }
        let ids: Vec<usize> = (0..total).collect();
        Ok(SplitSpec {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..n_train + n_val + n_test].to_vec(),
        })
    }

    /// Split from class-name lists (the on-disk JSON layout).
    pub fn from_names(
        dataset: &Dataset,
        train: &[String],
        val: &[String],
        test: &[String],
    ) -> Result<Self, EpisodeError> {
        let resolve = |names: &[String]| -> Result<Vec<usize>, EpisodeError> {
            names
                .iter()
                .map(|n| {
                    dataset
                        .class_id(n)
                        .ok_or_else(|| EpisodeError::UnknownClass(n.clone()))
                })
                .collect()
        };
        let spec = SplitSpec {
            train: resolve(train)?,
            val: resolve(val)?,
            test: resolve(test)?,
        };
        spec.assert_disjoint(dataset)?;
        Ok(spec)
    }

    /// Disjointness across all three partitions.
    pub fn assert_disjoint(&self, dataset: &Dataset) -> Result<(), EpisodeError> {
        let mut seen = std::collections::BTreeSet::new();
        for &cid in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(cid) {
                return Err(EpisodeError::OverlappingSplit(
                    dataset.class_name(cid).to_string(),
                ));
            }
        }
        Ok(())
    }

    pub fn partition(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Index of a global class id within the train partition (head label).
    pub fn train_label(&self, class_id: usize) -> Option<usize> {
        self.train.iter().position(|&c| c == class_id)
    }
}

/// One N-way K-shot task: `n * k` support items and `n * q` query items
/// over `n` distinct classes, with no item in both sets.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<(Tensor, usize)>,
    pub query: Vec<(Tensor, usize)>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
}

/// Gaussian perturbation settings for robustness studies.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Noise rate in [0,1]; 0 is the identity transform.
    pub rate: f64,
}

/// Uniformly samples `n` classes without replacement from the partition,
/// then `k + q` distinct items per class (first `k` support, next `q`
/// query). Fully deterministic under a fixed generator state.
pub fn sample_episode(
    dataset: &Dataset,
    class_pool: &[usize],
    n: usize,
    k: usize,
    q: usize,
    rng: &mut Rng,
) -> Result<Episode, EpisodeError> {
    if n == 0 || k == 0 || q == 0 {
        return Err(EpisodeError::BadShape { n, k, q });
    }
    if class_pool.len() < n {
        return Err(EpisodeError::NotEnoughClasses {
            available: class_pool.len(),
            needed: n,
        });
    }
    let class_choice = rng.sample_indices(class_pool.len(), n);
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for pool_idx in class_choice {
        let cid = class_pool[pool_idx];
        let members = dataset.class_items(cid);
        if members.len() < k + q {
            return Err(EpisodeError::NotEnoughItems {
                name: dataset.class_name(cid).to_string(),
                available: members.len(),
                needed: k + q,
            });
        }
        let picks = rng.sample_indices(members.len(), k + q);
        for (slot, &pick) in picks.iter().enumerate() {
            let item = dataset.item(members[pick]);
            let entry = (item.tensor.clone(), cid);
            if slot < k {
                support.push(entry);
            } else {
                query.push(entry);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        n_way: n,
        k_shot: k,
        q_queries: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        make_synthetic_glyphs(classes, per_class, 16, &mut Rng::new(99)).unwrap()
    }

    #[test]
    fn episode_has_exact_cardinalities_and_disjoint_items() {
        let ds = toy_dataset(8, 6);
        let pool: Vec<usize> = (0..8).collect();
        let mut rng = Rng::new(1);
        let ep = sample_episode(&ds, &pool, 5, 1, 1, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 5);
        let sup_classes: std::collections::BTreeSet<usize> =
            ep.support.iter().map(|(_, c)| *c).collect();
        assert_eq!(sup_classes.len(), 5);
        // support and query tensors must be distinct items
        for (s, _) in &ep.support {
            for (q, _) in &ep.query {
                assert!(!s.same_storage(q), "support item reused as query");
            }
        }
    }

    #[test]
    fn exhaustive_way_count_uses_every_class() {
        let ds = toy_dataset(20, 12);
        let pool: Vec<usize> = (0..20).collect();
        let mut rng = Rng::new(2);
        let ep = sample_episode(&ds, &pool, 20, 5, 5, &mut rng).unwrap();
        let classes: std::collections::BTreeSet<usize> =
            ep.support.iter().map(|(_, c)| *c).collect();
        assert_eq!(classes.len(), 20);
        assert_eq!(ep.support.len(), 100);
        assert_eq!(ep.query.len(), 100);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = toy_dataset(8, 6);
        let pool: Vec<usize> = (0..8).collect();
        let ep1 = sample_episode(&ds, &pool, 4, 2, 2, &mut Rng::new(7)).unwrap();
        let ep2 = sample_episode(&ds, &pool, 4, 2, 2, &mut Rng::new(7)).unwrap();
        for ((a, ca), (b, cb)) in ep1.support.iter().zip(&ep2.support) {
            assert_eq!(ca, cb);
            assert_eq!(a.data(), b.data());
        }
        for ((a, ca), (b, cb)) in ep1.query.iter().zip(&ep2.query) {
            assert_eq!(ca, cb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn insufficient_items_error_names_class() {
        let ds = toy_dataset(4, 3);
        let pool: Vec<usize> = (0..4).collect();
        let err = sample_episode(&ds, &pool, 2, 2, 2, &mut Rng::new(3)).unwrap_err();
        match err {
            EpisodeError::NotEnoughItems { available, needed, .. } => {
                assert_eq!(available, 3);
                assert_eq!(needed, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn split_by_count_disjoint() {
        let ds = toy_dataset(10, 3);
        let split = SplitSpec::by_count(&ds, 6, 2, 2).unwrap();
        split.assert_disjoint(&ds).unwrap();
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.val.len(), 2);
        assert_eq!(split.test.len(), 2);
        assert!(SplitSpec::by_count(&ds, 8, 2, 2).is_err());
    }

    #[test]
    fn overlapping_named_split_rejected() {
        let ds = toy_dataset(4, 3);
        let names: Vec<String> = (0..4).map(|i| ds.class_name(i).to_string()).collect();
        let err = SplitSpec::from_names(
            &ds,
            &names[0..2].to_vec(),
            &[],
            &names[1..3].to_vec(),
        )
        .unwrap_err();
        assert!(matches!(err, EpisodeError::OverlappingSplit(_)));
    }

    #[test]
    fn train_label_lookup() {
        let ds = toy_dataset(6, 3);
        let split = SplitSpec::by_count(&ds, 4, 0, 2).unwrap();
        assert_eq!(split.train_label(split.train[2]), Some(2));
        assert_eq!(split.train_label(split.test[0]), None);
    }
}
