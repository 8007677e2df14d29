//! Small, dependency-free learners plus synthetic data generation and
//! non-IID partitioning, so the federated pipeline runs at desk scale.

mod model;

pub use model::{Architecture, GradientVector, ModelParams};

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Labels are either class ids (classification) or real targets (regression).
#[derive(Debug, Clone)]
pub enum Labels {
    Classes { ids: Vec<usize>, n_classes: usize },
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An in-memory design matrix with labels. Features are stored row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    n_features: usize,
    features: Vec<f64>,
    labels: Labels,
}

impl Dataset {
    pub fn new(n_features: usize, features: Vec<f64>, labels: Labels) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidSpec("zero features".into()));
        }
        if features.len() % n_features != 0 {
            return Err(Error::InvalidSpec(format!(
                "feature buffer length {} is not a multiple of n_features {}",
                features.len(),
                n_features
            )));
        }
        let n_samples = features.len() / n_features;
        if n_samples == 0 {
            return Err(Error::InvalidSpec("zero samples".into()));
        }
        if labels.len() != n_samples {
            return Err(Error::InvalidSpec(format!(
                "{} labels for {} samples",
                labels.len(),
                n_samples
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite feature value".into()));
        }
        if let Labels::Classes { ids, n_classes } = &labels {
            if let Some(&bad) = ids.iter().find(|&&c| c >= *n_classes) {
                return Err(Error::InvalidSpec(format!(
                    "label {bad} outside {n_classes} classes"
                )));
            }
        }
        Ok(Dataset {
            n_features,
            features,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        match &self.labels {
            Labels::Classes { ids, .. } => Some(ids[i]),
            Labels::Targets(_) => None,
        }
    }

    pub fn target_of(&self, i: usize) -> f64 {
        match &self.labels {
            Labels::Classes { ids, .. } => ids[i] as f64,
            Labels::Targets(t) => t[i],
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.labels {
            Labels::Classes { n_classes, .. } => Some(*n_classes),
            Labels::Targets(_) => None,
        }
    }
}

/// Specification for a synthetic mixture-of-Gaussians classification set.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_features: usize,
    pub n_samples: usize,
    /// Distance of each class mean from the origin; unit-variance clusters.
    pub separation: f64,
    pub seed: u64,
}

/// Mixture-of-Gaussians classification data, reproducible from the seed.
///
/// Class `c` is centered at `separation` along feature axis `c % n_features`
/// (sign alternating once the axes wrap), with unit isotropic noise. Labels
/// are assigned round-robin so classes stay balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_samples == 0 || spec.n_features == 0 {
        return Err(Error::InvalidSpec(
            "synthetic dataset needs at least one sample and one feature".into(),
        ));
    }
    if spec.n_classes == 0 {
        return Err(Error::InvalidSpec("zero classes".into()));
    }
    if spec.n_samples < spec.n_classes {
        return Err(Error::InvalidSpec(format!(
            "{} samples cannot cover {} classes",
            spec.n_samples, spec.n_classes
        )));
    }
    if spec.separation < 0.0 {
        return Err(Error::InvalidSpec("negative separation".into()));
    }

    let mut rng = rng::rng_from_key(rng::child_key(spec.seed, rng::stream::DATA));
    let mut features = Vec::with_capacity(spec.n_samples * spec.n_features);
    let mut ids = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let class = i % spec.n_classes;
        let axis = class % spec.n_features;
        let sign = if (class / spec.n_features) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        for j in 0..spec.n_features {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == axis { sign * spec.separation } else { 0.0 };
            features.push(mean + noise);
        }
        ids.push(class);
    }
    Dataset::new(
        spec.n_features,
        features,
        Labels::Classes {
            ids,
            n_classes: spec.n_classes,
        },
    )
}

/// One client's slice of a parent dataset.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub batch_size: usize,
}

/// Split a classification dataset into `k` disjoint shards with a controlled
/// non-IID level.
///
/// A `non_iid_level` fraction of each shard carries a single dominant label
/// (clients cycle through the labels); the remainder is drawn uniformly from
/// the leftover pool. Shard sizes are equal; remainder samples are discarded.
pub fn partition_non_iid(
    ds: &Dataset,
    k: usize,
    non_iid_level: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if k == 0 {
        return Err(Error::InvalidSpec("need at least one client".into()));
    }
    if !(0.0..=1.0).contains(&non_iid_level) {
        return Err(Error::InvalidSpec(format!(
            "non-IID level {non_iid_level} outside [0, 1]"
        )));
    }
    if ds.n_samples() < k {
        return Err(Error::InvalidSpec(format!(
            "{} samples cannot fill {} shards",
            ds.n_samples(),
            k
        )));
    }
    let n_classes = ds
        .n_classes()
        .ok_or_else(|| Error::InvalidSpec("non-IID partition needs class labels".into()))?;
    let shard_size = ds.n_samples() / k;
    if batch_size == 0 || batch_size > shard_size {
        return Err(Error::InvalidSpec(format!(
            "batch size {batch_size} outside [1, {shard_size}]"
        )));
    }

    let mut rng = rng::rng_from_key(rng::child_key(seed, rng::stream::PARTITION));

    // Per-label pools, each shuffled once.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for i in 0..ds.n_samples() {
        pools[ds.class_of(i).unwrap()].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let dominant_count = (non_iid_level * shard_size as f64).ceil() as usize;
    let dominant_count = dominant_count.min(shard_size);

    let mut shards = Vec::with_capacity(k);
    for client_id in 0..k {
        let label = client_id % n_classes;
        let take = dominant_count.min(pools[label].len());
        let split = pools[label].len() - take;
        let indices: Vec<usize> = pools[label].drain(split..).collect();
        shards.push(ClientShard {
            client_id,
            indices,
            batch_size,
        });
    }

    // Fill the remainder of every shard uniformly from what is left.
    let mut leftover: Vec<usize> = pools.into_iter().flatten().collect();
    leftover.shuffle(&mut rng);
    for shard in &mut shards {
        while shard.indices.len() < shard_size {
            match leftover.pop() {
                Some(i) => shard.indices.push(i),
                None => break,
            }
        }
        if shard.indices.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "shard {} ended up empty",
                shard.client_id
            )));
        }
    }
    Ok(shards)
}

/// Mini-batch iterator over one shard: samples without replacement inside an
/// epoch, reshuffles when the pass is exhausted.
pub struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(shard: &ClientShard, rng: ChaCha8Rng) -> Result<Self> {
        if shard.batch_size == 0 || shard.batch_size > shard.indices.len() {
            return Err(Error::InvalidSpec(format!(
                "batch size {} for shard of {} samples",
                shard.batch_size,
                shard.indices.len()
            )));
        }
        let mut s = BatchStream {
            order: shard.indices.clone(),
            cursor: 0,
            batch_size: shard.batch_size,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use std::collections::HashSet;

    fn spec(n_classes: usize, sep: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes,
            n_features: 10,
            n_samples: 1000,
            separation: sep,
            seed,
        }
    }

    #[test]
    fn synthetic_contract() {
        let ds = generate_synthetic(&spec(2, 3.0, 7)).unwrap();
        assert_eq!(ds.n_samples(), 1000);
        assert_eq!(ds.n_features(), 10);
        for i in 0..ds.n_samples() {
            assert!(ds.class_of(i).unwrap() < 2);
        }
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(&spec(2, 3.0, 7)).unwrap();
        let b = generate_synthetic(&spec(2, 3.0, 7)).unwrap();
        assert_eq!(a.features, b.features);
        let c = generate_synthetic(&spec(2, 3.0, 8)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn synthetic_rejects_empty() {
        let mut s = spec(2, 3.0, 7);
        s.n_samples = 0;
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidSpec(_))));
        let mut s = spec(2, 3.0, 7);
        s.n_features = 0;
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidSpec(_))));
    }

    /// Reference full-batch gradient descent, run to convergence; a well
    /// separated mixture must be almost perfectly classifiable.
    #[test]
    fn separable_data_trains_to_99_percent() {
        let ds = generate_synthetic(&spec(2, 6.0, 11)).unwrap();
        let arch = Architecture::Logistic {
            n_features: 10,
            n_classes: 2,
        };
        let mut params = arch.zero_params();
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        for _ in 0..500 {
            let g = params.gradient(&ds, &all).unwrap();
            params = params.sgd_step(&g, 0.5).unwrap();
        }
        let correct = (0..ds.n_samples())
            .filter(|&i| params.predict_class(ds.row(i)) == ds.class_of(i).unwrap())
            .count();
        assert!(
            correct as f64 >= 0.99 * ds.n_samples() as f64,
            "train accuracy {}/{}",
            correct,
            ds.n_samples()
        );
    }

    fn shard_histogram(ds: &Dataset, shard: &ClientShard, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; n_classes];
        for &i in &shard.indices {
            h[ds.class_of(i).unwrap()] += 1;
        }
        h
    }

    #[test]
    fn partition_disjoint_and_exhaustive() {
        let ds = generate_synthetic(&spec(4, 2.0, 3)).unwrap();
        for &(k, level) in &[(1usize, 0.0), (3, 0.5), (10, 0.3), (7, 1.0)] {
            let shards = partition_non_iid(&ds, k, level, 8, 99).unwrap();
            assert_eq!(shards.len(), k);
            let mut seen = HashSet::new();
            let mut total = 0;
            for s in &shards {
                assert_eq!(s.indices.len(), ds.n_samples() / k);
                total += s.indices.len();
                for &i in &s.indices {
                    assert!(seen.insert(i), "index {i} appears twice");
                }
            }
            assert_eq!(total, (ds.n_samples() / k) * k);
        }
    }

    #[test]
    fn iid_partition_matches_global_histogram() {
        let ds = generate_synthetic(&spec(2, 2.0, 5)).unwrap();
        let shards = partition_non_iid(&ds, 10, 0.0, 8, 1).unwrap();
        for s in &shards {
            let h = shard_histogram(&ds, s, 2);
            let frac = h[0] as f64 / s.indices.len() as f64;
            // global balance is 0.5; multinomial tolerance at ~4 sigma
            let sigma = (0.25f64 / s.indices.len() as f64).sqrt();
            assert!(
                (frac - 0.5).abs() < 4.0 * sigma + 0.02,
                "shard {} fraction {frac}",
                s.client_id
            );
        }
    }

    #[test]
    fn non_iid_dominant_fraction() {
        let ds = generate_synthetic(&spec(2, 2.0, 5)).unwrap();
        let shards = partition_non_iid(&ds, 10, 0.3, 8, 1).unwrap();
        for s in &shards {
            let h = shard_histogram(&ds, s, 2);
            let dominant = *h.iter().max().unwrap();
            assert!(
                dominant as f64 >= 0.3 * s.indices.len() as f64,
                "shard {} histogram {:?}",
                s.client_id,
                h
            );
        }
    }

    #[test]
    fn fully_non_iid_single_label_shards() {
        let ds = generate_synthetic(&spec(4, 2.0, 5)).unwrap();
        let shards = partition_non_iid(&ds, 4, 1.0, 8, 1).unwrap();
        for s in &shards {
            let h = shard_histogram(&ds, s, 4);
            assert_eq!(h.iter().filter(|&&c| c > 0).count(), 1, "{h:?}");
            assert!(h[s.client_id % 4] > 0);
        }
    }

    #[test]
    fn partition_rejects_bad_level() {
        let ds = generate_synthetic(&spec(2, 2.0, 5)).unwrap();
        assert!(partition_non_iid(&ds, 4, -0.1, 8, 1).is_err());
        assert!(partition_non_iid(&ds, 4, 1.5, 8, 1).is_err());
    }

    #[test]
    fn batch_stream_without_replacement_per_epoch() {
        let ds = generate_synthetic(&spec(2, 2.0, 5)).unwrap();
        let shards = partition_non_iid(&ds, 10, 0.0, 25, 1).unwrap();
        let tree = SeedTree::new(1);
        let mut bs = BatchStream::new(&shards[0], tree.rng(&[rng::stream::BATCH, 0, 0])).unwrap();
        let mut epoch: Vec<usize> = Vec::new();
        for _ in 0..4 {
            epoch.extend_from_slice(bs.next_batch());
        }
        // 4 batches of 25 = one full pass over 100 samples, all distinct
        let set: HashSet<usize> = epoch.iter().copied().collect();
        assert_eq!(set.len(), 100);
    }
}
