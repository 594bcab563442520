//! Synthetic classification task: Gaussian class clusters, label-skewed shard
//! partitioning, and a small from-scratch MLP trained with mini-batch SGD.
//! Stands in for image benchmarks at desk scale; hidden width 0 degrades the
//! network to multinomial logistic regression, which is convex and handy for
//! exact-optimum checks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::seedmix;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("dataset invalid: {0}")]
    BadDataset(String),
    #[error("sharding needs {what} divisible by {by}, got {got}")]
    Indivisible {
        what: &'static str,
        by: usize,
        got: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Feature matrix plus integer labels in 0..classes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.features.nrows() != self.labels.len() {
            return Err(TaskError::BadDataset(format!(
                "{} feature rows vs {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if self.len() < self.classes {
            return Err(TaskError::BadDataset(format!(
                "{} samples cannot cover {} classes",
                self.len(),
                self.classes
            )));
        }
        let mut seen = vec![false; self.classes];
        for &y in &self.labels {
            if y >= self.classes {
                return Err(TaskError::BadDataset(format!(
                    "label {y} out of range 0..{}",
                    self.classes
                )));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TaskError::BadDataset(format!("class {missing} absent")));
        }
        Ok(())
    }
}

/// Class centers drawn once per task: isotropic normal scaled by
/// `separation`. Samples add unit-variance noise around their center, so
/// `separation` measures between-class distance in within-class standard
/// deviations.
pub fn class_centroids(
    classes: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> Array2<f64> {
    let mut rng = seedmix::rng_for(seed, &[seedmix::tag::DATA, 0]);
    Array2::from_shape_fn((classes, feature_dim), |_| {
        separation * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    })
}

/// `per_class` unit-variance Gaussian samples around each centroid, labels in
/// centroid order, sample stream selected by `draw` so train and test splits
/// share centers but never noise.
pub fn sample_from_centroids(
    centroids: &Array2<f64>,
    per_class: usize,
    seed: u64,
    draw: u64,
) -> Dataset {
    let (classes, feature_dim) = centroids.dim();
    let n = classes * per_class;
    let mut rng = seedmix::rng_for(seed, &[seedmix::tag::DATA, 1 + draw]);
    let mut features = Array2::zeros((n, feature_dim));
    let mut labels = vec![0usize; n];
    for c in 0..classes {
        for i in 0..per_class {
            let row = c * per_class + i;
            labels[row] = c;
            for j in 0..feature_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[[row, j]] = centroids[[c, j]] + noise;
            }
        }
    }
    Dataset {
        features,
        labels,
        classes,
    }
}

/// One-call train-set generation with centers and noise derived from the same
/// base seed.
pub fn generate_synthetic(
    classes: usize,
    feature_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    let centroids = class_centroids(classes, feature_dim, separation, seed);
    sample_from_centroids(&centroids, per_class, seed, 0)
}

/// Disjoint equal-size single-label shards dealt d per client.
#[derive(Debug, Clone)]
pub struct ShardPlan {
    /// Sample indices of each shard.
    pub shards: Vec<Vec<usize>>,
    /// Label carried by each shard.
    pub shard_label: Vec<usize>,
    /// Shard ids held by each client.
    pub assignment: Vec<Vec<usize>>,
    pub shards_per_client: usize,
}

impl ShardPlan {
    /// All sample indices owned by one client, in shard order.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment[client]
            .iter()
            .flat_map(|&s| self.shards[s].iter().copied())
            .collect()
    }

    /// Exact-partition and label-diversity audit.
    pub fn audit(&self, ds: &Dataset) -> Result<(), TaskError> {
        let mut owner = vec![usize::MAX; ds.len()];
        for (s, shard) in self.shards.iter().enumerate() {
            for &i in shard {
                if owner[i] != usize::MAX {
                    return Err(TaskError::BadDataset(format!(
                        "sample {i} in shards {} and {s}",
                        owner[i]
                    )));
                }
                owner[i] = s;
                if ds.labels[i] != self.shard_label[s] {
                    return Err(TaskError::BadDataset(format!(
                        "sample {i} label {} in shard labeled {}",
                        ds.labels[i], self.shard_label[s]
                    )));
                }
            }
        }
        if owner.iter().any(|&s| s == usize::MAX) {
            return Err(TaskError::BadDataset("unassigned samples".into()));
        }
        for (k, shard_ids) in self.assignment.iter().enumerate() {
            if shard_ids.len() != self.shards_per_client {
                return Err(TaskError::BadDataset(format!(
                    "client {k} holds {} shards",
                    shard_ids.len()
                )));
            }
            let mut labels: Vec<usize> = shard_ids.iter().map(|&s| self.shard_label[s]).collect();
            labels.sort_unstable();
            labels.dedup();
            if labels.len() != self.shards_per_client {
                return Err(TaskError::BadDataset(format!(
                    "client {k} labels not distinct"
                )));
            }
        }
        Ok(())
    }
}

/// Sort samples by label into class blocks, split each block into d*K/C
/// equal shards, and deal every client d shards with d distinct labels. The
/// class offsets rotate per client so the shard load per class is exact; the
/// client order and per-class shard order are shuffled by the seed.
pub fn partition_non_iid(
    ds: &Dataset,
    clients: usize,
    d: usize,
    seed: u64,
) -> Result<ShardPlan, TaskError> {
    ds.validate()?;
    let classes = ds.classes;
    if d == 0 || d > classes {
        return Err(TaskError::BadDataset(format!(
            "shards per client d = {d} outside 1..={classes}"
        )));
    }
    if (d * clients) % classes != 0 {
        return Err(TaskError::Indivisible {
            what: "d * clients",
            by: classes,
            got: d * clients,
        });
    }
    let shards_per_class = d * clients / classes;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() % shards_per_class != 0 {
            return Err(TaskError::Indivisible {
                what: "class size",
                by: shards_per_class,
                got: members.len(),
            });
        }
        if c > 0 && members.len() != by_class[0].len() {
            return Err(TaskError::BadDataset(
                "class sizes unequal; shards would differ in size".into(),
            ));
        }
    }
    let shard_size = by_class[0].len() / shards_per_class;

    let mut shards = Vec::with_capacity(classes * shards_per_class);
    let mut shard_label = Vec::with_capacity(classes * shards_per_class);
    for (c, members) in by_class.iter().enumerate() {
        for chunk in members.chunks(shard_size) {
            shards.push(chunk.to_vec());
            shard_label.push(c);
        }
    }

    let mut rng = seedmix::rng_for(seed, &[seedmix::tag::DATA, 100]);
    let mut client_order: Vec<usize> = (0..clients).collect();
    for i in (1..clients).rev() {
        client_order.swap(i, rng.random_range(0..=i));
    }
    // Per-class queue of shard ids in shuffled order.
    let mut queues: Vec<Vec<usize>> = (0..classes)
        .map(|c| {
            let mut q: Vec<usize> =
                (c * shards_per_class..(c + 1) * shards_per_class).collect();
            for i in (1..q.len()).rev() {
                q.swap(i, rng.random_range(0..=i));
            }
            q
        })
        .collect();

    let mut assignment = vec![Vec::with_capacity(d); clients];
    for (slot, &k) in client_order.iter().enumerate() {
        for j in 0..d {
            let c = (slot * d + j) % classes;
            let shard = queues[c].pop().expect("shard load balanced by divisibility");
            assignment[k].push(shard);
        }
    }

    let plan = ShardPlan {
        shards,
        shard_label,
        assignment,
        shards_per_client: d,
    };
    plan.audit(ds)?;
    Ok(plan)
}

/// Layer sizes of the classifier; `hidden == 0` removes the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn parameter_count(&self) -> usize {
        if self.hidden == 0 {
            self.classes * self.input_dim + self.classes
        } else {
            self.hidden * self.input_dim
                + self.hidden
                + self.classes * self.hidden
                + self.classes
        }
    }

    /// Upload payload convention: 32 bits per parameter.
    pub fn size_bits(&self) -> f64 {
        self.parameter_count() as f64 * 32.0
    }
}

/// Flat parameter vector with explicit layout
/// [w1 (H x D), b1 (H), w2 (C x H), b2 (C)]; the flat form is what the
/// protocol ships, so model arithmetic is plain vector arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn zeroed(shape: MlpShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.parameter_count()],
        }
    }

    /// Scaled-uniform init: U(-a, a) with a^2 = 6/(fan_in + fan_out) per layer.
    pub fn init(shape: MlpShape, seed: u64) -> Self {
        let mut rng = seedmix::rng_for(seed, &[seedmix::tag::INIT]);
        let mut model = Self::zeroed(shape);
        let (d, h, c) = (shape.input_dim, shape.hidden, shape.classes);
        if h == 0 {
            let a = (6.0 / (d + c) as f64).sqrt();
            for p in &mut model.params[..c * d] {
                *p = rng.random_range(-a..a);
            }
        } else {
            let a1 = (6.0 / (d + h) as f64).sqrt();
            for p in &mut model.params[..h * d] {
                *p = rng.random_range(-a1..a1);
            }
            let a2 = (6.0 / (h + c) as f64).sqrt();
            let w2_start = h * d + h;
            for p in &mut model.params[w2_start..w2_start + c * h] {
                *p = rng.random_range(-a2..a2);
            }
        }
        model
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let MlpShape {
            input_dim: d,
            hidden: h,
            classes: c,
        } = self.shape;
        if h == 0 {
            (c * d, c * d, c * d) // (b_start, _, _): only w and b exist
        } else {
            (h * d, h * d + h, h * d + h + c * h) // (b1, w2, b2)
        }
    }

    /// Class scores for one sample.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let MlpShape {
            input_dim: d,
            hidden: h,
            classes: c,
        } = self.shape;
        debug_assert_eq!(x.len(), d);
        if h == 0 {
            let b = self.offsets().0;
            (0..c)
                .map(|i| {
                    let row = &self.params[i * d..(i + 1) * d];
                    row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.params[b + i]
                })
                .collect()
        } else {
            let (b1, w2, b2) = self.offsets();
            let mut hid = vec![0.0; h];
            for i in 0..h {
                let row = &self.params[i * d..(i + 1) * d];
                let pre =
                    row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.params[b1 + i];
                hid[i] = pre.max(0.0);
            }
            (0..c)
                .map(|i| {
                    let row = &self.params[w2 + i * h..w2 + (i + 1) * h];
                    row.iter().zip(&hid).map(|(w, hi)| w * hi).sum::<f64>()
                        + self.params[b2 + i]
                })
                .collect()
        }
    }

    /// Mean cross-entropy and its gradient over the given sample indices.
    pub fn loss_and_grad(&self, ds: &Dataset, indices: &[usize]) -> (f64, Vec<f64>) {
        let MlpShape {
            input_dim: d,
            hidden: h,
            classes: c,
        } = self.shape;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let inv_n = 1.0 / indices.len() as f64;
        let mut hid = vec![0.0; h];
        let mut hid_pre = vec![0.0; h];
        for &idx in indices {
            let x: Vec<f64> = (0..d).map(|j| ds.features[[idx, j]]).collect();
            let y = ds.labels[idx];
            if h == 0 {
                let b = self.offsets().0;
                let mut z = vec![0.0; c];
                for i in 0..c {
                    let row = &self.params[i * d..(i + 1) * d];
                    z[i] = row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>()
                        + self.params[b + i];
                }
                let (sample_loss, dz) = softmax_ce(&z, y);
                loss += sample_loss * inv_n;
                for i in 0..c {
                    let g = dz[i] * inv_n;
                    for j in 0..d {
                        grad[i * d + j] += g * x[j];
                    }
                    grad[b + i] += g;
                }
            } else {
                let (b1, w2, b2) = self.offsets();
                for i in 0..h {
                    let row = &self.params[i * d..(i + 1) * d];
                    hid_pre[i] = row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>()
                        + self.params[b1 + i];
                    hid[i] = hid_pre[i].max(0.0);
                }
                let mut z = vec![0.0; c];
                for i in 0..c {
                    let row = &self.params[w2 + i * h..w2 + (i + 1) * h];
                    z[i] = row.iter().zip(&hid).map(|(w, hi)| w * hi).sum::<f64>()
                        + self.params[b2 + i];
                }
                let (sample_loss, dz) = softmax_ce(&z, y);
                loss += sample_loss * inv_n;
                let mut dhid = vec![0.0; h];
                for i in 0..c {
                    let g = dz[i] * inv_n;
                    for j in 0..h {
                        grad[w2 + i * h + j] += g * hid[j];
                        dhid[j] += dz[i] * self.params[w2 + i * h + j];
                    }
                    grad[b2 + i] += g;
                }
                for i in 0..h {
                    if hid_pre[i] <= 0.0 {
                        continue;
                    }
                    let g = dhid[i] * inv_n;
                    for j in 0..d {
                        grad[i * d + j] += g * x[j];
                    }
                    grad[b1 + i] += g;
                }
            }
        }
        (loss, grad)
    }

    /// Mean cross-entropy and top-1 accuracy over a dataset.
    pub fn evaluate(&self, ds: &Dataset) -> (f64, f64) {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let d = self.shape.input_dim;
        for idx in 0..ds.len() {
            let x: Vec<f64> = (0..d).map(|j| ds.features[[idx, j]]).collect();
            let z = self.logits(&x);
            let (sample_loss, _) = softmax_ce(&z, ds.labels[idx]);
            loss += sample_loss;
            let pred = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if pred == ds.labels[idx] {
                correct += 1;
            }
        }
        (loss / ds.len() as f64, correct as f64 / ds.len() as f64)
    }
}

/// Numerically shifted softmax cross-entropy: returns the sample loss and
/// d(loss)/d(logits) = softmax - onehot.
fn softmax_ce(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (z[y] - zmax);
    for (i, e) in exps.iter_mut().enumerate() {
        *e /= total;
        if i == y {
            *e -= 1.0;
        }
    }
    (loss, exps)
}

/// `steps` mini-batch SGD updates on the samples in `indices`, batch indices
/// drawn uniformly with replacement from the client's own pool.
pub fn local_train(
    model: &mut MlpModel,
    ds: &Dataset,
    indices: &[usize],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) {
    if indices.is_empty() || batch == 0 {
        return;
    }
    let mut rng = seedmix::rng_for(seed, &[seedmix::tag::BATCH]);
    let mut chosen = vec![0usize; batch];
    for _ in 0..steps {
        for slot in chosen.iter_mut() {
            *slot = indices[rng.random_range(0..indices.len())];
        }
        let (_, grad) = model.loss_and_grad(ds, &chosen);
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
}

/// Squared L2 norm of the full-batch gradient at the model.
pub fn global_grad_norm_sq(model: &MlpModel, ds: &Dataset) -> f64 {
    evaluate_grad_norm(model, ds).1
}

/// Full-batch loss and squared gradient norm in one pass.
pub fn evaluate_grad_norm(model: &MlpModel, ds: &Dataset) -> (f64, f64) {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (loss, grad) = model.loss_and_grad(ds, &all);
    (loss, grad.iter().map(|g| g * g).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(seed: u64) -> Dataset {
        generate_synthetic(3, 4, 20, 2.0, seed)
    }

    #[test]
    fn same_seed_reproduces_dataset() {
        let a = generate_synthetic(4, 6, 10, 3.0, 7);
        let b = generate_synthetic(4, 6, 10, 3.0, 7);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let c = generate_synthetic(4, 6, 10, 3.0, 8);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn train_and_test_share_centroids_not_noise() {
        let centers = class_centroids(3, 5, 2.5, 1);
        let train = sample_from_centroids(&centers, 50, 1, 0);
        let test = sample_from_centroids(&centers, 30, 1, 1);
        assert_ne!(train.features.row(0), test.features.row(0));
        // Class means approach the shared centers.
        for c in 0..3 {
            for j in 0..5 {
                let mean: f64 = (0..50)
                    .map(|i| train.features[[c * 50 + i, j]])
                    .sum::<f64>()
                    / 50.0;
                assert!((mean - centers[[c, j]]).abs() < 0.8);
            }
        }
    }

    #[test]
    fn nearest_centroid_oracle_scores_high_at_moderate_separation() {
        let centers = class_centroids(10, 20, 3.0, 3);
        let train = sample_from_centroids(&centers, 200, 3, 0);
        let test = sample_from_centroids(&centers, 50, 3, 1);
        // Empirical per-class means from train.
        let mut means = Array2::zeros((10, 20));
        for c in 0..10 {
            for j in 0..20 {
                means[[c, j]] = (0..200)
                    .map(|i| train.features[[c * 200 + i, j]])
                    .sum::<f64>()
                    / 200.0;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..10 {
                let dist: f64 = (0..20)
                    .map(|j| (test.features[[i, j]] - means[[c, j]]).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn huge_separation_is_perfectly_separable() {
        let centers = class_centroids(2, 8, 100.0, 5);
        let train = sample_from_centroids(&centers, 30, 5, 0);
        let mut correct = 0;
        for i in 0..train.len() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..2 {
                let dist: f64 = (0..8)
                    .map(|j| (train.features[[i, j]] - centers[[c, j]]).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == train.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, train.len());
    }

    #[test]
    fn partition_requires_divisibility() {
        let ds = small_dataset(2);
        assert!(matches!(
            partition_non_iid(&ds, 4, 2, 0),
            Err(TaskError::Indivisible { .. })
        ));
    }

    #[test]
    fn partition_d_equals_classes_is_iid_like() {
        let ds = small_dataset(3);
        let plan = partition_non_iid(&ds, 5, 3, 1).unwrap();
        for k in 0..5 {
            let mut labels: Vec<usize> = plan.assignment[k]
                .iter()
                .map(|&s| plan.shard_label[s])
                .collect();
            labels.sort_unstable();
            assert_eq!(labels, vec![0, 1, 2]);
        }
    }

    #[test]
    fn partition_d_one_gives_single_label_clients() {
        let ds = small_dataset(4);
        let plan = partition_non_iid(&ds, 6, 1, 2).unwrap();
        for k in 0..6 {
            let idx = plan.client_indices(k);
            let first = ds.labels[idx[0]];
            assert!(idx.iter().all(|&i| ds.labels[i] == first));
        }
    }

    #[test]
    fn partition_audit_counts_shards_per_block() {
        // 10 clients, 10 classes, d=5: every class block splits into exactly
        // d*K/C = 5 shards and every one is consumed.
        let ds = generate_synthetic(10, 4, 25, 2.0, 9);
        let plan = partition_non_iid(&ds, 10, 5, 3).unwrap();
        assert_eq!(plan.shards.len(), 50);
        for c in 0..10 {
            let count = plan.shard_label.iter().filter(|&&l| l == c).count();
            assert_eq!(count, 5);
        }
        plan.audit(&ds).unwrap();
        let total: usize = (0..10).map(|k| plan.client_indices(k).len()).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn zero_model_gives_log_c_loss() {
        let ds = small_dataset(6);
        let model = MlpModel::zeroed(MlpShape {
            input_dim: 4,
            hidden: 0,
            classes: 3,
        });
        let (loss, acc) = model.evaluate(&ds);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        // Balanced classes and constant argmax pick class 0.
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn logits_match_scalar_reimplementation() {
        let shape = MlpShape {
            input_dim: 5,
            hidden: 4,
            classes: 3,
        };
        let model = MlpModel::init(shape, 11);
        let x = [0.3, -1.2, 0.7, 2.0, -0.4];
        let z = model.logits(&x);
        // Independent pass accumulating in reverse order.
        let (b1, w2, b2) = (20, 24, 36);
        let mut expect = vec![0.0; 3];
        for i in 0..3 {
            let mut hid_sum = model.params[b2 + i];
            for j in (0..4).rev() {
                let mut pre = model.params[b1 + j];
                for l in (0..5).rev() {
                    pre += model.params[j * 5 + l] * x[l];
                }
                hid_sum += model.params[w2 + i * 4 + j] * pre.max(0.0);
            }
            expect[i] = hid_sum;
        }
        for (got, want) in z.iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn backprop_matches_central_differences() {
        let ds = small_dataset(8);
        for (hidden, seed) in [(0usize, 21u64), (6, 22), (3, 23)] {
            let shape = MlpShape {
                input_dim: 4,
                hidden,
                classes: 3,
            };
            let model = MlpModel::init(shape, seed);
            let indices: Vec<usize> = (0..10).collect();
            let (_, grad) = model.loss_and_grad(&ds, &indices);
            let h = 1e-5;
            for i in (0..model.params.len()).step_by(3) {
                let mut plus = model.clone();
                plus.params[i] += h;
                let mut minus = model.clone();
                minus.params[i] -= h;
                let (lp, _) = plus.loss_and_grad(&ds, &indices);
                let (lm, _) = minus.loss_and_grad(&ds, &indices);
                let fd = (lp - lm) / (2.0 * h);
                let denom = grad[i].abs().max(1e-8);
                assert!(
                    (fd - grad[i]).abs() / denom <= 1e-4,
                    "hidden {hidden} param {i}: fd {fd} vs backprop {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn local_train_noops() {
        let ds = small_dataset(10);
        let shape = MlpShape {
            input_dim: 4,
            hidden: 5,
            classes: 3,
        };
        let mut model = MlpModel::init(shape, 30);
        let before = model.clone();
        let idx: Vec<usize> = (0..ds.len()).collect();
        local_train(&mut model, &ds, &idx, 0, 0.01, 10, 1);
        assert_eq!(model, before);
        local_train(&mut model, &ds, &idx, 7, 0.0, 10, 1);
        assert_eq!(model, before);
    }

    #[test]
    fn single_step_is_minus_lr_times_gradient() {
        let ds = small_dataset(12);
        let shape = MlpShape {
            input_dim: 4,
            hidden: 3,
            classes: 3,
        };
        let mut model = MlpModel::init(shape, 31);
        let before = model.clone();
        // One-sample pool: the drawn batch can only be that sample.
        local_train(&mut model, &ds, &[5], 1, 0.01, 1, 2);
        let (_, grad) = before.loss_and_grad(&ds, &[5]);
        for i in 0..model.params.len() {
            let expect = before.params[i] - 0.01 * grad[i];
            assert!((model.params[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn convex_mode_full_batch_descent_is_monotone() {
        let ds = small_dataset(14);
        let shape = MlpShape {
            input_dim: 4,
            hidden: 0,
            classes: 3,
        };
        let mut model = MlpModel::init(shape, 33);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut prev = model.evaluate(&ds).0;
        for step in 0..40 {
            let (_, grad) = model.loss_and_grad(&ds, &idx);
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= 0.05 * g;
            }
            let now = model.evaluate(&ds).0;
            assert!(now <= prev + 1e-12, "step {step}: {now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn grad_norm_zero_at_convex_optimum() {
        // One feature point at the origin with conflicting labels: the zero
        // model is an exact stationary point of the convex surrogate.
        let features = Array2::zeros((2, 3));
        let ds = Dataset {
            features,
            labels: vec![0, 1],
            classes: 2,
        };
        let model = MlpModel::zeroed(MlpShape {
            input_dim: 3,
            hidden: 0,
            classes: 2,
        });
        assert_eq!(global_grad_norm_sq(&model, &ds), 0.0);
    }

    #[test]
    fn grad_norm_unchanged_by_dataset_duplication() {
        let ds = small_dataset(16);
        let mut doubled_features = Array2::zeros((ds.len() * 2, 4));
        let mut doubled_labels = Vec::new();
        for i in 0..ds.len() {
            for j in 0..4 {
                doubled_features[[i, j]] = ds.features[[i, j]];
                doubled_features[[ds.len() + i, j]] = ds.features[[i, j]];
            }
        }
        doubled_labels.extend_from_slice(&ds.labels);
        doubled_labels.extend_from_slice(&ds.labels);
        let doubled = Dataset {
            features: doubled_features,
            labels: doubled_labels,
            classes: ds.classes,
        };
        let model = MlpModel::init(
            MlpShape {
                input_dim: 4,
                hidden: 5,
                classes: 3,
            },
            40,
        );
        let a = global_grad_norm_sq(&model, &ds);
        let b = global_grad_norm_sq(&model, &doubled);
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn memorizes_single_point() {
        let mut features = Array2::zeros((1, 2));
        features[[0, 0]] = 1.0;
        features[[0, 1]] = -0.5;
        let ds = Dataset {
            features,
            labels: vec![1],
            classes: 2,
        };
        let mut model = MlpModel::init(
            MlpShape {
                input_dim: 2,
                hidden: 4,
                classes: 2,
            },
            50,
        );
        local_train(&mut model, &ds, &[0], 200, 0.5, 1, 3);
        let (_, acc) = model.evaluate(&ds);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn parameter_count_and_size() {
        let dense = MlpShape {
            input_dim: 20,
            hidden: 32,
            classes: 10,
        };
        assert_eq!(dense.parameter_count(), 20 * 32 + 32 + 32 * 10 + 10);
        assert_eq!(dense.size_bits(), (dense.parameter_count() * 32) as f64);
        let convex = MlpShape {
            input_dim: 20,
            hidden: 0,
            classes: 10,
        };
        assert_eq!(convex.parameter_count(), 210);
    }
}
