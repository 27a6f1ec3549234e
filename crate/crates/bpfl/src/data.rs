//! Synthetic dataset generation and non-IID partitioning.
//!
//! Two heterogeneity regimes are supported: label-distribution skew via a
//! Dirichlet split of each class across clients, and resolution skew via
//! block-averaging of feature coordinates (the vector analog of image
//! downsampling, keeping the input width fixed so one shared model
//! architecture serves every client).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Usage(format!("subset index {i} out of range")));
            }
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            features: Tensor::matrix(idx.len(), d, data)?,
            labels,
            classes: self.classes,
            meta: DatasetMeta {
                generator: format!("{}+subset", self.meta.generator),
                seed: self.meta.seed,
                params: self.meta.params.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Orthonormal directions via modified Gram-Schmidt on a seeded Gaussian
/// matrix; columns are the class-mean directions.
fn orthonormal_directions(d: usize, c: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    while dirs.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // redraw on a (vanishingly unlikely) degenerate sample
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Gaussian blobs: `c` unit-covariance clusters whose means sit on mutually
/// orthogonal seeded directions, scaled so every pair of means is exactly
/// `separation` apart. Classes are balanced to within one sample.
pub fn gen_blobs(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if c == 0 || n < c {
        return Err(Error::Config(format!("need n >= classes >= 1, got n={n} c={c}")));
    }
    if !(separation > 0.0) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    if d < c {
        return Err(Error::Config(format!(
            "feature dim {d} too small for {c} orthogonal class means"
        )));
    }
    let mut rng = rng_from(&[seed, 0x626c6f62]);
    // |s·e_i - s·e_j| = s·sqrt(2) for orthonormal e_i, e_j.
    let scale = if c == 1 { 0.0 } else { separation / 2f64.sqrt() };
    let dirs = orthonormal_directions(d, c, &mut rng);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(scale * dirs[y][j] + noise);
        }
    }
    Ok(Dataset {
        features: Tensor::matrix(n, d, data)?,
        labels,
        classes: c,
        meta: DatasetMeta {
            generator: "blobs".into(),
            seed,
            params: format!("n={n} d={d} c={c} separation={separation}"),
        },
    })
}

/// Label-skew partition: for each class, client proportions are drawn from
/// Dirichlet(alpha) and the class's samples are split accordingly. Every
/// client is guaranteed at least one sample by reassignment from the largest
/// shard.
pub fn partition_dirichlet(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if ds.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot cover {k} clients",
            ds.len()
        )));
    }
    let mut rng = rng_from(&[seed, 0x64697269]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("invalid Dirichlet alpha: {e}")))?;

    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        if idx.is_empty() {
            continue;
        }
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
        let total: f64 = props.iter().sum();
        for p in props.iter_mut() {
            *p /= total;
        }
        // cumulative cut points over the shuffled class indices
        let m = idx.len();
        let mut start = 0usize;
        let mut acc = 0.0;
        for (client, &p) in props.iter().enumerate() {
            acc += p;
            let end = if client + 1 == k {
                m
            } else {
                ((acc * m as f64).round() as usize).min(m)
            };
            let end = end.max(start);
            shards[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    // minimal reassignment so no client is empty
    loop {
        let empty = match shards.iter().position(|s| s.is_empty()) {
            Some(i) => i,
            None => break,
        };
        let largest = (0..k)
            .max_by_key(|&i| shards[i].len())
            .expect("non-zero clients");
        let moved = shards[largest].pop().ok_or_else(|| {
            Error::Config("not enough samples to give every client one".into())
        })?;
        shards[empty].push(moved);
    }
    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    Ok(PartitionPlan { shards })
}

/// Uniform random split into `k` near-equal shards.
pub fn partition_uniform(ds: &Dataset, k: usize, seed: u64) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if ds.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot cover {k} clients",
            ds.len()
        )));
    }
    let mut rng = rng_from(&[seed, 0x756e6966]);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let base = ds.len() / k;
    let extra = ds.len() % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for client in 0..k {
        let take = base + usize::from(client < extra);
        let mut shard = idx[start..start + take].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += take;
    }
    Ok(PartitionPlan { shards })
}

/// Feature coarsening: averages each consecutive group of `factor`
/// coordinates and re-expands by repetition, so the width stays `d`.
/// Factor 1 is the identity. Labels are untouched.
pub fn resolution_shift(ds: &Dataset, factor: usize) -> Result<Dataset> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!("factor must be 1, 2, 4 or 8, got {factor}")));
    }
    if factor == 1 {
        return Ok(ds.clone());
    }
    let d = ds.dim();
    if d % factor != 0 {
        return Err(Error::Config(format!(
            "feature dim {d} not divisible by factor {factor}"
        )));
    }
    let n = ds.len();
    let mut data = ds.features.data().to_vec();
    for row in data.chunks_mut(d) {
        for group in row.chunks_mut(factor) {
            let avg = group.iter().sum::<f64>() / factor as f64;
            group.fill(avg);
        }
    }
    Ok(Dataset {
        features: Tensor::matrix(n, d, data)?,
        labels: ds.labels.clone(),
        classes: ds.classes,
        meta: DatasetMeta {
            generator: format!("{}+res{factor}", ds.meta.generator),
            seed: ds.meta.seed,
            params: ds.meta.params.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let a = gen_blobs(50, 8, 3, 4.0, 7).unwrap();
        let b = gen_blobs(50, 8, 3, 4.0, 7).unwrap();
        assert!(a.features.bit_eq(&b.features));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn blobs_single_class() {
        let ds = gen_blobs(10, 4, 1, 5.0, 3).unwrap();
        assert!(ds.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn blobs_balanced_classes() {
        let ds = gen_blobs(10, 8, 3, 5.0, 3).unwrap();
        let mut counts = [0usize; 3];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn blobs_mean_separation_matches_request() {
        let sep = 6.0;
        let ds = gen_blobs(3000, 8, 3, sep, 11).unwrap();
        let d = ds.dim();
        let mut means = vec![vec![0.0; d]; 3];
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            let y = ds.labels[i];
            counts[y] += 1;
            for j in 0..d {
                means[y][j] += ds.features.data()[i * d + j];
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - sep).abs() < 0.3, "pair ({a},{b}) dist {dist}");
            }
        }
    }

    #[test]
    fn blobs_reject_degenerate_params() {
        assert!(gen_blobs(2, 8, 3, 1.0, 0).is_err());
        assert!(gen_blobs(10, 8, 3, 0.0, 0).is_err());
        assert!(gen_blobs(10, 2, 3, 1.0, 0).is_err());
    }

    #[test]
    fn dirichlet_single_client_takes_all() {
        let ds = gen_blobs(20, 4, 2, 3.0, 1).unwrap();
        let plan = partition_dirichlet(&ds, 1, 0.5, 9).unwrap();
        assert_eq!(plan.shards[0].len(), 20);
    }

    #[test]
    fn dirichlet_plan_invariants_hold() {
        // disjoint, covering, non-empty over many random triples
        let ds = gen_blobs(120, 4, 3, 3.0, 5).unwrap();
        let mut rng = rng_from(&[99]);
        for _ in 0..100 {
            let k = rng.gen_range(1..=10usize);
            let alpha = 10f64.powf(rng.gen_range(-1.5..2.0));
            let seed = rng.gen::<u64>();
            let plan = partition_dirichlet(&ds, k, alpha, seed).unwrap();
            let mut seen = vec![false; ds.len()];
            for shard in &plan.shards {
                assert!(!shard.is_empty());
                for &i in shard {
                    assert!(!seen[i], "index {i} assigned twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "partition does not cover parent");
        }
    }

    #[test]
    fn huge_alpha_approaches_global_histogram() {
        let ds = gen_blobs(2000, 4, 4, 3.0, 2).unwrap();
        let plan = partition_dirichlet(&ds, 4, 1e6, 3).unwrap();
        for shard in &plan.shards {
            let mut counts = [0.0f64; 4];
            for &i in shard {
                counts[ds.labels[i]] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            for &c in &counts {
                // global histogram is uniform at 0.25
                assert!((c / total - 0.25).abs() < 0.05, "{:?}", counts);
            }
        }
    }

    #[test]
    fn small_alpha_concentrates_mass() {
        let mut hit = false;
        for seed in 0..10u64 {
            let ds = gen_blobs(800, 4, 4, 3.0, seed).unwrap();
            let plan = partition_dirichlet(&ds, 8, 0.1, seed).unwrap();
            for shard in &plan.shards {
                let mut counts = [0.0f64; 4];
                for &i in shard {
                    counts[ds.labels[i]] += 1.0;
                }
                let total: f64 = counts.iter().sum();
                if counts.iter().any(|&c| c / total > 0.6) {
                    hit = true;
                }
            }
        }
        assert!(hit, "no client concentrated >60% on one class over 10 seeds");
    }

    #[test]
    fn resolution_shift_identity_and_hand_case() {
        let ds = Dataset {
            features: Tensor::matrix(1, 4, vec![1.0, 3.0, 5.0, 7.0]).unwrap(),
            labels: vec![0],
            classes: 1,
            meta: DatasetMeta {
                generator: "hand".into(),
                seed: 0,
                params: String::new(),
            },
        };
        let same = resolution_shift(&ds, 1).unwrap();
        assert!(same.features.bit_eq(&ds.features));
        let halved = resolution_shift(&ds, 2).unwrap();
        assert_eq!(halved.features.data(), &[2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn stronger_downsampling_reduces_variance() {
        let ds = gen_blobs(400, 16, 2, 3.0, 21).unwrap();
        let var = |d: &Dataset| {
            let n = d.len() as f64;
            let dim = d.dim();
            let mut total = 0.0;
            for j in 0..dim {
                let col: Vec<f64> = (0..d.len()).map(|i| d.features.data()[i * dim + j]).collect();
                let mean = col.iter().sum::<f64>() / n;
                total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            }
            total / dim as f64
        };
        let v2 = var(&resolution_shift(&ds, 2).unwrap());
        let v8 = var(&resolution_shift(&ds, 8).unwrap());
        assert!(v8 < v2, "v8={v8} v2={v2}");
    }

    #[test]
    fn resolution_shift_preserves_labels_and_rejects_indivisible() {
        let ds = gen_blobs(10, 12, 2, 3.0, 1).unwrap();
        let out = resolution_shift(&ds, 2).unwrap();
        assert_eq!(out.labels, ds.labels);
        assert!(resolution_shift(&ds, 8).is_err());
    }
}
