//! Synthetic classification data and non-IID client shards.
//!
//! The task family is a Gaussian-cluster classification problem sized for
//! desk-scale experiments. Clients receive label-skewed shards: 80% of each
//! shard carries one dominant label, shard sizes follow a bounded power
//! law, and shards are pairwise disjoint.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::Batch;
use crate::{rng, Error, Result};

/// A labeled dataset: row-major features plus class indices in `[0, M)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(
            self.features.clone(),
            self.dim,
            self.labels.clone(),
            self.n_classes,
        )
    }

    /// Batch from the given example indices, in order.
    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.dim, labels, self.n_classes)
    }

    /// Empirical label distribution, summing to 1.
    pub fn label_histogram(&self) -> Vec<f64> {
        histogram(&self.labels, self.n_classes)
    }
}

/// Normalized label histogram of a label slice.
pub fn histogram(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_classes];
    for &y in labels {
        h[y] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    for v in h.iter_mut() {
        *v /= n;
    }
    h
}

/// Total-variation distance between two distributions over the same labels.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One Gaussian cluster per class: mean on a sphere of radius 2, unit
/// covariance, `n_per_class` examples per class, deterministic per seed.
pub fn gen_dataset(n_classes: usize, dim: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig("need feature dim >= 2".into()));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("need n_per_class >= 1".into()));
    }
    let mut r = rng::stream(seed, "dataset", &[]);
    let normal = rand_distr::StandardNormal;
    let mut means = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(normal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x = *x / norm * 2.0;
        }
        means.push(v);
    }
    let mut features = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for (m, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for mu in mean {
                features.push(mu + r.sample::<f64, _>(normal));
            }
            labels.push(m);
        }
    }
    Ok(Dataset {
        features,
        dim,
        labels,
        n_classes,
    })
}

/// Stratified holdout split: `test_frac` of each class (rounded down, at
/// least one example per class stays on each side when possible).
pub fn split_holdout(ds: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::InvalidConfig("test_frac must be in [0,1)".into()));
    }
    let mut r = rng::stream(seed, "holdout", &[]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for indices in by_class.iter_mut() {
        indices.shuffle(&mut r);
        let n_test = ((indices.len() as f64) * test_frac).floor() as usize;
        let n_test = n_test.min(indices.len().saturating_sub(1));
        test_idx.extend_from_slice(&indices[..n_test]);
        train_idx.extend_from_slice(&indices[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((subset(ds, &train_idx), subset(ds, &test_idx)))
}

fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    let mut features = Vec::with_capacity(indices.len() * ds.dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        features.extend_from_slice(ds.row(i));
        labels.push(ds.labels[i]);
    }
    Dataset {
        features,
        dim: ds.dim,
        labels,
        n_classes: ds.n_classes,
    }
}

/// Disjoint per-client index lists into a parent dataset, with one dominant
/// label per client.
#[derive(Debug, Clone)]
pub struct ShardPlan {
    pub shards: Vec<Vec<usize>>,
    pub dominant: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl ShardPlan {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Bounded discrete power law: `floor(min + (max - min + 1) * u^alpha)`,
/// clipped to `[min, max]`.
fn power_law_size(min_size: usize, max_size: usize, alpha: f64, u: f64) -> usize {
    let span = (max_size - min_size + 1) as f64;
    let raw = (min_size as f64 + span * u.powf(alpha)).floor() as usize;
    raw.clamp(min_size, max_size)
}

/// Label-skewed partition: each client gets a uniformly random dominant
/// label, exactly `ceil(0.8 * D_n)` examples of it, and the remainder drawn
/// uniformly from the other labels. Sampling is without replacement, so
/// shards are pairwise disjoint.
pub fn partition_noniid(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    min_size: usize,
    max_size: usize,
    seed: u64,
) -> Result<ShardPlan> {
    if n_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if min_size == 0 || min_size > max_size {
        return Err(Error::InvalidConfig(
            "need 1 <= min_size <= max_size".into(),
        ));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig("power-law exponent must be > 0".into()));
    }
    let mut r = rng::stream(seed, "partition", &[]);
    // Free-example pools per label, shuffled once; draws pop from the end.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut r);
    }
    // Dominant labels: a shuffled balanced multiset. Each client's label is
    // uniform, and the union of shards stays close to the parent label
    // distribution at any client count.
    let reps = n_clients.div_ceil(ds.n_classes);
    let mut doms: Vec<usize> = (0..reps * ds.n_classes).map(|i| i % ds.n_classes).collect();
    doms.shuffle(&mut r);
    doms.truncate(n_clients);

    let mut shards = Vec::with_capacity(n_clients);
    let mut dominant = Vec::with_capacity(n_clients);
    let mut sizes = Vec::with_capacity(n_clients);
    for client in 0..n_clients {
        let u: f64 = r.gen();
        let size = power_law_size(min_size, max_size, alpha, u);
        let dom = doms[client];
        let n_dom = ((0.8 * size as f64).ceil()) as usize;
        let mut shard = Vec::with_capacity(size);
        for _ in 0..n_dom {
            match pools[dom].pop() {
                Some(i) => shard.push(i),
                None => {
                    return Err(Error::Infeasible(format!(
                        "label {dom} exhausted while filling client {client}"
                    )))
                }
            }
        }
        for _ in n_dom..size {
            // Uniform over the remaining labels; skip exhausted ones.
            let candidates: Vec<usize> = (0..ds.n_classes)
                .filter(|&m| m != dom && !pools[m].is_empty())
                .collect();
            let Some(&label) = candidates.as_slice().choose(&mut r) else {
                return Err(Error::Infeasible(format!(
                    "all non-dominant labels exhausted while filling client {client}"
                )));
            };
            shard.push(pools[label].pop().expect("candidate pool nonempty"));
        }
        shards.push(shard);
        dominant.push(dom);
        sizes.push(size);
    }
    Ok(ShardPlan {
        shards,
        dominant,
        sizes,
    })
}

/// Writes a dataset as CSV: one row per example, features first, label in
/// the last column.
pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..ds.n() {
        let mut line = String::new();
        for v in ds.row(i) {
            line.push_str(&format!("{v}"));
            line.push(',');
        }
        line.push_str(&format!("{}", ds.labels[i]));
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Malformed {
                file: name,
                line: lineno + 1,
                msg: "expected at least one feature and a label".into(),
            });
        }
        let row_dim = fields.len() - 1;
        match dim {
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => {
                return Err(Error::Malformed {
                    file: name,
                    line: lineno + 1,
                    msg: format!("row has {row_dim} features, expected {d}"),
                })
            }
            _ => {}
        }
        for field in &fields[..row_dim] {
            features.push(field.parse::<f64>().map_err(|e| Error::Malformed {
                file: name.clone(),
                line: lineno + 1,
                msg: format!("bad feature: {e}"),
            })?);
        }
        let label = fields[row_dim]
            .parse::<usize>()
            .map_err(|e| Error::Malformed {
                file: name.clone(),
                line: lineno + 1,
                msg: format!("bad label: {e}"),
            })?;
        if label >= n_classes {
            return Err(Error::Malformed {
                file: name,
                line: lineno + 1,
                msg: format!("label {label} out of range for {n_classes} classes"),
            });
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Malformed {
        file: name,
        line: 0,
        msg: "empty dataset file".into(),
    })?;
    Ok(Dataset {
        features,
        dim,
        labels,
        n_classes,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ShardRow {
    client_id: usize,
    dominant_label: usize,
    indices: Vec<usize>,
}

/// Shard plan as JSON lines: one object per client.
pub fn write_shards_jsonl(plan: &ShardPlan, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (client_id, shard) in plan.shards.iter().enumerate() {
        let row = ShardRow {
            client_id,
            dominant_label: plan.dominant[client_id],
            indices: shard.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(())
}

pub fn read_shards_jsonl(path: &Path) -> Result<ShardPlan> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut rows: Vec<ShardRow> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ShardRow = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: name.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    rows.sort_by_key(|r| r.client_id);
    for (i, row) in rows.iter().enumerate() {
        if row.client_id != i {
            return Err(Error::Malformed {
                file: name,
                line: 0,
                msg: format!("client ids are not contiguous at {i}"),
            });
        }
    }
    Ok(ShardPlan {
        sizes: rows.iter().map(|r| r.indices.len()).collect(),
        dominant: rows.iter().map(|r| r.dominant_label).collect(),
        shards: rows.into_iter().map(|r| r.indices).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, Activation, MlpSpec};
    use std::collections::HashSet;

    #[test]
    fn gen_dataset_counts_and_determinism() {
        let ds = gen_dataset(10, 32, 200, 1).unwrap();
        assert_eq!(ds.n(), 2000);
        for m in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&y| y == m).count(), 200);
        }
        let ds2 = gen_dataset(10, 32, 200, 1).unwrap();
        assert_eq!(ds.features, ds2.features);
        assert_eq!(ds.labels, ds2.labels);
    }

    #[test]
    fn gen_dataset_rejects_invalid_counts() {
        assert!(gen_dataset(1, 8, 10, 0).is_err());
        assert!(gen_dataset(3, 1, 10, 0).is_err());
        assert!(gen_dataset(3, 8, 0, 0).is_err());
    }

    #[test]
    fn linear_classifier_separates_two_clusters() {
        // Identity activation makes the MLP a (factored) linear model.
        let ds = gen_dataset(2, 8, 200, 5).unwrap();
        let spec = MlpSpec::new(8, vec![8], 2, Activation::Identity).unwrap();
        let mut params = nn::init_params(&spec, 0);
        let batch = ds.as_batch().unwrap();
        for _ in 0..100 {
            let grad = nn::backward(&params, &spec, &batch).unwrap();
            params = nn::sgd_step(&params, &grad, 0.05).unwrap();
        }
        let logits = nn::forward_logits(&params, &spec, batch.inputs(), batch.n()).unwrap();
        let mut correct = 0;
        for i in 0..batch.n() {
            let row = &logits[i * 2..(i + 1) * 2];
            let pred = if row[1] > row[0] { 1 } else { 0 };
            if pred == batch.labels()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / batch.n() as f64;
        assert!(acc >= 0.90, "train accuracy {acc}");
    }

    #[test]
    fn partition_dominant_count_is_ceil() {
        // One client, D forced to 20 via min == max, two labels.
        let ds = gen_dataset(2, 4, 50, 3).unwrap();
        let plan = partition_noniid(&ds, 1, 3.0, 20, 20, 7).unwrap();
        assert_eq!(plan.sizes[0], 20);
        let dom = plan.dominant[0];
        let n_dom = plan.shards[0]
            .iter()
            .filter(|&&i| ds.labels[i] == dom)
            .count();
        assert_eq!(n_dom, 16); // ceil(0.8 * 20)
        assert_eq!(plan.shards[0].len() - n_dom, 4);
    }

    #[test]
    fn partition_bounds_and_disjointness() {
        let ds = gen_dataset(10, 4, 800, 11).unwrap();
        let plan = partition_noniid(&ds, 100, 3.0, 20, 60, 13).unwrap();
        let mut seen = HashSet::new();
        for (shard, &size) in plan.shards.iter().zip(&plan.sizes) {
            assert!((20..=60).contains(&size));
            assert_eq!(shard.len(), size);
            for &i in shard {
                assert!(seen.insert(i), "index {i} appears in two shards");
            }
        }
    }

    #[test]
    fn partition_dominance_invariant() {
        let ds = gen_dataset(5, 4, 900, 21).unwrap();
        let plan = partition_noniid(&ds, 40, 3.0, 20, 60, 23).unwrap();
        for (c, shard) in plan.shards.iter().enumerate() {
            let dom = plan.dominant[c];
            let n_dom = shard.iter().filter(|&&i| ds.labels[i] == dom).count();
            assert!(
                n_dom as f64 / shard.len() as f64 >= 0.8,
                "client {c}: {n_dom}/{}",
                shard.len()
            );
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = gen_dataset(5, 4, 500, 2).unwrap();
        let a = partition_noniid(&ds, 30, 3.0, 20, 60, 9).unwrap();
        let b = partition_noniid(&ds, 30, 3.0, 20, 60, 9).unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.dominant, b.dominant);
    }

    #[test]
    fn shard_histogram_is_far_from_uniform() {
        // 80/20 rule at M=10, D_n=40: TV vs uniform is at least 0.5.
        let ds = gen_dataset(10, 4, 400, 31).unwrap();
        let plan = partition_noniid(&ds, 5, 3.0, 40, 40, 33).unwrap();
        for shard in &plan.shards {
            let labels: Vec<usize> = shard.iter().map(|&i| ds.labels[i]).collect();
            let h = histogram(&labels, 10);
            let uniform = vec![0.1; 10];
            assert!(tv_distance(&h, &uniform) >= 0.5);
        }
    }

    #[test]
    fn union_of_shards_is_nearly_iid() {
        for (k, m, seed) in [(50usize, 5usize, 41u64), (100, 5, 43), (120, 10, 47)] {
            let ds = gen_dataset(m, 4, 2000, seed).unwrap();
            let plan = partition_noniid(&ds, k, 3.0, 20, 60, seed + 1).unwrap();
            let mut union_labels = Vec::new();
            for shard in &plan.shards {
                union_labels.extend(shard.iter().map(|&i| ds.labels[i]));
            }
            let tv = tv_distance(&histogram(&union_labels, m), &ds.label_histogram());
            assert!(tv < 0.1, "K={k} M={m}: TV {tv}");
        }
    }

    #[test]
    fn infeasible_demand_is_rejected() {
        let ds = gen_dataset(2, 4, 30, 51).unwrap();
        // 10 clients x >= 20 examples from 60 available cannot work.
        let err = partition_noniid(&ds, 10, 3.0, 20, 60, 53);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn csv_and_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(3, 5, 40, 61).unwrap();
        let csv = dir.path().join("ds.csv");
        write_dataset_csv(&ds, &csv).unwrap();
        let back = read_dataset_csv(&csv, 3).unwrap();
        assert_eq!(back.dim, ds.dim);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.features.iter().zip(&ds.features) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let plan = partition_noniid(&ds, 3, 3.0, 5, 10, 63).unwrap();
        let jsonl = dir.path().join("shards.jsonl");
        write_shards_jsonl(&plan, &jsonl).unwrap();
        let plan2 = read_shards_jsonl(&jsonl).unwrap();
        assert_eq!(plan.shards, plan2.shards);
        assert_eq!(plan.dominant, plan2.dominant);
        assert_eq!(plan.sizes, plan2.sizes);
    }

    #[test]
    fn malformed_csv_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0.5,0.5,0\n0.1,oops,1\n").unwrap();
        match read_dataset_csv(&path, 2) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn holdout_split_is_stratified_and_disjoint_sizes() {
        let ds = gen_dataset(5, 4, 100, 71).unwrap();
        let (train, test) = split_holdout(&ds, 0.2, 73).unwrap();
        assert_eq!(train.n() + test.n(), ds.n());
        for m in 0..5 {
            assert_eq!(test.labels.iter().filter(|&&y| y == m).count(), 20);
        }
    }
}
