//! Shared test-support code: independent oracles that deliberately avoid the
//! library's model/training path.

#![allow(dead_code)]

use stdagcn::data_io::{pearson, TimeSeriesDataset};

/// Upper-triangular Pearson-correlation features of one subject.
pub fn correlation_features(series: &[f64], n: usize, t: usize) -> Vec<f64> {
    let row = |i: usize| &series[i * t..(i + 1) * t];
    let mut feats = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            feats.push(pearson(row(i), row(j)));
        }
    }
    feats
}

/// Nearest-centroid classifier on correlation features. Completely
/// independent of the network: no learned graph, no convolution, no tape.
pub struct CentroidOracle {
    centroid0: Vec<f64>,
    centroid1: Vec<f64>,
}

impl CentroidOracle {
    pub fn fit(dataset: &TimeSeriesDataset, train_idx: &[usize]) -> CentroidOracle {
        let dim = dataset.n * (dataset.n - 1) / 2;
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for &i in train_idx {
            let rec = &dataset.records[i];
            let feats = correlation_features(&rec.series, rec.n, rec.t_total);
            let c = rec.label as usize;
            counts[c] += 1;
            for (s, f) in sums[c].iter_mut().zip(&feats) {
                *s += f;
            }
        }
        for c in 0..2 {
            assert!(counts[c] > 0, "oracle needs both classes in training");
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
        }
        let [centroid0, centroid1] = sums;
        CentroidOracle { centroid0, centroid1 }
    }

    pub fn predict(&self, dataset: &TimeSeriesDataset, idx: usize) -> u8 {
        let rec = &dataset.records[idx];
        let feats = correlation_features(&rec.series, rec.n, rec.t_total);
        let d0: f64 = feats
            .iter()
            .zip(&self.centroid0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let d1: f64 = feats
            .iter()
            .zip(&self.centroid1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        u8::from(d1 < d0)
    }

    pub fn accuracy(&self, dataset: &TimeSeriesDataset, test_idx: &[usize]) -> f64 {
        let correct = test_idx
            .iter()
            .filter(|&&i| self.predict(dataset, i) == dataset.records[i].label)
            .count();
        correct as f64 / test_idx.len() as f64
    }
}

/// Deterministic stratified half split: even positions per class train,
/// odd positions test.
pub fn half_split(dataset: &TimeSeriesDataset) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..2u8 {
        for (pos, idx) in (0..dataset.len())
            .filter(|&i| dataset.records[i].label == class)
            .enumerate()
        {
            if pos % 2 == 0 {
                train.push(idx);
            } else {
                test.push(idx);
            }
        }
    }
    (train, test)
}

/// Oracle holdout accuracy on a generated dataset (train/test half split).
pub fn oracle_holdout_accuracy(dataset: &TimeSeriesDataset) -> f64 {
    let (train, test) = half_split(dataset);
    CentroidOracle::fit(dataset, &train).accuracy(dataset, &test)
}

/// Independent cycle check by Kahn's algorithm over the support digraph
/// (entry [j*n+i] nonzero means edge j -> i).
pub fn is_acyclic_by_toposort(matrix: &[f64], n: usize) -> bool {
    let mut indegree = vec![0usize; n];
    for j in 0..n {
        for i in 0..n {
            if matrix[j * n + i] != 0.0 {
                indegree[i] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(j) = queue.pop() {
        seen += 1;
        for i in 0..n {
            if matrix[j * n + i] != 0.0 {
                indegree[i] -= 1;
                if indegree[i] == 0 {
                    queue.push(i);
                }
            }
        }
    }
    seen == n
}
