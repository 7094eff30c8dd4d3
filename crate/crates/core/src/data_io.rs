//! Dataset loading, per-ROI standardization, sub-sequence sampling, and a
//! synthetic SEM time-series generator with ground-truth DAGs.
//!
//! On disk a dataset is a manifest CSV (`subject_id,label,path`) whose paths
//! point to per-subject CSVs of `T_total` rows by `N` named ROI columns;
//! relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derive_rng, mean_and_pop_std, sample_standard_normal};

/// One labeled subject: `series` is [N x T_total] row-major, rows are ROIs.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: u8,
    pub series: Vec<f64>,
    pub n: usize,
    pub t_total: usize,
    pub standardized: bool,
    /// ROI rows that were constant before standardization (now all zero).
    pub constant_rows: Vec<usize>,
}

impl SubjectRecord {
    pub fn row(&self, roi: usize) -> &[f64] {
        &self.series[roi * self.t_total..(roi + 1) * self.t_total]
    }
}

#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub records: Vec<SubjectRecord>,
    pub roi_names: Vec<String>,
    pub n: usize,
    pub t_total: usize,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// New dataset holding only the selected subjects (e.g. one CV fold).
    pub fn subset(&self, indices: &[usize]) -> TimeSeriesDataset {
        TimeSeriesDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            roi_names: self.roi_names.clone(),
            n: self.n,
            t_total: self.t_total,
        }
    }

    /// Mean over subjects of each subject's Pearson correlation matrix,
    /// with the diagonal zeroed (self-loops are cycles). Standardized rows
    /// make the correlation a plain inner product.
    pub fn mean_correlation_graph(&self) -> Vec<f64> {
        let n = self.n;
        let mut acc = vec![0.0; n * n];
        for rec in &self.records {
            for i in 0..n {
                let ri = rec.row(i);
                for j in (i + 1)..n {
                    let rj = rec.row(j);
                    let c = pearson(ri, rj);
                    acc[i * n + j] += c;
                    acc[j * n + i] += c;
                }
            }
        }
        let m = self.records.len() as f64;
        for v in acc.iter_mut() {
            *v /= m;
        }
        acc
    }
}

/// Pearson correlation of two equally long rows.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_and_pop_std(a);
    let (mb, sb) = mean_and_pop_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let n = a.len() as f64;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    cov / (sa * sb)
}

/// Standardizes a row in place to zero mean, unit population std.
/// Returns true when the row was constant (left as all zeros).
pub fn standardize(row: &mut [f64]) -> bool {
    let (mean, std) = mean_and_pop_std(row);
    if std == 0.0 {
        row.fill(0.0);
        return true;
    }
    for v in row.iter_mut() {
        *v = (*v - mean) / std;
    }
    false
}

/// Uniformly placed contiguous window of length `t_prime`, shaped [N, T', 1].
pub fn sample_subsequence(
    record: &SubjectRecord,
    t_prime: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let start = sample_window_start(record.t_total, t_prime, rng)?;
    let mut data = vec![0.0; record.n * t_prime];
    for roi in 0..record.n {
        let src = &record.row(roi)[start..start + t_prime];
        data[roi * t_prime..(roi + 1) * t_prime].copy_from_slice(src);
    }
    Tensor::new(vec![record.n, t_prime, 1], data)
}

pub(crate) fn sample_window_start(
    t_total: usize,
    t_prime: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if t_prime > t_total {
        return Err(Error::Config(format!(
            "sub-sequence length {t_prime} exceeds series length {t_total}"
        )));
    }
    if t_prime == t_total {
        return Ok(0);
    }
    Ok(rng.gen_range(0..=t_total - t_prime))
}

// ---------------------------------------------------------------------------
// Manifest + per-subject CSV I/O

/// Loads a manifest CSV, validates shapes, and standardizes every ROI row.
pub fn load_dataset(manifest_path: &Path) -> Result<TimeSeriesDataset> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "label", "path"] {
        return Err(Error::Parse(format!(
            "{}: manifest header must be subject_id,label,path",
            manifest_path.display()
        )));
    }

    let mut records = Vec::new();
    let mut roi_names: Option<Vec<String>> = None;
    let mut seen_ids = std::collections::HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
        let subject_id = row.get(0).unwrap_or("").to_string();
        if subject_id.is_empty() {
            return Err(Error::Data(format!("manifest row {}: empty subject_id", line + 2)));
        }
        if !seen_ids.insert(subject_id.clone()) {
            return Err(Error::Data(format!("duplicate subject_id '{subject_id}'")));
        }
        let label: u8 = match row.get(1).unwrap_or("") {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!(
                    "subject '{subject_id}': label '{other}' is not binary"
                )))
            }
        };
        let rel = row.get(2).unwrap_or("");
        let path = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base.join(rel)
        };
        let (names, series, t_total) = read_series_csv(&path, &subject_id)?;
        match &roi_names {
            None => roi_names = Some(names),
            Some(expected) => {
                if *expected != names {
                    return Err(Error::Data(format!(
                        "subject '{subject_id}': ROI columns {names:?} do not match cohort {expected:?}"
                    )));
                }
            }
        }
        records.push((subject_id, label, series, t_total));
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest lists no subjects",
            manifest_path.display()
        )));
    }
    let roi_names = roi_names.expect("non-empty records imply ROI names");
    let n = roi_names.len();
    let t_total = records[0].3;
    let mut out = Vec::with_capacity(records.len());
    for (subject_id, label, mut series, t) in records {
        if t != t_total {
            return Err(Error::Data(format!(
                "subject '{subject_id}': {t} time points, cohort has {t_total}"
            )));
        }
        let mut constant_rows = Vec::new();
        for roi in 0..n {
            if standardize(&mut series[roi * t_total..(roi + 1) * t_total]) {
                constant_rows.push(roi);
            }
        }
        out.push(SubjectRecord {
            subject_id,
            label,
            series,
            n,
            t_total,
            standardized: true,
            constant_rows,
        });
    }
    Ok(TimeSeriesDataset {
        records: out,
        roi_names,
        n,
        t_total,
    })
}

/// Reads a T x N series CSV with a ROI-name header; returns [N x T] row-major.
fn read_series_csv(path: &Path, subject_id: &str) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty series file", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (line_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(Error::Data(format!(
                "subject '{subject_id}': {} has {} columns at row {}, header has {n}",
                path.display(),
                cells.len(),
                line_idx + 2
            )));
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "subject '{subject_id}': {} row {} column {} ('{}') is not numeric",
                    path.display(),
                    line_idx + 2,
                    col + 1,
                    cell.trim()
                ))
            })?;
            columns[col].push(v);
        }
    }
    let t_total = columns.first().map(|c| c.len()).unwrap_or(0);
    if t_total == 0 {
        return Err(Error::Data(format!(
            "subject '{subject_id}': {} has no data rows",
            path.display()
        )));
    }
    let mut series = Vec::with_capacity(n * t_total);
    for col in &columns {
        series.extend_from_slice(col);
    }
    Ok((names, series, t_total))
}

/// Writes a dataset to `dir` as manifest + per-subject CSVs.
pub fn write_dataset(dataset: &TimeSeriesDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = String::from("subject_id,label,path\n");
    for rec in &dataset.records {
        let file = format!("{}.csv", rec.subject_id);
        let mut body = dataset.roi_names.join(",");
        body.push('\n');
        for t in 0..rec.t_total {
            for roi in 0..rec.n {
                if roi > 0 {
                    body.push(',');
                }
                let _ = write!(body, "{}", rec.series[roi * rec.t_total + t]);
            }
            body.push('\n');
        }
        let path = dir.join(&file);
        fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        let _ = writeln!(manifest, "{},{},{}", rec.subject_id, rec.label, file);
    }
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Parameters of the synthetic SEM benchmark. Class 1 differs from class 0
/// only by scaling a designated subset of edge weights by `kappa`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub t_total: usize,
    pub subjects_per_class: usize,
    pub edge_prob: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub temporal_persistence: f64,
    pub noise_std: f64,
    pub perturbed_fraction: f64,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 10,
            t_total: 256,
            subjects_per_class: 100,
            edge_prob: 0.3,
            weight_min: 0.5,
            weight_max: 1.5,
            temporal_persistence: 0.5,
            noise_std: 0.5,
            perturbed_fraction: 0.3,
            kappa: 1.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("synthetic spec: n must be at least 2".into()));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return Err(Error::Config(format!(
                "synthetic spec: edge_prob {} not in (0, 1)",
                self.edge_prob
            )));
        }
        if self.kappa <= 0.0 {
            return Err(Error::Config(format!(
                "synthetic spec: kappa {} must be positive",
                self.kappa
            )));
        }
        if !(0.0..=1.0).contains(&self.perturbed_fraction) {
            return Err(Error::Config(format!(
                "synthetic spec: perturbed_fraction {} not in [0, 1]",
                self.perturbed_fraction
            )));
        }
        if self.weight_min <= 0.0 || self.weight_max < self.weight_min {
            return Err(Error::Config(
                "synthetic spec: weight range must satisfy 0 < min <= max".into(),
            ));
        }
        if self.temporal_persistence.abs() >= 1.0 {
            return Err(Error::Config(
                "synthetic spec: |temporal_persistence| must be < 1".into(),
            ));
        }
        if self.subjects_per_class == 0 || self.t_total < 2 {
            return Err(Error::Config(
                "synthetic spec: need subjects and at least 2 time points".into(),
            ));
        }
        Ok(())
    }
}

/// Output of the generator: the dataset, the ground-truth weighted DAG
/// ([N x N], entry [j,i] is the weight of edge j -> i), and the edge subset
/// scaled for class 1.
pub struct SyntheticOutput {
    pub dataset: TimeSeriesDataset,
    pub truth: Vec<f64>,
    pub perturbed_edges: Vec<(usize, usize)>,
}

/// Samples a ground-truth DAG and simulates both classes.
///
/// Each node's signal is an AR(1) persistence term plus tanh-squashed parent
/// contributions evaluated in topological order (same-time propagation), with
/// independent Gaussian noise. Rows are standardized afterwards.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticOutput> {
    spec.validate()?;
    let n = spec.n;
    let mut graph_rng = derive_rng(spec.seed, 0);

    // topological order, then edges only from earlier to later
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut graph_rng);
    let mut truth = vec![0.0; n * n];
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if graph_rng.gen::<f64>() < spec.edge_prob {
                let magnitude = graph_rng.gen_range(spec.weight_min..=spec.weight_max);
                let sign = if graph_rng.gen::<bool>() { 1.0 } else { -1.0 };
                let (src, dst) = (order[a], order[b]);
                truth[src * n + dst] = sign * magnitude;
                edges.push((src, dst));
            }
        }
    }
    let mut perturbed = edges.clone();
    perturbed.shuffle(&mut graph_rng);
    let n_perturbed = ((edges.len() as f64) * spec.perturbed_fraction).round() as usize;
    let n_perturbed = n_perturbed.clamp(usize::from(!edges.is_empty()), edges.len());
    perturbed.truncate(n_perturbed);
    perturbed.sort_unstable();

    let mut class1 = truth.clone();
    for &(src, dst) in &perturbed {
        class1[src * n + dst] *= spec.kappa;
    }

    // evaluation order for the SEM: parents before children
    let topo = order;

    let mut records = Vec::new();
    for class in 0..2u8 {
        let weights = if class == 0 { &truth } else { &class1 };
        for s in 0..spec.subjects_per_class {
            let subject_index = class as u64 * spec.subjects_per_class as u64 + s as u64;
            // stream 0 is the graph; subjects get 1.. derived streams
            let mut rng = derive_rng(spec.seed, 1 + subject_index);
            let mut series = vec![0.0; n * spec.t_total];
            let mut prev: Vec<f64> = vec![0.0; n];
            let mut cur: Vec<f64> = vec![0.0; n];
            for t in 0..spec.t_total {
                for &i in &topo {
                    let z = spec.temporal_persistence * prev[i]
                        + spec.noise_std * sample_standard_normal(&mut rng);
                    let mut x = z;
                    for j in 0..n {
                        let w = weights[j * n + i];
                        if w != 0.0 {
                            x += w * cur[j].tanh();
                        }
                    }
                    cur[i] = x;
                    series[i * spec.t_total + t] = x;
                }
                std::mem::swap(&mut prev, &mut cur);
            }
            let mut constant_rows = Vec::new();
            for roi in 0..n {
                if standardize(&mut series[roi * spec.t_total..(roi + 1) * spec.t_total]) {
                    constant_rows.push(roi);
                }
            }
            records.push(SubjectRecord {
                subject_id: format!("subject_{:04}", subject_index),
                label: class,
                series,
                n,
                t_total: spec.t_total,
                standardized: true,
                constant_rows,
            });
        }
    }
    let roi_names = (0..n).map(|i| format!("roi_{i:02}")).collect();
    Ok(SyntheticOutput {
        dataset: TimeSeriesDataset {
            records,
            roi_names,
            n,
            t_total: spec.t_total,
        },
        truth,
        perturbed_edges: perturbed,
    })
}
