//! Post-processing a learned adjacency into an exact DAG: thresholding, then
//! repeated DFS cycle detection with smallest-edge removal. Also multi-run
//! averaging and the edge-list / adjacency CSV formats.
//!
//! Matrix convention everywhere: entry `[j*n + i]` is the weight of the
//! directed edge node_j -> node_i (rows are sources, columns are targets).

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Why an edge is absent from the extracted DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalReason {
    Threshold,
    Cycle,
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemovalReason::Threshold => write!(f, "threshold_removed"),
            RemovalReason::Cycle => write!(f, "cycle_removed"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemovedEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub reason: RemovalReason,
}

/// Exact-DAG decomposition of a learned adjacency: `a_dag` keeps a subset of
/// the original entries, `residual` is everything removed, and
/// `a = a_dag + residual` holds exactly (entrywise, bitwise).
#[derive(Debug, Clone)]
pub struct ExtractedDag {
    pub n: usize,
    pub a_dag: Vec<f64>,
    pub residual: Vec<f64>,
    pub removed_edges: Vec<RemovedEdge>,
}

impl ExtractedDag {
    pub fn kept_edge_count(&self) -> usize {
        self.a_dag.iter().filter(|&&w| w != 0.0).count()
    }

    pub fn removed_count(&self, reason: RemovalReason) -> usize {
        self.removed_edges.iter().filter(|e| e.reason == reason).count()
    }
}

/// Elementwise mean of equally shaped matrices. Summation order is
/// canonicalized per entry so the result does not depend on list order.
pub fn average_runs(matrices: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Usage("average_runs: empty list".into()))?;
    let len = first.len();
    for (idx, m) in matrices.iter().enumerate() {
        if m.len() != len {
            return Err(Error::Usage(format!(
                "average_runs: matrix {idx} has {} entries, expected {len}",
                m.len()
            )));
        }
    }
    let count = matrices.len() as f64;
    let mut out = vec![0.0; len];
    let mut column: Vec<f64> = Vec::with_capacity(matrices.len());
    for (i, o) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(matrices.iter().map(|m| m[i]));
        column.sort_unstable_by(f64::total_cmp);
        *o = column.iter().sum::<f64>() / count;
    }
    Ok(out)
}

/// Zeroes entries with |w| <= epsilon; surviving entries are kept bit-exact.
pub fn threshold_graph(a: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "threshold epsilon {epsilon} must be positive"
        )));
    }
    Ok(a.iter()
        .map(|&w| if w.abs() > epsilon { w } else { 0.0 })
        .collect())
}

/// Finds some directed cycle in the support digraph, or None.
///
/// Deterministic: DFS starts from the lowest-index unvisited node and visits
/// neighbors in ascending index order. Returns the cycle as an edge list.
pub fn find_cycle(support: &[f64], n: usize) -> Option<Vec<(usize, usize)>> {
    debug_assert_eq!(support.len(), n * n);
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    let mut path: Vec<usize> = Vec::new();

    fn dfs(
        v: usize,
        support: &[f64],
        n: usize,
        state: &mut [u8],
        path: &mut Vec<usize>,
    ) -> Option<Vec<(usize, usize)>> {
        state[v] = 1;
        path.push(v);
        for w in 0..n {
            if support[v * n + w] == 0.0 {
                continue;
            }
            match state[w] {
                1 => {
                    // back edge closes the cycle: slice the path from w to v
                    let start = path.iter().position(|&u| u == w).expect("w is on the path");
                    let mut cycle: Vec<(usize, usize)> = path[start..]
                        .windows(2)
                        .map(|p| (p[0], p[1]))
                        .collect();
                    cycle.push((v, w));
                    return Some(cycle);
                }
                0 => {
                    if let Some(c) = dfs(w, support, n, state, path) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        path.pop();
        state[v] = 2;
        None
    }

    for start in 0..n {
        if state[start] == 0 {
            if let Some(c) = dfs(start, support, n, &mut state, &mut path) {
                return Some(c);
            }
        }
    }
    None
}

/// Thresholds, then repeatedly deletes the smallest-|weight| edge of some
/// cycle (ties broken by lowest (source, target) pair) until acyclic.
pub fn extract_dag(a: &[f64], n: usize, epsilon: f64) -> Result<ExtractedDag> {
    if a.len() != n * n {
        return Err(Error::Shape(format!(
            "extract_dag: {} entries for {n} nodes",
            a.len()
        )));
    }
    let mut a_dag = threshold_graph(a, epsilon)?;
    let mut removed_edges = Vec::new();
    for (idx, &w) in a.iter().enumerate() {
        if w != 0.0 && a_dag[idx] == 0.0 {
            removed_edges.push(RemovedEdge {
                source: idx / n,
                target: idx % n,
                weight: w,
                reason: RemovalReason::Threshold,
            });
        }
    }
    while let Some(cycle) = find_cycle(&a_dag, n) {
        let (src, dst) = cycle
            .iter()
            .copied()
            .min_by(|&(s1, t1), &(s2, t2)| {
                let w1 = a_dag[s1 * n + t1].abs();
                let w2 = a_dag[s2 * n + t2].abs();
                w1.total_cmp(&w2).then((s1, t1).cmp(&(s2, t2)))
            })
            .expect("cycles are non-empty");
        removed_edges.push(RemovedEdge {
            source: src,
            target: dst,
            weight: a_dag[src * n + dst],
            reason: RemovalReason::Cycle,
        });
        a_dag[src * n + dst] = 0.0;
    }
    let residual: Vec<f64> = a.iter().zip(&a_dag).map(|(o, k)| o - k).collect();
    Ok(ExtractedDag {
        n,
        a_dag,
        residual,
        removed_edges,
    })
}

// ---------------------------------------------------------------------------
// CSV formats

/// Edge-list CSV over a full matrix: kept edges plus recorded removals.
pub fn edge_list_csv(extracted: &ExtractedDag, roi_names: &[String]) -> String {
    let n = extracted.n;
    let mut out = String::from("source_index,source_name,target_index,target_name,weight,status\n");
    let mut push = |s: usize, t: usize, w: f64, status: &str| {
        out.push_str(&format!(
            "{s},{},{t},{},{w},{status}\n",
            roi_names[s], roi_names[t]
        ));
    };
    for s in 0..n {
        for t in 0..n {
            let w = extracted.a_dag[s * n + t];
            if w != 0.0 {
                push(s, t, w, "kept");
            }
        }
    }
    for e in &extracted.removed_edges {
        push(e.source, e.target, e.weight, &e.reason.to_string());
    }
    out
}

/// Ground-truth style edge list for a plain weighted digraph (all kept).
pub fn weighted_edge_list_csv(a: &[f64], n: usize, roi_names: &[String]) -> String {
    let mut out = String::from("source_index,source_name,target_index,target_name,weight,status\n");
    for s in 0..n {
        for t in 0..n {
            let w = a[s * n + t];
            if w != 0.0 {
                out.push_str(&format!(
                    "{s},{},{t},{},{w},kept\n",
                    roi_names[s], roi_names[t]
                ));
            }
        }
    }
    out
}

/// Adjacency CSV grid: header row/column carry ROI names; rows are sources.
pub fn adjacency_csv(a: &[f64], n: usize, roi_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!(",{}\n", roi_names.join(",")));
    for s in 0..n {
        out.push_str(&roi_names[s]);
        for t in 0..n {
            out.push_str(&format!(",{}", a[s * n + t]));
        }
        out.push('\n');
    }
    out
}

/// Parses the adjacency CSV grid written by `adjacency_csv`.
pub fn read_adjacency_csv(path: &Path) -> Result<(Vec<f64>, Vec<String>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty adjacency file", path.display())))?;
    let names: Vec<String> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let n = names.len();
    if n == 0 {
        return Err(Error::Parse(format!(
            "{}: adjacency header has no ROI names",
            path.display()
        )));
    }
    let mut a = vec![0.0; n * n];
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            return Err(Error::Parse(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                r + 2,
                cells.len(),
                n + 1
            )));
        }
        for (c, cell) in cells[1..].iter().enumerate() {
            a[rows * n + c] = cell.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {} column {} ('{}') is not numeric",
                    path.display(),
                    r + 2,
                    c + 2,
                    cell.trim()
                ))
            })?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse(format!(
            "{}: {rows} data rows for {n} ROI columns",
            path.display()
        )));
    }
    Ok((a, names))
}
