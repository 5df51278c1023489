//! Graph construction: directed small-world generators and the pairwise
//! Granger-causality prior graph.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed graph over `n_nodes` nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrainGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// Seed used to generate the graph, 0 if built by hand.
    pub seed: u64,
}

impl BrainGraph {
    /// Builds a graph from an explicit edge list, checking indices, self-loops
    /// and duplicates.
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(s, d) in &edges {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::InvalidParameter(format!(
                    "edge ({s}, {d}) out of range for {n_nodes} nodes"
                )));
            }
            if s == d {
                return Err(Error::InvalidParameter(format!("self-loop on node {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::InvalidParameter(format!("duplicate edge ({s}, {d})")));
            }
        }
        Ok(Self {
            n_nodes,
            edges,
            seed: 0,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of edges touching each node, counting both orientations.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(s, d) in &self.edges {
            deg[s] += 1;
            deg[d] += 1;
        }
        deg
    }

    /// Presynaptic sources grouped by target node.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut inn = vec![Vec::new(); self.n_nodes];
        for &(s, d) in &self.edges {
            inn[d].push(s);
        }
        inn
    }

    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for &(s, d) in &self.edges {
            out[s].push(d);
        }
        out
    }

    /// Dense adjacency, `a[src][dst] = 1`.
    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_nodes, self.n_nodes));
        for &(s, d) in &self.edges {
            a[[s, d]] = 1.0;
        }
        a
    }

    /// Writes the edge list as CSV with header `src,dst`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = crate::io::csv_writer(path)?;
        wtr.write_record(["src", "dst"])?;
        for &(s, d) in &self.edges {
            wtr.write_record([s.to_string(), d.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_nodes: usize) -> Result<Self> {
        let mut rdr = crate::io::csv_reader(path)?;
        let mut edges = Vec::new();
        for rec in rdr.deserialize() {
            let row: EdgeRow = rec?;
            edges.push((row.src, row.dst));
        }
        Self::new(n_nodes, edges)
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
}

#[derive(Serialize, Deserialize)]
struct ScoredEdgeRow {
    src: usize,
    dst: usize,
    score: f64,
}

/// Directed small-world graph: every node links to its `k/2` nearest
/// successors on a ring, and each link is independently rewired with
/// probability `beta` to a uniformly drawn target that is neither the source
/// nor one of its current targets.
pub fn generate_small_world(n: usize, k: usize, beta: f64, seed: u64) -> Result<BrainGraph> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::InvalidParameter(format!("k must be even and >= 2, got {k}")));
    }
    if k >= n {
        return Err(Error::InvalidParameter(format!("k = {k} must be below n = {n}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta = {beta} outside [0, 1]")));
    }
    let half = k / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(n * half);
    for src in 0..n {
        let mut targets: Vec<usize> = (1..=half).map(|j| (src + j) % n).collect();
        for slot in 0..half {
            if rng.random::<f64>() < beta {
                let new_target = loop {
                    let cand = rng.random_range(0..n);
                    if cand != src && !targets.contains(&cand) {
                        break cand;
                    }
                };
                targets[slot] = new_target;
            }
        }
        edges.extend(targets.into_iter().map(|dst| (src, dst)));
    }
    Ok(BrainGraph {
        n_nodes: n,
        edges,
        seed,
    })
}

/// Granger-derived prior: the strongest incoming interactions per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorGraph {
    pub n_nodes: usize,
    /// Sorted by `(src, dst)`.
    pub edges: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    pub lag_order: usize,
    pub top_k: usize,
}

impl PriorGraph {
    /// Keeps the `top_k` highest-scoring incoming edges of every node from a
    /// dense `scores[src][dst]` matrix. Ties resolve towards the lower source
    /// index; edges without positive evidence are never kept.
    pub fn from_scores(scores: ArrayView2<'_, f64>, lag_order: usize, top_k: usize) -> Result<Self> {
        let n = scores.nrows();
        if scores.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "score matrix must be square, got {:?}",
                scores.shape()
            )));
        }
        if top_k == 0 || lag_order == 0 {
            return Err(Error::InvalidParameter("top_k and lag_order must be positive".into()));
        }
        let mut picked = Vec::new();
        for dst in 0..n {
            let mut cands: Vec<usize> = (0..n).filter(|&s| s != dst && scores[[s, dst]] > 0.0).collect();
            cands.sort_by(|&a, &b| scores[[b, dst]].total_cmp(&scores[[a, dst]]).then(a.cmp(&b)));
            cands.truncate(top_k);
            picked.extend(cands.into_iter().map(|s| (s, dst, scores[[s, dst]])));
        }
        picked.sort_by_key(|&(s, d, _)| (s, d));
        Ok(Self {
            n_nodes: n,
            edges: picked.iter().map(|&(s, d, _)| (s, d)).collect(),
            scores: picked.iter().map(|&(_, _, w)| w).collect(),
            lag_order,
            top_k,
        })
    }

    pub fn contains(&self, edge: (usize, usize)) -> bool {
        self.edges.binary_search(&edge).is_ok()
    }

    pub fn score(&self, edge: (usize, usize)) -> Option<f64> {
        self.edges.binary_search(&edge).ok().map(|i| self.scores[i])
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    /// The prior's edge set as a graph; this is the working graph of the sheaf.
    pub fn to_graph(&self) -> Result<BrainGraph> {
        BrainGraph::new(self.n_nodes, self.edges.clone())
    }

    /// Writes `src,dst,score`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = crate::io::csv_writer(path)?;
        for (&(src, dst), &score) in self.edges.iter().zip(&self.scores) {
            wtr.serialize(ScoredEdgeRow { src, dst, score })?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_nodes: usize, lag_order: usize, top_k: usize) -> Result<Self> {
        let mut rdr = crate::io::csv_reader(path)?;
        let mut rows: Vec<ScoredEdgeRow> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        rows.sort_by_key(|r| (r.src, r.dst));
        let graph = BrainGraph::new(n_nodes, rows.iter().map(|r| (r.src, r.dst)).collect())?;
        Ok(Self {
            n_nodes,
            edges: graph.edges,
            scores: rows.iter().map(|r| r.score).collect(),
            lag_order,
            top_k,
        })
    }
}

/// Settings of the pairwise Granger estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrangerConfig {
    pub lag_order: usize,
    pub top_k: usize,
    pub ridge: f64,
}

impl Default for GrangerConfig {
    fn default() -> Self {
        Self {
            lag_order: 3,
            top_k: 8,
            ridge: 1e-6,
        }
    }
}

/// Dense matrix of pairwise Granger scores, `scores[src][dst]`, for an
/// `N x T` context block.
///
/// For each target `i` and candidate driver `j`, two ridge autoregressions of
/// `x_i` are fitted over the context: a restricted one on an intercept and
/// `p` own lags, and a full one that also sees `p` lags of `x_j`. The score is
/// `ln(RSS_restricted / RSS_full)` floored at 0. Channels are z-scored first,
/// which makes the scores invariant to per-channel affine rescaling.
pub fn granger_scores(context: ArrayView2<'_, f64>, lag_order: usize, ridge: f64) -> Result<Array2<f64>> {
    let (n, t) = context.dim();
    let p = lag_order;
    if p == 0 {
        return Err(Error::InvalidParameter("lag_order must be positive".into()));
    }
    if t <= 2 * p + 2 {
        return Err(Error::WindowTooShort {
            needed: 2 * p + 2,
            got: t,
        });
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge = {ridge} must be >= 0")));
    }
    if context.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("context contains non-finite values".into()));
    }

    let z = standardize_rows(context);
    let rows = t - p;

    let columns: Vec<Vec<Array2Col>> = (0..n).map(|c| lagged_columns(&z, c, p)).collect();

    let per_target: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = DVector::from_iterator(rows, (p..t).map(|s| z[[i, s]]));
            let mut restricted = DMatrix::zeros(rows, 1 + p);
            restricted.column_mut(0).fill(1.0);
            for (k, col) in columns[i].iter().enumerate() {
                restricted.column_mut(1 + k).copy_from_slice(col);
            }
            let rss_r = ridge_rss(&restricted, &y, ridge);
            let mut out = vec![0.0; n];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut full = DMatrix::zeros(rows, 1 + 2 * p);
                full.columns_mut(0, 1 + p).copy_from(&restricted);
                for (k, col) in columns[j].iter().enumerate() {
                    full.column_mut(1 + p + k).copy_from_slice(col);
                }
                let rss_f = ridge_rss(&full, &y, ridge);
                out[j] = log_rss_ratio(rss_r, rss_f, rows);
            }
            out
        })
        .collect();

    let mut scores = Array2::zeros((n, n));
    for (i, row) in per_target.into_iter().enumerate() {
        for (j, s) in row.into_iter().enumerate() {
            scores[[j, i]] = s;
        }
    }
    Ok(scores)
}

type Array2Col = Vec<f64>;

fn lagged_columns(z: &Array2<f64>, channel: usize, p: usize) -> Vec<Array2Col> {
    let t = z.ncols();
    (1..=p)
        .map(|lag| (p..t).map(|s| z[[channel, s - lag]]).collect())
        .collect()
}

fn standardize_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = x.to_owned();
    for mut row in z.rows_mut() {
        let len = row.len() as f64;
        let mean = row.sum() / len;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
        let sd = var.sqrt();
        if sd <= 1e-12 * (1.0 + mean.abs()) {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    z
}

fn ridge_rss(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> f64 {
    let k = x.ncols();
    let mut gram = x.transpose() * x;
    for d in 0..k {
        gram[(d, d)] += ridge;
    }
    let rhs = x.transpose() * y;
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        // Singular Gram with ridge = 0: fall back to a pseudo-inverse solve.
        None => gram
            .pseudo_inverse(1e-12)
            .map(|pinv| pinv * &rhs)
            .unwrap_or_else(|_| DVector::zeros(k)),
    };
    (y - x * beta).norm_squared()
}

fn log_rss_ratio(rss_restricted: f64, rss_full: f64, rows: usize) -> f64 {
    let floor = 1e-12 * rows as f64;
    if rss_restricted <= floor {
        return 0.0;
    }
    (rss_restricted / rss_full.max(floor)).ln().max(0.0)
}

/// Prior graph from a single context block. Only the context is read.
pub fn granger_prior(
    context: ArrayView2<'_, f64>,
    lag_order: usize,
    top_k: usize,
    ridge: f64,
) -> Result<PriorGraph> {
    let scores = granger_scores(context, lag_order, ridge)?;
    PriorGraph::from_scores(scores.view(), lag_order, top_k)
}

/// Prior graph over many context blocks: per-pair scores are averaged across
/// blocks before the top-k selection.
pub fn granger_prior_pooled<'a, I>(contexts: I, config: &GrangerConfig) -> Result<PriorGraph>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let mut total: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for ctx in contexts {
        let s = granger_scores(ctx, config.lag_order, config.ridge)?;
        match total.as_mut() {
            Some(acc) => {
                if acc.dim() != s.dim() {
                    return Err(Error::ShapeMismatch("contexts differ in node count".into()));
                }
                *acc += &s;
            }
            None => total = Some(s),
        }
        count += 1;
    }
    let mut total = total.ok_or_else(|| Error::InvalidParameter("no contexts given".into()))?;
    total /= count as f64;
    PriorGraph::from_scores(total.view(), config.lag_order, config.top_k)
}
