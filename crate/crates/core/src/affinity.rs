//! Patch affinity graph: cosine similarity between patch embeddings, clamped
//! to a small positive floor so the graph stays connected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::FeatureMap;

pub const DEFAULT_EPSILON_W: f64 = 1e-5;

/// Largest node count held as a dense matrix (a 128x128 patch grid).
pub const MAX_DENSE_NODES: usize = 16_384;

/// How negative cosines are mapped onto non-negative weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCosine {
    /// `max(cos, eps)`
    #[default]
    Clamp,
    /// `max((1 + cos) / 2, eps)`
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub epsilon_w: f64,
    pub negative: NegativeCosine,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self { epsilon_w: DEFAULT_EPSILON_W, negative: NegativeCosine::Clamp }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_w > 0.0 && self.epsilon_w <= 1.0) {
            return Err(Error::Config(format!("epsilon_w must lie in (0, 1], got {}", self.epsilon_w)));
        }
        Ok(())
    }

    fn weight(&self, cos: f64) -> f64 {
        let w = match self.negative {
            NegativeCosine::Clamp => cos,
            NegativeCosine::Shift => 0.5 * (1.0 + cos),
        };
        w.clamp(self.epsilon_w, 1.0)
    }
}

/// Dense symmetric weight matrix over a set of patch nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    n: usize,
    weights: Vec<f64>,
    node_coords: Vec<(usize, usize)>,
    grid_rows: usize,
    grid_cols: usize,
    zero_norm_nodes: Vec<usize>,
}

/// Builds the affinity graph over `active` nodes (row-major patch indices),
/// or over every patch when `active` is `None`.
pub fn build_affinity(features: &FeatureMap, active: Option<&[usize]>, cfg: &AffinityConfig) -> Result<AffinityGraph> {
    cfg.validate()?;
    let all: Vec<usize>;
    let nodes = match active {
        Some(nodes) => nodes,
        None => {
            all = (0..features.len()).collect();
            &all
        }
    };
    let n = nodes.len();
    if n == 0 {
        return Err(Error::EmptyGraph("no active nodes".into()));
    }
    if n > MAX_DENSE_NODES {
        return Err(Error::Size(format!(
            "{n} nodes exceed the dense affinity limit of {MAX_DENSE_NODES}; use a coarser patch grid"
        )));
    }
    let mut seen = vec![false; features.len()];
    for &v in nodes {
        if v >= features.len() {
            return Err(Error::Range(format!("node {v} outside a grid of {} patches", features.len())));
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(Error::Range(format!("node {v} listed twice")));
        }
    }

    let c = features.channels();
    let mut unit = vec![0.0f64; n * c];
    let mut zero_norm_nodes = Vec::new();
    for (k, &v) in nodes.iter().enumerate() {
        let f = features.node(v);
        let norm = f.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_norm_nodes.push(k);
            continue;
        }
        for (dst, &x) in unit[k * c..(k + 1) * c].iter_mut().zip(f) {
            *dst = f64::from(x) / norm;
        }
    }
    if !zero_norm_nodes.is_empty() {
        log::warn!("{} zero-norm feature vectors get uniform minimal affinity", zero_norm_nodes.len());
    }
    let is_zero = {
        let mut flags = vec![false; n];
        zero_norm_nodes.iter().for_each(|&k| flags[k] = true);
        flags
    };

    let mut weights = vec![0.0f64; n * n];
    weights.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        row[i] = 1.0;
        let fi = &unit[i * c..(i + 1) * c];
        for j in i + 1..n {
            row[j] = if is_zero[i] || is_zero[j] {
                cfg.epsilon_w
            } else {
                let fj = &unit[j * c..(j + 1) * c];
                cfg.weight(fi.iter().zip(fj).map(|(a, b)| a * b).sum())
            };
        }
    });
    for i in 0..n {
        for j in i + 1..n {
            weights[j * n + i] = weights[i * n + j];
        }
    }

    let w = features.width();
    Ok(AffinityGraph {
        n,
        weights,
        node_coords: nodes.iter().map(|&v| (v / w, v % w)).collect(),
        grid_rows: features.height(),
        grid_cols: w,
        zero_norm_nodes,
    })
}

impl AffinityGraph {
    /// Wraps a raw symmetric, non-negative matrix. The nodes are laid out on a
    /// single-row grid; no clamp and no unit diagonal are imposed, which makes
    /// this the entry point for hand-built test graphs.
    pub fn from_weights(n: usize, weights: Vec<f64>) -> Result<Self> {
        Self::from_weights_on_grid(n, weights, (0..n).map(|i| (0, i)).collect(), 1, n)
    }

    pub fn from_weights_on_grid(
        n: usize,
        weights: Vec<f64>,
        node_coords: Vec<(usize, usize)>,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph("graph has no nodes".into()));
        }
        if n > MAX_DENSE_NODES {
            return Err(Error::Size(format!("{n} nodes exceed the dense limit of {MAX_DENSE_NODES}")));
        }
        if weights.len() != n * n || node_coords.len() != n {
            return Err(Error::Shape(format!(
                "expected {n}x{n} weights and {n} coordinates, got {} and {}",
                weights.len(),
                node_coords.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights[i * n + j];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Data(format!("weight ({i},{j}) = {w} is not a finite non-negative number")));
                }
                if w != weights[j * n + i] {
                    return Err(Error::Data(format!("weights are not symmetric at ({i},{j})")));
                }
            }
        }
        let mut coords = node_coords.clone();
        coords.sort_unstable();
        if coords.windows(2).any(|p| p[0] == p[1]) || node_coords.iter().any(|&(r, c)| r >= grid_rows || c >= grid_cols) {
            return Err(Error::Data("node coordinates must be distinct and inside the grid".into()));
        }
        Ok(Self { n, weights, node_coords, grid_rows, grid_cols, zero_norm_nodes: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    /// Row-major `n x n` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node_coords(&self) -> &[(usize, usize)] {
        &self.node_coords
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    /// Row-major grid index of every node.
    pub fn grid_indices(&self) -> Vec<usize> {
        self.node_coords.iter().map(|&(r, c)| r * self.grid_cols + c).collect()
    }

    /// Local indices of nodes whose features had zero norm.
    pub fn zero_norm_nodes(&self) -> &[usize] {
        &self.zero_norm_nodes
    }

    /// Row sums of the weight matrix, diagonal included.
    pub fn degrees(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.n).map(|row| row.iter().sum()).collect()
    }

    /// True when every off-diagonal weight equals every other one within
    /// `tol`: such a graph has a flat spectrum and no preferred cut.
    pub fn is_uniform(&self, tol: f64) -> bool {
        if self.n < 3 {
            return false;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = self.weight(i, j);
                lo = lo.min(w);
                hi = hi.max(w);
            }
        }
        hi - lo <= tol
    }

    /// Restriction to the local node indices in `keep`, in that order.
    pub fn subgraph(&self, keep: &[usize]) -> Result<AffinityGraph> {
        if keep.is_empty() {
            return Err(Error::EmptyGraph("subgraph of zero nodes".into()));
        }
        let mut seen = vec![false; self.n];
        for &k in keep {
            if k >= self.n {
                return Err(Error::Range(format!("node {k} outside a graph of {} nodes", self.n)));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Range(format!("node {k} listed twice")));
            }
        }
        let m = keep.len();
        let mut weights = Vec::with_capacity(m * m);
        for &i in keep {
            let row = &self.weights[i * self.n..(i + 1) * self.n];
            weights.extend(keep.iter().map(|&j| row[j]));
        }
        let mut local = vec![usize::MAX; self.n];
        keep.iter().enumerate().for_each(|(new, &old)| local[old] = new);
        Ok(AffinityGraph {
            n: m,
            weights,
            node_coords: keep.iter().map(|&k| self.node_coords[k]).collect(),
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            zero_norm_nodes: self.zero_norm_nodes.iter().filter_map(|&z| (local[z] != usize::MAX).then_some(local[z])).collect(),
        })
    }

    /// Total weight of edges between `a` and `b`.
    pub fn cut(&self, a: &[usize], b: &[usize]) -> f64 {
        a.iter().map(|&u| b.iter().map(|&v| self.weight(u, v)).sum::<f64>()).sum()
    }

    /// Total weight from nodes of `a` to every node.
    pub fn assoc(&self, a: &[usize]) -> f64 {
        a.iter().map(|&u| self.weights[u * self.n..(u + 1) * self.n].iter().sum::<f64>()).sum()
    }

    /// Normalized cut value of the bipartition `(a, b)`.
    pub fn ncut_objective(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Partition("both sides of a bipartition must be nonempty".into()));
        }
        let mut side = vec![0u8; self.n];
        for (&v, tag) in a.iter().map(|v| (v, 1u8)).chain(b.iter().map(|v| (v, 2u8))) {
            if v >= self.n {
                return Err(Error::Partition(format!("node {v} outside a graph of {} nodes", self.n)));
            }
            if side[v] != 0 {
                return Err(Error::Partition(format!("node {v} appears more than once")));
            }
            side[v] = tag;
        }
        if side.contains(&0) {
            return Err(Error::Partition("bipartition does not cover every node".into()));
        }
        let cut = self.cut(a, b);
        Ok(cut / self.assoc(a) + cut / self.assoc(b))
    }
}
