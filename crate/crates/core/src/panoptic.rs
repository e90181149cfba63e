//! Object discovery by repeated normalized cuts.
//!
//! Each round cuts the graph of still-unassigned patches along the mean of its
//! Fiedler vector, keeps one side as a new object and recurses on the other.
//! Whatever is left when the loop halts is background.

use serde::{Deserialize, Serialize};

use crate::affinity::{build_affinity, AffinityConfig, AffinityGraph, NegativeCosine, DEFAULT_EPSILON_W};
use crate::error::{Error, Result};
use crate::refine::BoolGrid;
use crate::spectral::{fiedler_pair, SolverConfig};
use crate::tensor_io::FeatureMap;

/// Off-diagonal spread below which a subgraph counts as structureless.
const UNIFORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutConfig {
    pub max_iters: usize,
    pub min_nodes: usize,
    pub epsilon_w: f64,
    pub negative: NegativeCosine,
    pub solver: SolverConfig,
}

impl Default for CutConfig {
    fn default() -> Self {
        Self {
            max_iters: 16,
            min_nodes: 5,
            epsilon_w: DEFAULT_EPSILON_W,
            negative: NegativeCosine::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl CutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.min_nodes < 2 {
            return Err(Error::Config("min_nodes must be at least 2".into()));
        }
        self.affinity().validate()
    }

    pub fn affinity(&self) -> AffinityConfig {
        AffinityConfig { epsilon_w: self.epsilon_w, negative: self.negative }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    /// 1-based.
    pub id: u32,
    pub discovery_order: usize,
    /// Discovery-resolution mask on the patch grid.
    pub patch_mask: BoolGrid,
    /// Equal to `patch_mask` until refinement replaces it with a pixel mask.
    pub pixel_mask: BoolGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    TooFewNodes,
    IterationCap,
    DegenerateCut,
    NoConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticResult {
    pub objects: Vec<ObjectMask>,
    /// Patches never claimed by an object.
    pub background: BoolGrid,
    /// Cuts attempted, including the one that halted the loop, if any.
    pub iterations: usize,
    pub halt: HaltReason,
    /// Fiedler value of every successful cut, in order.
    pub eigenvalues: Vec<f64>,
}

/// Splits `nodes` at the mean of `z`: strictly above goes to the first set.
pub fn bipartition(z: &[f64], nodes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if z.len() != nodes.len() || z.len() < 2 {
        return Err(Error::Shape(format!("{} eigenvector entries for {} nodes", z.len(), nodes.len())));
    }
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let (a, b): (Vec<_>, Vec<_>) = nodes.iter().zip(z).partition(|(_, &v)| v > mean);
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateCut(format!("all {} entries fall on one side of the mean", z.len())));
    }
    Ok((a.into_iter().map(|(&n, _)| n).collect(), b.into_iter().map(|(&n, _)| n).collect()))
}

/// Local indices of the nodes sitting on the corners of the bounding box of
/// `coords`.
pub fn corner_nodes(coords: &[(usize, usize)]) -> Vec<usize> {
    let Some(rmin) = coords.iter().map(|c| c.0).min() else { return Vec::new() };
    let rmax = coords.iter().map(|c| c.0).max().unwrap_or(rmin);
    let cmin = coords.iter().map(|c| c.1).min().unwrap_or(0);
    let cmax = coords.iter().map(|c| c.1).max().unwrap_or(cmin);
    let corners = [(rmin, cmin), (rmin, cmax), (rmax, cmin), (rmax, cmax)];
    coords.iter().enumerate().filter(|(_, c)| corners.contains(c)).map(|(i, _)| i).collect()
}

/// Which side of a bipartition is the object. The candidate is the side
/// holding the largest `|z|` (lowest index on ties); it is kept when it covers
/// at most one corner of the active bounding box, otherwise the other side is.
/// `a`, `b` index into `z` and `coords`.
pub fn select_foreground(a: &[usize], b: &[usize], z: &[f64], coords: &[(usize, usize)]) -> Vec<usize> {
    let mut peak = 0;
    for (i, v) in z.iter().enumerate() {
        if v.abs() > z[peak].abs() {
            peak = i;
        }
    }
    let (candidate, other) = if a.contains(&peak) { (a, b) } else { (b, a) };
    let corners = corner_nodes(coords);
    let covered = candidate.iter().filter(|n| corners.contains(n)).count();
    if covered <= 1 { candidate.to_vec() } else { other.to_vec() }
}

/// Discovers objects in a patch feature map.
pub fn panoptic_cut(features: &FeatureMap, cfg: &CutConfig) -> Result<PanopticResult> {
    cfg.validate()?;
    let graph = build_affinity(features, None, &cfg.affinity())?;
    panoptic_cut_graph(&graph, cfg)
}

/// Discovers objects on a prebuilt graph; masks live on the graph's grid.
pub fn panoptic_cut_graph(graph: &AffinityGraph, cfg: &CutConfig) -> Result<PanopticResult> {
    cfg.validate()?;
    if graph.is_empty() {
        return Err(Error::EmptyGraph("no patches to cut".into()));
    }
    let (rows, cols) = graph.grid_shape();
    let grid_index = graph.grid_indices();
    let to_mask = |nodes: &[usize]| {
        let cells: Vec<usize> = nodes.iter().map(|&n| grid_index[n]).collect();
        BoolGrid::from_indices(rows, cols, &cells)
    };

    let mut remaining: Vec<usize> = (0..graph.len()).collect();
    let mut objects = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut iterations = 0;
    let halt = loop {
        if remaining.len() < cfg.min_nodes {
            break HaltReason::TooFewNodes;
        }
        if iterations == cfg.max_iters {
            break HaltReason::IterationCap;
        }
        iterations += 1;
        let sub = graph.subgraph(&remaining)?;
        if sub.is_uniform(UNIFORM_TOLERANCE) {
            break HaltReason::DegenerateCut;
        }
        let pair = match fiedler_pair(&sub, &cfg.solver) {
            Ok(pair) => pair,
            Err(Error::Convergence { iterations: its, best_residual }) => {
                log::warn!("eigen solve stopped after {its} iterations at residual {best_residual:e}; halting discovery");
                break HaltReason::NoConvergence;
            }
            Err(e) => return Err(e),
        };
        let local: Vec<usize> = (0..remaining.len()).collect();
        let (a, b) = match bipartition(&pair.vector, &local) {
            Ok(split) => split,
            Err(Error::DegenerateCut(_)) => break HaltReason::DegenerateCut,
            Err(e) => return Err(e),
        };
        let fg = select_foreground(&a, &b, &pair.vector, sub.node_coords());
        let mut is_fg = vec![false; remaining.len()];
        fg.iter().for_each(|&i| is_fg[i] = true);
        let object_nodes: Vec<usize> = fg.iter().map(|&i| remaining[i]).collect();
        let mask = to_mask(&object_nodes);
        objects.push(ObjectMask {
            id: objects.len() as u32 + 1,
            discovery_order: objects.len(),
            pixel_mask: mask.clone(),
            patch_mask: mask,
        });
        eigenvalues.push(pair.value);
        remaining = remaining.iter().zip(&is_fg).filter(|(_, &f)| !f).map(|(&n, _)| n).collect();
    };
    Ok(PanopticResult { objects, background: to_mask(&remaining), iterations, halt, eigenvalues })
}
