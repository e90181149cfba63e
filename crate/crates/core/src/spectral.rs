//! Second-smallest eigenpair of the generalized system `(D - W) z = λ D z`.
//!
//! Both routes work on the symmetric reduction
//! `A = I - D^{-1/2} W D^{-1/2}`, `z = D^{-1/2} y`. The trivial pair
//! (`λ = 0`, `y ∝ D^{1/2} 1`) is known in closed form and is deflated
//! explicitly. Small graphs use a dense symmetric eigensolver; larger ones a
//! block LOBPCG iteration with a seeded start block.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityGraph;
use crate::error::{Error, Result};

/// Largest graph `dense_spectrum` accepts.
pub const MAX_DENSE_SPECTRUM: usize = 2048;

pub const DEFAULT_SEED: u64 = 0x5eed_cafe;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop when `‖(D−W)z − λDz‖ / ‖Dz‖` falls below this.
    pub tolerance: f64,
    pub max_iters: usize,
    pub block_size: usize,
    /// Graphs with at most this many nodes are solved densely.
    pub dense_threshold: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-7, max_iters: 2000, block_size: 4, dense_threshold: 256, seed: DEFAULT_SEED }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// Generalized eigenvector, scaled so that `zᵀ D z = 1`.
    pub vector: Vec<f64>,
    pub residual: f64,
}

/// The symmetric reduction together with `D^{1/2}`.
struct Reduced {
    a: DMatrix<f64>,
    sqrt_d: Vec<f64>,
}

impl Reduced {
    fn new(graph: &AffinityGraph) -> Result<Self> {
        let n = graph.len();
        let degrees = graph.degrees();
        if let Some(i) = degrees.iter().position(|&d| d.is_nan() || d <= 0.0) {
            return Err(Error::Data(format!("node {i} has zero degree")));
        }
        let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let w = graph.weights();
        let a = DMatrix::from_fn(n, n, |i, j| {
            let m = inv_sqrt[i] * w[i * n + j] * inv_sqrt[j];
            if i == j { 1.0 - m } else { -m }
        });
        // from_fn evaluates (i, j) and (j, i) with the same operands, so `a`
        // is exactly symmetric.
        Ok(Self { a, sqrt_d: degrees.iter().map(|d| d.sqrt()).collect() })
    }

    /// Unit vector `D^{1/2} 1 / ‖D^{1/2} 1‖` spanning the trivial eigenspace.
    fn trivial(&self) -> DVector<f64> {
        DVector::from_iterator(self.sqrt_d.len(), self.sqrt_d.iter().copied()).normalize()
    }

    /// Maps a unit `y` to `z = D^{-1/2} y` and measures the generalized residual.
    fn to_pair(&self, value: f64, y: &DVector<f64>) -> EigenPair {
        let ay = &self.a * y;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..y.len() {
            let r = self.sqrt_d[i] * (ay[i] - value * y[i]);
            num += r * r;
            den += self.sqrt_d[i] * self.sqrt_d[i] * y[i] * y[i];
        }
        let mut vector: Vec<f64> = y.iter().zip(&self.sqrt_d).map(|(y, s)| y / s).collect();
        orient(&mut vector);
        EigenPair { value, vector, residual: (num / den).sqrt() }
    }
}

/// Flips `z` so that its entry of largest magnitude is positive.
fn orient(z: &mut [f64]) {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if v.abs() > z[best].abs() {
            best = i;
        }
    }
    if z.get(best).is_some_and(|&v| v < 0.0) {
        z.iter_mut().for_each(|v| *v = -*v);
    }
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Full spectrum of the reduced problem in ascending order.
pub fn dense_spectrum(graph: &AffinityGraph) -> Result<Vec<EigenPair>> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::EmptyGraph("graph has no nodes".into()));
    }
    if n > MAX_DENSE_SPECTRUM {
        return Err(Error::Size(format!("dense spectrum limited to {MAX_DENSE_SPECTRUM} nodes, got {n}")));
    }
    let reduced = Reduced::new(graph)?;
    let (values, vectors) = sorted_eigen(reduced.a.clone());
    Ok(values
        .iter()
        .enumerate()
        .map(|(k, &value)| reduced.to_pair(value, &vectors.column(k).into_owned()))
        .collect())
}

/// Second-smallest generalized eigenpair, D-orthogonal to the constant vector.
pub fn fiedler_pair(graph: &AffinityGraph, cfg: &SolverConfig) -> Result<EigenPair> {
    if graph.len() < 2 {
        return Err(Error::EmptyGraph(format!("need at least 2 nodes, got {}", graph.len())));
    }
    if graph.len() <= cfg.dense_threshold.min(MAX_DENSE_SPECTRUM) {
        dense_fiedler(graph)
    } else {
        lobpcg_fiedler(graph, cfg)
    }
}

/// Dense route: the trivial eigenvector is shifted above the spectrum
/// (eigenvalues of `A` lie in `[0, 2]`) so the smallest remaining pair is the
/// Fiedler pair even when the graph is disconnected.
pub fn dense_fiedler(graph: &AffinityGraph) -> Result<EigenPair> {
    if graph.len() < 2 {
        return Err(Error::EmptyGraph(format!("need at least 2 nodes, got {}", graph.len())));
    }
    if graph.len() > MAX_DENSE_SPECTRUM {
        return Err(Error::Size(format!("dense solve limited to {MAX_DENSE_SPECTRUM} nodes, got {}", graph.len())));
    }
    let reduced = Reduced::new(graph)?;
    let u = reduced.trivial();
    let shifted = &reduced.a + (&u * u.transpose()) * 3.0;
    let shifted = (&shifted + shifted.transpose()) * 0.5;
    let (values, vectors) = sorted_eigen(shifted);
    let mut y = vectors.column(0).into_owned();
    y -= &u * u.dot(&y);
    y.normalize_mut();
    Ok(reduced.to_pair(values[0], &y))
}

/// Modified Gram-Schmidt on the columns of `basis`, applying the same
/// operations to their images `images` (= A * basis). The trivial vector `u`
/// (with `A u = 0`) is projected out in the same passes. Columns that are
/// numerically dependent on earlier ones are dropped; a column that lost most
/// of its norm has its image recomputed, since the tracked one carries the
/// cancellation error.
fn orthonormalize(
    a: &DMatrix<f64>,
    u: &DVector<f64>,
    basis: &mut Vec<DVector<f64>>,
    images: &mut Vec<DVector<f64>>,
    keep_first: usize,
) {
    let mut out_b: Vec<DVector<f64>> = Vec::with_capacity(basis.len());
    let mut out_i: Vec<DVector<f64>> = Vec::with_capacity(basis.len());
    for (k, (mut v, mut av)) in basis.drain(..).zip(images.drain(..)).enumerate() {
        let original = v.norm();
        if original == 0.0 {
            continue;
        }
        for _ in 0..2 {
            let c = u.dot(&v);
            v.axpy(-c, u, 1.0);
            for (q, aq) in out_b.iter().zip(&out_i) {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
                av.axpy(-c, aq, 1.0);
            }
        }
        let norm = v.norm();
        if k >= keep_first && norm < 1e-10 * original.max(1e-300) {
            continue;
        }
        if norm == 0.0 {
            continue;
        }
        v /= norm;
        if norm < 1e-4 * original {
            av = a * &v;
        } else {
            av /= norm;
        }
        out_b.push(v);
        out_i.push(av);
    }
    *basis = out_b;
    *images = out_i;
}

fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

fn stack(cols: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
}

const POLISH_PATIENCE: usize = 5;

/// Iterative route: block LOBPCG for the smallest eigenpairs of `A` restricted
/// to the complement of the trivial eigenvector.
pub fn lobpcg_fiedler(graph: &AffinityGraph, cfg: &SolverConfig) -> Result<EigenPair> {
    let n = graph.len();
    if n < 2 {
        return Err(Error::EmptyGraph(format!("need at least 2 nodes, got {n}")));
    }
    if cfg.block_size == 0 || cfg.max_iters == 0 || cfg.tolerance.is_nan() || cfg.tolerance <= 0.0 {
        return Err(Error::Config("solver needs block_size >= 1, max_iters >= 1 and tolerance > 0".into()));
    }
    let reduced = Reduced::new(graph)?;
    let u = reduced.trivial();
    let a = &reduced.a;
    let k = cfg.block_size.min(n - 1);
    let deflate = |v: &mut DVector<f64>| {
        let c = u.dot(v);
        v.axpy(-c, &u, 1.0);
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<DVector<f64>> = (0..k)
        .map(|_| {
            let mut v = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
            deflate(&mut v);
            v
        })
        .collect();
    let mut ax = columns(&(a * stack(&x, n)));
    orthonormalize(a, &u, &mut x, &mut ax, 0);
    let mut p: Vec<DVector<f64>> = Vec::new();
    let mut ap: Vec<DVector<f64>> = Vec::new();
    let mut theta: Vec<f64>;
    let mut best_residual = f64::INFINITY;
    // once within tolerance, keep iterating toward a tighter residual; the
    // eigenvector error scales with residual / spectral gap
    let polish_target = cfg.tolerance * 1e-2;
    let mut accepted: Option<EigenPair> = None;
    let mut stalled = 0;

    // Initial Rayleigh-Ritz on the start block.
    {
        let (vals, coef) = rayleigh_ritz(&x, &ax);
        let xs = stack(&x, n) * &coef;
        let axs = stack(&ax, n) * &coef;
        x = columns(&xs);
        ax = columns(&axs);
        theta = vals;
    }

    for iter in 0..cfg.max_iters {
        if iter % 25 == 24 {
            // refresh images to cancel drift from the recurrences
            ax = columns(&(a * stack(&x, n)));
            if !p.is_empty() {
                ap = columns(&(a * stack(&p, n)));
            }
        }
        let mut r: Vec<DVector<f64>> = x
            .iter()
            .zip(&ax)
            .zip(&theta)
            .map(|((xi, axi), &t)| {
                let mut ri = axi - xi * t;
                deflate(&mut ri);
                ri
            })
            .collect();

        let lead = generalized_residual(&reduced, theta[0], &x[0], &ax[0]);
        if lead <= cfg.tolerance {
            let mut y = x[0].clone();
            deflate(&mut y);
            y.normalize_mut();
            let pair = reduced.to_pair(theta[0], &y);
            if pair.residual <= polish_target {
                log::debug!("lobpcg converged in {iter} iterations (n = {n}, residual {:e})", pair.residual);
                return Ok(pair);
            }
            if pair.residual <= cfg.tolerance {
                if accepted.as_ref().is_none_or(|b: &EigenPair| pair.residual < b.residual) {
                    accepted = Some(pair);
                    stalled = 0;
                } else {
                    stalled += 1;
                }
                if stalled >= POLISH_PATIENCE {
                    return Ok(accepted.unwrap());
                }
            } else {
                best_residual = best_residual.min(pair.residual);
                ax = columns(&(a * stack(&x, n)));
                continue;
            }
        }
        best_residual = best_residual.min(lead);

        // Residuals of columns that have converged add nothing but noise.
        r.retain(|ri| ri.norm() > cfg.tolerance * 1e-3);
        let mut ar = if r.is_empty() { Vec::new() } else { columns(&(a * stack(&r, n))) };

        let mut basis: Vec<DVector<f64>> = x.clone();
        let mut images: Vec<DVector<f64>> = ax.clone();
        basis.append(&mut r);
        images.append(&mut ar);
        basis.extend(p.iter().cloned());
        images.extend(ap.iter().cloned());
        orthonormalize(a, &u, &mut basis, &mut images, 0);

        let (vals, coef) = rayleigh_ritz(&basis, &images);
        let m = basis.len();
        let kk = k.min(m);
        let s = stack(&basis, n);
        let as_ = stack(&images, n);
        let c_x = coef.columns(0, kk).into_owned();
        let new_x = &s * &c_x;
        let new_ax = &as_ * &c_x;
        // Search directions: the part of the new iterate outside the old block.
        let xk = x.len().min(m);
        if m > xk {
            let c_rest = coef.view((xk, 0), (m - xk, kk)).into_owned();
            let s_rest = s.columns(xk, m - xk);
            let as_rest = as_.columns(xk, m - xk);
            p = columns(&(s_rest * &c_rest));
            ap = columns(&(as_rest * &c_rest));
        } else {
            p.clear();
            ap.clear();
        }
        x = columns(&new_x);
        ax = columns(&new_ax);
        theta = vals[..kk].to_vec();
    }
    accepted.ok_or(Error::Convergence { iterations: cfg.max_iters, best_residual })
}

/// Ritz values (ascending) and coefficient matrix for an orthonormal basis.
fn rayleigh_ritz(basis: &[DVector<f64>], images: &[DVector<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let m = basis.len();
    let mut g = DMatrix::from_fn(m, m, |i, j| basis[i].dot(&images[j]));
    g = (&g + g.transpose()) * 0.5;
    sorted_eigen(g)
}

fn generalized_residual(reduced: &Reduced, theta: f64, y: &DVector<f64>, ay: &DVector<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        let r = reduced.sqrt_d[i] * (ay[i] - theta * y[i]);
        num += r * r;
        den += reduced.sqrt_d[i] * reduced.sqrt_d[i] * y[i] * y[i];
    }
    (num / den).sqrt()
}

/// `zᵀ D z'` for generalized eigenvectors of `graph`.
pub fn d_inner(graph: &AffinityGraph, z: &[f64], other: &[f64]) -> f64 {
    graph.degrees().iter().zip(z).zip(other).map(|((d, a), b)| d * a * b).sum()
}
