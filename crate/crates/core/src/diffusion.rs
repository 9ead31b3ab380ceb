//! Query-time diffusion over a k-nearest-neighbour graph of global descriptors.
//!
//! Scores solve `(I - alpha S) f = y` with `S = D^-1/2 W D^-1/2` and `W` the
//! symmetrized affinity matrix.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{DsmError, Result};
use crate::global::GlobalDescriptor;

/// Sentinel for an absent neighbour slot in the persisted graph.
pub const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    /// Directed lists, at most `k` each, by affinity desc then index asc.
    neighbors: Vec<Vec<(u32, f32)>>,
    // symmetric normalized adjacency in compressed rows; columns ascending
    row_start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl KnnGraph {
    /// Rebuilds the normalized adjacency from directed neighbour lists.
    pub fn from_neighbors(k: usize, neighbors: Vec<Vec<(u32, f32)>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() > k {
                return Err(DsmError::invalid(format!("node {i} has {} neighbours, limit {k}", list.len())));
            }
            for &(j, a) in list {
                if j as usize >= n || j as usize == i || !(a >= 0.0 && a.is_finite()) {
                    return Err(DsmError::invalid(format!("node {i} has invalid edge ({j}, {a})")));
                }
            }
        }
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (i, list) in neighbors.iter().enumerate() {
            for &(j, a) in list {
                rows[i].push((j, a as f64));
                rows[j as usize].push((i as u32, a as f64));
            }
        }
        // W_ij = max over both directions
        for row in &mut rows {
            row.sort_by(|x, y| x.0.cmp(&y.0).then(y.1.total_cmp(&x.1)));
            row.dedup_by_key(|e| e.0);
            row.retain(|e| e.1 > 0.0);
        }
        let degree: Vec<f64> = rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
        let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
        let mut row_start = Vec::with_capacity(n + 1);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        row_start.push(0);
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                cols.push(j);
                // product order fixed so that S_ij == S_ji bit for bit
                let (lo, hi) = if i < j as usize { (i, j as usize) } else { (j as usize, i) };
                vals.push(w * inv_sqrt(degree[lo]) * inv_sqrt(degree[hi]));
            }
            row_start.push(cols.len());
        }
        Ok(KnnGraph { n, k, neighbors, row_start, cols, vals })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self) -> &[Vec<(u32, f32)>] {
        &self.neighbors
    }

    /// Entry `S_ij` of the normalized adjacency.
    pub fn s(&self, i: usize, j: usize) -> f64 {
        let row = self.row_start[i]..self.row_start[i + 1];
        match self.cols[row.clone()].binary_search(&(j as u32)) {
            Ok(p) => self.vals[row.start + p],
            Err(_) => 0.0,
        }
    }

    /// Dense copy of `S`, row-major.
    pub fn dense_s(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for p in self.row_start[i]..self.row_start[i + 1] {
                out[i * self.n + self.cols[p] as usize] = self.vals[p];
            }
        }
        out
    }

    /// `out = x - alpha S x`.
    fn apply_system(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_start[i]..self.row_start[i + 1] {
                acc += self.vals[p] * x[self.cols[p] as usize];
            }
            out[i] = x[i] - alpha * acc;
        }
    }
}

/// k-NN graph with affinity `max(0, cos)^gamma`; self-edges are excluded and
/// zero-affinity edges are not stored.
pub fn build_knn_graph(descs: &[GlobalDescriptor], k: usize, gamma: f64) -> Result<KnnGraph> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(DsmError::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let neighbors: Vec<Vec<(u32, f32)>> = (0..descs.len())
        .into_par_iter()
        .map(|i| {
            let mut scored: Vec<(u32, f64)> =
                (0..descs.len()).filter(|&j| j != i).map(|j| (j as u32, descs[i].dot(&descs[j]))).collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            scored.truncate(k);
            scored.into_iter().map(|(j, cos)| (j, cos.max(0.0).powf(gamma) as f32)).filter(|e| e.1 > 0.0).collect()
        })
        .collect();
    KnnGraph::from_neighbors(k, neighbors)
}

/// Seed vector from spatially verified results `(index, inliers, cosine)`,
/// listed in re-ranked order. The first `pool` are scored by
/// `inliers * cosine` and the `top_m` best kept.
pub fn seed_scores(n: usize, verified: &[(usize, usize, f64)], top_m: usize, pool: usize) -> Vec<f64> {
    let mut scored: Vec<(usize, usize, f64)> = verified
        .iter()
        .take(pool)
        .enumerate()
        .map(|(pos, &(idx, inliers, cos))| (pos, idx, inliers as f64 * cos))
        .filter(|e| e.2 > 0.0)
        .collect();
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut y = vec![0.0; n];
    for &(_, idx, score) in scored.iter().take(top_m) {
        if idx < n {
            y[idx] = score;
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    pub scores: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `||(I - alpha S) f - y|| / ||y||` of the returned iterate.
    pub relative_residual: f64,
}

/// Conjugate gradient on `(I - alpha S) f = y`, starting from zero. Without
/// convergence the best iterate is returned with `converged = false`.
pub fn diffuse(graph: &KnnGraph, y: &[f64], alpha: f64, tol: f64, max_iter: usize) -> Result<Diffusion> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(DsmError::invalid(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if y.len() != graph.n {
        return Err(DsmError::invalid(format!("seed has {} entries, graph has {} nodes", y.len(), graph.n)));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let y_norm = dot(y, y).sqrt();
    let mut f = vec![0.0; graph.n];
    if y_norm == 0.0 {
        return Ok(Diffusion { scores: f, converged: true, iterations: 0, relative_residual: 0.0 });
    }
    let mut r = y.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; graph.n];
    let mut rr = dot(&r, &r);
    let (mut best, mut best_res) = (f.clone(), 1.0);
    for it in 1..=max_iter {
        graph.apply_system(alpha, &p, &mut ap);
        let step = rr / dot(&p, &ap);
        for i in 0..graph.n {
            f[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next = dot(&r, &r);
        let res = rr_next.sqrt() / y_norm;
        if res < best_res {
            best.clone_from(&f);
            best_res = res;
        }
        if res <= tol {
            return Ok(Diffusion { scores: f, converged: true, iterations: it, relative_residual: res });
        }
        let beta = rr_next / rr;
        for i in 0..graph.n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    Ok(Diffusion { scores: best, converged: false, iterations: max_iter, relative_residual: best_res })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: &[f64]) -> GlobalDescriptor {
        GlobalDescriptor::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_vectors_form_complete_graph() {
        let graph = build_knn_graph(&[g(&[1.0, 1.0]), g(&[1.0, 1.0]), g(&[1.0, 1.0])], 2, 3.0).unwrap();
        for list in graph.neighbors() {
            assert_eq!(list.len(), 2);
            assert!(list.iter().all(|e| (e.1 - 1.0).abs() < 1e-6));
        }
        assert!((graph.s(0, 1) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_vectors_have_no_edges() {
        let graph = build_knn_graph(&[g(&[1.0, 0.0]), g(&[0.0, 1.0])], 5, 3.0).unwrap();
        assert!(graph.dense_s().iter().all(|&v| v == 0.0));
        let d = diffuse(&graph, &[1.0, 0.0], 0.99, 1e-6, 200).unwrap();
        assert_eq!(d.scores, vec![1.0, 0.0]);
    }

    #[test]
    fn two_node_closed_form() {
        let graph = build_knn_graph(&[g(&[1.0]), g(&[1.0])], 1, 3.0).unwrap();
        assert_eq!(graph.dense_s(), vec![0.0, 1.0, 1.0, 0.0]);
        let d = diffuse(&graph, &[1.0, 0.0], 0.5, 1e-12, 200).unwrap();
        assert!(d.converged);
        assert!((d.scores[0] - 4.0 / 3.0).abs() < 1e-9 && (d.scores[1] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_alpha_returns_seed() {
        let descs: Vec<_> = (0..6).map(|i| g(&[1.0, i as f64 * 0.3])).collect();
        let graph = build_knn_graph(&descs, 3, 3.0).unwrap();
        let y = vec![0.0, 2.5, 0.0, 0.1, 0.0, 7.0];
        assert_eq!(diffuse(&graph, &y, 0.0, 1e-6, 200).unwrap().scores, y);
    }

    #[test]
    fn seeds() {
        let y = seed_scores(10, &[(7, 10, 0.9), (3, 2, 0.99)], 5, 10);
        assert!((y[7] - 9.0).abs() < 1e-12 && (y[3] - 1.98).abs() < 1e-12);
        assert_eq!(y.iter().filter(|&&v| v > 0.0).count(), 2);

        let many: Vec<_> = (0..10).map(|i| (i, i + 1, 0.5)).collect();
        let y = seed_scores(10, &many, 5, 10);
        assert_eq!(y.iter().filter(|&&v| v > 0.0).count(), 5);
        assert!((5..10).all(|i| y[i] > 0.0));

        assert!(seed_scores(4, &[(0, 0, 0.9), (1, 0, 0.8)], 5, 10).iter().all(|&v| v == 0.0));
        assert!(seed_scores(4, &[], 5, 10).iter().all(|&v| v == 0.0));
        assert_eq!(seed_scores(4, &[(0, 1, 1.0), (1, 5, 1.0)], 5, 1), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let graph = build_knn_graph(&[g(&[1.0]), g(&[1.0])], 1, 3.0).unwrap();
        assert!(diffuse(&graph, &[1.0, 0.0], 1.0, 1e-6, 10).is_err());
        assert!(diffuse(&graph, &[1.0], 0.5, 1e-6, 10).is_err());
        assert!(KnnGraph::from_neighbors(1, vec![vec![(0, 1.0)]]).is_err());
        assert!(KnnGraph::from_neighbors(1, vec![vec![(1, 1.0), (1, 0.5)], vec![]]).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let descs: Vec<_> = (0..20).map(|i| g(&[1.0, (i as f64 * 0.7).sin(), (i as f64).cos()])).collect();
        let graph = build_knn_graph(&descs, 5, 3.0).unwrap();
        let mut y = vec![0.0; 20];
        y[3] = 1.0;
        let d = diffuse(&graph, &y, 0.99, 1e-14, 1).unwrap();
        assert!(!d.converged);
        assert_eq!(d.iterations, 1);
    }
}
