//! Sparse bipartite graphs.
//!
//! A [`BipartiteGraph`] stores the `n1 x n2` bi-adjacency matrix in
//! compressed form twice: row-major (side-1 node -> sorted side-2
//! neighbours) and column-major (side-2 node -> sorted side-1 neighbours).
//! Products against dense `n x K` matrices only touch stored entries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stored entry of the bi-adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct Compressed {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<u32>,
}

impl Compressed {
    /// Builds from `(major, minor, w)` triples; duplicates are rejected.
    fn build(n_major: usize, mut triples: Vec<(usize, usize, u32)>) -> std::result::Result<Self, (usize, usize)> {
        triples.sort_unstable_by_key(|&(a, b, _)| (a, b));
        for pair in triples.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err((pair[0].0, pair[0].1));
            }
        }
        let mut ptr = vec![0usize; n_major + 1];
        for &(a, _, _) in &triples {
            ptr[a + 1] += 1;
        }
        for k in 0..n_major {
            ptr[k + 1] += ptr[k];
        }
        let idx = triples.iter().map(|t| t.1).collect();
        let val = triples.iter().map(|t| t.2).collect();
        Ok(Self { ptr, idx, val })
    }

    #[inline]
    fn row(&self, a: usize) -> (&[usize], &[u32]) {
        let (s, e) = (self.ptr[a], self.ptr[a + 1]);
        (&self.idx[s..e], &self.val[s..e])
    }
}

/// Bipartite graph between `n1` side-1 nodes and `n2` side-2 nodes with
/// positive integer edge weights (absent pairs have weight 0).
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    n1: usize,
    n2: usize,
    rows: Compressed,
    cols: Compressed,
    total_weight: u64,
}

impl BipartiteGraph {
    /// Builds a graph, validating index ranges, weights and uniqueness.
    pub fn new(n1: usize, n2: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut triples = Vec::new();
        let mut total_weight = 0u64;
        for e in edges {
            if e.i >= n1 || e.j >= n2 {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) out of range for a {}x{} graph",
                    e.i, e.j, n1, n2
                )));
            }
            if e.w == 0 {
                return Err(Error::InvalidGraph(format!("edge ({}, {}) has zero weight", e.i, e.j)));
            }
            total_weight += u64::from(e.w);
            triples.push((e.i, e.j, e.w));
        }
        let transposed = triples.iter().map(|&(i, j, w)| (j, i, w)).collect();
        let rows = Compressed::build(n1, triples).map_err(|(i, j)| {
            Error::InvalidGraph(format!("duplicate edge ({i}, {j})"))
        })?;
        let cols = Compressed::build(n2, transposed).expect("row pass rejected duplicates");
        Ok(Self { n1, n2, rows, cols, total_weight })
    }

    /// Graph with unit weights from `(i, j)` pairs.
    pub fn from_pairs(n1: usize, n2: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(n1, n2, pairs.into_iter().map(|(i, j)| Edge { i, j, w: 1 }))
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.rows.idx.len()
    }

    /// `sum_ij A_ij`.
    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    /// Density `sum_ij A_ij / (n1 n2)`.
    pub fn density(&self) -> f64 {
        if self.n1 == 0 || self.n2 == 0 {
            return 0.0;
        }
        self.total_weight as f64 / (self.n1 as f64 * self.n2 as f64)
    }

    /// Realized average degree `2 sum A / (n1 + n2)`.
    pub fn average_degree(&self) -> f64 {
        2.0 * self.total_weight as f64 / (self.n1 + self.n2) as f64
    }

    pub fn max_weight(&self) -> u32 {
        self.rows.val.iter().copied().max().unwrap_or(0)
    }

    /// Side-1 neighbours of node `i` with weights, sorted by index.
    pub fn row(&self, i: usize) -> (&[usize], &[u32]) {
        self.rows.row(i)
    }

    /// Side-2 node `j`'s side-1 neighbours with weights, sorted by index.
    pub fn col(&self, j: usize) -> (&[usize], &[u32]) {
        self.cols.row(j)
    }

    /// Weight of entry `(i, j)`; zero when absent.
    pub fn weight(&self, i: usize, j: usize) -> u32 {
        let (idx, val) = self.row(i);
        idx.binary_search(&j).map(|p| val[p]).unwrap_or(0)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.n1).flat_map(move |i| {
            let (idx, val) = self.row(i);
            idx.iter().zip(val).map(move |(&j, &w)| Edge { i, j, w })
        })
    }

    /// Weighted degrees of side-1 nodes.
    pub fn degrees1(&self) -> Vec<f64> {
        (0..self.n1).map(|i| self.row(i).1.iter().map(|&w| f64::from(w)).sum()).collect()
    }

    /// Weighted degrees of side-2 nodes.
    pub fn degrees2(&self) -> Vec<f64> {
        (0..self.n2).map(|j| self.col(j).1.iter().map(|&w| f64::from(w)).sum()).collect()
    }

    /// `A * m` for an `n2 x K` dense matrix.
    pub fn mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.n2, "A*m dimension mismatch");
        let k = m.ncols();
        let mut out = DMatrix::zeros(self.n1, k);
        for i in 0..self.n1 {
            let (idx, val) = self.row(i);
            for c in 0..k {
                let col = m.column(c);
                let mut acc = 0.0;
                for (&j, &w) in idx.iter().zip(val) {
                    acc += f64::from(w) * col[j];
                }
                out[(i, c)] = acc;
            }
        }
        out
    }

    /// `A^T * m` for an `n1 x K` dense matrix.
    pub fn mul_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.n1, "A^T*m dimension mismatch");
        let k = m.ncols();
        let mut out = DMatrix::zeros(self.n2, k);
        for j in 0..self.n2 {
            let (idx, val) = self.col(j);
            for c in 0..k {
                let col = m.column(c);
                let mut acc = 0.0;
                for (&i, &w) in idx.iter().zip(val) {
                    acc += f64::from(w) * col[i];
                }
                out[(j, c)] = acc;
            }
        }
        out
    }

    /// The same graph with sides exchanged (`A^T`).
    pub fn transposed(&self) -> Self {
        Self {
            n1: self.n2,
            n2: self.n1,
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            total_weight: self.total_weight,
        }
    }

    /// Induced subgraph on the given side-1 and side-2 node subsets, relabeled
    /// densely in the given order.
    pub fn induced(&self, keep1: &[usize], keep2: &[usize]) -> Self {
        let mut map2 = vec![usize::MAX; self.n2];
        for (new, &old) in keep2.iter().enumerate() {
            map2[old] = new;
        }
        let mut edges = Vec::new();
        for (new_i, &old_i) in keep1.iter().enumerate() {
            let (idx, val) = self.row(old_i);
            for (&j, &w) in idx.iter().zip(val) {
                if map2[j] != usize::MAX {
                    edges.push(Edge { i: new_i, j: map2[j], w });
                }
            }
        }
        Self::new(keep1.len(), keep2.len(), edges).expect("induced subgraph of a valid graph")
    }

    /// Dense copy; intended for tests and small diagnostics only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n1, self.n2);
        for e in self.edges() {
            a[(e.i, e.j)] = f64::from(e.w);
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BipartiteGraph {
        BipartiteGraph::new(
            3,
            4,
            [Edge { i: 0, j: 1, w: 1 }, Edge { i: 2, j: 3, w: 2 }, Edge { i: 0, j: 0, w: 1 }, Edge { i: 1, j: 3, w: 1 }],
        )
        .unwrap()
    }

    #[test]
    fn rows_sorted_and_degrees() {
        let g = small();
        assert_eq!(g.row(0).0, &[0, 1]);
        assert_eq!(g.col(3).0, &[1, 2]);
        assert_eq!(g.degrees1(), vec![2.0, 1.0, 2.0]);
        assert_eq!(g.degrees2(), vec![1.0, 1.0, 0.0, 3.0]);
        assert_eq!(g.total_weight(), 5);
        assert_eq!(g.weight(2, 3), 2);
        assert_eq!(g.weight(2, 2), 0);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(BipartiteGraph::from_pairs(2, 2, [(0, 0), (0, 0)]).is_err());
        assert!(BipartiteGraph::from_pairs(2, 2, [(2, 0)]).is_err());
        assert!(BipartiteGraph::new(2, 2, [Edge { i: 0, j: 0, w: 0 }]).is_err());
    }

    #[test]
    fn products_match_dense() {
        let g = small();
        let a = g.to_dense();
        let m2 = DMatrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64 * 0.5 - 1.0);
        let m1 = DMatrix::from_fn(3, 2, |r, c| (r + 3 * c) as f64);
        assert!((g.mul(&m2) - &a * &m2).norm() < 1e-12);
        assert!((g.mul_t(&m1) - a.transpose() * &m1).norm() < 1e-12);
        assert_eq!(g.transposed().to_dense(), a.transpose());
    }

    #[test]
    fn induced_relabels() {
        let g = small();
        let sub = g.induced(&[2, 0], &[3, 0]);
        assert_eq!(sub.weight(0, 0), 2);
        assert_eq!(sub.weight(1, 1), 1);
        assert_eq!(sub.nnz(), 2);
    }
}
