//! Matrix-free truncated SVD and symmetric eigensolver.
//!
//! Both use randomized subspace iteration with Rayleigh-Ritz extraction and
//! an explicit residual test, so the operator is only touched through
//! block products.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::rng::seeded;

/// A linear map applied to dense blocks of vectors.
pub trait LinearOp {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A x`
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `A^T x`
    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl LinearOp for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(x)
    }
}

/// `diag(left) A diag(right)` for a sparse bi-adjacency `A`.
pub struct ScaledAdjacency<'a> {
    pub graph: &'a BipartiteGraph,
    pub left: DVector<f64>,
    pub right: DVector<f64>,
}

fn scale_rows(m: &mut DMatrix<f64>, s: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col.component_mul_assign(s);
    }
}

impl LinearOp for ScaledAdjacency<'_> {
    fn nrows(&self) -> usize {
        self.graph.n1()
    }
    fn ncols(&self) -> usize {
        self.graph.n2()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        scale_rows(&mut y, &self.right);
        let mut out = self.graph.mul(&y);
        scale_rows(&mut out, &self.left);
        out
    }
    fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        scale_rows(&mut y, &self.left);
        let mut out = self.graph.mul_t(&y);
        scale_rows(&mut out, &self.right);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceOptions {
    /// Extra block columns beyond the requested rank.
    pub oversample: usize,
    pub max_iter: usize,
    /// Residual tolerance relative to the largest singular value / eigenvalue magnitude.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self { oversample: 10, max_iter: 3000, tol: 1e-10, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    pub iterations: usize,
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn gaussian_block(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Top-`k` singular triplets of `op`, singular values nonincreasing.
pub fn truncated_svd<A: LinearOp + ?Sized>(op: &A, k: usize, opts: &SubspaceOptions) -> Result<TruncatedSvd> {
    let (m, n) = (op.nrows(), op.ncols());
    let min = m.min(n);
    if k == 0 || k > min {
        return Err(Error::InvalidParameter(format!("rank {k} not in 1..={min}")));
    }
    let b = (k + opts.oversample).min(min);
    let mut q = orthonormalize(op.apply(&gaussian_block(n, b, opts.seed)));
    for it in 1..=opts.max_iter {
        // Z = A^T Q, so Q^T A = Z^T = V_z S U_z^T
        let z = op.apply_t(&q);
        let svd = z.clone().svd(true, true);
        let uz = svd.u.as_ref().expect("requested U");
        let vz_t = svd.v_t.as_ref().expect("requested V^T");
        let s = svd.singular_values.rows(0, k).into_owned();
        let v = uz.columns(0, k).into_owned();
        let u = &q * vz_t.transpose().columns(0, k);
        let av = op.apply(&v);
        let scale = s[0].max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for c in 0..k {
            let r = (av.column(c) - u.column(c) * s[c]).norm();
            worst = worst.max(r);
        }
        if worst <= opts.tol * scale || b == m {
            if k < b && s[k - 1] == svd.singular_values[k] {
                warn!("singular value gap at rank {k} is exactly zero; the subspace is not unique");
            }
            return Ok(TruncatedSvd { u, s, v, iterations: it });
        }
        q = orthonormalize(op.apply(&orthonormalize(z)));
    }
    Err(Error::NoConvergence { what: "truncated SVD", iters: opts.max_iter })
}

/// A symmetric operator given by `apply` alone.
pub trait SymmetricOp {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl SymmetricOp for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
}

#[derive(Debug, Clone)]
pub struct TopEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
}

/// Largest (algebraic) `k` eigenpairs of a symmetric operator whose spectrum
/// lies in `[-shift, inf)`; iteration runs on `op + shift I`.
pub fn top_eigen<A: SymmetricOp + ?Sized>(op: &A, k: usize, shift: f64, opts: &SubspaceOptions) -> Result<TopEigen> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("rank {k} not in 1..={n}")));
    }
    let b = (k + opts.oversample).min(n);
    let mut q = orthonormalize(gaussian_block(n, b, opts.seed));
    for it in 1..=opts.max_iter {
        let y = op.apply(&q);
        let t = q.tr_mul(&y);
        let eig = ((&t + t.transpose()) * 0.5).symmetric_eigen();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(k, order.iter().take(k).map(|&i| eig.eigenvalues[i]));
        let basis = DMatrix::from_columns(&order.iter().take(k).map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
        let vectors = &q * basis;
        let ax = op.apply(&vectors);
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for c in 0..k {
            worst = worst.max((ax.column(c) - vectors.column(c) * values[c]).norm());
        }
        if worst <= opts.tol * scale || b == n {
            return Ok(TopEigen { values, vectors, iterations: it });
        }
        q = orthonormalize(&y + &q * shift);
    }
    Err(Error::NoConvergence { what: "symmetric eigensolver", iters: opts.max_iter })
}

/// Cosines of the principal angles between the column spaces of two
/// orthonormal bases, descending.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    a.tr_mul(b).singular_values()
}
