//! Initial labels for the fitter.
//!
//! * [`bisc`]: bipartite spectral clustering on `D1^-1/2 A D2^-1/2`; one
//!   k-means over the stacked embeddings of both sides, so the side-1 and
//!   side-2 clusters come out matched.
//! * [`scp_init`]: regularized symmetric-Laplacian clustering of the
//!   unipartite embedding of the graph. Side labels are not matched.
//! * [`perturb_truth`] and [`random_init`]: Dirichlet-noise initializers for
//!   simulation studies.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::kmeans::kmeans;
use crate::linalg::{top_eigen, truncated_svd, ScaledAdjacency, SubspaceOptions, SymmetricOp};
use crate::model::CovariateSet;
use crate::rng::{derive_seed, seeded, Rng};

/// Smoothing applied when hard labels are turned into soft labels.
pub const HARD_TO_SOFT_DELTA: f64 = 0.05;
/// Concentration of the Dirichlet noise rows.
pub const DIRICHLET_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Bisc,
    Scp,
    PerturbedTruth,
    Random,
    /// k-means on the zero-padded covariate stack `[X1; X2]`; a covariate-only baseline.
    CovariateKmeans,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "bisc" => Ok(Self::Bisc),
            "scp" => Ok(Self::Scp),
            "perturbed_truth" => Ok(Self::PerturbedTruth),
            "random" => Ok(Self::Random),
            "covariate_kmeans" => Ok(Self::CovariateKmeans),
            other => Err(Error::InvalidParameter(format!("unknown init method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub method: InitMethod,
    /// Weight on the truth for [`InitMethod::PerturbedTruth`].
    pub omega: f64,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(method: InitMethod) -> Self {
        Self { method, omega: 0.1, kmeans_restarts: 10, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidParameter(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::InvalidParameter("kmeans_restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hard labels per side; `None` marks nodes that could not be embedded
/// (isolated nodes), which become uniform rows in soft form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideLabels {
    pub side1: Vec<Option<usize>>,
    pub side2: Vec<Option<usize>>,
}

impl SideLabels {
    pub fn to_soft(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        (hard_to_soft(&self.side1, k, HARD_TO_SOFT_DELTA), hard_to_soft(&self.side2, k, HARD_TO_SOFT_DELTA))
    }

    /// Labels with unassigned nodes mapped to community 0.
    pub fn filled(&self) -> (Vec<usize>, Vec<usize>) {
        let f = |v: &[Option<usize>]| v.iter().map(|l| l.unwrap_or(0)).collect();
        (f(&self.side1), f(&self.side2))
    }
}

/// `(1 - delta) onehot + delta / K`; `None` rows become uniform.
pub fn hard_to_soft(labels: &[Option<usize>], k: usize, delta: f64) -> DMatrix<f64> {
    let base = delta / k as f64;
    DMatrix::from_fn(labels.len(), k, |i, c| match labels[i] {
        Some(l) if l == c => 1.0 - delta + base,
        Some(_) => base,
        None => 1.0 / k as f64,
    })
}

fn spectral_opts(seed: u64) -> SubspaceOptions {
    SubspaceOptions { tol: 1e-8, max_iter: 3000, oversample: 10, seed: derive_seed(seed, &[0x5bd]) }
}

/// Rows scaled to unit length; all-zero rows are replaced by the uniform
/// unit vector and reported.
pub fn normalize_rows(m: &mut DMatrix<f64>) -> Vec<usize> {
    let k = m.ncols();
    let mut zero = Vec::new();
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if norm > 0.0 {
            m.row_mut(i).unscale_mut(norm);
        } else {
            m.row_mut(i).fill(1.0 / (k as f64).sqrt());
            zero.push(i);
        }
    }
    zero
}

/// Intermediate quantities of BiSC, exposed for inspection.
#[derive(Debug, Clone)]
pub struct BiscEmbedding {
    /// Indices of non-isolated nodes, per side.
    pub kept1: Vec<usize>,
    pub kept2: Vec<usize>,
    pub singular_values: DVector<f64>,
    /// Row-normalized left/right singular vectors.
    pub u_tilde: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    /// Rows (in kept order, side 1 then side 2) that were exactly zero.
    pub zero_rows: Vec<usize>,
    /// Stacked `[D1^-1/2 U~; D2^-1/2 V~]`.
    pub z: DMatrix<f64>,
}

pub fn bisc_embedding(graph: &BipartiteGraph, k: usize, seed: u64) -> Result<BiscEmbedding> {
    let d1 = graph.degrees1();
    let d2 = graph.degrees2();
    let kept1: Vec<usize> = (0..graph.n1()).filter(|&i| d1[i] > 0.0).collect();
    let kept2: Vec<usize> = (0..graph.n2()).filter(|&j| d2[j] > 0.0).collect();
    if k > kept1.len().min(kept2.len()) {
        return Err(Error::InvalidParameter(format!(
            "K = {k} exceeds the number of non-isolated nodes ({}, {})",
            kept1.len(),
            kept2.len()
        )));
    }
    let sub = graph.induced(&kept1, &kept2);
    let s1 = DVector::from_iterator(kept1.len(), kept1.iter().map(|&i| d1[i].powf(-0.5)));
    let s2 = DVector::from_iterator(kept2.len(), kept2.iter().map(|&j| d2[j].powf(-0.5)));
    let op = ScaledAdjacency { graph: &sub, left: s1.clone(), right: s2.clone() };
    let svd = truncated_svd(&op, k, &spectral_opts(seed))?;
    let mut u_tilde = svd.u;
    let mut v_tilde = svd.v;
    let mut zero_rows = normalize_rows(&mut u_tilde);
    zero_rows.extend(normalize_rows(&mut v_tilde).into_iter().map(|j| j + kept1.len()));
    let (m1, m2) = (kept1.len(), kept2.len());
    let mut z = DMatrix::zeros(m1 + m2, k);
    for i in 0..m1 {
        z.row_mut(i).copy_from(&(u_tilde.row(i) * s1[i]));
    }
    for j in 0..m2 {
        z.row_mut(m1 + j).copy_from(&(v_tilde.row(j) * s2[j]));
    }
    Ok(BiscEmbedding { kept1, kept2, singular_values: svd.s, u_tilde, v_tilde, zero_rows, z })
}

/// Bipartite spectral clustering. Isolated nodes get `None`.
pub fn bisc(graph: &BipartiteGraph, k: usize, spec: &InitSpec) -> Result<SideLabels> {
    spec.validate()?;
    let emb = bisc_embedding(graph, k, spec.seed)?;
    let km = kmeans(&emb.z, k, spec.kmeans_restarts, spec.seed)?;
    let mut side1 = vec![None; graph.n1()];
    let mut side2 = vec![None; graph.n2()];
    let m1 = emb.kept1.len();
    for (r, &i) in emb.kept1.iter().enumerate() {
        side1[i] = Some(km.labels[r]);
    }
    for (r, &j) in emb.kept2.iter().enumerate() {
        side2[j] = Some(km.labels[m1 + r]);
    }
    Ok(SideLabels { side1, side2 })
}

/// Regularized normalized adjacency of the unipartite embedding
/// `[[0, A], [A^T, 0]]`, with `tau / N` added to every entry.
struct RegularizedLaplacian<'a> {
    graph: &'a BipartiteGraph,
    inv_sqrt_deg: DVector<f64>,
    tau_over_n: f64,
}

impl SymmetricOp for RegularizedLaplacian<'_> {
    fn dim(&self) -> usize {
        self.graph.n1() + self.graph.n2()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n1, n2) = (self.graph.n1(), self.graph.n2());
        let mut y = x.clone();
        for mut col in y.column_iter_mut() {
            col.component_mul_assign(&self.inv_sqrt_deg);
        }
        let top = y.rows(0, n1).into_owned();
        let bottom = y.rows(n1, n2).into_owned();
        let mut out = DMatrix::zeros(n1 + n2, x.ncols());
        out.rows_mut(0, n1).copy_from(&self.graph.mul(&bottom));
        out.rows_mut(n1, n2).copy_from(&self.graph.mul_t(&top));
        for c in 0..x.ncols() {
            let s = self.tau_over_n * y.column(c).sum();
            for v in out.column_mut(c).iter_mut() {
                *v += s;
            }
        }
        for mut col in out.column_iter_mut() {
            col.component_mul_assign(&self.inv_sqrt_deg);
        }
        out
    }
}

struct Negated<'a, A: SymmetricOp>(&'a A);

impl<A: SymmetricOp> SymmetricOp for Negated<'_, A> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        -self.0.apply(x)
    }
}

/// The `k` eigenvectors with largest `|eigenvalue|` of an operator with
/// spectrum in `[-1, 1]`. On a bipartite graph eigenvalues come in `+-s`
/// pairs, so this picks up both signs.
fn leading_by_magnitude<A: SymmetricOp>(op: &A, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = op.dim();
    if n <= 4 * k + 20 {
        let dense = op.apply(&DMatrix::identity(n, n));
        let eig = ((&dense + dense.transpose()) * 0.5).symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()).then(a.cmp(&b)));
        return Ok(DMatrix::from_columns(&order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>()));
    }
    let opts = spectral_opts(seed);
    let top = top_eigen(op, k, 1.0, &opts)?;
    let bottom = top_eigen(&Negated(op), k, 1.0, &opts)?;
    let mut cands: Vec<(f64, DVector<f64>)> = top
        .values
        .iter()
        .zip(top.vectors.column_iter())
        .chain(bottom.values.iter().zip(bottom.vectors.column_iter()))
        .map(|(v, c)| (v.abs(), c.into_owned()))
        .collect();
    // stable: ties keep positive eigenvalues first
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(DMatrix::from_columns(&cands.into_iter().take(k).map(|(_, c)| c).collect::<Vec<_>>()))
}

/// Regularized spectral clustering, blind to the bipartite structure.
pub fn scp_init(graph: &BipartiteGraph, k: usize, spec: &InitSpec) -> Result<SideLabels> {
    spec.validate()?;
    let (n1, n2) = (graph.n1(), graph.n2());
    let n = n1 + n2;
    if k > n {
        return Err(Error::InvalidParameter(format!("K = {k} exceeds the node count {n}")));
    }
    let tau = graph.average_degree();
    let deg: Vec<f64> = graph.degrees1().into_iter().chain(graph.degrees2()).collect();
    if tau <= 0.0 {
        return Err(Error::InvalidGraph("graph has no edges".into()));
    }
    let inv_sqrt_deg = DVector::from_iterator(n, deg.iter().map(|d| (d + tau).powf(-0.5)));
    let op = RegularizedLaplacian { graph, inv_sqrt_deg, tau_over_n: tau / n as f64 };
    let mut emb = leading_by_magnitude(&op, k, spec.seed)?;
    normalize_rows(&mut emb);
    let km = kmeans(&emb, k, spec.kmeans_restarts, spec.seed)?;
    Ok(SideLabels {
        side1: km.labels[..n1].iter().map(|&l| Some(l)).collect(),
        side2: km.labels[n1..].iter().map(|&l| Some(l)).collect(),
    })
}

fn dirichlet_row(k: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 {
            return draws.into_iter().map(|g| g / s).collect();
        }
    }
}

fn perturb_side(z: &[usize], k: usize, omega: f64, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(z.len(), k);
    for (i, &label) in z.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidParameter(format!("label {label} out of range for K={k}")));
        }
        let noise = dirichlet_row(k, rng);
        let mut s = 0.0;
        for c in 0..k {
            let v = (1.0 - omega) * noise[c] + if c == label { omega } else { 0.0 };
            out[(i, c)] = v;
            s += v;
        }
        out.row_mut(i).unscale_mut(s);
    }
    Ok(out)
}

/// `tau_ri = omega * onehot(z_ri) + (1 - omega) * Dir(0.5 * 1_K)`.
pub fn perturb_truth(z1: &[usize], z2: &[usize], k: usize, omega: f64, rng: &mut Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidParameter(format!("omega must lie in [0, 1], got {omega}")));
    }
    Ok((perturb_side(z1, k, omega, rng)?, perturb_side(z2, k, omega, rng)?))
}

/// Pure Dirichlet rows, independent of any truth.
pub fn random_init(n1: usize, n2: usize, k: usize, rng: &mut Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let side = |n: usize, rng: &mut Rng| {
        let mut m = DMatrix::zeros(n, k);
        for i in 0..n {
            for (c, v) in dirichlet_row(k, rng).into_iter().enumerate() {
                m[(i, c)] = v;
            }
        }
        m
    };
    let a = side(n1, rng);
    (a, side(n2, rng))
}

/// k-means on the zero-padded covariate stack, ignoring the network.
pub fn covariate_kmeans(covariates: &CovariateSet, n1: usize, n2: usize, k: usize, spec: &InitSpec) -> Result<SideLabels> {
    if covariates.is_empty() {
        return Err(Error::InvalidParameter("covariate k-means needs covariates".into()));
    }
    let stack = covariates.padded_stack(n1, n2);
    let km = kmeans(&stack, k, spec.kmeans_restarts, spec.seed)?;
    Ok(SideLabels {
        side1: km.labels[..n1].iter().map(|&l| Some(l)).collect(),
        side2: km.labels[n1..].iter().map(|&l| Some(l)).collect(),
    })
}

/// Produces initial soft labels by any method; `truth` is required for the
/// perturbed-truth initializer.
pub fn initialize(
    graph: &BipartiteGraph,
    covariates: &CovariateSet,
    truth: Option<(&[usize], &[usize])>,
    k: usize,
    spec: &InitSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(spec.seed, &[0x1a17]));
    match spec.method {
        InitMethod::Bisc => Ok(bisc(graph, k, spec)?.to_soft(k)),
        InitMethod::Scp => Ok(scp_init(graph, k, spec)?.to_soft(k)),
        InitMethod::CovariateKmeans => Ok(covariate_kmeans(covariates, graph.n1(), graph.n2(), k, spec)?.to_soft(k)),
        InitMethod::Random => Ok(random_init(graph.n1(), graph.n2(), k, &mut rng)),
        InitMethod::PerturbedTruth => {
            let (z1, z2) = truth.ok_or_else(|| Error::InvalidParameter("perturbed-truth init needs true labels".into()))?;
            if z1.len() != graph.n1() || z2.len() != graph.n2() {
                return Err(Error::Dimension("true labels do not match the graph".into()));
            }
            perturb_truth(z1, z2, k, spec.omega, &mut rng)
        }
    }
}

/// Hard labels for methods that are evaluated on their own (not just as an init).
pub fn hard_labels(
    graph: &BipartiteGraph,
    covariates: &CovariateSet,
    truth: Option<(&[usize], &[usize])>,
    k: usize,
    spec: &InitSpec,
) -> Result<SideLabels> {
    match spec.method {
        InitMethod::Bisc => bisc(graph, k, spec),
        InitMethod::Scp => scp_init(graph, k, spec),
        InitMethod::CovariateKmeans => covariate_kmeans(covariates, graph.n1(), graph.n2(), k, spec),
        _ => {
            let (t1, t2) = initialize(graph, covariates, truth, k, spec)?;
            let f = |m: &DMatrix<f64>| crate::model::harden(m).into_iter().map(Some).collect();
            if spec.method == InitMethod::Random {
                warn!("evaluating random labels as a method");
            }
            Ok(SideLabels { side1: f(&t1), side2: f(&t2) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(k: usize, size1: usize, size2: usize) -> BipartiteGraph {
        let mut pairs = Vec::new();
        for b in 0..k {
            for i in 0..size1 {
                for j in 0..size2 {
                    pairs.push((b * size1 + i, b * size2 + j));
                }
            }
        }
        BipartiteGraph::from_pairs(k * size1, k * size2, pairs).unwrap()
    }

    #[test]
    fn disjoint_blocks_are_matched_exactly() {
        let g = blocks(3, 4, 6);
        let lab = bisc(&g, 3, &InitSpec::new(InitMethod::Bisc)).unwrap();
        for b in 0..3 {
            let l = lab.side1[b * 4].unwrap();
            assert!(lab.side1[b * 4..b * 4 + 4].iter().all(|&x| x == Some(l)));
            assert!(lab.side2[b * 6..b * 6 + 6].iter().all(|&x| x == Some(l)));
        }
    }

    #[test]
    fn single_cluster() {
        let g = blocks(2, 3, 3);
        let lab = bisc(&g, 1, &InitSpec::new(InitMethod::Bisc)).unwrap();
        assert!(lab.side1.iter().chain(&lab.side2).all(|&l| l == Some(0)));
        let lab = scp_init(&g, 1, &InitSpec::new(InitMethod::Scp)).unwrap();
        assert!(lab.side1.iter().chain(&lab.side2).all(|&l| l == Some(0)));
    }

    #[test]
    fn isolated_nodes_become_uniform() {
        let g = BipartiteGraph::from_pairs(3, 3, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let lab = bisc(&g, 1, &InitSpec::new(InitMethod::Bisc)).unwrap();
        assert_eq!(lab.side1[2], None);
        assert_eq!(lab.side2[2], None);
        let (t1, _) = lab.to_soft(2);
        assert_eq!(t1.row(2).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!((t1[(0, 0)] - 0.975).abs() < 1e-15);
    }

    #[test]
    fn scp_recovers_blocks_within_sides() {
        let g = blocks(3, 5, 5);
        let lab = scp_init(&g, 3, &InitSpec::new(InitMethod::Scp)).unwrap();
        for b in 0..3 {
            let l1 = lab.side1[b * 5];
            assert!(lab.side1[b * 5..b * 5 + 5].iter().all(|&x| x == l1));
            let l2 = lab.side2[b * 5];
            assert!(lab.side2[b * 5..b * 5 + 5].iter().all(|&x| x == l2));
        }
    }

    #[test]
    fn perturb_extremes() {
        let z1 = [0, 1, 2, 1];
        let z2 = [2, 2, 0];
        let mut rng = seeded(3);
        let (t1, t2) = perturb_truth(&z1, &z2, 3, 1.0, &mut rng).unwrap();
        assert_eq!(crate::model::harden(&t1), z1.to_vec());
        assert_eq!(t2[(0, 2)], 1.0);
        let (t1, _) = perturb_truth(&z1, &z2, 3, 0.0, &mut rng).unwrap();
        for r in t1.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!(perturb_truth(&z1, &z2, 3, 1.5, &mut rng).is_err());
    }

    #[test]
    fn zero_rows_are_uniformized() {
        let mut m = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        let zero = normalize_rows(&mut m);
        assert_eq!(zero, vec![1]);
        assert!((m[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((m.row(1).norm() - 1.0).abs() < 1e-15);
    }
}
