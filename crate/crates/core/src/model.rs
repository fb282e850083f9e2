//! Shared domain types: labels, covariates and model parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

/// Tolerance on row sums of soft-label matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Which side of the bipartite graph a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    One,
    Two,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::One => 0,
            Side::Two => 1,
        }
    }
}

/// Edge likelihood of the network part of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Bernoulli,
    #[default]
    Poisson,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "poisson" => Ok(Likelihood::Poisson),
            other => Err(Error::InvalidParameter(format!("unknown likelihood `{other}`"))),
        }
    }
}

/// Row-stochastic `n x K` matrix of label posteriors for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    side: Side,
    probs: DMatrix<f64>,
}

impl SoftLabels {
    /// Wraps a matrix, checking entries lie in `[0, 1]` and rows sum to one.
    pub fn new(side: Side, probs: DMatrix<f64>) -> Result<Self> {
        if probs.ncols() < 1 {
            return Err(Error::InvalidParameter("soft labels need K >= 1 columns".into()));
        }
        for (i, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidParameter(format!("row {i} has entries outside [0,1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { side, probs })
    }

    /// One-hot rows from hard labels in `0..k`.
    pub fn one_hot(side: Side, labels: &[usize], k: usize) -> Result<Self> {
        Self::smoothed(side, labels, k, 0.0)
    }

    /// `(1 - delta) * onehot + delta / K`.
    pub fn smoothed(side: Side, labels: &[usize], k: usize, delta: f64) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidParameter(format!("label {bad} out of range for K={k}")));
        }
        let base = delta / k as f64;
        let probs = DMatrix::from_fn(labels.len(), k, |i, c| if labels[i] == c { 1.0 - delta + base } else { base });
        Ok(Self { side, probs })
    }

    pub fn uniform(side: Side, n: usize, k: usize) -> Self {
        Self { side, probs: DMatrix::from_element(n, k, 1.0 / k as f64) }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.probs
    }

    /// Per-row argmax; ties resolve to the lowest index.
    pub fn harden(&self) -> Vec<usize> {
        harden(&self.probs)
    }

    /// Column sums `tau_bar`.
    pub fn column_sums(&self) -> DVector<f64> {
        column_sums(&self.probs)
    }
}

/// Per-row argmax of a matrix; ties resolve to the lowest index.
pub fn harden(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = logits.shape();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[(i, c)]);
        }
        let mut s = 0.0;
        for c in 0..k {
            let e = (logits[(i, c)] - m).exp();
            out[(i, c)] = e;
            s += e;
        }
        for c in 0..k {
            out[(i, c)] /= s;
        }
    }
    out
}

/// Floors entries at `floor` and renormalizes rows.
pub fn floor_rows(m: &mut DMatrix<f64>, floor: f64) {
    for i in 0..m.nrows() {
        let mut s = 0.0;
        for c in 0..m.ncols() {
            let v = m[(i, c)].max(floor);
            m[(i, c)] = v;
            s += v;
        }
        for c in 0..m.ncols() {
            m[(i, c)] /= s;
        }
    }
}

/// Optional node covariates for each side (`n_r x d_r`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateSet {
    pub x1: Option<DMatrix<f64>>,
    pub x2: Option<DMatrix<f64>>,
}

impl CovariateSet {
    pub fn none() -> Self {
        Self::default()
    }

    /// Validates row counts against the graph and that present sides have `d >= 1`.
    pub fn new(x1: Option<DMatrix<f64>>, x2: Option<DMatrix<f64>>, graph: &BipartiteGraph) -> Result<Self> {
        let set = Self { x1, x2 };
        set.check(graph)?;
        Ok(set)
    }

    pub fn check(&self, graph: &BipartiteGraph) -> Result<()> {
        for (x, n, name) in [(&self.x1, graph.n1(), "side 1"), (&self.x2, graph.n2(), "side 2")] {
            if let Some(x) = x {
                if x.nrows() != n {
                    return Err(Error::Dimension(format!("{name} covariates have {} rows, graph has {n} nodes", x.nrows())));
                }
                if x.ncols() == 0 {
                    return Err(Error::Dimension(format!("{name} covariates have zero columns")));
                }
            }
        }
        Ok(())
    }

    pub fn side(&self, side: Side) -> Option<&DMatrix<f64>> {
        match side {
            Side::One => self.x1.as_ref(),
            Side::Two => self.x2.as_ref(),
        }
    }

    /// `(d1, d2)`, zero for an absent side.
    pub fn dims(&self) -> (usize, usize) {
        (self.x1.as_ref().map_or(0, |x| x.ncols()), self.x2.as_ref().map_or(0, |x| x.ncols()))
    }

    pub fn total_dim(&self) -> usize {
        let (a, b) = self.dims();
        a + b
    }

    pub fn is_empty(&self) -> bool {
        self.total_dim() == 0
    }

    /// Stacks `[X1; X2]` with zero padding into `(n1 + n2) x (d1 + d2)`.
    pub fn padded_stack(&self, n1: usize, n2: usize) -> DMatrix<f64> {
        let (d1, d2) = self.dims();
        let mut out = DMatrix::zeros(n1 + n2, d1 + d2);
        if let Some(x1) = &self.x1 {
            out.view_mut((0, 0), (n1, d1)).copy_from(x1);
        }
        if let Some(x2) = &self.x2 {
            out.view_mut((n1, d1), (n2, d2)).copy_from(x2);
        }
        out
    }
}

/// Planted-partition block parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub p: f64,
    pub q: f64,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
}

impl BlockParams {
    pub fn uniform(p: f64, q: f64, k: usize) -> Self {
        Self { p, q, pi1: vec![1.0 / k as f64; k], pi2: vec![1.0 / k as f64; k] }
    }

    pub fn pi(&self, side: Side) -> &[f64] {
        match side {
            Side::One => &self.pi1,
            Side::Two => &self.pi2,
        }
    }
}

/// Prior on the latent community centers and per-side covariate noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma2: [f64; 2],
}

impl CovariateParams {
    /// `mu = 0`, `Sigma = I`, `sigma_r^2 = 1`.
    pub fn standard(dim: usize) -> Self {
        Self { mu: DVector::zeros(dim), sigma: DMatrix::identity(dim, dim), sigma2: [1.0, 1.0] }
    }
}

/// Degree propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeParams {
    pub theta1: DVector<f64>,
    pub theta2: DVector<f64>,
}

impl DegreeParams {
    pub fn ones(n1: usize, n2: usize) -> Self {
        Self { theta1: DVector::from_element(n1, 1.0), theta2: DVector::from_element(n2, 1.0) }
    }

    pub fn side(&self, side: Side) -> &DVector<f64> {
        match side {
            Side::One => &self.theta1,
            Side::Two => &self.theta2,
        }
    }
}

/// Gaussian variational posteriors `N(mu_tilde_k, sigma_tilde_k)` of the
/// stacked community centers.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGaussians {
    pub mu_tilde: Vec<DVector<f64>>,
    pub sigma_tilde: Vec<DMatrix<f64>>,
}

impl VariationalGaussians {
    pub fn standard(k: usize, dim: usize) -> Self {
        Self { mu_tilde: vec![DVector::zeros(dim); k], sigma_tilde: vec![DMatrix::identity(dim, dim); k] }
    }

    pub fn k(&self) -> usize {
        self.mu_tilde.len()
    }
}

/// Everything estimated by a fit besides the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub block: BlockParams,
    pub covariates: CovariateParams,
    pub degrees: DegreeParams,
    pub vargauss: VariationalGaussians,
}

/// Mutable state of one fitting run.
#[derive(Debug, Clone)]
pub struct FitState<'a> {
    pub graph: &'a BipartiteGraph,
    pub covariates: &'a CovariateSet,
    pub tau1: DMatrix<f64>,
    pub tau2: DMatrix<f64>,
    pub block: BlockParams,
    pub covparams: CovariateParams,
    pub degrees: DegreeParams,
    pub vargauss: VariationalGaussians,
    /// Whether the degree-corrected network term is in use.
    pub degree_corrected: bool,
    pub elbo_trace: Vec<f64>,
}

impl<'a> FitState<'a> {
    /// Initial state: `theta = 1`, `Sigma = Sigma_tilde = I`, `mu = mu_tilde = 0`, `sigma^2 = 1`.
    pub fn new(
        graph: &'a BipartiteGraph,
        covariates: &'a CovariateSet,
        tau1: DMatrix<f64>,
        tau2: DMatrix<f64>,
        block: BlockParams,
    ) -> Result<Self> {
        let k = tau1.ncols();
        let dim = covariates.total_dim();
        let state = Self {
            graph,
            covariates,
            tau1,
            tau2,
            block,
            covparams: CovariateParams::standard(dim),
            degrees: DegreeParams::ones(graph.n1(), graph.n2()),
            vargauss: VariationalGaussians::standard(k, dim),
            degree_corrected: false,
            elbo_trace: Vec::new(),
        };
        state.check_dims()?;
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.tau1.ncols()
    }

    pub fn tau(&self, side: Side) -> &DMatrix<f64> {
        match side {
            Side::One => &self.tau1,
            Side::Two => &self.tau2,
        }
    }

    pub fn check_dims(&self) -> Result<()> {
        let k = self.k();
        let (n1, n2) = (self.graph.n1(), self.graph.n2());
        if self.tau1.nrows() != n1 || self.tau2.nrows() != n2 {
            return Err(Error::Dimension(format!(
                "tau is {}x{} / {}x{}, graph is {n1}x{n2}",
                self.tau1.nrows(),
                self.tau1.ncols(),
                self.tau2.nrows(),
                self.tau2.ncols()
            )));
        }
        if self.tau2.ncols() != k || self.block.pi1.len() != k || self.block.pi2.len() != k || self.vargauss.k() != k {
            return Err(Error::Dimension("inconsistent number of communities".into()));
        }
        if self.degrees.theta1.len() != n1 || self.degrees.theta2.len() != n2 {
            return Err(Error::Dimension("theta length does not match graph".into()));
        }
        self.covariates.check(self.graph)?;
        let dim = self.covariates.total_dim();
        if self.covparams.mu.len() != dim
            || self.covparams.sigma.shape() != (dim, dim)
            || self.vargauss.mu_tilde.iter().any(|m| m.len() != dim)
            || self.vargauss.sigma_tilde.iter().any(|s| s.shape() != (dim, dim))
        {
            return Err(Error::Dimension("covariate parameter dimensions disagree with covariates".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            block: self.block.clone(),
            covariates: self.covparams.clone(),
            degrees: self.degrees.clone(),
            vargauss: self.vargauss.clone(),
        }
    }
}
