//! Synthetic networks from the matched bipartite SBM, parameterized by
//! expected average degree and out-in ratio.
//!
//! Draws come from one rng stream in a fixed order: labels (side 1, side 2),
//! community centers, covariates, degree parameters, edges (row-major).

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Pareto, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, Edge};
use crate::model::{CovariateSet, Likelihood};
use crate::rng::{seeded, Rng};

/// Attempts at drawing labels that leave no community empty.
pub const MAX_LABEL_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n1: usize,
    pub n2: usize,
    pub k: usize,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    /// Expected average degree `2 E|edges| / (n1 + n2)`.
    pub lambda_deg: f64,
    /// Out-in ratio `q / p`.
    pub alpha: f64,
    /// Scale of the center prior, `Sigma = nu I`.
    pub nu: f64,
    /// Full center-prior covariance of size `d1 + d2`; overrides `nu` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_full: Option<Vec<Vec<f64>>>,
    pub d1: usize,
    pub d2: usize,
    /// Covariate noise standard deviations per side.
    pub sigma_cov: [f64; 2],
    /// Pareto shape of the degree parameters; `None` turns degree correction off.
    pub pareto_a: Option<f64>,
    pub likelihood: Likelihood,
    /// Clamp Bernoulli rates above one instead of failing.
    #[serde(default)]
    pub clamp_rates: bool,
    pub seed: u64,
}

impl GenConfig {
    /// Uniform community proportions, no covariates, no degree correction.
    pub fn new(n1: usize, n2: usize, k: usize, lambda_deg: f64, alpha: f64) -> Self {
        Self {
            n1,
            n2,
            k,
            pi1: vec![1.0 / k as f64; k],
            pi2: vec![1.0 / k as f64; k],
            lambda_deg,
            alpha,
            nu: 0.0,
            sigma_full: None,
            d1: 0,
            d2: 0,
            sigma_cov: [0.5, 0.5],
            pareto_a: None,
            likelihood: Likelihood::Poisson,
            clamp_rates: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 || self.n1 == 0 || self.n2 == 0 {
            return bad("n1, n2 and K must be positive".into());
        }
        for (name, pi) in [("pi1", &self.pi1), ("pi2", &self.pi2)] {
            if pi.len() != self.k {
                return bad(format!("{name} has length {}, expected {}", pi.len(), self.k));
            }
            if pi.iter().any(|&v| !(v >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("{name} is not a probability vector"));
            }
        }
        if !(self.lambda_deg > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda_deg));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.nu >= 0.0) {
            return bad(format!("nu must be nonnegative, got {}", self.nu));
        }
        if self.sigma_cov.iter().any(|&s| !(s >= 0.0)) {
            return bad("covariate noise must be nonnegative".into());
        }
        if let Some(a) = self.pareto_a {
            if !(a > 1.0) {
                return bad(format!("Pareto shape must exceed 1, got {a}"));
            }
        }
        if let Some(s) = &self.sigma_full {
            let d = self.d1 + self.d2;
            if s.len() != d || s.iter().any(|r| r.len() != d) {
                return bad(format!("full covariance must be {d}x{d}"));
            }
        }
        Ok(())
    }

    pub fn degree_corrected(&self) -> bool {
        self.pareto_a.is_some()
    }

    /// Center prior covariance.
    pub fn center_covariance(&self) -> DMatrix<f64> {
        let d = self.d1 + self.d2;
        match &self.sigma_full {
            Some(rows) => DMatrix::from_fn(d, d, |i, j| rows[i][j]),
            None => DMatrix::identity(d, d) * self.nu,
        }
    }
}

/// Rates `(p, q)` giving expected average degree `lambda_deg`.
pub fn solve_pq(cfg: &GenConfig) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&cfg.alpha) {
        return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1), got {}", cfg.alpha)));
    }
    let overlap: f64 = cfg.pi1.iter().zip(&cfg.pi2).map(|(a, b)| a * b).sum();
    if !(overlap > 0.0) {
        return Err(Error::InvalidParameter("community proportions do not overlap".into()));
    }
    let p = cfg.lambda_deg / (harmonic_size(cfg.n1, cfg.n2) * (cfg.alpha + (1.0 - cfg.alpha) * overlap));
    let q = cfg.alpha * p;
    if cfg.likelihood == Likelihood::Bernoulli && p > 1.0 {
        return Err(Error::Infeasible(format!("lambda = {} needs p = {p} > 1", cfg.lambda_deg)));
    }
    Ok((p, q))
}

/// `2 n1 n2 / (n1 + n2)`
pub fn harmonic_size(n1: usize, n2: usize) -> f64 {
    2.0 * n1 as f64 * n2 as f64 / (n1 + n2) as f64
}

/// Expected average degree for given rates and proportions.
pub fn expected_degree(n1: usize, n2: usize, pi1: &[f64], pi2: &[f64], p: f64, q: f64) -> f64 {
    let overlap: f64 = pi1.iter().zip(pi2).map(|(a, b)| a * b).sum();
    harmonic_size(n1, n2) * (overlap * p + (1.0 - overlap) * q)
}

fn categorical(pi: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * pi.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in pi.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// I.i.d. categorical labels.
pub fn generate_labels(n: usize, pi: &[f64], rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| categorical(pi, rng)).collect()
}

/// Community centers `(K x (d1 + d2))` and covariates around them.
pub fn generate_covariates(z1: &[usize], z2: &[usize], cfg: &GenConfig, rng: &mut Rng) -> Result<(CovariateSet, DMatrix<f64>)> {
    let d = cfg.d1 + cfg.d2;
    if d == 0 {
        return Err(Error::InvalidParameter("covariate generation needs d1 + d2 >= 1".into()));
    }
    let cov = cfg.center_covariance();
    let factor = if cov.iter().all(|&v| v == 0.0) {
        DMatrix::zeros(d, d)
    } else {
        cov.cholesky().ok_or_else(|| Error::InvalidParameter("center covariance is not positive definite".into()))?.l()
    };
    let mut centers = DMatrix::zeros(cfg.k, d);
    for k in 0..cfg.k {
        let w = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        centers.row_mut(k).copy_from(&(&factor * w).transpose());
    }
    let draw = |z: &[usize], offset: usize, dim: usize, sd: f64, rng: &mut Rng| {
        DMatrix::from_fn(z.len(), dim, |i, a| {
            let e: f64 = StandardNormal.sample(rng);
            centers[(z[i], offset + a)] + sd * e
        })
    };
    let mut sides = [None, None];
    for (r, (z, offset, dim)) in [(z1, 0, cfg.d1), (z2, cfg.d1, cfg.d2)].into_iter().enumerate() {
        if dim > 0 {
            let t = draw(z, offset, dim, cfg.sigma_cov[r], rng);
            sides[r] = Some(t);
        }
    }
    let [x1, x2] = sides;
    Ok((CovariateSet { x1, x2 }, centers))
}

/// Degree parameters: Pareto with shape `a` and scale `(a - 1) / a`
/// (population mean one), rescaled so every community averages exactly one.
pub fn generate_theta(z: &[usize], k: usize, pareto_a: Option<f64>, rng: &mut Rng) -> Result<DVector<f64>> {
    let Some(a) = pareto_a else {
        return Ok(DVector::from_element(z.len(), 1.0));
    };
    let dist = Pareto::new((a - 1.0) / a, a).map_err(|e| Error::InvalidParameter(format!("Pareto({a}): {e}")))?;
    let mut theta = DVector::from_fn(z.len(), |_, _| dist.sample(rng));
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in z.iter().enumerate() {
        sums[c] += theta[i];
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Infeasible(format!("community {c} is empty")));
    }
    for (i, &c) in z.iter().enumerate() {
        theta[i] /= sums[c] / counts[c] as f64;
    }
    Ok(theta)
}

/// Independent edges with rate `theta1_i theta2_j (p if matched else q)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_network(
    z1: &[usize],
    z2: &[usize],
    theta1: &DVector<f64>,
    theta2: &DVector<f64>,
    p: f64,
    q: f64,
    likelihood: Likelihood,
    clamp: bool,
    rng: &mut Rng,
) -> Result<BipartiteGraph> {
    if theta1.len() != z1.len() || theta2.len() != z2.len() {
        return Err(Error::Dimension("degree parameters do not match labels".into()));
    }
    if !(p >= 0.0 && q >= 0.0) {
        return Err(Error::InvalidParameter(format!("rates must be nonnegative, got p={p}, q={q}")));
    }
    if likelihood == Likelihood::Bernoulli {
        let worst = theta1.max() * theta2.max() * p.max(q);
        if worst > 1.0 {
            if !clamp {
                return Err(Error::Infeasible(format!("Bernoulli edge rate {worst} exceeds 1")));
            }
            warn!("clamping Bernoulli edge rates at 1 (max rate {worst})");
        }
    }
    let mut edges = Vec::new();
    for (i, &a) in z1.iter().enumerate() {
        for (j, &b) in z2.iter().enumerate() {
            let rate = theta1[i] * theta2[j] * if a == b { p } else { q };
            let w = match likelihood {
                Likelihood::Bernoulli => u32::from(Bernoulli::new(rate.min(1.0)).expect("rate in [0, 1]").sample(rng)),
                Likelihood::Poisson => {
                    if rate > 0.0 {
                        Poisson::new(rate).map_err(|e| Error::Numerical(format!("Poisson({rate}): {e}")))?.sample(rng) as u32
                    } else {
                        0
                    }
                }
            };
            if w > 0 {
                edges.push(Edge { i, j, w });
            }
        }
    }
    BipartiteGraph::new(z1.len(), z2.len(), edges)
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub graph: BipartiteGraph,
    pub covariates: CovariateSet,
    pub z1: Vec<usize>,
    pub z2: Vec<usize>,
    pub theta1: DVector<f64>,
    pub theta2: DVector<f64>,
    /// `K x (d1 + d2)`; empty when there are no covariates.
    pub centers: DMatrix<f64>,
    pub p: f64,
    pub q: f64,
}

fn all_present(z: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &c in z {
        seen[c] = true;
    }
    seen.into_iter().all(|s| s)
}

/// Draws a full dataset from `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<SimulatedData> {
    cfg.validate()?;
    let (p, q) = solve_pq(cfg)?;
    let mut rng = seeded(cfg.seed);
    let mut labels = None;
    for _ in 0..MAX_LABEL_ATTEMPTS {
        let z1 = generate_labels(cfg.n1, &cfg.pi1, &mut rng);
        let z2 = generate_labels(cfg.n2, &cfg.pi2, &mut rng);
        // empty communities only matter where degree parameters are normalized per community
        if !cfg.degree_corrected() || (all_present(&z1, cfg.k) && all_present(&z2, cfg.k)) {
            labels = Some((z1, z2));
            break;
        }
    }
    let (z1, z2) = labels.ok_or_else(|| {
        Error::Infeasible(format!("no label draw without empty communities in {MAX_LABEL_ATTEMPTS} attempts"))
    })?;
    let (covariates, centers) = if cfg.d1 + cfg.d2 > 0 {
        generate_covariates(&z1, &z2, cfg, &mut rng)?
    } else {
        (CovariateSet::none(), DMatrix::zeros(cfg.k, 0))
    };
    let theta1 = generate_theta(&z1, cfg.k, cfg.pareto_a, &mut rng)?;
    let theta2 = generate_theta(&z2, cfg.k, cfg.pareto_a, &mut rng)?;
    let graph = generate_network(&z1, &z2, &theta1, &theta2, p, q, cfg.likelihood, cfg.clamp_rates, &mut rng)?;
    Ok(SimulatedData { graph, covariates, z1, z2, theta1, theta2, centers, p, q })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_round_trip() {
        let cfg = GenConfig::new(200, 800, 5, 3.1, 1.0 / 7.0);
        let (p, q) = solve_pq(&cfg).unwrap();
        assert!((p - 0.03082).abs() < 5e-6, "{p}");
        assert!((q - 0.004403).abs() < 5e-7, "{q}");
        let back = expected_degree(200, 800, &cfg.pi1, &cfg.pi2, p, q);
        assert!((back - 3.1).abs() < 1e-12);
    }

    #[test]
    fn equal_sizes_closed_form() {
        let cfg = GenConfig::new(50, 50, 4, 6.0, 0.2);
        let (p, _) = solve_pq(&cfg).unwrap();
        assert!((p - 6.0 / (50.0 * (0.2 + 0.8 / 4.0))).abs() < 1e-14);
    }

    #[test]
    fn infeasible_bernoulli_rate() {
        let mut cfg = GenConfig::new(10, 10, 2, 50.0, 0.0);
        cfg.likelihood = Likelihood::Bernoulli;
        assert!(matches!(solve_pq(&cfg), Err(Error::Infeasible(_))));
        cfg.likelihood = Likelihood::Poisson;
        assert!(solve_pq(&cfg).is_ok());
    }

    #[test]
    fn degenerate_label_draws() {
        let mut rng = seeded(1);
        assert!(generate_labels(20, &[1.0], &mut rng).iter().all(|&l| l == 0));
        assert!(generate_labels(20, &[1.0, 0.0, 0.0], &mut rng).iter().all(|&l| l == 0));
    }

    #[test]
    fn label_frequencies() {
        let mut rng = seeded(2);
        let z = generate_labels(100_000, &[0.2; 5], &mut rng);
        for k in 0..5 {
            let f = z.iter().filter(|&&l| l == k).count() as f64 / 1e5;
            assert!((f - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn theta_means_are_exactly_one() {
        let mut rng = seeded(3);
        let z: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let theta = generate_theta(&z, 3, Some(2.0), &mut rng).unwrap();
        for k in 0..3 {
            let m: f64 = z.iter().zip(theta.iter()).filter(|(&l, _)| l == k).map(|(_, t)| t).sum::<f64>() / 100.0;
            assert!((m - 1.0).abs() < 1e-12);
        }
        assert!(generate_theta(&[0, 0], 2, Some(2.0), &mut rng).is_err());
        assert!(generate_theta(&[0, 1], 2, None, &mut rng).unwrap().iter().all(|&t| t == 1.0));
    }

    #[test]
    fn pareto_population_mean() {
        let mut rng = seeded(4);
        let dist = Pareto::new(0.5, 2.0).unwrap();
        let m: f64 = (0..100_000).map(|_| dist.sample(&mut rng)).sum::<f64>() / 1e5;
        assert!((0.9..=1.2).contains(&m), "{m}");
    }

    #[test]
    fn network_extremes() {
        let z1 = [0, 1, 0];
        let z2 = [1, 1, 0, 0];
        let ones1 = DVector::from_element(3, 1.0);
        let ones2 = DVector::from_element(4, 1.0);
        let mut rng = seeded(5);
        let g = generate_network(&z1, &z2, &ones1, &ones2, 0.0, 0.0, Likelihood::Poisson, false, &mut rng).unwrap();
        assert_eq!(g.nnz(), 0);
        let g = generate_network(&z1, &z2, &ones1, &ones2, 1.0, 1.0, Likelihood::Bernoulli, false, &mut rng).unwrap();
        assert_eq!(g.nnz(), 12);
        let big = DVector::from_element(3, 3.0);
        assert!(generate_network(&z1, &z2, &big, &ones2, 0.5, 0.5, Likelihood::Bernoulli, false, &mut rng).is_err());
        assert!(generate_network(&z1, &z2, &big, &ones2, 0.5, 0.5, Likelihood::Bernoulli, true, &mut rng).is_ok());
    }

    #[test]
    fn noiseless_covariates_sit_on_centers() {
        let mut cfg = GenConfig::new(30, 40, 3, 2.0, 0.1);
        cfg.d1 = 2;
        cfg.d2 = 1;
        cfg.nu = 10.0;
        cfg.sigma_cov = [0.0, 0.0];
        let mut rng = seeded(6);
        let z1: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let z2: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let (cov, centers) = generate_covariates(&z1, &z2, &cfg, &mut rng).unwrap();
        let x1 = cov.x1.unwrap();
        let x2 = cov.x2.unwrap();
        for i in 0..30 {
            assert_eq!(x1[(i, 0)], centers[(z1[i], 0)]);
            assert_eq!(x1[(i, 1)], centers[(z1[i], 1)]);
        }
        for j in 0..40 {
            assert_eq!(x2[(j, 0)], centers[(z2[j], 2)]);
        }
        cfg.nu = 0.0;
        let (cov, _) = generate_covariates(&z1, &z2, &cfg, &mut rng).unwrap();
        assert!(cov.x1.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let mut cfg = GenConfig::new(40, 60, 3, 4.0, 0.2);
        cfg.d1 = 1;
        cfg.d2 = 2;
        cfg.nu = 1.0;
        cfg.pareto_a = Some(2.0);
        cfg.seed = 11;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.z1, b.z1);
        assert_eq!(a.theta2, b.theta2);
        assert_eq!(a.covariates.x2, b.covariates.x2);
    }
}
