//! Variational objective (ELBO) of the matched bipartite SBM.
//!
//! Constant convention: every term that does not depend on any optimized
//! quantity is dropped. Concretely the full objective equals
//! `elbo(..) + dropped_constant(..)`, where the dropped part collects the
//! Gaussian `log(2 pi)` normalizers of the covariate likelihood, the center
//! prior and the center posteriors, the `K (d1 + d2) / 2` trace term of the
//! posterior entropy, and `-sum log(A_ij!)` of the Poisson likelihood.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::model::{column_sums, FitState, Likelihood, Side};
use crate::vb::{update_beta, update_phi};

/// `(tr(tau1^T A tau2), <tau1_bar, tau2_bar>)`, i.e. `sum_ij gamma_ij A_ij`
/// and `sum_ij gamma_ij`, touching only the stored edges.
pub fn gamma_aggregate(tau1: &DMatrix<f64>, tau2: &DMatrix<f64>, graph: &BipartiteGraph) -> Result<(f64, f64)> {
    if tau1.nrows() != graph.n1() || tau2.nrows() != graph.n2() || tau1.ncols() != tau2.ncols() {
        return Err(Error::Dimension(format!(
            "tau shapes {:?} / {:?} do not fit a {}x{} graph",
            tau1.shape(),
            tau2.shape(),
            graph.n1(),
            graph.n2()
        )));
    }
    let k = tau1.ncols();
    let mut edge_sum = 0.0;
    for e in graph.edges() {
        let mut g = 0.0;
        for c in 0..k {
            g += tau1[(e.i, c)] * tau2[(e.j, c)];
        }
        edge_sum += f64::from(e.w) * g;
    }
    let total = column_sums(tau1).dot(&column_sums(tau2));
    Ok((edge_sum, total))
}

/// The additive constant separating [`elbo`] from the full objective.
pub fn dropped_constant(n1: usize, n2: usize, d1: usize, d2: usize, k: usize) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let d = (d1 + d2) as f64;
    -0.5 * (n1 * d1 + n2 * d2) as f64 * ln2pi + 0.5 * k as f64 * d
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn log_det_pd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Network part `E_q[log p(A | Z, theta)]` (up to `-sum log A_ij!`).
fn network_term(state: &FitState<'_>, likelihood: Likelihood) -> Result<f64> {
    let g = state.graph;
    let (p, q) = (state.block.p, state.block.q);
    let (edge_sum, total) = gamma_aggregate(&state.tau1, &state.tau2, g)?;
    let w = g.total_weight() as f64;
    let pairs = g.n1() as f64 * g.n2() as f64;
    let (phi0, phi1) = update_phi(p, q, likelihood);
    if state.degree_corrected {
        if likelihood != Likelihood::Poisson {
            return Err(Error::InvalidParameter("degree correction requires the Poisson likelihood".into()));
        }
        let th1 = &state.degrees.theta1;
        let th2 = &state.degrees.theta2;
        let a = state.tau1.transpose() * th1;
        let b = state.tau2.transpose() * th2;
        let mut theta_term = 0.0;
        for (i, d) in g.degrees1().into_iter().enumerate() {
            if d > 0.0 {
                theta_term += d * th1[i].ln();
            }
        }
        for (j, d) in g.degrees2().into_iter().enumerate() {
            if d > 0.0 {
                theta_term += d * th2[j].ln();
            }
        }
        return Ok(phi0 * a.dot(&b) + phi1 * edge_sum - q * th1.sum() * th2.sum() + w * q.ln() + theta_term);
    }
    let base = match likelihood {
        Likelihood::Bernoulli => {
            if g.max_weight() > 1 {
                return Err(Error::InvalidGraph("weighted edges require the Poisson likelihood".into()));
            }
            w * (q / (1.0 - q)).ln() + pairs * (1.0 - q).ln()
        }
        Likelihood::Poisson => w * q.ln() - q * pairs,
    };
    Ok(base + phi1 * edge_sum + phi0 * total)
}

/// Evaluates the variational objective `J` of `state` under the dropped-constant
/// convention documented at module level.
pub fn elbo(state: &FitState<'_>, likelihood: Likelihood) -> Result<f64> {
    state.check_dims()?;
    let k = state.k();
    let mut j = network_term(state, likelihood)?;

    // label prior and entropy
    for side in [Side::One, Side::Two] {
        let tau = state.tau(side);
        let pi = state.block.pi(side);
        for c in 0..k {
            let col = tau.column(c);
            let mass = col.sum();
            if mass > 0.0 {
                j += mass * pi[c].ln();
            }
            j -= col.iter().map(|&t| xlogx(t)).sum::<f64>();
        }
    }

    let dim = state.covariates.total_dim();
    if dim == 0 {
        return Ok(j);
    }
    let (d1, d2) = state.covariates.dims();
    let betas = update_beta(state.covariates, &state.vargauss, state.covparams.sigma2);
    for (side, d, n) in [(Side::One, d1, state.graph.n1()), (Side::Two, d2, state.graph.n2())] {
        if let Some(beta) = &betas.beta[side.index()] {
            j += state.tau(side).component_mul(beta).sum();
            j -= 0.5 * (d * n) as f64 * state.covparams.sigma2[side.index()].ln();
        }
    }

    let sigma = &state.covparams.sigma;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("prior covariance is not positive definite".into()))?;
    let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    // K * tr(Sigma^-1 S) = sum_k tr(Sigma^-1 (Sigma_tilde_k + d_k d_k^T))
    let mut trace_term = 0.0;
    let mut log_det_post = 0.0;
    for (mt, st) in state.vargauss.mu_tilde.iter().zip(&state.vargauss.sigma_tilde) {
        let dev = mt - &state.covparams.mu;
        trace_term += chol.solve(st).trace() + dev.dot(&chol.solve(&dev));
        log_det_post += log_det_pd(st, "posterior covariance")?;
    }
    j -= 0.5 * (k as f64 * log_det_sigma + trace_term);
    j += 0.5 * log_det_post;
    Ok(j)
}
