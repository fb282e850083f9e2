//! Variational block coordinate ascent for the matched bipartite SBM.
//!
//! [`fit`] runs the outer loop; the individual block updates are exposed so
//! they can be tested (and reused) on their own.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo, gamma_aggregate};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::model::{
    column_sums, floor_rows, row_softmax, BlockParams, CovariateSet, FitState, Likelihood, ModelParams,
    Side, SoftLabels, VariationalGaussians,
};

/// Entries of `tau` are floored here before any logarithm.
pub const TAU_FLOOR: f64 = 1e-12;
/// Lower bound on the covariate noise variances.
pub const SIGMA2_FLOOR: f64 = 1e-8;
/// Relative ridge added to the prior covariance.
pub const PRIOR_RIDGE: f64 = 1e-8;
/// Column mass below which a community counts as empty.
pub const EMPTY_MASS: f64 = 1e-6;

const BERNOULLI_CLAMP: f64 = 1e-9;
const POISSON_FLOOR: f64 = 1e-12;

/// How the label-update multipliers are driven to the constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMethod {
    /// Damped Newton steps on the `K`-dimensional dual with backtracking.
    Newton,
    /// Plain gradient steps with halving on dual-objective decrease; `None`
    /// starts from `1 / n_r`.
    Gradient { step: Option<f64> },
}

/// Settings of the dual solver used for the constrained label update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualOptions {
    pub method: DualMethod,
    pub max_iter: usize,
    /// Tolerance on the attainable part of `||tau^T (theta - 1)||_inf`.
    pub tol: f64,
    /// Multiplier norm beyond which the dual is declared divergent.
    pub lambda_cap: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self { method: DualMethod::Newton, max_iter: 200, tol: 1e-6, lambda_cap: 1e8 }
    }
}

/// Settings of the Douglas-Rachford propensity update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrOptions {
    pub t: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DrOptions {
    fn default() -> Self {
        Self { t: 1.0, max_iter: 500, tol: 1e-8 }
    }
}

/// How `(p, q, pi)` are set before the first label update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PqInit {
    /// Estimate from the initial labels.
    FromTau,
    /// Use the given `(p, q)` and uniform `pi` in the first sweep.
    Fixed(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub k: usize,
    pub likelihood: Likelihood,
    pub degree_correct: bool,
    pub use_covariates: bool,
    pub eps: f64,
    pub max_outer: usize,
    pub dual: DualOptions,
    pub dr: DrOptions,
    pub pq_init: PqInit,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            likelihood: Likelihood::Poisson,
            degree_correct: false,
            use_covariates: true,
            eps: 1e-2,
            max_outer: 100,
            dual: DualOptions::default(),
            dr: DrOptions::default(),
            pq_init: PqInit::FromTau,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::InvalidParameter(format!("eps must lie in (0, 1], got {}", self.eps)));
        }
        if matches!(self.dual.method, DualMethod::Gradient { step: Some(s) } if s <= 0.0) || self.dr.t <= 0.0 {
            return Err(Error::InvalidParameter("step sizes must be positive".into()));
        }
        if self.degree_correct && self.likelihood != Likelihood::Poisson {
            return Err(Error::InvalidParameter("degree correction requires the Poisson likelihood".into()));
        }
        if let PqInit::Fixed(p, q) = self.pq_init {
            if !(p > 0.0 && q > 0.0) {
                return Err(Error::InvalidParameter("fixed (p, q) must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub tau1: SoftLabels,
    pub tau2: SoftLabels,
    pub params: ModelParams,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Outer iterations (1-based) in which an empty community was re-spread;
    /// the objective may drop across these.
    pub reseeded_at: Vec<usize>,
}

/// `(phi0, phi1)` with `h(p, q; a) = a * phi1 + phi0`.
pub fn update_phi(p: f64, q: f64, likelihood: Likelihood) -> (f64, f64) {
    match likelihood {
        Likelihood::Bernoulli => (((1.0 - p) / (1.0 - q)).ln(), (p * (1.0 - q) / (q * (1.0 - p))).ln()),
        Likelihood::Poisson => (q - p, (p / q).ln()),
    }
}

/// Per-side `beta_r` (`n_r x K`) and `beta'_r = -2 sigma_r^2 beta_r`; `None`
/// for a side without covariates.
#[derive(Debug, Clone)]
pub struct Betas {
    pub beta: [Option<DMatrix<f64>>; 2],
    pub beta_prime: [Option<DMatrix<f64>>; 2],
}

fn side_offset(side: Side, d1: usize) -> usize {
    match side {
        Side::One => 0,
        Side::Two => d1,
    }
}

pub fn update_beta(covariates: &CovariateSet, vargauss: &VariationalGaussians, sigma2: [f64; 2]) -> Betas {
    let (d1, _) = covariates.dims();
    let k = vargauss.k();
    let mut beta = [None, None];
    let mut beta_prime = [None, None];
    for side in [Side::One, Side::Two] {
        let Some(x) = covariates.side(side) else { continue };
        let (n, d) = x.shape();
        let off = side_offset(side, d1);
        let mut bp = DMatrix::zeros(n, k);
        for c in 0..k {
            let tr: f64 = (off..off + d).map(|a| vargauss.sigma_tilde[c][(a, a)]).sum();
            let center = vargauss.mu_tilde[c].rows(off, d);
            for i in 0..n {
                let mut dist = 0.0;
                for a in 0..d {
                    let diff = x[(i, a)] - center[a];
                    dist += diff * diff;
                }
                bp[(i, c)] = tr + dist;
            }
        }
        let s2 = sigma2[side.index()];
        beta[side.index()] = Some(bp.map(|v| -v / (2.0 * s2)));
        beta_prime[side.index()] = Some(bp);
    }
    Betas { beta, beta_prime }
}

/// Unconstrained label logits `phi1 A tau_other + phi0 1 tau_bar_other^T + 1 log(pi)^T + beta`.
pub fn tau_logits(
    side: Side,
    graph: &BipartiteGraph,
    tau_other: &DMatrix<f64>,
    phi: (f64, f64),
    beta: Option<&DMatrix<f64>>,
    pi: &[f64],
) -> DMatrix<f64> {
    let (phi0, phi1) = phi;
    let mut a = match side {
        Side::One => graph.mul(tau_other),
        Side::Two => graph.mul_t(tau_other),
    };
    a *= phi1;
    let other_bar = column_sums(tau_other);
    for c in 0..a.ncols() {
        let shift = phi0 * other_bar[c] + pi[c].ln();
        for v in a.column_mut(c).iter_mut() {
            *v += shift;
        }
    }
    if let Some(b) = beta {
        a += b;
    }
    a
}

#[derive(Debug, Clone)]
pub struct TauUpdate {
    pub tau: DMatrix<f64>,
    /// Softmax evaluations accepted by the dual ascent (1 when `theta = 1`).
    pub iterations: usize,
    /// Largest attainable-constraint violation of the returned labels.
    pub constraint_norm: f64,
    pub converged: bool,
    /// Final multipliers, a warm start for the next update.
    pub multipliers: DVector<f64>,
}

struct DualPoint {
    tau: DMatrix<f64>,
    grad: DVector<f64>,
    value: f64,
}

fn dual_point(logits: &DMatrix<f64>, c: &DVector<f64>, lambda: &DVector<f64>, drift: f64) -> DualPoint {
    let (n, k) = logits.shape();
    let mut tau = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    let mut value = 0.0;
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for (col, v) in row.iter_mut().enumerate() {
            *v = logits[(i, col)] + c[i] * lambda[col];
            m = m.max(*v);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        value -= m + total.ln();
        for (col, v) in row.iter().enumerate() {
            tau[(i, col)] = v / total;
        }
    }
    // The constraints sum to sum_i c_i over k, which the labels cannot change;
    // only the component orthogonal to the all-ones direction is attainable.
    let mut grad = tau.tr_mul(c);
    grad.add_scalar_mut(-drift);
    DualPoint { tau, grad, value }
}

/// Label update for one side: maximizes the label part of the objective
/// subject to `tau^T (theta - 1) = 0` by dual ascent on the multipliers.
/// With `theta = 1` this is a single row-softmax.
#[allow(clippy::too_many_arguments)]
pub fn update_tau_side(
    side: Side,
    graph: &BipartiteGraph,
    tau_other: &DMatrix<f64>,
    phi: (f64, f64),
    beta: Option<&DMatrix<f64>>,
    pi: &[f64],
    theta: &DVector<f64>,
    warm: Option<&DVector<f64>>,
    opts: &DualOptions,
) -> Result<TauUpdate> {
    let n = match side {
        Side::One => graph.n1(),
        Side::Two => graph.n2(),
    };
    if theta.len() != n || pi.len() != tau_other.ncols() {
        return Err(Error::Dimension("theta or pi does not match the label update".into()));
    }
    let logits = tau_logits(side, graph, tau_other, phi, beta, pi);
    match warm {
        Some(start) => constrained_softmax_from(&logits, theta, start, opts),
        None => constrained_softmax(&logits, theta, opts),
    }
}

/// Solves `max_X sum_ik x_ik (a_ik - log x_ik)` over row-stochastic `X` with
/// `X^T (theta - 1) = 0` through its dual in the multipliers.
pub fn constrained_softmax(logits: &DMatrix<f64>, theta: &DVector<f64>, opts: &DualOptions) -> Result<TauUpdate> {
    constrained_softmax_from(logits, theta, &DVector::zeros(logits.ncols()), opts)
}

/// [`constrained_softmax`] with the multipliers started at `start`.
pub fn constrained_softmax_from(
    logits: &DMatrix<f64>,
    theta: &DVector<f64>,
    start: &DVector<f64>,
    opts: &DualOptions,
) -> Result<TauUpdate> {
    let (n, k) = logits.shape();
    if theta.len() != n || start.len() != k {
        return Err(Error::Dimension("theta or the starting multipliers do not match the logits".into()));
    }
    let c = theta.map(|t| t - 1.0);
    let drift = c.sum() / k as f64;
    let mut lambda = if start.iter().all(|v| v.is_finite()) { start.clone() } else { DVector::zeros(k) };
    let mut step = match opts.method {
        DualMethod::Gradient { step } => step.unwrap_or(1.0 / n.max(1) as f64),
        DualMethod::Newton => 1.0,
    };
    let mut cur = dual_point(logits, &c, &lambda, drift);
    let mut iterations = 1;
    loop {
        let norm = cur.grad.amax();
        if norm < opts.tol {
            return Ok(TauUpdate { tau: cur.tau, iterations, constraint_norm: norm, converged: true, multipliers: lambda });
        }
        if iterations >= opts.max_iter {
            warn!("label dual solver stopped after {iterations} iterations with violation {norm:.3e}");
            return Ok(TauUpdate { tau: cur.tau, iterations, constraint_norm: norm, converged: false, multipliers: lambda });
        }
        let next = match opts.method {
            DualMethod::Gradient { .. } => loop {
                let cand_lambda = &lambda - &cur.grad * step;
                let cand = dual_point(logits, &c, &cand_lambda, drift);
                if cand.value >= cur.value - 1e-12 * cur.value.abs() || step < 1e-300 {
                    lambda = cand_lambda;
                    break cand;
                }
                step *= 0.5;
            },
            DualMethod::Newton => {
                let dir = newton_direction(&cur.tau, &c, &cur.grad);
                let slope = cur.grad.dot(&dir);
                let mut t = 1.0;
                let accepted = loop {
                    let cand_lambda = &lambda + &dir * t;
                    let cand = dual_point(logits, &c, &cand_lambda, drift);
                    // the dual value is -sum LSE; accept on sufficient increase, or on a smaller
                    // violation once the increase is below the rounding level of the value
                    if cand.value >= cur.value - 1e-4 * t * slope || cand.grad.amax() < (1.0 - 1e-4 * t) * norm {
                        lambda = cand_lambda;
                        break Some(cand);
                    }
                    if t < 1e-10 {
                        break None;
                    }
                    t *= 0.5;
                };
                match accepted {
                    Some(cand) => cand,
                    None => {
                        debug!("label dual line search stalled at violation {norm:.3e}");
                        return Ok(TauUpdate { tau: cur.tau, iterations, constraint_norm: norm, converged: false, multipliers: lambda });
                    }
                }
            }
        };
        iterations += 1;
        if !lambda.iter().all(|v| v.is_finite()) || lambda.norm() > opts.lambda_cap {
            warn!("label dual solver diverged; falling back to the unconstrained update");
            let tau = row_softmax(logits);
            let mut g = tau.transpose() * &c;
            g.add_scalar_mut(-drift);
            return Ok(TauUpdate { tau, iterations, constraint_norm: g.amax(), converged: false, multipliers: DVector::zeros(k) });
        }
        cur = next;
    }
}

/// Newton direction for the multipliers. The Hessian
/// `sum_i c_i^2 (diag(x_i) - x_i x_i^T)` annihilates the all-ones vector,
/// along which the labels do not move; a rank-one term fills that null
/// direction without changing the step.
fn newton_direction(tau: &DMatrix<f64>, c: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let k = tau.ncols();
    let mut h = DMatrix::<f64>::zeros(k, k);
    for i in 0..tau.nrows() {
        let w = c[i] * c[i];
        if w == 0.0 {
            continue;
        }
        let row = tau.row(i);
        for a in 0..k {
            h[(a, a)] += w * row[a];
            for b in 0..k {
                h[(a, b)] -= w * row[a] * row[b];
            }
        }
    }
    let scale = h.trace().max(f64::MIN_POSITIVE) / k as f64;
    let mut reg = h.clone();
    for a in 0..k {
        for b in 0..k {
            reg[(a, b)] += scale / k as f64;
        }
        reg[(a, a)] += 1e-10 * scale;
    }
    match reg.cholesky() {
        Some(ch) => -ch.solve(grad),
        None => -grad / scale,
    }
}

/// Proximal map of `-t d log(.)`: the positive root of `theta^2 - x theta - t d = 0`.
pub fn prox_log(x: &DVector<f64>, d: &DVector<f64>, t: f64) -> DVector<f64> {
    x.zip_map(d, |xi, di| 0.5 * (xi + (xi * xi + 4.0 * t * di).sqrt()))
}

#[derive(Debug, Clone)]
pub struct ThetaUpdate {
    pub theta: DVector<f64>,
    /// Auxiliary iterate, reusable as a warm start.
    pub xi: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Orthogonal projector onto the column span of `tau`, `H = Q Q^T` with `Q`
/// the left singular vectors of numerically nonzero singular values. Equals
/// `tau (tau^T tau)^-1 tau^T` when `tau` has full column rank.
struct SpanProjector {
    q: DMatrix<f64>,
}

impl SpanProjector {
    fn new(tau: &DMatrix<f64>) -> Result<Self> {
        let svd = tau.clone().svd(true, false);
        let s = &svd.singular_values;
        let top = s.max();
        if !(top > 0.0) || !top.is_finite() {
            return Err(Error::Numerical("label matrix has no usable column span".into()));
        }
        let keep: Vec<usize> = (0..s.len()).filter(|&c| s[c] > 1e-10 * top).collect();
        if keep.len() < tau.ncols() {
            warn!("tau^T tau is singular (rank {} < {}); projecting onto the attained span", keep.len(), tau.ncols());
        }
        let u = svd.u.expect("requested U");
        Ok(Self { q: DMatrix::from_columns(&keep.iter().map(|&c| u.column(c).into_owned()).collect::<Vec<_>>()) })
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * self.q.tr_mul(v)
    }
}

/// Maximizes `sum_i d_i log theta_i` subject to `tau^T (theta - 1) = 0`,
/// `theta >= 0` by Douglas-Rachford splitting, starting from `xi0`.
pub fn update_theta_side(degrees: &DVector<f64>, tau: &DMatrix<f64>, xi0: &DVector<f64>, opts: &DrOptions) -> Result<ThetaUpdate> {
    if degrees.len() != tau.nrows() || xi0.len() != tau.nrows() {
        return Err(Error::Dimension("degrees, tau and xi disagree".into()));
    }
    if degrees.iter().any(|&d| d < 0.0) {
        return Err(Error::InvalidParameter("degrees must be nonnegative".into()));
    }
    let proj = SpanProjector::new(tau)?;
    let mut xi = xi0.clone();
    let mut theta = prox_log(&xi, degrees, opts.t);
    for it in 1..=opts.max_iter {
        let shifted = (&theta * 2.0 - &xi).add_scalar(-1.0);
        xi = &theta - proj.apply(&shifted);
        let next = prox_log(&xi, degrees, opts.t);
        let change = (&next - &theta).amax();
        theta = next;
        if change < opts.tol {
            return Ok(ThetaUpdate { theta, xi, iterations: it, converged: true });
        }
    }
    warn!("Douglas-Rachford propensity update hit {} iterations", opts.max_iter);
    Ok(ThetaUpdate { theta, xi, iterations: opts.max_iter, converged: false })
}

fn regularized_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let ch = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    let inv = ch.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Optimal Gaussian posteriors of the community centers given labels and priors.
pub fn update_variational_gaussians(
    tau1: &DMatrix<f64>,
    tau2: &DMatrix<f64>,
    sigma2: [f64; 2],
    prior_mu: &DVector<f64>,
    prior_sigma: &DMatrix<f64>,
    covariates: &CovariateSet,
) -> Result<VariationalGaussians> {
    let (d1, d2) = covariates.dims();
    let dim = d1 + d2;
    let k = tau1.ncols();
    if prior_mu.len() != dim || prior_sigma.shape() != (dim, dim) {
        return Err(Error::Dimension("prior dimensions disagree with covariates".into()));
    }
    let prec = regularized_inverse(prior_sigma, "prior covariance")?;
    let prec_mu = &prec * prior_mu;
    let bars = [column_sums(tau1), column_sums(tau2)];
    // x_bar_r = tau_r^T X_r, K x d_r
    let xbars: [Option<DMatrix<f64>>; 2] = [
        covariates.x1.as_ref().map(|x| tau1.transpose() * x),
        covariates.x2.as_ref().map(|x| tau2.transpose() * x),
    ];
    let mut out = VariationalGaussians { mu_tilde: Vec::with_capacity(k), sigma_tilde: Vec::with_capacity(k) };
    for c in 0..k {
        let mut p = prec.clone();
        let mut rhs = prec_mu.clone();
        for (side, d) in [(Side::One, d1), (Side::Two, d2)] {
            let r = side.index();
            let Some(xb) = &xbars[r] else { continue };
            let off = side_offset(side, d1);
            for a in 0..d {
                p[(off + a, off + a)] += bars[r][c] / sigma2[r];
                rhs[off + a] += xb[(c, a)] / sigma2[r];
            }
        }
        let st = regularized_inverse(&p, "posterior precision")?;
        out.mu_tilde.push(&st * rhs);
        out.sigma_tilde.push(st);
    }
    Ok(out)
}

/// Prior mean and covariance maximizing the objective given the posteriors,
/// with the relative ridge [`PRIOR_RIDGE`] added to the covariance.
pub fn update_prior_gaussian(vargauss: &VariationalGaussians) -> (DVector<f64>, DMatrix<f64>) {
    let k = vargauss.k();
    let dim = vargauss.mu_tilde[0].len();
    let mu = vargauss.mu_tilde.iter().fold(DVector::zeros(dim), |acc, m| acc + m) / k as f64;
    let mut s = DMatrix::zeros(dim, dim);
    for (mt, st) in vargauss.mu_tilde.iter().zip(&vargauss.sigma_tilde) {
        let dev = mt - &mu;
        s += st + &dev * dev.transpose();
    }
    s /= k as f64;
    s = (&s + s.transpose()) * 0.5;
    if dim > 0 {
        let ridge = PRIOR_RIDGE * s.trace() / dim as f64;
        for a in 0..dim {
            s[(a, a)] += ridge;
        }
    }
    (mu, s)
}

/// `sigma_r^2 = tr(tau_r^T beta'_r) / (n_r d_r)`, floored; sides without
/// covariates keep `previous`.
pub fn update_sigma2(tau: [&DMatrix<f64>; 2], betas: &Betas, dims: (usize, usize), previous: [f64; 2]) -> [f64; 2] {
    let mut out = previous;
    let ds = [dims.0, dims.1];
    for r in 0..2 {
        if let Some(bp) = &betas.beta_prime[r] {
            let n = tau[r].nrows();
            let v = tau[r].component_mul(bp).sum() / (n * ds[r]) as f64;
            out[r] = v.max(SIGMA2_FLOOR);
        }
    }
    out
}

/// Edge-rate update; `previous` is held when a rate is undefined.
pub fn update_pq(
    graph: &BipartiteGraph,
    tau1: &DMatrix<f64>,
    tau2: &DMatrix<f64>,
    likelihood: Likelihood,
    previous: (f64, f64),
) -> Result<(f64, f64)> {
    let (edge_sum, total) = gamma_aggregate(tau1, tau2, graph)?;
    let pairs = graph.n1() as f64 * graph.n2() as f64;
    let w = graph.total_weight() as f64;
    let mut p = if total > 0.0 { edge_sum / total } else { previous.0 };
    // (r rho - p) / (r - 1) with 1/r = total / pairs and rho = w / pairs
    let rest = pairs - total;
    let mut q = if rest > 1e-12 * pairs {
        (w - edge_sum) / rest
    } else {
        warn!("all label mass is matched (r = 1); holding q at {}", previous.1);
        previous.1
    };
    match likelihood {
        Likelihood::Bernoulli => {
            p = p.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
            q = q.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
        }
        Likelihood::Poisson => {
            p = p.max(POISSON_FLOOR);
            q = q.max(POISSON_FLOOR);
        }
    }
    Ok((p, q))
}

/// Normalized column masses of each side.
pub fn update_pi(tau1: &DMatrix<f64>, tau2: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let norm = |t: &DMatrix<f64>| {
        let bar = column_sums(t);
        let s = bar.sum();
        bar.iter().map(|v| v / s).collect::<Vec<_>>()
    };
    (norm(tau1), norm(tau2))
}

fn reseed_empty_columns(tau1: &mut DMatrix<f64>, tau2: &mut DMatrix<f64>) -> bool {
    let mut any = false;
    let k = tau1.ncols();
    let bar1 = column_sums(tau1);
    let bar2 = column_sums(tau2);
    for c in 0..k {
        if bar1[c] >= EMPTY_MASS || bar2[c] >= EMPTY_MASS {
            continue;
        }
        warn!("community {c} is empty on both sides; re-spreading high-entropy rows");
        any = true;
        for tau in [&mut *tau1, &mut *tau2] {
            let n = tau.nrows();
            let m = (n / k).max(1);
            let mut order: Vec<(f64, usize)> = tau
                .row_iter()
                .enumerate()
                .map(|(i, r)| (-r.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>(), i))
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in order.iter().take(m) {
                tau.row_mut(i).fill(1.0 / k as f64);
            }
        }
    }
    any
}

fn check_init(tau: &DMatrix<f64>, n: usize, k: usize, side: &str) -> Result<()> {
    if tau.shape() != (n, k) {
        return Err(Error::Dimension(format!("{side} init labels are {:?}, expected ({n}, {k})", tau.shape())));
    }
    SoftLabels::new(Side::One, tau.clone()).map(|_| ()).map_err(|e| match e {
        Error::InvalidParameter(m) => Error::InvalidParameter(format!("{side} init labels: {m}")),
        other => other,
    })
}

/// Fits the model from initial soft labels.
pub fn fit(
    graph: &BipartiteGraph,
    covariates: &CovariateSet,
    init1: &DMatrix<f64>,
    init2: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    let k = opts.k;
    check_init(init1, graph.n1(), k, "side 1")?;
    check_init(init2, graph.n2(), k, "side 2")?;
    if opts.likelihood == Likelihood::Bernoulli && graph.max_weight() > 1 {
        return Err(Error::InvalidGraph("weighted edges require the Poisson likelihood".into()));
    }
    let no_covariates = CovariateSet::none();
    let covariates = if opts.use_covariates { covariates } else { &no_covariates };
    covariates.check(graph)?;
    let has_cov = !covariates.is_empty();

    let mut tau1 = init1.clone();
    let mut tau2 = init2.clone();
    floor_rows(&mut tau1, TAU_FLOOR);
    floor_rows(&mut tau2, TAU_FLOOR);
    let block = match opts.pq_init {
        PqInit::Fixed(p, q) => BlockParams::uniform(p, q, k),
        PqInit::FromTau => BlockParams::uniform(0.1, 0.01, k),
    };
    let mut state = FitState::new(graph, covariates, tau1, tau2, block)?;
    state.degree_corrected = opts.degree_correct;

    let degrees = [DVector::from_vec(graph.degrees1()), DVector::from_vec(graph.degrees2())];
    let mut xi = [DVector::from_element(graph.n1(), 1.0), DVector::from_element(graph.n2(), 1.0)];
    let mut multipliers = [DVector::zeros(k), DVector::zeros(k)];
    let mut converged = false;
    let mut iterations = 0;
    let mut warned_flat = false;
    let mut reseeded_at = Vec::new();

    for outer in 0..opts.max_outer {
        iterations = outer + 1;
        if !(outer == 0 && matches!(opts.pq_init, PqInit::Fixed(..))) {
            let (p, q) = update_pq(graph, &state.tau1, &state.tau2, opts.likelihood, (state.block.p, state.block.q))?;
            let (pi1, pi2) = update_pi(&state.tau1, &state.tau2);
            state.block = BlockParams { p, q, pi1, pi2 };
        }
        let phi = update_phi(state.block.p, state.block.q, opts.likelihood);
        if phi.1 == 0.0 && !warned_flat {
            warn!("p == q: the network carries no community signal");
            warned_flat = true;
        }

        if opts.degree_correct {
            for side in [Side::One, Side::Two] {
                let r = side.index();
                let upd = update_theta_side(&degrees[r], state.tau(side), &xi[r], &opts.dr)?;
                xi[r] = upd.xi;
                match side {
                    Side::One => state.degrees.theta1 = upd.theta,
                    Side::Two => state.degrees.theta2 = upd.theta,
                }
            }
        }

        let betas = has_cov.then(|| update_beta(covariates, &state.vargauss, state.covparams.sigma2));
        let beta_of = |r: usize| betas.as_ref().and_then(|b| b.beta[r].as_ref());

        let old1 = state.tau1.clone();
        let old2 = state.tau2.clone();
        let upd1 = update_tau_side(
            Side::One,
            graph,
            &state.tau2,
            phi,
            beta_of(0),
            &state.block.pi1,
            &state.degrees.theta1,
            Some(&multipliers[0]),
            &opts.dual,
        )?;
        multipliers[0] = upd1.multipliers;
        let mut t1 = upd1.tau;
        floor_rows(&mut t1, TAU_FLOOR);
        let upd2 = update_tau_side(
            Side::Two,
            graph,
            &t1,
            phi,
            beta_of(1),
            &state.block.pi2,
            &state.degrees.theta2,
            Some(&multipliers[1]),
            &opts.dual,
        )?;
        multipliers[1] = upd2.multipliers;
        let mut t2 = upd2.tau;
        floor_rows(&mut t2, TAU_FLOOR);
        if reseed_empty_columns(&mut t1, &mut t2) {
            reseeded_at.push(iterations);
        }
        state.tau1 = t1;
        state.tau2 = t2;

        if has_cov {
            state.vargauss = update_variational_gaussians(
                &state.tau1,
                &state.tau2,
                state.covparams.sigma2,
                &state.covparams.mu,
                &state.covparams.sigma,
                covariates,
            )?;
            let (mu, sigma) = update_prior_gaussian(&state.vargauss);
            state.covparams.mu = mu;
            state.covparams.sigma = sigma;
            let fresh = update_beta(covariates, &state.vargauss, state.covparams.sigma2);
            state.covparams.sigma2 =
                update_sigma2([&state.tau1, &state.tau2], &fresh, covariates.dims(), state.covparams.sigma2);
        }

        let j = elbo(&state, opts.likelihood)?;
        if !j.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became non-finite at iteration {iterations} (p = {}, q = {}, sigma2 = {:?})",
                state.block.p, state.block.q, state.covparams.sigma2
            )));
        }
        state.elbo_trace.push(j);

        let delta = (&state.tau1 - &old1).amax().max((&state.tau2 - &old2).amax());
        if delta < opts.eps / k as f64 {
            converged = true;
            break;
        }
    }

    let params = state.params();
    Ok(FitResult {
        tau1: SoftLabels::new(Side::One, state.tau1)?,
        tau2: SoftLabels::new(Side::Two, state.tau2)?,
        params,
        elbo_trace: state.elbo_trace,
        iterations,
        converged,
        reseeded_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn planted(k: usize, per1: usize, per2: usize) -> (BipartiteGraph, Vec<usize>, Vec<usize>) {
        let z1: Vec<usize> = (0..k * per1).map(|i| i / per1).collect();
        let z2: Vec<usize> = (0..k * per2).map(|j| j / per2).collect();
        let mut pairs = Vec::new();
        for (i, &a) in z1.iter().enumerate() {
            for (j, &b) in z2.iter().enumerate() {
                if a == b && (i + j) % 2 == 0 || a != b && (i * 7 + j) % 13 == 0 {
                    pairs.push((i, j));
                }
            }
        }
        (BipartiteGraph::from_pairs(z1.len(), z2.len(), pairs).unwrap(), z1, z2)
    }

    fn one_hot(z: &[usize], k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(z.len(), k, |i, c| if z[i] == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn phi_examples() {
        assert_eq!(update_phi(0.2, 0.2, Likelihood::Poisson), (0.0, 0.0));
        let (p0, p1) = update_phi(0.1, 0.01, Likelihood::Poisson);
        assert!((p0 + 0.09).abs() < 1e-15 && (p1 - 10f64.ln()).abs() < 1e-12);
        let (b0, b1) = update_phi(0.1, 0.01, Likelihood::Bernoulli);
        assert!((b1 - (0.1 * 0.99 / (0.01 * 0.9f64)).ln()).abs() < 1e-12);
        assert!((b0 - (0.9 / 0.99f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn prox_examples_and_residual() {
        let one = DVector::from_element(1, 1.0);
        assert_eq!(prox_log(&DVector::zeros(1), &one, 1.0)[0], 1.0);
        let x = DVector::from_vec(vec![-2.0, 0.0, 3.5]);
        assert_eq!(prox_log(&x, &DVector::zeros(3), 0.7), DVector::from_vec(vec![0.0, 0.0, 3.5]));
        let mut rng = seeded(4);
        for _ in 0..200 {
            let n = 20;
            let x = DVector::from_fn(n, |_, _| rng.random_range(-50.0..50.0));
            let d = DVector::from_fn(n, |_, _| rng.random_range(0.0..30.0));
            let t = rng.random_range(0.01..10.0);
            let th = prox_log(&x, &d, t);
            for i in 0..n {
                let scale = 1.0 + x[i] * x[i] + t * d[i];
                assert!((th[i] * th[i] - x[i] * th[i] - t * d[i]).abs() <= 1e-10 * scale);
                assert!(th[i] >= 0.0 && (d[i] == 0.0 || th[i] > 0.0));
            }
        }
    }

    #[test]
    fn unit_theta_is_one_softmax_step() {
        let (g, _, z2) = planted(3, 5, 7);
        let tau2 = one_hot(&z2, 3);
        let pi = [0.2, 0.3, 0.5];
        let theta = DVector::from_element(g.n1(), 1.0);
        let upd = update_tau_side(Side::One, &g, &tau2, (-0.09, 10f64.ln()), None, &pi, &theta, None, &DualOptions::default()).unwrap();
        assert_eq!(upd.iterations, 1);
        assert!(upd.converged);
        let direct = row_softmax(&tau_logits(Side::One, &g, &tau2, (-0.09, 10f64.ln()), None, &pi));
        assert_eq!(upd.tau, direct);
    }

    #[test]
    fn flat_inputs_give_uniform_rows() {
        let (g, _, z2) = planted(4, 3, 3);
        let theta = DVector::from_element(g.n1(), 1.0);
        let upd = update_tau_side(Side::One, &g, &one_hot(&z2, 4), (0.0, 0.0), None, &[0.25; 4], &theta, None, &DualOptions::default()).unwrap();
        assert!(upd.tau.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dual_solvers_reach_the_constraint() {
        let mut rng = seeded(9);
        let (n, k) = (60, 4);
        let logits = DMatrix::from_fn(n, k, |_, _| rng.random_range(-3.0..3.0));
        let mut theta = DVector::from_fn(n, |_, _| rng.random_range(0.2..3.0));
        let m = theta.mean();
        theta /= m;
        for method in [DualMethod::Newton, DualMethod::Gradient { step: Some(0.05) }] {
            let opts = DualOptions { method, max_iter: 5000, ..DualOptions::default() };
            let upd = constrained_softmax(&logits, &theta, &opts).unwrap();
            assert!(upd.converged, "{method:?}: {}", upd.constraint_norm);
            let viol = upd.tau.transpose() * theta.map(|t| t - 1.0);
            assert!(viol.amax() < 1e-6, "{method:?}");
            for r in upd.tau.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn theta_reductions() {
        let z = [0, 0, 0, 1, 1, 2, 2, 2, 2];
        let tau = one_hot(&z, 3);
        let xi = DVector::from_element(9, 1.0);
        let equal = DVector::from_vec(vec![3.0, 3.0, 3.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0]);
        let upd = update_theta_side(&equal, &tau, &xi, &DrOptions::default()).unwrap();
        assert!(upd.converged && (upd.theta.add_scalar(-1.0)).amax() < 1e-6);
        let upd = update_theta_side(&DVector::zeros(9), &tau, &xi, &DrOptions::default()).unwrap();
        assert!((upd.theta.add_scalar(-1.0)).amax() < 1e-6);
    }

    #[test]
    fn theta_respects_the_constraint_for_soft_labels() {
        let mut rng = seeded(2);
        let (n, k) = (40, 3);
        let tau = row_softmax(&DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0)));
        let d = DVector::from_fn(n, |_, _| rng.random_range(0..9) as f64);
        let upd = update_theta_side(&d, &tau, &DVector::from_element(n, 1.0), &DrOptions { max_iter: 20000, ..Default::default() }).unwrap();
        assert!(upd.theta.iter().all(|&t| t >= 0.0));
        assert!((tau.transpose() * upd.theta.add_scalar(-1.0)).amax() < 1e-4 * n as f64);
    }

    #[test]
    fn beta_examples() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let cov = CovariateSet { x1: Some(x.clone()), x2: None };
        let vg = VariationalGaussians {
            mu_tilde: vec![DVector::from_vec(vec![1.0, 2.0])],
            sigma_tilde: vec![DMatrix::zeros(2, 2)],
        };
        let b = update_beta(&cov, &vg, [0.5, 1.0]);
        assert_eq!(b.beta[0].as_ref().unwrap()[(0, 0)], 0.0);
        assert!(b.beta[1].is_none());
        let vg = VariationalGaussians { mu_tilde: vec![DVector::from_vec(vec![-1.0, 0.5])], sigma_tilde: vec![DMatrix::identity(2, 2)] };
        let b = update_beta(&cov, &vg, [0.5, 1.0]);
        assert!((b.beta[0].as_ref().unwrap()[(1, 0)] + 2.0 / (2.0 * 0.5)).abs() < 1e-15);
        let bp = b.beta_prime[0].as_ref().unwrap();
        assert!((bp - b.beta[0].as_ref().unwrap() * (-2.0 * 0.5)).amax() < 1e-15);
    }

    #[test]
    fn empty_community_falls_back_to_prior() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let cov = CovariateSet { x1: Some(x), x2: None };
        let tau = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let tau2 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mu = DVector::from_vec(vec![0.5]);
        let sigma = DMatrix::from_element(1, 1, 4.0);
        let vg = update_variational_gaussians(&tau, &tau2, [1e-12, 1.0], &mu, &sigma, &cov).unwrap();
        assert!((vg.mu_tilde[1][0] - 0.5).abs() < 1e-12 && (vg.sigma_tilde[1][(0, 0)] - 4.0).abs() < 1e-12);
        // tiny noise: the posterior mean is the cluster average
        assert!((vg.mu_tilde[0][0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn prior_update_examples() {
        let m = DVector::from_vec(vec![1.0, -2.0]);
        let vg = VariationalGaussians { mu_tilde: vec![m.clone(); 3], sigma_tilde: vec![DMatrix::identity(2, 2); 3] };
        let (mu, s) = update_prior_gaussian(&vg);
        assert_eq!(mu, m);
        assert!((s - DMatrix::<f64>::identity(2, 2)).amax() <= 2.0 * PRIOR_RIDGE);
    }

    #[test]
    fn rate_and_proportion_examples() {
        let (g, z1, z2) = planted(3, 4, 6);
        let u1 = DMatrix::from_element(g.n1(), 3, 1.0 / 3.0);
        let u2 = DMatrix::from_element(g.n2(), 3, 1.0 / 3.0);
        let (p, q) = update_pq(&g, &u1, &u2, Likelihood::Poisson, (0.1, 0.01)).unwrap();
        assert!((p - g.density()).abs() < 1e-12 && (q - g.density()).abs() < 1e-12);
        let (t1, t2) = (one_hot(&z1, 3), one_hot(&z2, 3));
        let (p, q) = update_pq(&g, &t1, &t2, Likelihood::Bernoulli, (0.1, 0.01)).unwrap();
        let (mut within, mut cross) = (0.0, 0.0);
        for e in g.edges() {
            if z1[e.i] == z2[e.j] {
                within += 1.0;
            } else {
                cross += 1.0;
            }
        }
        let within_pairs = (3 * 4 * 6) as f64;
        assert!((p - within / within_pairs).abs() < 1e-12);
        let pairs = (g.n1() * g.n2()) as f64;
        assert!((q - cross / (pairs - within_pairs)).abs() < 1e-12);
        let empty = BipartiteGraph::new(3, 3, []).unwrap();
        let e = DMatrix::from_element(3, 2, 0.5);
        assert_eq!(update_pq(&empty, &e, &e, Likelihood::Poisson, (0.1, 0.01)).unwrap(), (POISSON_FLOOR, POISSON_FLOOR));
        let (pi1, pi2) = update_pi(&t1, &t2);
        assert!(pi1.iter().chain(&pi2).all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn signal_free_fit_stays_stochastic() {
        let pairs: Vec<(usize, usize)> = (0..30).flat_map(|i| (0..40).filter(move |j| (i + j) % 5 == 0).map(move |j| (i, j))).collect();
        let g = BipartiteGraph::from_pairs(30, 40, pairs).unwrap();
        let mut rng = seeded(1);
        let init1 = row_softmax(&DMatrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0)));
        let init2 = row_softmax(&DMatrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0)));
        let res = fit(&g, &CovariateSet::none(), &init1, &init2, &FitOptions::new(3)).unwrap();
        for t in [res.tau1.matrix(), res.tau2.matrix()] {
            for r in t.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-9);
            }
        }
        assert!(res.params.degrees.theta1.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn options_are_validated() {
        let mut o = FitOptions::new(2);
        o.degree_correct = true;
        o.likelihood = Likelihood::Bernoulli;
        assert!(o.validate().is_err());
        let mut o = FitOptions::new(2);
        o.eps = 0.0;
        assert!(o.validate().is_err());
        let mut o = FitOptions::new(2);
        o.dual.method = DualMethod::Gradient { step: Some(-1.0) };
        assert!(o.validate().is_err());
    }
}
