//! Agreement between estimated and true labels.
//!
//! Both sides are scored jointly: labels are concatenated before computing
//! NMI, and a single permutation is shared by both sides when counting
//! misclassifications, so a fit that gets the communities right on each side
//! but pairs them up wrongly across sides is penalized.

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::harden;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matched_nmi: f64,
    pub per_side_nmi: [f64; 2],
    pub misclassification_rate: f64,
    /// `permutation[est] = true` label used for the alignment.
    pub permutation: Vec<usize>,
}

/// `k x k` co-assignment counts, rows indexed by `a`, columns by `b`.
pub fn confusion(a: &[usize], b: &[usize], k: usize) -> Result<DMatrix<u64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("label vectors of length {} and {}", a.len(), b.len())));
    }
    let mut m = DMatrix::zeros(k, k);
    for (&x, &y) in a.iter().zip(b) {
        if x >= k || y >= k {
            return Err(Error::InvalidParameter(format!("label {} out of range for K={k}", x.max(y))));
        }
        m[(x, y)] += 1;
    }
    Ok(m)
}

fn label_range(labels: &[&[usize]]) -> usize {
    labels.iter().flat_map(|l| l.iter()).max().map_or(1, |&m| m + 1)
}

/// `I(T; E) / H(T, E)` of two labelings; `1` when the joint entropy vanishes.
pub fn nmi(truth: &[usize], est: &[usize]) -> Result<f64> {
    let k = label_range(&[truth, est]);
    let c = confusion(truth, est, k)?;
    let n = truth.len() as f64;
    if truth.is_empty() {
        return Err(Error::InvalidParameter("NMI of empty labelings".into()));
    }
    let rows: Vec<f64> = c.row_iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = c.column_iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let mut joint = 0.0;
    let mut mi = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = c[(i, j)] as f64;
            if v > 0.0 {
                let pij = v / n;
                joint -= pij * pij.ln();
                mi += pij * (v * n / (rows[i] * cols[j])).ln();
            }
        }
    }
    if joint <= 0.0 {
        return Ok(1.0);
    }
    Ok((mi / joint).clamp(0.0, 1.0))
}

fn concat(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect()
}

/// NMI of the concatenated hard labelings.
pub fn matched_nmi_hard(true1: &[usize], true2: &[usize], est1: &[usize], est2: &[usize]) -> Result<f64> {
    if true1.len() != est1.len() || true2.len() != est2.len() {
        return Err(Error::Dimension("estimated and true labels differ in length".into()));
    }
    nmi(&concat(true1, true2), &concat(est1, est2))
}

/// Matched NMI of soft labels, hardened by row argmax (ties to the lowest index).
pub fn matched_nmi(true1: &[usize], true2: &[usize], tau1: &DMatrix<f64>, tau2: &DMatrix<f64>) -> Result<f64> {
    matched_nmi_hard(true1, true2, &harden(tau1), &harden(tau2))
}

/// Optimal assignment maximizing agreements; `perm[est] = true`.
pub fn best_permutation(conf_true_by_est: &DMatrix<u64>) -> Vec<usize> {
    let k = conf_true_by_est.nrows();
    // rows: estimated labels, columns: true labels
    let weights = Matrix::from_fn(k, k, |(e, t)| conf_true_by_est[(t, e)] as i64);
    kuhn_munkres(&weights).1
}

/// Exhaustive search over all permutations; test oracle for small `k`.
pub fn best_permutation_exhaustive(conf_true_by_est: &DMatrix<u64>) -> (u64, Vec<usize>) {
    let k = conf_true_by_est.nrows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (0, perm.clone());
    let mut first = true;
    heap_permutations(&mut perm, k, &mut |p| {
        let score: u64 = p.iter().enumerate().map(|(e, &t)| conf_true_by_est[(t, e)]).sum();
        if first || score > best.0 {
            best = (score, p.to_vec());
            first = false;
        }
    });
    best
}

fn heap_permutations(a: &mut [usize], n: usize, visit: &mut impl FnMut(&[usize])) {
    if n <= 1 {
        visit(a);
        return;
    }
    for i in 0..n - 1 {
        heap_permutations(a, n - 1, visit);
        if n % 2 == 0 {
            a.swap(i, n - 1);
        } else {
            a.swap(0, n - 1);
        }
    }
    heap_permutations(a, n - 1, visit);
}

/// Fraction of nodes mislabeled under the best single permutation applied to both sides.
pub fn misclassification(true1: &[usize], true2: &[usize], est1: &[usize], est2: &[usize]) -> Result<(f64, Vec<usize>)> {
    if true1.len() != est1.len() || true2.len() != est2.len() {
        return Err(Error::Dimension("estimated and true labels differ in length".into()));
    }
    let t = concat(true1, true2);
    let e = concat(est1, est2);
    if t.is_empty() {
        return Err(Error::InvalidParameter("misclassification of empty labelings".into()));
    }
    let k = label_range(&[&t, &e]);
    let conf = confusion(&t, &e, k)?;
    let perm = best_permutation(&conf);
    let agree: u64 = perm.iter().enumerate().map(|(est, &tr)| conf[(tr, est)]).sum();
    Ok((1.0 - agree as f64 / t.len() as f64, perm))
}

pub fn evaluate(true1: &[usize], true2: &[usize], tau1: &DMatrix<f64>, tau2: &DMatrix<f64>) -> Result<EvalReport> {
    evaluate_hard(true1, true2, &harden(tau1), &harden(tau2))
}

pub fn evaluate_hard(true1: &[usize], true2: &[usize], est1: &[usize], est2: &[usize]) -> Result<EvalReport> {
    let matched_nmi = matched_nmi_hard(true1, true2, est1, est2)?;
    let per_side_nmi = [nmi(true1, est1)?, nmi(true2, est2)?];
    let (misclassification_rate, permutation) = misclassification(true1, true2, est1, est2)?;
    Ok(EvalReport { matched_nmi, per_side_nmi, misclassification_rate, permutation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_labels() {
        let z1 = [0, 1, 2, 1];
        let z2 = [2, 2, 0, 1, 0];
        assert_eq!(matched_nmi_hard(&z1, &z2, &z1, &z2).unwrap(), 1.0);
        let (rate, perm) = misclassification(&z1, &z2, &z1, &z2).unwrap();
        assert_eq!(rate, 0.0);
        assert_eq!(perm, vec![0, 1, 2]);
    }

    #[test]
    fn common_relabeling_is_free() {
        let z1 = [0, 1, 2, 1];
        let z2 = [2, 2, 0, 1, 0];
        let s = [2, 0, 1];
        let e1: Vec<usize> = z1.iter().map(|&l| s[l]).collect();
        let e2: Vec<usize> = z2.iter().map(|&l| s[l]).collect();
        assert!((matched_nmi_hard(&z1, &z2, &e1, &e2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(misclassification(&z1, &z2, &e1, &e2).unwrap().0, 0.0);
    }

    #[test]
    fn mismatched_sides_are_penalized() {
        let z1 = [0, 0, 1, 1];
        let z2 = [0, 0, 1, 1];
        let e2 = [1, 1, 0, 0];
        let v = matched_nmi_hard(&z1, &z2, &z1, &e2).unwrap();
        assert!(v < 1.0);
        // joint cells (0,0),(1,1),(0,1),(1,0) each hold 2 of 8 nodes: I = 0, H = ln 4
        assert!(v.abs() < 1e-12);
        assert_eq!(misclassification(&z1, &z2, &z1, &e2).unwrap().0, 0.5);
    }

    #[test]
    fn single_cluster_convention() {
        assert_eq!(nmi(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn confusion_marginals() {
        let a = [0, 1, 1, 2, 0];
        let b = [1, 1, 0, 2, 2];
        let c = confusion(&a, &b, 3).unwrap();
        assert_eq!(c.iter().sum::<u64>(), 5);
        assert_eq!(c.row(1).iter().sum::<u64>(), 2);
        assert_eq!(c.column(2).iter().sum::<u64>(), 2);
        assert_eq!(confusion(&[0, 1], &[1, 0], 2).unwrap().diagonal().sum(), 0);
        assert!(confusion(&[0, 1], &[1], 2).is_err());
    }

    #[test]
    fn soft_inputs_are_hardened() {
        let t = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8]);
        assert_eq!(matched_nmi(&[0, 1], &[0, 1], &t, &t).unwrap(), 1.0);
    }
}
