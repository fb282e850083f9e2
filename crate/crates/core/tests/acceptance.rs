//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria are reported, not asserted, so an honest miss shows up as FAIL
//! without hiding the other results.

#[path = "generator.rs"]
#[allow(dead_code)]
mod generator_checks;
#[path = "invariants.rs"]
mod invariant_checks;
#[path = "oracles.rs"]
mod oracle_checks;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mbisbm::generator::{generate, GenConfig};
use mbisbm::rng::{derive_seed, seeded};
use mbisbm::spectral::{initialize, InitMethod, InitSpec};
use mbisbm::sweep::{run_sweep, summarize, Method, Source, SummaryRow, SweepSpec, SweepVar};
use mbisbm::vb::{fit, FitOptions, PqInit};
use rand::Rng as _;

const LAMBDAS: [f64; 6] = [3.0, 5.0, 7.0, 10.0, 12.0, 15.0];

fn report(id: usize, name: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn typical_config() -> GenConfig {
    let mut cfg = GenConfig::new(200, 800, 5, 3.1, 1.0 / 7.0);
    cfg.d1 = 2;
    cfg.d2 = 2;
    cfg.nu = 10.0;
    cfg.sigma_cov = [0.5, 0.5];
    cfg
}

fn ten_community_config(nu: f64, with_cov: bool) -> GenConfig {
    let mut cfg = GenConfig::new(200, 800, 10, 10.0, 1.0 / 7.0);
    if with_cov {
        cfg.d1 = 2;
        cfg.d2 = 2;
        cfg.sigma_cov = [0.5, 0.5];
    }
    cfg.nu = nu;
    cfg
}

fn find<'a>(summary: &'a [SummaryRow], method: &Method, value: f64) -> &'a SummaryRow {
    let name = method.to_string();
    summary.iter().find(|r| r.method == name && r.value == value).expect("method and value present in the sweep")
}

/// Criteria 1 and 2 share the same 20 instances.
fn typical_output() -> (bool, bool) {
    let fitted = Method::fitted(InitMethod::PerturbedTruth, false, true);
    let kmeans = Method::init_only(InitMethod::CovariateKmeans);
    let mut spec = SweepSpec::new(
        Source::Simulated(typical_config()),
        SweepVar::Omega,
        vec![0.1],
        20,
        vec![fitted.clone(), kmeans.clone()],
    );
    spec.seed = 101;
    spec.timing = true;
    let rows = run_sweep(&spec).expect("valid sweep");
    let summary = summarize(&rows);
    let fit_row = find(&summary, &fitted, 0.1);
    let slowest = rows.iter().filter(|r| r.method == fitted.to_string()).map(|r| r.runtime_ms).fold(0.0, f64::max);
    let median_mis = {
        let mut m: Vec<f64> = rows.iter().filter(|r| r.method == fitted.to_string()).map(|r| r.misclass).collect();
        m.sort_by(f64::total_cmp);
        mbisbm::sweep::quantile(&m, 0.5)
    };
    let c1 = report(
        1,
        "typical output, 20 seeds",
        fit_row.failed == 0 && fit_row.median_nmi >= 0.95 && median_mis <= 0.01 && slowest < 10_000.0,
        &format!(
            "median NMI {:.4} (>= 0.95), median misclassification {:.4} (<= 0.01), slowest fit {:.0} ms (< 10000), failures {}",
            fit_row.median_nmi, median_mis, slowest, fit_row.failed
        ),
    );
    let km_row = find(&summary, &kmeans, 0.1);
    let c2 = report(
        2,
        "covariate-only k-means baseline",
        km_row.failed == 0 && (0.3..=0.6).contains(&km_row.mean_nmi) && km_row.mean_nmi < fit_row.median_nmi,
        &format!(
            "mean NMI {:.4} (in [0.3, 0.6]), fitted median {:.4}, failures {}",
            km_row.mean_nmi, fit_row.median_nmi, km_row.failed
        ),
    );
    (c1, c2)
}

fn lambda_sweep(nu: f64, with_cov: bool, better: &Method, worse: &Method, seed: u64) -> (bool, String) {
    let mut spec = SweepSpec::new(
        Source::Simulated(ten_community_config(nu, with_cov)),
        SweepVar::LambdaDeg,
        LAMBDAS.to_vec(),
        50,
        vec![better.clone(), worse.clone()],
    );
    spec.seed = seed;
    let summary = summarize(&run_sweep(&spec).expect("valid sweep"));
    let mut ok = true;
    let mut parts = Vec::new();
    for &l in &LAMBDAS {
        let (b, w) = (find(&summary, better, l), find(&summary, worse, l));
        ok &= b.failed == 0 && w.failed == 0 && b.mean_nmi > w.mean_nmi;
        parts.push(format!("{l}: {:.3} vs {:.3}", b.mean_nmi, w.mean_nmi));
    }
    (ok, format!("{better} vs {worse} [{}]", parts.join(", ")))
}

fn ordering() -> bool {
    let bisc = Method::init_only(InitMethod::Bisc);
    let scp = Method::init_only(InitMethod::Scp);
    let fitted = Method::fitted(InitMethod::Bisc, false, true);
    let (a, da) = lambda_sweep(0.0, false, &bisc, &scp, 202);
    let (b, db) = lambda_sweep(10.0, true, &fitted, &bisc, 203);
    report(3, "lambda-sweep orderings, 50 reps", a && b, &format!("nu=0 {da}; nu=10 {db}"))
}

fn dc_variability() -> bool {
    let mut cfg = ten_community_config(2.0, true);
    cfg.pareto_a = Some(2.0);
    let plain = Method::fitted(InitMethod::PerturbedTruth, false, true);
    let dc = Method::fitted(InitMethod::PerturbedTruth, true, true);
    let mut spec = SweepSpec::new(Source::Simulated(cfg), SweepVar::Omega, vec![0.1], 50, vec![plain.clone(), dc.clone()]);
    spec.seed = 404;
    let summary = summarize(&run_sweep(&spec).expect("valid sweep"));
    let (p, d) = (find(&summary, &plain, 0.1), find(&summary, &dc, 0.1));
    report(
        4,
        "degree correction reduces NMI spread, lambda=10",
        p.failed == 0 && d.failed == 0 && d.iqr_nmi < p.iqr_nmi,
        &format!(
            "IQR with DC {:.4} vs without {:.4}; medians {:.4} vs {:.4}; failures {} / {}",
            d.iqr_nmi, p.iqr_nmi, d.median_nmi, p.median_nmi, d.failed, p.failed
        ),
    )
}

fn monotonicity() -> bool {
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let mut reseed_steps = 0;
    let mut steps = 0;
    for s in 0..20u64 {
        let mut cfg = ten_community_config(10.0, true);
        cfg.lambda_deg = 5.0;
        cfg.seed = derive_seed(505, &[s]);
        let data = generate(&cfg).expect("generator");
        let mut init = InitSpec::new(InitMethod::Bisc);
        init.seed = s;
        let (t1, t2) = initialize(&data.graph, &data.covariates, None, 10, &init).expect("init");
        let mut opts = FitOptions::new(10);
        opts.pq_init = PqInit::Fixed(0.1, 0.01);
        let res = fit(&data.graph, &data.covariates, &t1, &t2, &opts).expect("fit");
        for (idx, w) in res.elbo_trace.windows(2).enumerate() {
            // trace entry idx belongs to outer iteration idx + 1
            if res.reseeded_at.contains(&(idx + 2)) {
                reseed_steps += 1;
                continue;
            }
            steps += 1;
            let drop = (w[0] - w[1]) / w[0].abs();
            worst = worst.max(drop);
            if drop > 1e-6 {
                violations += 1;
            }
        }
    }
    report(
        5,
        "objective monotone on 20 non-DC fits",
        violations == 0,
        &format!(
            "{steps} steps checked, {violations} relative drops above 1e-6, worst relative drop {worst:.2e}; {reseed_steps} empty-community reseed steps excluded"
        ),
    )
}

fn run_checks(checks: &[(&str, &dyn Fn())]) -> (bool, String) {
    let mut failed = Vec::new();
    for (name, check) in checks {
        if catch_unwind(AssertUnwindSafe(check)).is_err() {
            failed.push(*name);
        }
    }
    let detail = if failed.is_empty() {
        format!("{} checks passed", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    (failed.is_empty(), detail)
}

fn oracles() -> bool {
    use oracle_checks::*;
    let (ok, detail) = run_checks(&[
        ("objective vs enumeration", &elbo_matches_enumeration),
        ("label update vs grid search", &constrained_label_update_matches_grid_search),
        ("propensity update vs closed form", &propensity_update_matches_hard_label_closed_form),
        ("truncated vs dense SVD", &truncated_svd_matches_dense),
        ("assignment vs exhaustive search", &hungarian_matches_exhaustive_search),
        ("k-means vs exhaustive search", &kmeans_reaches_exhaustive_optimum_on_twelve_points),
    ]);
    report(6, "oracle equivalences", ok, &detail)
}

fn calibration() -> bool {
    let (ok, detail) = run_checks(&[("mean degree over 50 seeds", &generator_checks::mean_degree_tracks_the_target)]);
    report(7, "generator mean degree within 10%, with and without DC", ok, &detail)
}

fn invariants() -> bool {
    use invariant_checks::*;
    let random_fits = || {
        let mut rng = seeded(808);
        for _ in 0..24 {
            check_random_fit(rng.random_range(0..10_000), rng.random(), rng.random_range(1..5));
        }
    };
    let prox = || {
        let mut rng = seeded(809);
        for _ in 0..1000 {
            check_prox(rng.random_range(-1e3..1e3), rng.random_range(0.0..1e3), rng.random_range(1e-3..1e2));
        }
    };
    let softmax = || {
        let mut rng = seeded(810);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-700.0..700.0)).collect();
            check_softmax(&vals);
        }
    };
    let (ok, detail) = run_checks(&[
        ("row-stochastic fits", &random_fits),
        ("prox residual", &prox),
        ("stochastic softmax", &softmax),
        ("degree constraint", &degree_constraint_holds_at_the_end_of_dc_fits),
        ("unit propensities without DC", &non_dc_fits_keep_unit_propensities),
        ("permutation equivariance", &relabeling_the_init_relabels_the_fit),
        ("determinism", &pipeline_is_deterministic),
        ("monotone objective", &non_dc_objective_never_drops_outside_reseeds),
    ]);
    report(8, "invariant suite", ok, &detail)
}

fn main() {
    let start = Instant::now();
    let (c1, c2) = typical_output();
    let results = [c1, c2, ordering(), dc_variability(), monotonicity(), oracles(), calibration(), invariants()];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0} s", results.len(), start.elapsed().as_secs_f64());
}
