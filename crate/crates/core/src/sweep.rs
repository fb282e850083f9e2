//! Monte Carlo driver: repeated simulate, initialize, fit and evaluate runs
//! over a grid of one varying setting.
//!
//! Every `(value, rep)` cell draws one dataset from a seed derived from the
//! base seed, the value and the rep, and scores every method on that same
//! dataset. Cells run on the rayon pool; rows come back ordered by value,
//! rep and method regardless of completion order. A failing method yields a
//! row of NaNs instead of aborting the sweep.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_hard};
use crate::generator::{generate, harmonic_size, GenConfig};
use crate::graph::{BipartiteGraph, Edge};
use crate::model::{CovariateSet, Likelihood};
use crate::rng::{derive_seed, seeded, Rng};
use crate::spectral::{hard_labels, initialize, InitMethod, InitSpec};
use crate::vb::{fit, FitOptions, PqInit};

/// The setting varied across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    LambdaDeg,
    Nu,
    /// Covariate dimension, applied to both sides.
    D,
    ParetoA,
    Omega,
    SubsampleFrac,
    NoiseDeg,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            Self::LambdaDeg => "lambda_deg",
            Self::Nu => "nu",
            Self::D => "d",
            Self::ParetoA => "pareto_a",
            Self::Omega => "omega",
            Self::SubsampleFrac => "subsample_frac",
            Self::NoiseDeg => "noise_deg",
        }
    }

    /// Whether the setting changes the generative model (as opposed to a
    /// transform or an initializer setting).
    fn is_generative(self) -> bool {
        matches!(self, Self::LambdaDeg | Self::Nu | Self::D | Self::ParetoA)
    }
}

impl fmt::Display for SweepVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "lambda_deg" | "lambda" => Ok(Self::LambdaDeg),
            "nu" => Ok(Self::Nu),
            "d" => Ok(Self::D),
            "pareto_a" | "a" => Ok(Self::ParetoA),
            "omega" => Ok(Self::Omega),
            "subsample_frac" => Ok(Self::SubsampleFrac),
            "noise_deg" => Ok(Self::NoiseDeg),
            other => Err(Error::InvalidParameter(format!("unknown sweep variable `{other}`"))),
        }
    }
}

/// What is fitted after the initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitVariant {
    pub degree_correct: bool,
    pub use_covariates: bool,
}

/// An initializer, optionally followed by a variational fit.
///
/// Written `bisc`, `scp`, `covariate-kmeans`, `random`, `perturbed-truth`
/// for initializers scored on their own, and `mbisbm(<init>)`,
/// `mbisbm-dc(<init>)`, `sbm(<init>)`, `sbm-dc(<init>)` for fits with and
/// without covariates and degree correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub init: InitMethod,
    pub fit: Option<FitVariant>,
}

impl Method {
    pub fn init_only(init: InitMethod) -> Self {
        Self { init, fit: None }
    }

    pub fn fitted(init: InitMethod, degree_correct: bool, use_covariates: bool) -> Self {
        Self { init, fit: Some(FitVariant { degree_correct, use_covariates }) }
    }
}

fn init_name(m: InitMethod) -> &'static str {
    match m {
        InitMethod::Bisc => "bisc",
        InitMethod::Scp => "scp",
        InitMethod::PerturbedTruth => "perturbed-truth",
        InitMethod::Random => "random",
        InitMethod::CovariateKmeans => "covariate-kmeans",
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fit {
            None => f.write_str(init_name(self.init)),
            Some(v) => {
                let base = if v.use_covariates { "mbisbm" } else { "sbm" };
                let dc = if v.degree_correct { "-dc" } else { "" };
                write!(f, "{base}{dc}({})", init_name(self.init))
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(open) = s.find('(') else {
            return Ok(Self::init_only(s.parse()?));
        };
        if !s.ends_with(')') {
            return Err(Error::InvalidParameter(format!("method `{s}` is missing a closing parenthesis")));
        }
        let init: InitMethod = s[open + 1..s.len() - 1].trim().parse()?;
        let (use_covariates, degree_correct) = match &s[..open] {
            "mbisbm" => (true, false),
            "mbisbm-dc" => (true, true),
            "sbm" => (false, false),
            "sbm-dc" => (false, true),
            other => return Err(Error::InvalidParameter(format!("unknown model `{other}`"))),
        };
        Ok(Self::fitted(init, degree_correct, use_covariates))
    }
}

/// Fit settings shared by all fitted methods of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepFit {
    pub eps: f64,
    pub max_outer: usize,
    pub pq_init: PqInit,
}

impl Default for SweepFit {
    /// Rates start at `(0.1, 0.01)` with uniform proportions for every initializer.
    fn default() -> Self {
        Self { eps: 1e-2, max_outer: 100, pq_init: PqInit::Fixed(0.1, 0.01) }
    }
}

/// A fixed labeled dataset to resample from instead of simulating.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: BipartiteGraph,
    pub covariates: CovariateSet,
    pub z1: Vec<usize>,
    pub z2: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub enum Source {
    Simulated(GenConfig),
    Fixed(Dataset),
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub source: Source,
    pub sweep_var: SweepVar,
    pub values: Vec<f64>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Weight on the truth for the perturbed-truth initializer.
    pub omega: f64,
    pub fit: SweepFit,
    /// Applied to every dataset before scoring; overridden by the sweep variable.
    pub subsample_frac: Option<f64>,
    pub noise_deg: Option<f64>,
    /// Record wall-clock times; off keeps the output a pure function of the spec.
    pub timing: bool,
}

impl SweepSpec {
    pub fn new(source: Source, sweep_var: SweepVar, values: Vec<f64>, reps: usize, methods: Vec<Method>) -> Self {
        Self {
            source,
            sweep_var,
            values,
            reps,
            methods,
            seed: 0,
            omega: 0.1,
            fit: SweepFit::default(),
            subsample_frac: None,
            noise_deg: None,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.reps == 0 || self.values.is_empty() || self.methods.is_empty() {
            return bad("a sweep needs at least one value, one rep and one method".into());
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return bad("sweep values must be finite".into());
        }
        if matches!(self.source, Source::Fixed(_)) && self.sweep_var.is_generative() {
            return bad(format!("`{}` cannot be swept on a fixed dataset", self.sweep_var));
        }
        if let Source::Simulated(cfg) = &self.source {
            cfg.validate()?;
        }
        let mut probe = self.clone();
        for &v in &self.values {
            probe.subsample_frac = self.subsample_frac;
            probe.noise_deg = self.noise_deg;
            probe.omega = self.omega;
            probe.apply_transform_value(v);
            if let Some(f) = probe.subsample_frac {
                if !(f > 0.0 && f <= 1.0) {
                    return bad(format!("subsample fraction must lie in (0, 1], got {f}"));
                }
            }
            if probe.noise_deg.is_some_and(|c| c < 0.0) {
                return bad("noise degree must be nonnegative".into());
            }
            if !(0.0..=1.0).contains(&probe.omega) {
                return bad(format!("omega must lie in [0, 1], got {}", probe.omega));
            }
            if let Source::Simulated(cfg) = &self.source {
                if self.sweep_var.is_generative() {
                    config_at(cfg, self.sweep_var, v, 0)?.validate()?;
                }
            }
        }
        let mut seen = HashSet::new();
        for m in &self.methods {
            if !seen.insert(m.to_string()) {
                return bad(format!("method `{m}` listed twice"));
            }
        }
        Ok(())
    }

    fn apply_transform_value(&mut self, v: f64) {
        match self.sweep_var {
            SweepVar::SubsampleFrac => self.subsample_frac = Some(v),
            SweepVar::NoiseDeg => self.noise_deg = Some(v),
            SweepVar::Omega => self.omega = v,
            _ => {}
        }
    }

    pub fn k(&self) -> usize {
        match &self.source {
            Source::Simulated(cfg) => cfg.k,
            Source::Fixed(d) => d.k,
        }
    }

    fn likelihood(&self) -> Likelihood {
        match &self.source {
            Source::Simulated(cfg) => cfg.likelihood,
            Source::Fixed(_) => Likelihood::Poisson,
        }
    }
}

/// Generator config with the sweep variable set to `v`; non-generative variables leave it unchanged.
pub fn config_at(base: &GenConfig, var: SweepVar, v: f64, seed: u64) -> Result<GenConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match var {
        SweepVar::LambdaDeg => cfg.lambda_deg = v,
        SweepVar::Nu => cfg.nu = v,
        SweepVar::D => {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("dimension must be a nonnegative integer, got {v}")));
            }
            cfg.d1 = v as usize;
            cfg.d2 = v as usize;
            cfg.sigma_full = None;
        }
        SweepVar::ParetoA => cfg.pareto_a = if v.is_infinite() { None } else { Some(v) },
        _ => {}
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub sweep_var: String,
    pub value: f64,
    pub rep: usize,
    pub matched_nmi: f64,
    pub misclass: f64,
    pub runtime_ms: f64,
}

pub const CSV_HEADER: [&str; 7] = ["method", "sweep_var", "value", "rep", "matched_nmi", "misclass", "runtime_ms"];

/// Seed of one `(value, rep)` cell.
pub fn cell_seed(base: u64, value: f64, rep: usize) -> u64 {
    derive_seed(base, &[value.to_bits(), rep as u64])
}

/// Keeps `round(frac n_r)` uniformly chosen nodes per side (at least one).
pub fn subsample(data: &Dataset, frac: f64, rng: &mut Rng) -> Dataset {
    let pick = |n: usize, rng: &mut Rng| {
        let m = ((frac * n as f64).round() as usize).clamp(1, n);
        let mut keep = sample(rng, n, m).into_vec();
        keep.sort_unstable();
        keep
    };
    let keep1 = pick(data.graph.n1(), rng);
    let keep2 = pick(data.graph.n2(), rng);
    let rows = |x: &Option<DMatrix<f64>>, keep: &[usize]| x.as_ref().map(|x| x.select_rows(keep));
    Dataset {
        graph: data.graph.induced(&keep1, &keep2),
        covariates: CovariateSet { x1: rows(&data.covariates.x1, &keep1), x2: rows(&data.covariates.x2, &keep2) },
        z1: keep1.iter().map(|&i| data.z1[i]).collect(),
        z2: keep2.iter().map(|&j| data.z2[j]).collect(),
        k: data.k,
    }
}

/// Adds Erdos-Renyi edges with expected average degree `deg`; pairs already
/// connected are left as they are.
pub fn add_noise(graph: &BipartiteGraph, deg: f64, rng: &mut Rng) -> Result<BipartiteGraph> {
    let (n1, n2) = (graph.n1(), graph.n2());
    let pairs = n1 as u64 * n2 as u64;
    let rate = (deg / harmonic_size(n1, n2)).min(1.0);
    if deg <= 0.0 {
        return Ok(graph.clone());
    }
    let m = Binomial::new(pairs, rate).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(rng) as usize;
    let mut chosen: HashSet<(usize, usize)> = HashSet::with_capacity(m);
    let mut order = Vec::with_capacity(m);
    if m as u64 * 2 > pairs {
        for i in 0..n1 {
            for j in 0..n2 {
                order.push((i, j));
            }
        }
        let idx = sample(rng, pairs as usize, m).into_vec();
        order = idx.into_iter().map(|t| order[t]).collect();
    } else {
        while order.len() < m {
            let pair = (rng.random_range(0..n1), rng.random_range(0..n2));
            if chosen.insert(pair) {
                order.push(pair);
            }
        }
    }
    let mut edges: Vec<Edge> = graph.edges().collect();
    edges.extend(order.into_iter().filter(|&(i, j)| graph.weight(i, j) == 0).map(|(i, j)| Edge { i, j, w: 1 }));
    BipartiteGraph::new(n1, n2, edges)
}

struct Cell {
    vi: usize,
    rep: usize,
}

fn dataset_for(spec: &SweepSpec, value: f64, seed: u64) -> Result<Dataset> {
    let mut data = match &spec.source {
        Source::Simulated(base) => {
            let cfg = config_at(base, spec.sweep_var, value, seed)?;
            let sim = generate(&cfg)?;
            Dataset { graph: sim.graph, covariates: sim.covariates, z1: sim.z1, z2: sim.z2, k: cfg.k }
        }
        Source::Fixed(d) => d.clone(),
    };
    let mut local = spec.clone();
    local.apply_transform_value(value);
    let mut rng = seeded(derive_seed(seed, &[0x7a5f]));
    if let Some(f) = local.subsample_frac.filter(|&f| f < 1.0) {
        data = subsample(&data, f, &mut rng);
    }
    if let Some(c) = local.noise_deg {
        data.graph = add_noise(&data.graph, c, &mut rng)?;
    }
    Ok(data)
}

fn score(spec: &SweepSpec, method: &Method, data: &Dataset, omega: f64, seed: u64) -> Result<(f64, f64)> {
    let k = data.k;
    let mut init = InitSpec::new(method.init);
    init.omega = omega;
    // the initializer seed ignores the method so a fit and its bare initializer see the same start
    init.seed = derive_seed(seed, &[0x1417]);
    let truth = Some((data.z1.as_slice(), data.z2.as_slice()));
    let report = match method.fit {
        None => {
            let labels = hard_labels(&data.graph, &data.covariates, truth, k, &init)?;
            let (e1, e2) = labels.filled();
            evaluate_hard(&data.z1, &data.z2, &e1, &e2)?
        }
        Some(variant) => {
            let (t1, t2) = initialize(&data.graph, &data.covariates, truth, k, &init)?;
            let mut opts = FitOptions::new(k);
            opts.likelihood = spec.likelihood();
            opts.degree_correct = variant.degree_correct;
            opts.use_covariates = variant.use_covariates;
            opts.eps = spec.fit.eps;
            opts.max_outer = spec.fit.max_outer;
            opts.pq_init = spec.fit.pq_init;
            opts.seed = derive_seed(seed, &[0xf17]);
            let res = fit(&data.graph, &data.covariates, &t1, &t2, &opts)?;
            evaluate(&data.z1, &data.z2, res.tau1.matrix(), res.tau2.matrix())?
        }
    };
    Ok((report.matched_nmi, report.misclassification_rate))
}

fn run_cell(spec: &SweepSpec, cell: &Cell) -> Vec<SweepRow> {
    let value = spec.values[cell.vi];
    let seed = cell_seed(spec.seed, value, cell.rep);
    let mut local = spec.clone();
    local.apply_transform_value(value);
    let row = |m: &Method, nmi: f64, mis: f64, ms: f64| SweepRow {
        method: m.to_string(),
        sweep_var: spec.sweep_var.name().to_string(),
        value,
        rep: cell.rep,
        matched_nmi: nmi,
        misclass: mis,
        runtime_ms: ms,
    };
    let data = match dataset_for(spec, value, seed) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("{} = {value}, rep {}: data generation failed: {e}", spec.sweep_var, cell.rep);
            return spec.methods.iter().map(|m| row(m, f64::NAN, f64::NAN, f64::NAN)).collect();
        }
    };
    spec.methods
        .iter()
        .map(|m| {
            let start = Instant::now();
            let out = score(spec, m, &data, local.omega, seed);
            let ms = if spec.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            match out {
                Ok((nmi, mis)) => row(m, nmi, mis, ms),
                Err(e) => {
                    log::warn!("{} = {value}, rep {}, {m}: {e}", spec.sweep_var, cell.rep);
                    row(m, f64::NAN, f64::NAN, if spec.timing { ms } else { f64::NAN })
                }
            }
        })
        .collect()
}

/// Runs all cells; `|values| * reps * |methods|` rows ordered by value, rep, method.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let cells: Vec<Cell> = (0..spec.values.len()).flat_map(|vi| (0..spec.reps).map(move |rep| Cell { vi, rep })).collect();
    let rows: Vec<Vec<SweepRow>> = cells.par_iter().map(|c| run_cell(spec, c)).collect();
    Ok(rows.into_iter().flatten().collect())
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.sweep_var.clone(),
            fmt_num(r.value),
            r.rep.to_string(),
            fmt_num(r.matched_nmi),
            fmt_num(r.misclass),
            fmt_num(r.runtime_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and quartiles of one `(method, value)` group, NaN rows excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub sweep_var: String,
    pub value: f64,
    pub n: usize,
    pub failed: usize,
    pub mean_nmi: f64,
    pub q25_nmi: f64,
    pub median_nmi: f64,
    pub q75_nmi: f64,
    pub iqr_nmi: f64,
    pub mean_misclass: f64,
}

/// Linear-interpolation quantile of sorted data; NaN when empty.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Groups rows by `(method, value)` in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    let mut groups: Vec<Vec<&SweepRow>> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.value.to_bits());
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(r),
            None => {
                keys.push(key);
                groups.push(vec![r]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let ok: Vec<&SweepRow> = g.iter().copied().filter(|r| !r.matched_nmi.is_nan()).collect();
            let mut nmi: Vec<f64> = ok.iter().map(|r| r.matched_nmi).collect();
            nmi.sort_by(f64::total_cmp);
            let mis: Vec<f64> = ok.iter().map(|r| r.misclass).collect();
            let (q25, q75) = (quantile(&nmi, 0.25), quantile(&nmi, 0.75));
            SummaryRow {
                method: g[0].method.clone(),
                sweep_var: g[0].sweep_var.clone(),
                value: g[0].value,
                n: ok.len(),
                failed: g.len() - ok.len(),
                mean_nmi: mean(&nmi),
                q25_nmi: q25,
                median_nmi: quantile(&nmi, 0.5),
                q75_nmi: q75,
                iqr_nmi: q75 - q25,
                mean_misclass: mean(&mis),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record([
        "method",
        "sweep_var",
        "value",
        "n",
        "failed",
        "mean_nmi",
        "q25_nmi",
        "median_nmi",
        "q75_nmi",
        "iqr_nmi",
        "mean_misclass",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.sweep_var.clone(),
            fmt_num(r.value),
            r.n.to_string(),
            r.failed.to_string(),
            fmt_num(r.mean_nmi),
            fmt_num(r.q25_nmi),
            fmt_num(r.median_nmi),
            fmt_num(r.q75_nmi),
            fmt_num(r.iqr_nmi),
            fmt_num(r.mean_misclass),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
