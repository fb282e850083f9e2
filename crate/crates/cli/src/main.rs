//! `mbisbm`: simulate, initialize, fit, evaluate and sweep matched bipartite SBMs.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mbisbm::eval::{evaluate, EvalReport};
use mbisbm::generator::{generate, GenConfig};
use mbisbm::io::{
    matrix_rows, read_covariates, read_edge_list, read_json, read_labels, register_ids, write_covariates, write_edge_list,
    write_json, write_labels, EdgeList, FitRecord, IdMap, Manifest, ManifestFiles,
};
use mbisbm::model::{harden, CovariateSet, Likelihood};
use mbisbm::spectral::{initialize, InitMethod, InitSpec};
use mbisbm::sweep::{run_sweep, summarize, write_rows_csv, write_summary_csv, Dataset, Method, Source, SweepSpec, SweepVar};
use mbisbm::vb::{fit, FitOptions, PqInit};
use nalgebra::DMatrix;

/// Matched bipartite stochastic block models with node covariates.
#[derive(Parser, Debug)]
#[command(name = "mbisbm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic network with covariates and write it to a directory.
    Simulate(SimulateArgs),
    /// Compute initial labels and write them as label CSVs.
    Init(InitArgs),
    /// Fit the variational model and write the result as JSON.
    Fit(FitArgs),
    /// Score a fit against true labels.
    Eval(EvalArgs),
    /// Run a Monte Carlo sweep and write one CSV row per (value, rep, method).
    Sweep(SweepArgs),
}

/// Generator settings shared by `simulate` and `sweep`.
#[derive(Args, Debug)]
struct GenArgs {
    /// Generator config as JSON; replaces every other generator flag except --seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Nodes on side 1.
    #[arg(long, default_value_t = 200)]
    n1: usize,
    /// Nodes on side 2.
    #[arg(long, default_value_t = 800)]
    n2: usize,
    /// Number of communities per side.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Expected average degree.
    #[arg(long, default_value_t = 3.1)]
    lambda: f64,
    /// Out-in ratio q/p, in [0, 1).
    #[arg(long, default_value_t = 1.0 / 7.0)]
    alpha: f64,
    /// Scale of the community-center prior.
    #[arg(long, default_value_t = 0.0)]
    nu: f64,
    /// Covariate dimension on side 1.
    #[arg(long, default_value_t = 0)]
    d1: usize,
    /// Covariate dimension on side 2.
    #[arg(long, default_value_t = 0)]
    d2: usize,
    /// Covariate noise standard deviation, one value for both sides or `s1,s2`.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    sigma_cov: Vec<f64>,
    /// Community proportions on side 1 (comma-separated; uniform when omitted).
    #[arg(long, value_delimiter = ',')]
    pi1: Option<Vec<f64>>,
    /// Community proportions on side 2 (comma-separated; uniform when omitted).
    #[arg(long, value_delimiter = ',')]
    pi2: Option<Vec<f64>>,
    /// Pareto shape of the degree parameters; turns on degree heterogeneity.
    #[arg(long)]
    pareto_a: Option<f64>,
    /// Edge distribution: poisson or bernoulli.
    #[arg(long, default_value = "poisson")]
    likelihood: Likelihood,
    /// Clamp Bernoulli rates above one instead of failing.
    #[arg(long)]
    clamp_rates: bool,
}

impl GenArgs {
    fn config(&self, seed: u64) -> Result<GenConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<GenConfig>(path)?,
            None => {
                let mut cfg = GenConfig::new(self.n1, self.n2, self.k, self.lambda, self.alpha);
                cfg.nu = self.nu;
                cfg.d1 = self.d1;
                cfg.d2 = self.d2;
                cfg.sigma_cov = match self.sigma_cov.as_slice() {
                    [s] => [*s, *s],
                    [a, b] => [*a, *b],
                    other => bail!("--sigma-cov takes one or two values, got {}", other.len()),
                };
                if let Some(pi) = &self.pi1 {
                    cfg.pi1 = pi.clone();
                }
                if let Some(pi) = &self.pi2 {
                    cfg.pi2 = pi.clone();
                }
                cfg.pareto_a = self.pareto_a;
                cfg.likelihood = self.likelihood;
                cfg.clamp_rates = self.clamp_rates;
                cfg
            }
        };
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    generator: GenArgs,
    /// Seed of the generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Where a graph and its covariates come from.
#[derive(Args, Debug)]
struct DataArgs {
    /// Tab-separated edge list `id1<TAB>id2[<TAB>weight]`.
    #[arg(long)]
    edges: PathBuf,
    /// Covariate CSVs `side1.csv,side2.csv`; use `-` for a side without covariates.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<PathBuf>>,
    /// CSVs whose first column lists every node, `side1.csv,side2.csv`; registers isolated nodes.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<PathBuf>>,
}

/// Settings of the initializer.
#[derive(Args, Debug)]
struct InitSettings {
    /// bisc, scp, covariate-kmeans, random or perturbed-truth.
    #[arg(long, default_value = "bisc")]
    init: InitMethod,
    /// True label CSVs `side1.csv,side2.csv` (perturbed-truth only).
    #[arg(long, value_delimiter = ',')]
    truth: Option<Vec<PathBuf>>,
    /// Weight on the truth for perturbed-truth.
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// k-means restarts for the spectral and covariate initializers.
    #[arg(long, default_value_t = 10)]
    kmeans_restarts: usize,
    /// Seed of the initializer.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl InitSettings {
    fn spec(&self) -> InitSpec {
        let mut spec = InitSpec::new(self.init);
        spec.omega = self.omega;
        spec.kmeans_restarts = self.kmeans_restarts;
        spec.seed = self.seed;
        spec
    }
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    settings: InitSettings,
    /// Number of communities.
    #[arg(long)]
    k: usize,
    /// Output label CSVs `side1.csv,side2.csv`.
    #[arg(long, value_delimiter = ',', required = true)]
    out: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    settings: InitSettings,
    /// Number of communities.
    #[arg(long)]
    k: usize,
    /// Fit per-node degree propensities.
    #[arg(long)]
    dc: bool,
    /// Edge distribution: poisson or bernoulli.
    #[arg(long, default_value = "poisson")]
    likelihood: Likelihood,
    /// Stop when no label probability moves by more than eps / K.
    #[arg(long, default_value_t = 1e-2)]
    eps: f64,
    /// Cap on outer iterations.
    #[arg(long, default_value_t = 100)]
    max_outer: usize,
    /// Starting rates: `from-tau` (estimated from the initial labels) or `p,q`.
    #[arg(long, default_value = "from-tau")]
    pq_init: String,
    /// Output JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// True label CSVs `side1.csv,side2.csv`.
    #[arg(long, value_delimiter = ',', required = true)]
    truth: Vec<PathBuf>,
    /// Fit JSON written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    generator: GenArgs,
    /// Sweep a fixed graph instead of simulating: edge list path.
    #[arg(long, requires = "truth")]
    edges: Option<PathBuf>,
    /// Covariate CSVs of the fixed graph, `side1.csv,side2.csv` (`-` for none).
    #[arg(long, value_delimiter = ',', requires = "edges")]
    covariates: Option<Vec<PathBuf>>,
    /// True label CSVs of the fixed graph, `side1.csv,side2.csv`.
    #[arg(long, value_delimiter = ',', requires = "edges")]
    truth: Option<Vec<PathBuf>>,
    /// Swept variable: lambda, nu, d, pareto-a, omega, subsample-frac or noise-deg.
    #[arg(long = "var")]
    sweep_var: SweepVar,
    /// Comma-separated values of the swept variable.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Replications per value.
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Comma-separated methods, e.g. `bisc,scp,mbisbm(bisc),mbisbm-dc(perturbed-truth)`.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<Method>,
    /// Base seed; each (value, rep) derives its own.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight on the truth for perturbed-truth.
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// Stopping tolerance of fitted methods.
    #[arg(long, default_value_t = 1e-2)]
    eps: f64,
    /// Cap on outer iterations of fitted methods.
    #[arg(long, default_value_t = 100)]
    max_outer: usize,
    /// Starting rates of fitted methods: `from-tau` or `p,q`.
    #[arg(long, default_value = "0.1,0.01")]
    pq_init: String,
    /// Keep this fraction of the nodes on each side before scoring.
    #[arg(long)]
    subsample_frac: Option<f64>,
    /// Add Erdos-Renyi edges raising the average degree by this much.
    #[arg(long)]
    add_noise_deg: Option<f64>,
    /// Record wall-clock run times (makes the output nondeterministic).
    #[arg(long)]
    timing: bool,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    threads: Option<usize>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write mean, median and IQR of NMI per (method, value) to this CSV.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

fn pair(paths: &[PathBuf], flag: &str) -> Result<[Option<PathBuf>; 2]> {
    let [a, b] = paths else {
        bail!("--{flag} takes two comma-separated paths, got {}", paths.len());
    };
    let opt = |p: &PathBuf| (p.as_os_str() != "-").then(|| p.clone());
    Ok([opt(a), opt(b)])
}

fn required_pair(paths: &[PathBuf], flag: &str) -> Result<[PathBuf; 2]> {
    match pair(paths, flag)? {
        [Some(a), Some(b)] => Ok([a, b]),
        _ => bail!("--{flag} needs a path for both sides"),
    }
}

fn parse_pq(s: &str) -> Result<PqInit> {
    if s == "from-tau" {
        return Ok(PqInit::FromTau);
    }
    let parts: Vec<&str> = s.split(',').collect();
    let [p, q] = parts.as_slice() else {
        bail!("--pq-init must be `from-tau` or `p,q`, got `{s}`");
    };
    Ok(PqInit::Fixed(p.trim().parse().context("--pq-init p")?, q.trim().parse().context("--pq-init q")?))
}

struct LoadedData {
    edges: EdgeList,
    covariates: CovariateSet,
}

/// Reads the graph; node ids come from `--nodes`, then the covariate files, then the edge list.
fn load_data(edges: &Path, covariates: Option<&[PathBuf]>, nodes: Option<&[PathBuf]>) -> Result<LoadedData> {
    let mut ids = [IdMap::new(), IdMap::new()];
    let cov_paths = covariates.map(|c| pair(c, "covariates")).transpose()?.unwrap_or([None, None]);
    if let Some(nodes) = nodes {
        for (side, path) in required_pair(nodes, "nodes")?.iter().enumerate() {
            register_ids(path, &mut ids[side])?;
        }
    }
    for (side, path) in cov_paths.iter().enumerate() {
        if let Some(path) = path {
            register_ids(path, &mut ids[side])?;
        }
    }
    let [ids1, ids2] = ids;
    let edges = read_edge_list(edges, ids1, ids2)?;
    let read = |path: &Option<PathBuf>, ids: &IdMap| path.as_ref().map(|p| read_covariates(p, ids)).transpose();
    let covariates = CovariateSet::new(read(&cov_paths[0], &edges.ids1)?, read(&cov_paths[1], &edges.ids2)?, &edges.graph)?;
    log::info!(
        "graph with {} + {} nodes and {} edges, covariate dims {:?}",
        edges.graph.n1(),
        edges.graph.n2(),
        edges.graph.nnz(),
        covariates.dims()
    );
    Ok(LoadedData { edges, covariates })
}

fn read_truth(paths: &[PathBuf], ids1: &IdMap, ids2: &IdMap, k: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let [a, b] = required_pair(paths, "truth")?;
    Ok((read_labels(&a, ids1, k)?, read_labels(&b, ids2, k)?))
}

fn initial_labels(data: &LoadedData, settings: &InitSettings, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let truth = match &settings.truth {
        Some(paths) => Some(read_truth(paths, &data.edges.ids1, &data.edges.ids2, Some(k))?),
        None => None,
    };
    let truth_refs = truth.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
    Ok(initialize(&data.edges.graph, &data.covariates, truth_refs, k, &settings.spec())?)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.generator.config(args.seed)?;
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let ids1 = IdMap::numbered("u", cfg.n1);
    let ids2 = IdMap::numbered("v", cfg.n2);
    let dir = &args.out_dir;
    write_edge_list(&dir.join("edges.tsv"), &data.graph, &ids1, &ids2)?;
    write_labels(&dir.join("labels1.csv"), &data.z1, &ids1)?;
    write_labels(&dir.join("labels2.csv"), &data.z2, &ids2)?;
    let mut cov_files = [None, None];
    for (side, (x, ids)) in [(&data.covariates.x1, &ids1), (&data.covariates.x2, &ids2)].into_iter().enumerate() {
        if let Some(x) = x {
            let name = format!("covariates{}.csv", side + 1);
            write_covariates(&dir.join(&name), x, ids)?;
            cov_files[side] = Some(name);
        }
    }
    let [covariates1, covariates2] = cov_files;
    let manifest = Manifest {
        p: data.p,
        q: data.q,
        centers: matrix_rows(&data.centers),
        n_edges: data.graph.nnz(),
        files: ManifestFiles {
            edges: "edges.tsv".into(),
            labels1: "labels1.csv".into(),
            labels2: "labels2.csv".into(),
            covariates1,
            covariates2,
        },
        config: cfg,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!("wrote {} edges to {}", manifest.n_edges, dir.display());
    Ok(())
}

fn init(args: &InitArgs) -> Result<()> {
    let [out1, out2] = required_pair(&args.out, "out")?;
    let data = load_data(&args.data.edges, args.data.covariates.as_deref(), args.data.nodes.as_deref())?;
    let (t1, t2) = initial_labels(&data, &args.settings, args.k)?;
    write_labels(&out1, &harden(&t1), &data.edges.ids1)?;
    write_labels(&out2, &harden(&t2), &data.edges.ids2)?;
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let data = load_data(&args.data.edges, args.data.covariates.as_deref(), args.data.nodes.as_deref())?;
    let (t1, t2) = initial_labels(&data, &args.settings, args.k)?;
    let mut opts = FitOptions::new(args.k);
    opts.likelihood = args.likelihood;
    opts.degree_correct = args.dc;
    opts.use_covariates = !data.covariates.is_empty();
    opts.eps = args.eps;
    opts.max_outer = args.max_outer;
    opts.pq_init = parse_pq(&args.pq_init)?;
    opts.seed = args.settings.seed;
    opts.validate()?;
    let res = fit(&data.edges.graph, &data.covariates, &t1, &t2, &opts)?;
    if !res.converged {
        log::warn!("no convergence after {} outer iterations", res.iterations);
    }
    let record = FitRecord::new(&res, &data.edges.ids1, &data.edges.ids2, &opts, Some(args.settings.spec()));
    write_json(&args.out, &record)?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let record: FitRecord = read_json(&args.fit)?;
    let (ids1, ids2) = record.id_maps()?;
    let (z1, z2) = read_truth(&args.truth, &ids1, &ids2, None)?;
    let (tau1, tau2) = record.tau_matrices()?;
    let report: EvalReport = evaluate(&z1, &z2, &tau1, &tau2)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let source = match &args.edges {
        Some(edges) => {
            let data = load_data(edges, args.covariates.as_deref(), None)?;
            let truth = args.truth.as_deref().context("--edges needs --truth")?;
            let (z1, z2) = read_truth(truth, &data.edges.ids1, &data.edges.ids2, None)?;
            let k = z1.iter().chain(&z2).max().map_or(1, |&m| m + 1);
            Source::Fixed(Dataset { graph: data.edges.graph, covariates: data.covariates, z1, z2, k })
        }
        None => Source::Simulated(args.generator.config(args.seed)?),
    };
    let mut spec = SweepSpec::new(source, args.sweep_var, args.values.clone(), args.reps, args.methods.clone());
    spec.seed = args.seed;
    spec.omega = args.omega;
    spec.fit.eps = args.eps;
    spec.fit.max_outer = args.max_outer;
    spec.fit.pq_init = parse_pq(&args.pq_init)?;
    spec.subsample_frac = args.subsample_frac;
    spec.noise_deg = args.add_noise_deg;
    spec.timing = args.timing;
    spec.validate()?;
    let rows = run_sweep(&spec)?;
    match &args.out {
        Some(path) => write_rows_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?, &rows)?,
        None => write_rows_csv(io::stdout().lock(), &rows)?,
    }
    if let Some(path) = &args.plot_data {
        write_summary_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?, &summarize(&rows))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Init(a) => init(a),
        Command::Fit(a) => run_fit(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<mbisbm::Error>().is_some_and(mbisbm::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
