//! File formats.
//!
//! * Edge list: one edge per line, `side1_id<TAB>side2_id[<TAB>weight]`,
//!   weight a positive integer defaulting to 1. Blank lines and lines
//!   starting with `#` are skipped; repeated pairs add their weights.
//! * Covariates: headered CSV `id,f1,...,fd`.
//! * Labels: headered CSV `id,label`.
//!
//! Node ids are arbitrary strings mapped to dense indices in order of first
//! appearance. Isolated nodes cannot appear in an edge list, so callers
//! register ids from a node, covariate or label file before reading edges.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GenConfig;
use crate::graph::{BipartiteGraph, Edge};
use crate::spectral::InitSpec;
use crate::vb::{FitOptions, FitResult};

/// Dense indices for string node ids, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// `prefix0, prefix1, ...`
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::from_ids((0..n).map(|i| format!("{prefix}{i}"))).expect("numbered ids are distinct")
    }

    /// Fails on a repeated id.
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut m = Self::new();
        for id in ids {
            if m.index.contains_key(&id) {
                return Err(Error::InvalidParameter(format!("duplicate node id `{id}`")));
            }
            m.insert(id);
        }
        Ok(m)
    }

    pub fn insert(&mut self, id: String) -> usize {
        match self.index.entry(id) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let i = self.ids.len();
                self.ids.push(e.key().clone());
                e.insert(i);
                i
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: display(path), line, msg: msg.into() }
}

/// A graph read from an edge list with the id maps of both sides.
#[derive(Debug, Clone)]
pub struct EdgeList {
    pub graph: BipartiteGraph,
    pub ids1: IdMap,
    pub ids2: IdMap,
}

/// Reads an edge list, extending `ids1` and `ids2` with unseen ids.
pub fn read_edge_list(path: &Path, mut ids1: IdMap, mut ids2: IdMap) -> Result<EdgeList> {
    let reader = BufReader::new(File::open(path)?);
    let mut weights: HashMap<(usize, usize), u32> = HashMap::new();
    let mut order = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(path, lineno, format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let (a, b) = (fields[0].trim(), fields[1].trim());
        if a.is_empty() || b.is_empty() {
            return Err(parse_err(path, lineno, "empty node id"));
        }
        let w = match fields.get(2) {
            None => 1,
            Some(s) => match s.trim().parse::<u32>() {
                Ok(w) if w >= 1 => w,
                _ => return Err(parse_err(path, lineno, format!("weight `{}` is not a positive integer", s.trim()))),
            },
        };
        let i = ids1.insert(a.to_string());
        let j = ids2.insert(b.to_string());
        match weights.entry((i, j)) {
            Entry::Occupied(mut e) => {
                let total = e.get().checked_add(w).ok_or_else(|| parse_err(path, lineno, "edge weight overflows u32"))?;
                e.insert(total);
            }
            Entry::Vacant(e) => {
                e.insert(w);
                order.push((i, j));
            }
        }
    }
    let edges = order.into_iter().map(|(i, j)| Edge { i, j, w: weights[&(i, j)] });
    let graph = BipartiteGraph::new(ids1.len(), ids2.len(), edges)?;
    Ok(EdgeList { graph, ids1, ids2 })
}

pub fn write_edge_list(path: &Path, graph: &BipartiteGraph, ids1: &IdMap, ids2: &IdMap) -> Result<()> {
    if ids1.len() != graph.n1() || ids2.len() != graph.n2() {
        return Err(Error::Dimension("id maps do not match the graph".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in graph.edges() {
        if e.w == 1 {
            writeln!(w, "{}\t{}", ids1.id(e.i), ids2.id(e.j))?;
        } else {
            writeln!(w, "{}\t{}\t{}", ids1.id(e.i), ids2.id(e.j), e.w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

/// Rows of a headered CSV as `(line, fields)`.
fn csv_rows(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header[0].is_empty() {
        return Err(parse_err(path, 1, "missing header"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

/// Ids in the first column of a headered CSV, in file order.
pub fn read_id_column(path: &Path) -> Result<Vec<String>> {
    let (_, rows) = csv_rows(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let id = fields[0].clone();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty node id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(parse_err(path, line, format!("node id `{id}` already listed on line {first}")));
        }
        out.push(id);
    }
    Ok(out)
}

/// Registers the ids of the first column of `path` in `ids`.
pub fn register_ids(path: &Path, ids: &mut IdMap) -> Result<()> {
    for id in read_id_column(path)? {
        ids.insert(id);
    }
    Ok(())
}

/// Reads rows keyed by id and places them by `ids`; every id must appear exactly once.
fn keyed_rows(path: &Path, ids: &IdMap, width: usize) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let (header, rows) = csv_rows(path)?;
    if header.len() != width + 1 && width != 0 {
        return Err(parse_err(path, 1, format!("expected {} columns, header has {}", width + 1, header.len())));
    }
    let width = header.len() - 1;
    let mut placed: Vec<Option<(usize, Vec<String>)>> = vec![None; ids.len()];
    for (line, fields) in rows {
        if fields.len() != width + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", width + 1, fields.len())));
        }
        let i = ids.get(&fields[0]).ok_or_else(|| parse_err(path, line, format!("unknown node id `{}`", fields[0])))?;
        if let Some((first, _)) = &placed[i] {
            return Err(parse_err(path, line, format!("node id `{}` already listed on line {first}", fields[0])));
        }
        placed[i] = Some((line, fields[1..].to_vec()));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (i, row) in placed.into_iter().enumerate() {
        match row {
            Some(row) => out.push(row),
            None => return Err(Error::Dimension(format!("{}: no row for node `{}`", display(path), ids.id(i)))),
        }
    }
    Ok((header, out))
}

/// Covariates aligned to `ids` as an `n x d` matrix.
pub fn read_covariates(path: &Path, ids: &IdMap) -> Result<DMatrix<f64>> {
    let (header, rows) = keyed_rows(path, ids, 0)?;
    let d = header.len() - 1;
    if d == 0 {
        return Err(parse_err(path, 1, "covariate file has no feature columns"));
    }
    let mut x = DMatrix::zeros(ids.len(), d);
    for (i, (line, row)) in rows.iter().enumerate() {
        for (a, s) in row.iter().enumerate() {
            let v: f64 = s.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                parse_err(path, *line, format!("value `{s}` in column `{}` is not a finite number", header[a + 1]))
            })?;
            x[(i, a)] = v;
        }
    }
    Ok(x)
}

pub fn write_covariates(path: &Path, x: &DMatrix<f64>, ids: &IdMap) -> Result<()> {
    if x.nrows() != ids.len() {
        return Err(Error::Dimension("covariate rows do not match the id map".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend((1..=x.ncols()).map(|a| format!("f{a}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..x.nrows() {
        let mut rec = vec![ids.id(i).to_string()];
        rec.extend(x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Labels aligned to `ids`; each must be below `k` when `k` is given.
pub fn read_labels(path: &Path, ids: &IdMap, k: Option<usize>) -> Result<Vec<usize>> {
    let (header, rows) = keyed_rows(path, ids, 1)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let l: usize =
            row[0].parse().map_err(|_| parse_err(path, line, format!("{} `{}` is not a nonnegative integer", header[1], row[0])))?;
        if let Some(k) = k {
            if l >= k {
                return Err(parse_err(path, line, format!("label {l} out of range for K={k}")));
            }
        }
        out.push(l);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize], ids: &IdMap) -> Result<()> {
    if labels.len() != ids.len() {
        return Err(Error::Dimension("labels do not match the id map".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", "label"]).map_err(|e| csv_err(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([ids.id(i), &l.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Inverse of [`matrix_rows`]; `cols` is used when there are no rows.
pub fn rows_matrix(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    let c = rows.first().map_or(cols, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Estimated parameters in plain form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub p: f64,
    pub q: f64,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_cov: Vec<Vec<f64>>,
    pub noise_var: [f64; 2],
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    /// Posterior means of the community centers, one row per community.
    pub center_means: Vec<Vec<f64>>,
    pub center_covs: Vec<Vec<Vec<f64>>>,
}

/// Everything written by a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub k: usize,
    pub ids1: Vec<String>,
    pub ids2: Vec<String>,
    /// Row-major `n1 x K`.
    pub tau1: Vec<Vec<f64>>,
    pub tau2: Vec<Vec<f64>>,
    pub labels1: Vec<usize>,
    pub labels2: Vec<usize>,
    pub params: ParamsRecord,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded_at: Vec<usize>,
    pub options: FitOptions,
    pub init: Option<InitSpec>,
}

impl FitRecord {
    pub fn new(result: &FitResult, ids1: &IdMap, ids2: &IdMap, options: &FitOptions, init: Option<InitSpec>) -> Self {
        let p = &result.params;
        Self {
            k: options.k,
            ids1: ids1.ids().to_vec(),
            ids2: ids2.ids().to_vec(),
            tau1: matrix_rows(result.tau1.matrix()),
            tau2: matrix_rows(result.tau2.matrix()),
            labels1: result.tau1.harden(),
            labels2: result.tau2.harden(),
            params: ParamsRecord {
                p: p.block.p,
                q: p.block.q,
                pi1: p.block.pi1.clone(),
                pi2: p.block.pi2.clone(),
                prior_mean: vector(&p.covariates.mu),
                prior_cov: matrix_rows(&p.covariates.sigma),
                noise_var: p.covariates.sigma2,
                theta1: vector(&p.degrees.theta1),
                theta2: vector(&p.degrees.theta2),
                center_means: p.vargauss.mu_tilde.iter().map(vector).collect(),
                center_covs: p.vargauss.sigma_tilde.iter().map(matrix_rows).collect(),
            },
            elbo_trace: result.elbo_trace.clone(),
            iterations: result.iterations,
            converged: result.converged,
            reseeded_at: result.reseeded_at.clone(),
            options: options.clone(),
            init,
        }
    }

    pub fn id_maps(&self) -> Result<(IdMap, IdMap)> {
        Ok((IdMap::from_ids(self.ids1.iter().cloned())?, IdMap::from_ids(self.ids2.iter().cloned())?))
    }

    pub fn tau_matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((rows_matrix(&self.tau1, self.k)?, rows_matrix(&self.tau2, self.k)?))
    }
}

/// Files written by a simulation, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub edges: String,
    pub labels1: String,
    pub labels2: String,
    pub covariates1: Option<String>,
    pub covariates2: Option<String>,
}

/// Description of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub p: f64,
    pub q: f64,
    /// `K x (d1 + d2)` community centers.
    pub centers: Vec<Vec<f64>>,
    pub n_edges: usize,
    pub files: ManifestFiles,
}

/// `(path, line)` of a parse error.
pub fn parse_location(e: &Error) -> Option<(&str, usize)> {
    match e {
        Error::Parse { path, line, .. } => Some((path.as_str(), *line)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ids_follow_first_appearance() {
        let d = tmp();
        let p = d.path().join("e.tsv");
        fs::write(&p, "# comment\nb\tx\na\ty\t3\n\nb\ty\na\ty\n").unwrap();
        let el = read_edge_list(&p, IdMap::new(), IdMap::new()).unwrap();
        assert_eq!(el.ids1.ids(), ["b", "a"]);
        assert_eq!(el.ids2.ids(), ["x", "y"]);
        assert_eq!(el.graph.weight(1, 1), 4);
        assert_eq!(el.graph.weight(0, 0), 1);
        assert_eq!(el.graph.nnz(), 3);
    }

    #[test]
    fn registered_nodes_keep_isolated_ids() {
        let d = tmp();
        let p = d.path().join("e.tsv");
        fs::write(&p, "a\tx\n").unwrap();
        let ids1 = IdMap::from_ids(["z".to_string(), "a".to_string()]).unwrap();
        let el = read_edge_list(&p, ids1, IdMap::new()).unwrap();
        assert_eq!(el.graph.n1(), 2);
        assert_eq!(el.graph.weight(1, 0), 1);
        assert!(el.graph.row(0).0.is_empty());
    }

    #[test]
    fn malformed_edges_report_lines() {
        let d = tmp();
        let p = d.path().join("e.tsv");
        fs::write(&p, "a\tx\na\tx\t0\n").unwrap();
        let e = read_edge_list(&p, IdMap::new(), IdMap::new()).unwrap_err();
        assert_eq!(parse_location(&e).unwrap().1, 2);
        fs::write(&p, "a\tx\n\nonlyone\n").unwrap();
        let e = read_edge_list(&p, IdMap::new(), IdMap::new()).unwrap_err();
        assert_eq!(parse_location(&e).unwrap().1, 3);
    }

    #[test]
    fn edge_list_round_trip() {
        let d = tmp();
        let p = d.path().join("e.tsv");
        let g = BipartiteGraph::new(3, 2, [Edge { i: 0, j: 1, w: 2 }, Edge { i: 2, j: 0, w: 1 }]).unwrap();
        let (i1, i2) = (IdMap::numbered("u", 3), IdMap::numbered("v", 2));
        write_edge_list(&p, &g, &i1, &i2).unwrap();
        let el = read_edge_list(&p, i1.clone(), i2.clone()).unwrap();
        assert_eq!(el.graph, g);
    }

    #[test]
    fn covariates_and_labels_round_trip() {
        let d = tmp();
        let ids = IdMap::numbered("n", 3);
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -2.0, 1e-300, 3.5, 0.0, 7.25]);
        let pc = d.path().join("x.csv");
        write_covariates(&pc, &x, &ids).unwrap();
        assert_eq!(read_covariates(&pc, &ids).unwrap(), x);
        let pl = d.path().join("z.csv");
        write_labels(&pl, &[2, 0, 1], &ids).unwrap();
        assert_eq!(read_labels(&pl, &ids, Some(3)).unwrap(), vec![2, 0, 1]);
        assert!(read_labels(&pl, &ids, Some(2)).is_err());
        assert_eq!(read_id_column(&pl).unwrap(), ids.ids());
    }

    #[test]
    fn rows_are_aligned_by_id() {
        let d = tmp();
        let p = d.path().join("x.csv");
        fs::write(&p, "id,f1\nb,2\na,1\n").unwrap();
        let ids = IdMap::from_ids(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(read_covariates(&p, &ids).unwrap(), DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
    }

    #[test]
    fn bad_csv_rows_report_lines() {
        let d = tmp();
        let p = d.path().join("x.csv");
        let ids = IdMap::numbered("n", 2);
        fs::write(&p, "id,f1,f2\nn0,1,2\nn1,3\n").unwrap();
        assert_eq!(parse_location(&read_covariates(&p, &ids).unwrap_err()).unwrap().1, 3);
        fs::write(&p, "id,f1\nn0,1\nn1,abc\n").unwrap();
        assert_eq!(parse_location(&read_covariates(&p, &ids).unwrap_err()).unwrap().1, 3);
        fs::write(&p, "id,f1\nn0,1\nq,2\n").unwrap();
        assert_eq!(parse_location(&read_covariates(&p, &ids).unwrap_err()).unwrap().1, 3);
        fs::write(&p, "id,f1\nn0,1\n").unwrap();
        assert!(matches!(read_covariates(&p, &ids), Err(Error::Dimension(_))));
        fs::write(&p, "id,label\nn0,1\nn1,-1\n").unwrap();
        assert_eq!(parse_location(&read_labels(&p, &ids, None).unwrap_err()).unwrap().1, 3);
    }

    #[test]
    fn json_errors_carry_lines() {
        let d = tmp();
        let p = d.path().join("f.json");
        fs::write(&p, "{\n  \"k\": 2,\n  oops\n}").unwrap();
        let e = read_json::<serde_json::Value>(&p).unwrap_err();
        assert_eq!(parse_location(&e).unwrap().1, 3);
    }
}
