//! Datasets: file loaders, feature normalisation, and a stochastic block model
//! generator for small synthetic experiments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{read_edge_list, write_edge_list, SparseGraph};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

/// Node labels; used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Multiclass { classes: Vec<usize>, num_classes: usize },
    /// `N×C` matrix of 0/1 entries.
    Multilabel(Tensor<f64>),
}

impl Labels {
    pub fn task(&self) -> TaskKind {
        match self {
            Labels::Multiclass { .. } => TaskKind::Multiclass,
            Labels::Multilabel(_) => TaskKind::Multilabel,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Multiclass { classes, .. } => classes.len(),
            Labels::Multilabel(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Labels::Multiclass { num_classes, .. } => *num_classes,
            Labels::Multilabel(t) => t.cols(),
        }
    }

    /// Labels of the given rows only.
    pub fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Multiclass { classes, num_classes } => Labels::Multiclass {
                classes: idx.iter().map(|&i| classes[i]).collect(),
                num_classes: *num_classes,
            },
            Labels::Multilabel(t) => Labels::Multilabel(t.select_rows(idx)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphDataset {
    pub name: String,
    pub graph: SparseGraph,
    pub features: Tensor<f64>,
    pub labels: Labels,
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn task(&self) -> TaskKind {
        self.labels.task()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(Error::CountMismatch(format!("{} feature rows for {n} nodes", self.features.rows())));
        }
        if self.labels.len() != n {
            return Err(Error::CountMismatch(format!("{} labels for {n} nodes", self.labels.len())));
        }
        if let Labels::Multiclass { classes, num_classes } = &self.labels {
            if let Some(&c) = classes.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::Config(format!("class {c} outside [0, {num_classes})")));
            }
        }
        self.graph.validate()
    }

    /// Relabel nodes: node `i` becomes node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Self {
            name: self.name.clone(),
            graph: self.graph.permute(perm)?,
            features: self.features.select_rows(&inverse),
            labels: self.labels.subset(&inverse),
        })
    }
}

/// Divide each row by its L1 norm; zero rows are left unchanged.
pub fn l1_normalize_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let norm: f64 = out.row(r).iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_fields<T: std::str::FromStr>(path: &Path, lineno: usize, line: &str) -> Result<Vec<T>> {
    line.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse().map_err(|_| Error::parse(path, lineno, format!("bad value {tok:?}")))
        })
        .collect()
}

/// Parse a headerless CSV of decimal values into an `N×d` matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor<f64>> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in data_lines(&text) {
        let vals: Vec<f64> = parse_fields(path, lineno, line)?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::parse(path, lineno, format!("expected {c} fields, found {}", vals.len())));
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::from_vec(rows, cols.unwrap_or(0), data)
}

/// Write a matrix as headerless CSV; values use the shortest text that parses
/// back to the same `f64`.
pub fn write_matrix_csv(path: &Path, m: &Tensor<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 12);
    for r in 0..m.rows() {
        for (j, v) in m.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path, task: TaskKind, num_classes: Option<usize>) -> Result<Labels> {
    match task {
        TaskKind::Multiclass => {
            let text = read_text(path)?;
            let mut classes = Vec::new();
            for (lineno, line) in data_lines(&text) {
                let c: usize = line
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad class label {line:?}")))?;
                if let Some(k) = num_classes {
                    if c >= k {
                        return Err(Error::parse(path, lineno, format!("label {c} outside [0, {k})")));
                    }
                }
                classes.push(c);
            }
            let num_classes = num_classes.unwrap_or_else(|| classes.iter().max().map_or(0, |m| m + 1));
            Ok(Labels::Multiclass { classes, num_classes })
        }
        TaskKind::Multilabel => {
            let m = read_matrix_csv(path)?;
            if let Some(k) = num_classes {
                if m.cols() != k {
                    return Err(Error::CountMismatch(format!("{} label columns, declared {k}", m.cols())));
                }
            }
            if let Some(pos) = m.data().iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::parse(path, pos / m.cols().max(1) + 1, "multilabel entries must be 0 or 1"));
            }
            Ok(Labels::Multilabel(m))
        }
    }
}

/// Load edges, features and labels. The node count is the number of feature
/// rows; labels must agree and every edge endpoint must be in range.
pub fn load_dataset(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    task: TaskKind,
    num_classes: Option<usize>,
) -> Result<GraphDataset> {
    let features = read_matrix_csv(feature_path)?;
    let labels = read_labels(label_path, task, num_classes)?;
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::CountMismatch(format!(
            "{} has {n} feature rows but {} has {} labels",
            feature_path.display(),
            label_path.display(),
            labels.len()
        )));
    }
    let edges = read_edge_list(edge_path)?;
    let graph = SparseGraph::from_edges(&edges, n)?;
    let name = feature_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(GraphDataset { name, graph, features, labels })
}

/// JSON dataset manifest; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub task: TaskKind,
    pub l1_normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Absolute or manifest-relative file paths, in (edges, features, labels) order.
    pub fn resolved_paths(&self, manifest_path: &Path) -> [PathBuf; 3] {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        [
            Self::resolve(base, &self.edges),
            Self::resolve(base, &self.features),
            Self::resolve(base, &self.labels),
        ]
    }
}

pub fn load_manifest(path: &Path) -> Result<GraphDataset> {
    let m = Manifest::read(path)?;
    let [e, f, l] = m.resolved_paths(path);
    let mut ds = load_dataset(&e, &f, &l, m.task, m.num_classes)?;
    if m.l1_normalize {
        ds.features = l1_normalize_rows(&ds.features);
    }
    if let Some(name) = m.name {
        ds.name = name;
    } else if let Some(stem) = path.file_stem() {
        ds.name = stem.to_string_lossy().into_owned();
    }
    Ok(ds)
}

/// Write `edges.txt`, `features.csv`, `labels.{txt,csv}` and `manifest.json`
/// into `dir`. Features are written as-is (`l1_normalize: false`).
pub fn save_dataset(ds: &GraphDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_edge_list(&dir.join("edges.txt"), &ds.graph)?;
    write_matrix_csv(&dir.join("features.csv"), &ds.features)?;
    let (label_file, num_classes) = match &ds.labels {
        Labels::Multiclass { classes, num_classes } => {
            let mut s = String::new();
            for c in classes {
                let _ = writeln!(s, "{c}");
            }
            let p = dir.join("labels.txt");
            fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
            ("labels.txt", *num_classes)
        }
        Labels::Multilabel(t) => {
            write_matrix_csv(&dir.join("labels.csv"), t)?;
            ("labels.csv", t.cols())
        }
    };
    let manifest = Manifest {
        edges: "edges.txt".into(),
        features: "features.csv".into(),
        labels: label_file.into(),
        task: ds.task(),
        l1_normalize: false,
        num_classes: Some(num_classes),
        name: Some(ds.name.clone()),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub num_blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Magnitude of each block's mean feature vector entries.
    pub signal: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.nodes_per_block == 0 || self.feature_dim == 0 {
            return Err(Error::Config("SBM counts must be >= 1".into()));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!(
                "SBM needs 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("SBM noise_sigma must be > 0".into()));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_blocks * self.nodes_per_block
    }
}

/// Sylvester–Hadamard entry `H[i][j]` for a power-of-two order: `(-1)^popcount(i & j)`.
fn hadamard(i: usize, j: usize) -> f64 {
    if (i & j).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Block `b`'s mean feature vector: row `b+1` of the smallest Hadamard matrix
/// with more than `num_blocks` rows, tiled across the feature dimensions and
/// scaled by `signal`. Distinct blocks get mutually orthogonal ±signal
/// patterns (exactly so when `feature_dim` is a multiple of the order).
pub fn sbm_block_mean(cfg: &SbmConfig, block: usize) -> Vec<f64> {
    let order = (cfg.num_blocks + 1).next_power_of_two();
    (0..cfg.feature_dim).map(|j| cfg.signal * hadamard(block + 1, j % order)).collect()
}

/// Stochastic block model: node `i` belongs to block `i / nodes_per_block`.
/// Pairs are visited in `(i, j)`, `i < j` order, edges first, then features
/// row by row, so the output is a pure function of the config.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphDataset> {
    cfg.validate()?;
    let n = cfg.num_nodes();
    let block = |i: usize| i / cfg.nodes_per_block;
    let mut rng = rng::seeded(cfg.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = SparseGraph::from_edges(&edges, n)?;

    let means: Vec<Vec<f64>> = (0..cfg.num_blocks).map(|b| sbm_block_mean(cfg, b)).collect();
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    for i in 0..n {
        for &m in &means[block(i)] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + cfg.noise_sigma * z);
        }
    }
    let features = Tensor::from_vec(n, cfg.feature_dim, data)?;
    let labels = Labels::Multiclass { classes: (0..n).map(block).collect(), num_classes: cfg.num_blocks };
    Ok(GraphDataset { name: "sbm".into(), graph, features, labels })
}
