//! Sparse graph storage, shift operators and K-step feature propagation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Immutable CSR adjacency of an undirected, unweighted graph.
///
/// Symmetric, no self-loops, no duplicate entries, columns strictly
/// increasing within each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseGraph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparseGraph {
    /// Symmetrize `edges`, drop self-loops and duplicates, and pack into CSR.
    pub fn from_edges(edges: &[(usize, usize)], num_nodes: usize) -> Result<Self> {
        let mut directed = Vec::with_capacity(edges.len() * 2);
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::InvalidEdge(i, j, num_nodes));
            }
            if i != j {
                directed.push((i, j));
                directed.push((j, i));
            }
        }
        directed.sort_unstable();
        directed.dedup();

        let mut row_offsets = vec![0usize; num_nodes + 1];
        for &(i, _) in &directed {
            row_offsets[i + 1] += 1;
        }
        for i in 0..num_nodes {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = directed.into_iter().map(|(_, j)| j).collect();
        Ok(Self { num_nodes, row_offsets, col_indices })
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self { num_nodes, row_offsets: vec![0; num_nodes + 1], col_indices: Vec::new() }
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored (directed) entries; twice the undirected edge count.
    #[inline]
    pub fn num_directed_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes)
            .flat_map(move |i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Relabel nodes: node `i` becomes node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        let edges: Vec<_> = self.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(&edges, self.num_nodes)
    }

    pub fn to_dense<F: Scalar>(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(self.num_nodes, self.num_nodes);
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                t.set(i, j, F::one());
            }
        }
        t
    }

    /// Check every structural invariant; used by loaders and tests.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("malformed graph: {msg}")));
        if self.row_offsets.len() != self.num_nodes + 1 || self.row_offsets[0] != 0 {
            return bad("row offset length".into());
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len() {
            return bad("last row offset != entry count".into());
        }
        for i in 0..self.num_nodes {
            if self.row_offsets[i] > self.row_offsets[i + 1] {
                return bad(format!("row offsets decrease at {i}"));
            }
            let row = self.neighbors(i);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} not strictly increasing"));
            }
            for &j in row {
                if j >= self.num_nodes || j == i {
                    return bad(format!("entry ({i}, {j})"));
                }
                if !self.has_edge(j, i) {
                    return bad(format!("({i}, {j}) has no reverse"));
                }
            }
        }
        Ok(())
    }
}

/// Convenience alias mirroring the edge-list builder.
pub fn build_csr(edges: &[(usize, usize)], num_nodes: usize) -> Result<SparseGraph> {
    SparseGraph::from_edges(edges, num_nodes)
}

/// Read a whitespace-separated edge list. Lines starting with `#` and blank
/// lines are skipped.
pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = fields
                .next()
                .ok_or_else(|| Error::parse(path, lineno + 1, "expected two node ids"))?;
            tok.parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad node id {tok:?}")))
        };
        let (i, j) = (next()?, next()?);
        if fields.next().is_some() {
            return Err(Error::parse(path, lineno + 1, "expected exactly two node ids"));
        }
        edges.push((i, j));
    }
    Ok(edges)
}

pub fn write_edge_list(path: &Path, graph: &SparseGraph) -> Result<()> {
    let mut out = String::new();
    for (i, j) in graph.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A linear map on node-feature matrices, usable as a differentiable primitive.
pub trait LinearOperator<F: Scalar>: Send + Sync {
    fn num_nodes(&self) -> usize;
    fn apply(&self, m: &Tensor<F>) -> Result<Tensor<F>>;
    fn apply_transpose(&self, m: &Tensor<F>) -> Result<Tensor<F>>;
}

/// Square CSR matrix with values, plus a uniform diagonal term:
/// the operator is `diagonal · I + sparse`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<F = f64> {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<F>,
    diagonal: F,
}

impl<F: Scalar> CsrMatrix<F> {
    pub fn new(
        n: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<F>,
        diagonal: F,
    ) -> Self {
        debug_assert_eq!(row_offsets.len(), n + 1);
        debug_assert_eq!(col_indices.len(), values.len());
        Self { n, row_offsets, col_indices, values, diagonal }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn diagonal(&self) -> F {
        self.diagonal
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, F)> + '_ {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n + 1];
        for &j in &self.col_indices {
            counts[j + 1] += 1;
        }
        for i in 0..self.n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; self.nnz()];
        let mut vals = vec![F::zero(); self.nnz()];
        // Rows are visited in order, so each transposed row stays sorted.
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                cols[next[j]] = i;
                vals[next[j]] = v;
                next[j] += 1;
            }
        }
        Self::new(self.n, counts, cols, vals, self.diagonal)
    }

    pub fn to_dense(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            t.set(i, i, self.diagonal);
            for (j, v) in self.row(i) {
                t.set(i, j, t.get(i, j) + v);
            }
        }
        t
    }

    fn check(&self, m: &Tensor<F>) -> Result<()> {
        if m.rows() != self.n {
            return Err(Error::shape(
                "spmm",
                format!("operator is {0}x{0}, dense operand has {1} rows", self.n, m.rows()),
            ));
        }
        Ok(())
    }

    #[inline]
    fn spmm_row(&self, m: &Tensor<F>, i: usize, out: &mut [F]) {
        if self.diagonal != F::zero() {
            for (o, &x) in out.iter_mut().zip(m.row(i)) {
                *o = self.diagonal * x;
            }
        }
        for (j, v) in self.row(i) {
            for (o, &x) in out.iter_mut().zip(m.row(j)) {
                *o = *o + v * x;
            }
        }
    }

    /// Sparse × dense product. Each output row is reduced in stored column
    /// order, so the result does not depend on the thread count.
    pub fn spmm(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(m)?;
        let mut out = Tensor::zeros(self.n, m.cols());
        parallel::for_each_row(out.data_mut(), m.cols(), |i, row| self.spmm_row(m, i, row));
        Ok(out)
    }

    pub fn spmm_seq(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(m)?;
        let mut out = Tensor::zeros(self.n, m.cols());
        parallel::for_each_row_seq(out.data_mut(), m.cols(), |i, row| self.spmm_row(m, i, row));
        Ok(out)
    }

    #[cfg(feature = "parallel")]
    pub fn spmm_par(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(m)?;
        let mut out = Tensor::zeros(self.n, m.cols());
        parallel::for_each_row_par(out.data_mut(), m.cols(), |i, row| self.spmm_row(m, i, row));
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// `D⁻¹A`
    MeanAdjacency,
    /// `D^{-1/2} A D^{-1/2}`
    SymNormAdjacency,
    /// `I − D^{-1/2} A D^{-1/2}`
    SymNormLaplacian,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 3] =
        [ShiftKind::MeanAdjacency, ShiftKind::SymNormAdjacency, ShiftKind::SymNormLaplacian];

    pub fn is_symmetric(self) -> bool {
        !matches!(self, ShiftKind::MeanAdjacency)
    }
}

/// Propagation operator built from a [`SparseGraph`]. Never includes
/// self-loops; nodes of degree zero get an all-zero row (plus the identity
/// diagonal for the Laplacian).
#[derive(Clone, Debug)]
pub struct ShiftMatrix<F = f64> {
    kind: ShiftKind,
    matrix: CsrMatrix<F>,
    transpose: Option<CsrMatrix<F>>,
}

impl<F: Scalar> ShiftMatrix<F> {
    pub fn new(graph: &SparseGraph, kind: ShiftKind) -> Self {
        let n = graph.num_nodes();
        let deg: Vec<F> = (0..n).map(|i| F::lit(graph.degree(i) as f64)).collect();

        let mut values = Vec::with_capacity(graph.num_directed_edges());
        for i in 0..n {
            for &j in graph.neighbors(i) {
                let v = match kind {
                    ShiftKind::MeanAdjacency => deg[i].recip(),
                    ShiftKind::SymNormAdjacency => (deg[i] * deg[j]).sqrt().recip(),
                    ShiftKind::SymNormLaplacian => -(deg[i] * deg[j]).sqrt().recip(),
                };
                values.push(v);
            }
        }
        let diagonal = match kind {
            ShiftKind::SymNormLaplacian => F::one(),
            _ => F::zero(),
        };
        let matrix = CsrMatrix::new(
            n,
            graph.row_offsets().to_vec(),
            graph.col_indices().to_vec(),
            values,
            diagonal,
        );
        let transpose = (!kind.is_symmetric()).then(|| matrix.transpose());
        Self { kind, matrix, transpose }
    }

    pub fn kind(&self) -> ShiftKind {
        self.kind
    }

    pub fn matrix(&self) -> &CsrMatrix<F> {
        &self.matrix
    }

    pub fn to_dense(&self) -> Tensor<F> {
        self.matrix.to_dense()
    }

    pub fn spmm(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.matrix.spmm(m)
    }
}

impl<F: Scalar> LinearOperator<F> for ShiftMatrix<F> {
    fn num_nodes(&self) -> usize {
        self.matrix.dim()
    }

    fn apply(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.matrix.spmm(m)
    }

    fn apply_transpose(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.transpose.as_ref().unwrap_or(&self.matrix).spmm(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    pub kind: ShiftKind,
    pub steps: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { kind: ShiftKind::SymNormAdjacency, steps: 1 }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("propagation steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `Sᴷ · U` by K repeated sparse products.
pub fn propagate<F: Scalar>(
    u: &Tensor<F>,
    cfg: &PropagationConfig,
    shift: &ShiftMatrix<F>,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let mut v = shift.spmm(u)?;
    for _ in 1..cfg.steps {
        v = shift.spmm(&v)?;
    }
    Ok(v)
}

/// Differentiable [`propagate`]; the backward pass applies `Sᵀ` K times.
pub fn propagate_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    u: Var,
    cfg: &PropagationConfig,
    shift: &Arc<ShiftMatrix<F>>,
) -> Result<Var> {
    cfg.validate()?;
    let op: Arc<dyn LinearOperator<F>> = shift.clone();
    let mut v = tape.sparse(u, &op)?;
    for _ in 1..cfg.steps {
        v = tape.sparse(v, &op)?;
    }
    Ok(v)
}
