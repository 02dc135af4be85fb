//! GCN encoder and the two MLP predictor heads.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{LinearOperator, SparseGraph};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Normalisation applied after every non-final GCN layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Batch,
    Layer,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub p_input: f64,
    pub norm: Normalization,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_input) {
            return Err(Error::InvalidProbability(self.p_input));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each GCN layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.input_dim } else { self.hidden_dim };
                let fan_out = if i + 1 == self.num_layers { self.output_dim } else { self.hidden_dim };
                (fan_in, fan_out)
            })
            .collect()
    }

    fn norm_prefix(&self) -> Option<&'static str> {
        match self.norm {
            Normalization::Batch => Some("bn"),
            Normalization::Layer => Some("ln"),
            Normalization::None => None,
        }
    }
}

/// Weight and row-bias of an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F: Scalar = f64> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

/// Per-feature scale and shift of a normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<F: Scalar = f64> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

/// Two-layer MLP: `relu(z·W₀ + b₀)·W₁ + b₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F: Scalar = f64> {
    pub hidden: Linear<F>,
    pub out: Linear<F>,
}

/// Encoder parameters Θ plus the predictor heads φ and ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Scalar = f64> {
    pub gcn: Vec<Linear<F>>,
    pub norms: Vec<Affine<F>>,
    pub phi: Mlp<F>,
    pub psi: Mlp<F>,
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub gcn: Vec<(Var, Var)>,
    pub norms: Vec<(Var, Var)>,
    pub phi: [(Var, Var); 2],
    pub psi: [(Var, Var); 2],
}

impl ModelVars {
    /// All handles in canonical parameter order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (i, &(w, b)) in self.gcn.iter().enumerate() {
            out.extend([w, b]);
            if let Some(&(g, be)) = self.norms.get(i) {
                out.extend([g, be]);
            }
        }
        for (w, b) in self.phi.iter().chain(&self.psi) {
            out.extend([*w, *b]);
        }
        out
    }

    /// Inverse of [`ModelVars::all`] for a model with `num_layers` GCN layers
    /// of which the first `num_norms` are normalised.
    pub fn from_canonical(vars: &[Var], num_layers: usize, num_norms: usize) -> Result<Self> {
        let expected = 2 * num_layers + 2 * num_norms + 8;
        if vars.len() != expected {
            return Err(Error::shape("ModelVars::from_canonical", format!("{} handles, expected {expected}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let mut gcn = Vec::with_capacity(num_layers);
        let mut norms = Vec::with_capacity(num_norms);
        for i in 0..num_layers {
            gcn.push(pair());
            if i < num_norms {
                norms.push(pair());
            }
        }
        let phi = [pair(), pair()];
        let psi = [pair(), pair()];
        Ok(ModelVars { gcn, norms, phi, psi })
    }
}

fn glorot<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| F::lit(rng.random_range(-a..=a)))
}

fn linear<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Linear<F> {
    Linear { w: glorot(fan_in, fan_out, rng), b: Tensor::zeros(1, fan_out) }
}

/// Glorot-uniform weights, zero biases, unit gamma, zero beta.
pub fn init_params<F: Scalar>(cfg: &EncoderConfig, pred_hidden: usize, seed: u64) -> Result<ModelParams<F>> {
    cfg.validate()?;
    if pred_hidden == 0 {
        return Err(Error::Config("predictor hidden width must be >= 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let dims = cfg.layer_dims();
    let gcn = dims.iter().map(|&(i, o)| linear(i, o, &mut rng)).collect();
    let norms = match cfg.norm {
        Normalization::None => Vec::new(),
        _ => (1..cfg.num_layers)
            .map(|_| Affine { gamma: Tensor::filled(1, cfg.hidden_dim, F::one()), beta: Tensor::zeros(1, cfg.hidden_dim) })
            .collect(),
    };
    let d = cfg.output_dim;
    let mut mlp = || Mlp { hidden: linear(d, pred_hidden, &mut rng), out: linear(pred_hidden, d, &mut rng) };
    let phi = mlp();
    let psi = mlp();
    Ok(ModelParams { gcn, norms, phi, psi })
}

impl<F: Scalar> ModelParams<F> {
    /// Parameter names in canonical order, e.g. `gcn.0.w`, `bn.0.gamma`, `phi.1.b`.
    pub fn names(&self, cfg: &EncoderConfig) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.gcn.len() {
            out.push(format!("gcn.{i}.w"));
            out.push(format!("gcn.{i}.b"));
            if i < self.norms.len() {
                let p = cfg.norm_prefix().unwrap_or("norm");
                out.push(format!("{p}.{i}.gamma"));
                out.push(format!("{p}.{i}.beta"));
            }
        }
        for head in ["phi", "psi"] {
            for j in 0..2 {
                out.push(format!("{head}.{j}.w"));
                out.push(format!("{head}.{j}.b"));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for (i, l) in self.gcn.iter().enumerate() {
            out.extend([&l.w, &l.b]);
            if let Some(a) = self.norms.get(i) {
                out.extend([&a.gamma, &a.beta]);
            }
        }
        for m in [&self.phi, &self.psi] {
            out.extend([&m.hidden.w, &m.hidden.b, &m.out.w, &m.out.b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for l in self.gcn.iter_mut() {
            out.extend([&mut l.w, &mut l.b]);
            if let Some(a) = norms.next() {
                out.extend([&mut a.gamma, &mut a.beta]);
            }
        }
        for m in [&mut self.phi, &mut self.psi] {
            out.extend([&mut m.hidden.w, &mut m.hidden.b, &mut m.out.w, &mut m.out.b]);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_named(&self, cfg: &EncoderConfig) -> Vec<(String, Tensor<F>)> {
        self.names(cfg).into_iter().zip(self.tensors().into_iter().cloned()).collect()
    }

    /// Rebuild from a named list, checking every name and shape against a
    /// freshly shaped template for `cfg`.
    pub fn from_named(
        entries: Vec<(String, Tensor<F>)>,
        cfg: &EncoderConfig,
        pred_hidden: usize,
    ) -> Result<Self> {
        let mut params = init_params::<F>(cfg, pred_hidden, 0)?;
        let names = params.names(cfg);
        if entries.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                names.len(),
                entries.len()
            )));
        }
        for ((want, slot), (name, value)) in names.iter().zip(params.tensors_mut()).zip(entries) {
            if *want != name {
                return Err(Error::Checkpoint(format!("expected parameter {want}, found {name}")));
            }
            if value.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {}x{} does not match config ({}x{})",
                    value.rows(),
                    value.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = value;
        }
        Ok(params)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let lin = |l: &Linear<F>| Linear { w: l.w.cast(), b: l.b.cast() };
        let mlp = |m: &Mlp<F>| Mlp { hidden: lin(&m.hidden), out: lin(&m.out) };
        ModelParams {
            gcn: self.gcn.iter().map(lin).collect(),
            norms: self.norms.iter().map(|a| Affine { gamma: a.gamma.cast(), beta: a.beta.cast() }).collect(),
            phi: mlp(&self.phi),
            psi: mlp(&self.psi),
        }
    }

    /// Put every tensor on `tape`, as parameters or as constants.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor<F>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let gcn = self.gcn.iter().map(|l| (put(&l.w), put(&l.b))).collect();
        let norms = self.norms.iter().map(|a| (put(&a.gamma), put(&a.beta))).collect();
        let mut head = |m: &Mlp<F>| [(put(&m.hidden.w), put(&m.hidden.b)), (put(&m.out.w), put(&m.out.b))];
        let phi = head(&self.phi);
        let psi = head(&self.psi);
        ModelVars { gcn, norms, phi, psi }
    }
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` with `D̃ = D + I`: the GCN propagation matrix,
/// self-loops included.
#[derive(Clone, Debug)]
pub struct KipfShift<F: Scalar = f64> {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<F>,
}

impl<F: Scalar> KipfShift<F> {
    pub fn new(graph: &SparseGraph) -> Self {
        let n = graph.num_nodes();
        let deg: Vec<F> = (0..n).map(|i| F::lit((graph.degree(i) + 1) as f64)).collect();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::with_capacity(graph.num_directed_edges() + n);
        let mut values = Vec::with_capacity(graph.num_directed_edges() + n);
        row_offsets.push(0);
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            let split = nbrs.partition_point(|&j| j < i);
            let cols = nbrs[..split].iter().copied().chain([i]).chain(nbrs[split..].iter().copied());
            for j in cols {
                col_indices.push(j);
                values.push((deg[i] * deg[j]).sqrt().recip());
            }
            row_offsets.push(col_indices.len());
        }
        Self { n, row_offsets, col_indices, values }
    }

    pub fn to_dense(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                t.set(i, self.col_indices[k], self.values[k]);
            }
        }
        t
    }

    fn as_csr(&self) -> crate::graph::CsrMatrix<F> {
        crate::graph::CsrMatrix::new(
            self.n,
            self.row_offsets.clone(),
            self.col_indices.clone(),
            self.values.clone(),
            F::zero(),
        )
    }
}

/// Operator wrapper so the tape can hold the Kipf matrix behind a trait object.
#[derive(Clone, Debug)]
pub struct KipfOperator<F: Scalar = f64>(crate::graph::CsrMatrix<F>);

impl<F: Scalar> From<&KipfShift<F>> for KipfOperator<F> {
    fn from(k: &KipfShift<F>) -> Self {
        Self(k.as_csr())
    }
}

impl<F: Scalar> LinearOperator<F> for KipfOperator<F> {
    fn num_nodes(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.0.spmm(m)
    }

    // Symmetric.
    fn apply_transpose(&self, m: &Tensor<F>) -> Result<Tensor<F>> {
        self.0.spmm(m)
    }
}

pub fn kipf_operator<F: Scalar>(graph: &SparseGraph) -> Arc<dyn LinearOperator<F>> {
    Arc::new(KipfOperator::from(&KipfShift::<F>::new(graph)))
}

/// `Â · (x·W) + b`.
pub fn gcn_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    shift: &Arc<dyn LinearOperator<F>>,
    w: Var,
    b: Var,
) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let h = tape.sparse(xw, shift)?;
    tape.add_row(h, b)
}

/// dropout(X) → [GCN → norm → ReLU]×(L−1) → GCN. The last layer has no
/// normalisation and no activation.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    shift: &Arc<dyn LinearOperator<F>>,
    vars: &ModelVars,
    cfg: &EncoderConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let mut h = tape.dropout(x, cfg.p_input, rng, training)?;
    let last = vars.gcn.len() - 1;
    for (i, &(w, b)) in vars.gcn.iter().enumerate() {
        h = gcn_layer(tape, h, shift, w, b)?;
        if i == last {
            break;
        }
        if let Some(&(gamma, beta)) = vars.norms.get(i) {
            let eps = F::lit(NORM_EPS);
            h = match cfg.norm {
                Normalization::Batch => tape.batch_norm(h, gamma, beta, eps)?,
                Normalization::Layer => tape.layer_norm(h, gamma, beta, eps)?,
                Normalization::None => h,
            };
        }
        h = tape.relu(h);
    }
    Ok(h)
}

/// `relu(z·W₀ + b₀)·W₁ + b₁`; no normalisation in the heads.
pub fn predictor_forward<F: Scalar>(tape: &mut Tape<F>, z: Var, head: &[(Var, Var); 2]) -> Result<Var> {
    let [(w0, b0), (w1, b1)] = *head;
    let h = tape.matmul(z, w0)?;
    let h = tape.add_row(h, b0)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w1)?;
    tape.add_row(h, b1)
}

/// Eval-mode embeddings: no dropout, batch statistics of the full graph.
pub fn embed<F: Scalar>(
    features: &Tensor<F>,
    graph: &SparseGraph,
    params: &ModelParams<F>,
    cfg: &EncoderConfig,
) -> Result<Tensor<F>> {
    if features.rows() != graph.num_nodes() || features.cols() != cfg.input_dim {
        return Err(Error::shape(
            "embed",
            format!(
                "features {}x{} for {} nodes and input_dim {}",
                features.rows(),
                features.cols(),
                graph.num_nodes(),
                cfg.input_dim
            ),
        ));
    }
    let shift = kipf_operator(graph);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(features.clone());
    // The stream is never drawn from in eval mode.
    let mut rng = rng::seeded(0);
    let u = encoder_forward(&mut tape, x, &shift, &vars, cfg, &mut rng, false)?;
    Ok(tape.value(u).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_csr;

    fn cfg(input: usize, hidden: usize, out: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            input_dim: input,
            hidden_dim: hidden,
            output_dim: out,
            p_input: 0.0,
            norm: Normalization::Batch,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = cfg(6, 6, 6);
        let a = init_params::<f64>(&c, 6, 7).unwrap();
        let b = init_params::<f64>(&c, 6, 7).unwrap();
        assert_eq!(a, b);
        // fan_in = fan_out = 6 gives a bound of exactly 1.
        for t in a.tensors() {
            assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(a.gcn.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0)));
        assert!(a.norms.iter().all(|n| n.gamma.data().iter().all(|&v| v == 1.0)));
        assert_ne!(a, init_params::<f64>(&c, 6, 8).unwrap());
    }

    #[test]
    fn large_init_is_centered() {
        let mut r = rng::seeded(11);
        let w: Tensor<f64> = glorot(512, 512, &mut r);
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn parameter_names_and_shapes() {
        let c = cfg(8, 12, 16);
        let p = init_params::<f64>(&c, 10, 0).unwrap();
        let names = p.names(&c);
        assert_eq!(
            names,
            [
                "gcn.0.w", "gcn.0.b", "bn.0.gamma", "bn.0.beta", "gcn.1.w", "gcn.1.b", "phi.0.w",
                "phi.0.b", "phi.1.w", "phi.1.b", "psi.0.w", "psi.0.b", "psi.1.w", "psi.1.b"
            ]
        );
        let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes[0], (8, 12));
        assert_eq!(shapes[4], (12, 16));
        assert_eq!(shapes[6], (16, 10));
        assert_eq!(shapes[8], (10, 16));
        let back = ModelParams::from_named(p.to_named(&c), &c, 10).unwrap();
        assert_eq!(back, p);
        assert!(ModelParams::<f64>::from_named(p.to_named(&c), &cfg(8, 12, 15), 10).is_err());
    }

    #[test]
    fn kipf_shift_single_edge() {
        let g = build_csr(&[(0, 1)], 2).unwrap();
        let k = KipfShift::<f64>::new(&g).to_dense();
        assert_eq!(k, Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
        let e = KipfShift::<f64>::new(&SparseGraph::empty(3)).to_dense();
        assert_eq!(e, Tensor::identity(3));
    }

    #[test]
    fn gcn_layer_examples() {
        let g = build_csr(&[(0, 1)], 2).unwrap();
        let shift = kipf_operator::<f64>(&g);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]));
        let w = tape.param(Tensor::identity(2));
        let b = tape.param(Tensor::zeros(1, 2));
        let y = gcn_layer(&mut tape, x, &shift, w, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]));

        // Edgeless: the shift is the identity.
        let shift = kipf_operator::<f64>(&SparseGraph::empty(2));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]));
        let w = tape.param(Tensor::from_rows(&[[0.5, 1.0, 0.0], [2.0, 0.0, -1.0]]));
        let b = tape.param(Tensor::from_rows(&[[0.1, 0.2, 0.3]]));
        let y = gcn_layer(&mut tape, x, &shift, w, b).unwrap();
        let want = tape.value(x).matmul(tape.value(w)).unwrap();
        let want = Tensor::from_fn(2, 3, |i, j| want.get(i, j) + tape.value(b).get(0, j));
        assert_eq!(tape.value(y), &want);
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let g = build_csr(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let c = cfg(3, 5, 4);
        let mut p = init_params::<f64>(&c, 4, 1).unwrap();
        for t in p.tensors_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let x = Tensor::from_fn(4, 3, |i, j| (i + j) as f64);
        let u = embed(&x, &g, &p, &c).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
        assert_eq!(u.shape(), (4, 4));
    }

    #[test]
    fn predictor_examples() {
        let mut tape = Tape::new();
        let eye = |t: &mut Tape<f64>| t.param(Tensor::identity(3));
        let zero = |t: &mut Tape<f64>| t.param(Tensor::zeros(1, 3));
        let head = [(eye(&mut tape), zero(&mut tape)), (eye(&mut tape), zero(&mut tape))];
        let z = tape.constant(Tensor::from_rows(&[[0.0, 1.5, 2.0], [3.0, 0.0, 0.25]]));
        let y = predictor_forward(&mut tape, z, &head).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
        let z0 = tape.constant(Tensor::zeros(2, 3));
        let y0 = predictor_forward(&mut tape, z0, &head).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_rejects_mismatched_features() {
        let g = build_csr(&[(0, 1)], 2).unwrap();
        let c = cfg(3, 4, 4);
        let p = init_params::<f64>(&c, 4, 0).unwrap();
        assert!(embed(&Tensor::zeros(2, 2), &g, &p, &c).is_err());
    }
}
