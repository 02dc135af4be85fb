use std::fmt;
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::LinearOperator;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and fault injection in self-checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Scale,
    Sum,
    Square,
    Relu,
    Sparse,
    BatchNorm,
    LayerNorm,
    Dropout,
    Covariance,
    VariancePenalty,
    OffDiagonalPenalty,
    Mse,
    SoftmaxCrossEntropy,
    BceWithLogits,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::AddRow => "add_row",
            Primitive::Add => "add",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::Square => "square",
            Primitive::Relu => "relu",
            Primitive::Sparse => "spmm",
            Primitive::BatchNorm => "batch_norm",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Dropout => "dropout",
            Primitive::Covariance => "covariance",
            Primitive::VariancePenalty => "variance_penalty",
            Primitive::OffDiagonalPenalty => "off_diagonal_penalty",
            Primitive::Mse => "mse",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use Primitive::*;
        [
            Leaf, MatMul, AddRow, Add, Scale, Sum, Square, Relu, Sparse, BatchNorm, LayerNorm,
            Dropout, Covariance, VariancePenalty, OffDiagonalPenalty, Mse, SoftmaxCrossEntropy,
            BceWithLogits,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Square(Var),
    Relu(Var),
    Sparse(Var, Arc<dyn LinearOperator<F>>),
    /// Per-column normalisation; keeps the normalised input and 1/σ per column.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, inv_std: Vec<F> },
    /// Per-row normalisation; keeps the normalised input and 1/σ per row.
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, inv_std: Vec<F> },
    Dropout(Var, Tensor<F>),
    Covariance { x: Var, centered: Tensor<F> },
    VariancePenalty(Var),
    OffDiagonalPenalty(Var),
    Mse(Var, Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<F> },
    BceWithLogits { logits: Var, targets: Tensor<F> },
}

impl<F: Scalar> Op<F> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Add(..) => Primitive::Add,
            Op::Scale(..) => Primitive::Scale,
            Op::Sum(..) => Primitive::Sum,
            Op::Square(..) => Primitive::Square,
            Op::Relu(..) => Primitive::Relu,
            Op::Sparse(..) => Primitive::Sparse,
            Op::BatchNorm { .. } => Primitive::BatchNorm,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Dropout(..) => Primitive::Dropout,
            Op::Covariance { .. } => Primitive::Covariance,
            Op::VariancePenalty(..) => Primitive::VariancePenalty,
            Op::OffDiagonalPenalty(..) => Primitive::OffDiagonalPenalty,
            Op::Mse(..) => Primitive::Mse,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
            Op::BceWithLogits { .. } => Primitive::BceWithLogits,
        }
    }
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-threaded recording session.
pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
    consumed: bool,
    fault: Option<Primitive>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients<F: Scalar = f64> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false, fault: None }
    }

    /// Corrupt the backward rule of one primitive (its input gradients are
    /// doubled). Only used to prove that the self-check catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<F> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a + 1·bias`, broadcasting a `1×m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias {}x{} for input {}x{}", b.rows(), b.cols(), x.rows(), x.cols()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *o = *o + bb;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, alpha: F) -> Var {
        let value = self.value(a).scale(alpha);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, alpha), rg)
    }

    /// Sum of all elements, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Apply a sparse linear operator to the rows of `a`.
    pub fn sparse(&mut self, a: Var, op: &Arc<dyn LinearOperator<F>>) -> Result<Var> {
        let value = op.apply(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sparse(a, Arc::clone(op)), rg))
    }

    /// Standardise each column with the batch mean and biased variance, then
    /// scale by `gamma` and shift by `beta` (both `1×D`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let input = self.value(x);
        let (n, d) = input.shape();
        if n < 2 {
            return Err(Error::BatchTooSmall { op: "batch_norm", rows: n });
        }
        self.check_affine("batch_norm", gamma, beta, d)?;
        let means = input.column_means();
        let nf = F::lit(n as f64);
        let mut var = vec![F::zero(); d];
        for r in 0..n {
            for ((v, &xv), &m) in var.iter_mut().zip(input.row(r)).zip(&means) {
                *v = *v + (xv - m) * (xv - m);
            }
        }
        let inv_std: Vec<F> = var.iter().map(|&v| (v / nf + eps).sqrt().recip()).collect();
        let xhat = Tensor::from_fn(n, d, |r, c| (input.get(r, c) - means[c]) * inv_std[c]);
        let value = self.affine(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Standardise each row over its features, then apply the per-feature
    /// affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let input = self.value(x);
        let (n, d) = input.shape();
        self.check_affine("layer_norm", gamma, beta, d)?;
        let df = F::lit(d as f64);
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = (var + eps).sqrt().recip();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = self.affine(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, d: usize) -> Result<()> {
        for v in [gamma, beta] {
            let t = self.value(v);
            if t.shape() != (1, d) {
                return Err(Error::shape(op, format!("affine parameter {}x{}, want 1x{d}", t.rows(), t.cols())));
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &Tensor<F>, gamma: Var, beta: Var) -> Tensor<F> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        Tensor::from_fn(xhat.rows(), xhat.cols(), |r, c| g[c] * xhat.get(r, c) + b[c])
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask_data: Vec<F> =
            (0..x.len()).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        let mask = Tensor::from_vec(x.rows(), x.cols(), mask_data)?;
        let value = x.zip_map(&mask, "dropout", |v, m| v * m)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Sample covariance `X̄ᵀX̄ / (N−1)` of the columns of `x`.
    pub fn covariance(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let n = input.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall { op: "covariance", rows: n });
        }
        let means = input.column_means();
        let centered = Tensor::from_fn(n, input.cols(), |r, c| input.get(r, c) - means[c]);
        let value = centered.matmul_tn(&centered)?.scale(F::lit(1.0 / (n - 1) as f64));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Covariance { x, centered }, rg))
    }

    fn expect_square(&self, c: Var, op: &'static str) -> Result<usize> {
        let t = self.value(c);
        if t.rows() != t.cols() || t.rows() == 0 {
            return Err(Error::shape(op, format!("expected a non-empty square matrix, got {}x{}", t.rows(), t.cols())));
        }
        Ok(t.rows())
    }

    /// `(1/D) Σₙ (1 − Cₙₙ)²` for a `D×D` matrix `C`.
    pub fn variance_penalty(&mut self, c: Var) -> Result<Var> {
        let d = self.expect_square(c, "variance_penalty")?;
        let t = self.value(c);
        let s: F = (0..d).map(|i| (F::one() - t.get(i, i)).powi(2)).sum();
        let value = Tensor::scalar(s / F::lit(d as f64));
        let rg = self.rg(&[c]);
        Ok(self.push(value, Op::VariancePenalty(c), rg))
    }

    /// `(1/D) Σₙ Σ_{m≠n} Cₙₘ²`.
    pub fn off_diagonal_penalty(&mut self, c: Var) -> Result<Var> {
        let d = self.expect_square(c, "off_diagonal_penalty")?;
        let t = self.value(c);
        let mut s = F::zero();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s = s + t.get(i, j) * t.get(i, j);
                }
            }
        }
        let value = Tensor::scalar(s / F::lit(d as f64));
        let rg = self.rg(&[c]);
        Ok(self.push(value, Op::OffDiagonalPenalty(c), rg))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(y, "mse")?;
        let s: F = x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(s / F::lit(x.len().max(1) as f64));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    /// Mean softmax cross-entropy of `logits` (N×C) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, c) = z.shape();
        if targets.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("target {bad} >= {c} classes")));
        }
        let mut probs = Tensor::zeros(n, c);
        let mut loss = F::zero();
        for r in 0..n {
            let row = z.row(r);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let denom: F = row.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - m).exp() / denom;
            }
            loss = loss + denom.ln() + m - row[targets[r]];
        }
        let value = Tensor::scalar(loss / F::lit(n.max(1) as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean binary cross-entropy of independent sigmoid outputs against 0/1
    /// targets of the same shape.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let z = self.value(logits);
        z.expect_same_shape(targets, "bce_with_logits")?;
        let s: F = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&v, &t)| v.max(F::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(s / F::lit(z.len().max(1) as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceWithLogits { logits, targets: targets.clone() }, rg))
    }

    /// Every ReLU's active set, concatenated in tape order. Two evaluations of
    /// the same graph with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&x| x > F::zero()));
            }
        }
        out
    }

    /// Reverse pass from the scalar `loss`. The tape can only be differentiated
    /// once; recorded values remain readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {}x{}", shape.0, shape.1)));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.backward_rule(node, &g)?;
            let corrupt = self.fault == Some(node.op.primitive());
            for (var, mut contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if corrupt {
                    contribution = contribution.scale(F::lit(2.0));
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.axpy(F::one(), &contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        // Keep leaf gradients only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_rule(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.matmul_nt(val(*b))?));
                }
                if wants(*b) {
                    out.push((*b, val(*a).matmul_tn(g)?));
                }
            }
            Op::AddRow(a, bias) => {
                out.push((*a, g.clone()));
                if wants(*bias) {
                    out.push((*bias, Tensor::from_vec(1, g.cols(), g.column_sums())?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(a, alpha) => out.push((*a, g.scale(*alpha))),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Tensor::filled(r, c, g.item()?)));
            }
            Op::Square(a) => {
                out.push((*a, val(*a).zip_map(g, "square", |x, gg| F::lit(2.0) * x * gg)?));
            }
            Op::Relu(a) => {
                out.push((*a, val(*a).zip_map(g, "relu", |x, gg| if x > F::zero() { gg } else { F::zero() })?));
            }
            Op::Sparse(a, op) => out.push((*a, op.apply_transpose(g)?)),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let gam = val(*gamma).data();
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut sum_dxhat = vec![F::zero(); d];
                let mut sum_dxhat_xhat = vec![F::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        let gg = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgamma[c] = dgamma[c] + gg * xh;
                        dbeta[c] = dbeta[c] + gg;
                        let dxh = gg * gam[c];
                        sum_dxhat[c] = sum_dxhat[c] + dxh;
                        sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + dxh * xh;
                    }
                }
                if wants(*x) {
                    let nf = F::lit(n as f64);
                    let dx = Tensor::from_fn(n, d, |r, c| {
                        let dxh = g.get(r, c) * gam[c];
                        inv_std[c] / nf * (nf * dxh - sum_dxhat[c] - xhat.get(r, c) * sum_dxhat_xhat[c])
                    });
                    out.push((*x, dx));
                }
                out.push((*gamma, Tensor::from_vec(1, d, dgamma)?));
                out.push((*beta, Tensor::from_vec(1, d, dbeta)?));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let gam = val(*gamma).data();
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let df = F::lit(d as f64);
                let mut dx = Tensor::zeros(n, d);
                for r in 0..n {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for c in 0..d {
                        let gg = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgamma[c] = dgamma[c] + gg * xh;
                        dbeta[c] = dbeta[c] + gg;
                        let dxh = gg * gam[c];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xh;
                    }
                    for c in 0..d {
                        let dxh = g.get(r, c) * gam[c];
                        dx.set(r, c, inv_std[r] / df * (df * dxh - s1 - xhat.get(r, c) * s2));
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, Tensor::from_vec(1, d, dgamma)?));
                out.push((*beta, Tensor::from_vec(1, d, dbeta)?));
            }
            Op::Dropout(a, mask) => out.push((*a, g.zip_map(mask, "dropout", |gg, m| gg * m)?)),
            Op::Covariance { x, centered } => {
                // dX̄ = X̄ (G + Gᵀ) / (N−1); centering projects out the column mean.
                let n = centered.rows();
                let sym = g.zip_map(&g.transpose(), "covariance", |a, b| a + b)?;
                let mut dc = centered.matmul(&sym)?.scale(F::lit(1.0 / (n - 1) as f64));
                let means = dc.column_means();
                for r in 0..n {
                    for (v, &m) in dc.row_mut(r).iter_mut().zip(&means) {
                        *v = *v - m;
                    }
                }
                out.push((*x, dc));
            }
            Op::VariancePenalty(c) => {
                let t = val(*c);
                let d = t.rows();
                let s = g.item()? * F::lit(-2.0 / d as f64);
                let dc = Tensor::from_fn(d, d, |i, j| if i == j { s * (F::one() - t.get(i, i)) } else { F::zero() });
                out.push((*c, dc));
            }
            Op::OffDiagonalPenalty(c) => {
                let t = val(*c);
                let d = t.rows();
                let s = g.item()? * F::lit(2.0 / d as f64);
                let dc = Tensor::from_fn(d, d, |i, j| if i == j { F::zero() } else { s * t.get(i, j) });
                out.push((*c, dc));
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let s = g.item()? * F::lit(2.0 / x.len().max(1) as f64);
                let da = x.zip_map(y, "mse", |p, q| s * (p - q))?;
                if wants(*b) {
                    out.push((*b, da.scale(-F::one())));
                }
                out.push((*a, da));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = probs.rows();
                let s = g.item()? / F::lit(n.max(1) as f64);
                let mut dz = probs.scale(s);
                for (r, &t) in targets.iter().enumerate() {
                    dz.set(r, t, dz.get(r, t) - s);
                }
                out.push((*logits, dz));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let s = g.item()? / F::lit(z.len().max(1) as f64);
                let dz = z.zip_map(targets, "bce_with_logits", |v, t| {
                    let sig = if v >= F::zero() {
                        (F::one() + (-v).exp()).recip()
                    } else {
                        let e = v.exp();
                        e / (F::one() + e)
                    };
                    s * (sig - t)
                })?;
                out.push((*logits, dz));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_forward() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y), tape.value(b));
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let c = tape.constant(t(&[&[3.0], &[4.0]]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.scalar(y).unwrap(), 11.0);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[-1.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[&[-1.0, -2.0], &[-0.5, 0.0]]));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 5.0], &[3.0, 5.0]]));
        let gamma = tape.param(Tensor::filled(1, 2, 1.0));
        let beta = tape.param(Tensor::zeros(1, 2));
        let y = tape.batch_norm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(tape.value(y).get(0, 0), -1.0);
        assert_eq!(tape.value(y).get(1, 0), 1.0);

        let y = tape.batch_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).get(0, 1), 0.0);
        assert_eq!(tape.value(y).get(1, 1), 0.0);

        let one = tape.param(t(&[&[1.0, 2.0]]));
        assert!(matches!(tape.batch_norm(one, gamma, beta, 1e-5), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn dropout_identity_cases_and_bad_probability() {
        let mut r = rng::seeded(1);
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 2.0, 3.0]]));
        assert_eq!(tape.dropout(x, 0.0, &mut r, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, &mut r, false).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, &mut r, true), Err(Error::InvalidProbability(_))));
        assert!(matches!(tape.dropout(x, -0.1, &mut r, true), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mut r = rng::seeded(42);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(1, n, 3.0));
        let y = tape.dropout(x, 0.5, &mut r, true).unwrap();
        let out = tape.value(y).clone();
        let survivors = out.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
        let mean = out.sum() / n as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
        // Backward uses the same mask.
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (gv, ov) in g.get(x).unwrap().data().iter().zip(out.data()) {
            assert_eq!(*gv == 0.0, *ov == 0.0);
        }
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x0 = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::filled(2, 2, 1.0));

        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), &x0);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let w = tape.param(t(&[&[1.0], &[1.0]]));
        let y = tape.matmul(a, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn primitive_names_round_trip() {
        for name in ["matmul", "relu", "batch_norm", "spmm", "covariance", "mse"] {
            assert_eq!(Primitive::from_name(name).unwrap().name(), name);
        }
        assert!(Primitive::from_name("nope").is_none());
    }
}
