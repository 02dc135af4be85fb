//! Built-in verification suite behind `rgi selfcheck`: finite-difference
//! gradient checks of every primitive and of the full objective, sparse versus
//! dense propagation oracles, and hand-computed loss values.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::{self, Coords, Options, Report};
use crate::autodiff::{Primitive, Tape, Var};
use crate::data::{GraphDataset, Labels};
use crate::encoder::{self, EncoderConfig, ModelParams, ModelVars, Normalization};
use crate::error::{Error, Result};
use crate::graph::{self, LinearOperator, PropagationConfig, ShiftKind, ShiftMatrix, SparseGraph};
use crate::loss::{self, LossWeights};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{self, ScheduleConfig, TrainConfig, TrainContext};

/// Tolerance for primitives without kinks.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for compositions involving ReLU or normalisation layers.
pub const COMPOSED_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub note: String,
}

impl CheckResult {
    fn from_report(name: &str, tol: f64, r: Result<Report>) -> Self {
        match r {
            Ok(rep) => CheckResult {
                name: name.into(),
                max_err: rep.max_rel_err,
                tol,
                passed: rep.passes(tol),
                note: format!("{} coords, {} skipped", rep.checked, rep.skipped),
            },
            Err(e) => Self::error(name, tol, e),
        }
    }

    fn from_error(name: &str, tol: f64, r: Result<f64>) -> Self {
        match r {
            Ok(err) => CheckResult { name: name.into(), max_err: err, tol, passed: err <= tol, note: String::new() },
            Err(e) => Self::error(name, tol, e),
        }
    }

    fn error(name: &str, tol: f64, e: Error) -> Self {
        CheckResult { name: name.into(), max_err: f64::INFINITY, tol, passed: false, note: e.to_string() }
    }
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Normal entries pushed at least `margin` away from zero, so that ReLU
/// inputs sit clear of the kink.
fn off_kink_matrix(rows: usize, cols: usize, margin: f64, rng: &mut rng::Rng) -> Tensor<f64> {
    normal_matrix(rows, cols, rng).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// Erdős–Rényi graph with edge probability `p`.
pub fn random_graph(n: usize, p: f64, rng: &mut rng::Rng) -> SparseGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SparseGraph::from_edges(&edges, n).expect("generated edges are in range")
}

/// A random graph, features and freshly initialised model for gradient and
/// invariance checks. Dropout is disabled.
pub struct Fixture {
    pub dataset: GraphDataset,
    pub config: TrainConfig,
    pub params: ModelParams<f64>,
}

pub fn fixture(n: usize, in_dim: usize, out_dim: usize, hidden: usize, seed: u64) -> Fixture {
    let mut r = rng::stream(seed, 2);
    let graph = random_graph(n, 0.3, &mut r);
    let features = normal_matrix(n, in_dim, &mut r);
    let dataset = GraphDataset {
        name: "fixture".into(),
        graph,
        features,
        labels: Labels::Multiclass { classes: vec![0; n], num_classes: 1 },
    };
    let config = TrainConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            input_dim: in_dim,
            hidden_dim: hidden,
            output_dim: out_dim,
            p_input: 0.0,
            norm: Normalization::Batch,
        },
        pred_hidden: out_dim,
        propagation: PropagationConfig { kind: ShiftKind::SymNormAdjacency, steps: 1 },
        weights: LossWeights::default(),
        schedule: ScheduleConfig { base_lr: 1e-3, n_warmup: 1, n_epochs: 1 },
        adam: Default::default(),
        p_local: 0.0,
        seed,
    };
    let mut params: ModelParams<f64> = encoder::init_params(&config.encoder, config.pred_hidden, seed).unwrap();
    // Nonzero biases and affine parameters exercise every gradient path.
    let mut nr = rng::stream(seed, 3);
    for t in params.tensors_mut() {
        if t.rows() == 1 {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut nr);
                *v += 0.1 * z;
            }
        }
    }
    Fixture { dataset, config, params }
}

/// Gradient check of the full objective with respect to every model
/// parameter, on `coords` sampled coordinates.
pub fn full_loss_gradcheck(fx: &Fixture, coords: Coords, fault: Option<Primitive>) -> Result<Report> {
    let ctx = TrainContext::<f64>::new(&fx.dataset, &fx.config);
    let cfg = &fx.config;
    let num_layers = fx.params.gcn.len();
    let num_norms = fx.params.norms.len();
    let inputs: Vec<Tensor<f64>> = fx.params.tensors().into_iter().cloned().collect();
    let forward = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mv = ModelVars::from_canonical(vars, num_layers, num_norms)?;
        let mut r = rng::seeded(0);
        let x = tape.constant(ctx.features.clone());
        let u = encoder::encoder_forward(tape, x, &ctx.encoder_shift, &mv, &cfg.encoder, &mut r, false)?;
        let v = graph::propagate_on_tape(tape, u, &cfg.propagation, &ctx.shift)?;
        let v_hat = encoder::predictor_forward(tape, u, &mv.phi)?;
        let u_hat = encoder::predictor_forward(tape, v, &mv.psi)?;
        Ok(loss::total_loss(tape, u, v, u_hat, v_hat, &cfg.weights)?.total)
    };
    gradcheck::check(&inputs, forward, &Options { coords, fault, ..Options::default() })
}

fn primitive_checks(fault: Option<Primitive>, out: &mut Vec<CheckResult>) {
    let opts = Options { fault, ..Options::default() };
    let mut r = rng::seeded(42);
    let mut grad = |name: &str, tol: f64, inputs: Vec<Tensor<f64>>, f: &(dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync)| {
        out.push(CheckResult::from_report(name, tol, gradcheck::check(&inputs, f, &opts)));
    };

    // Random weights turn each output into a generic scalar.
    let proj = normal_matrix(4, 5, &mut r);
    let weighted = move |tape: &mut Tape<f64>, y: Var| -> Result<Var> {
        let (rows, cols) = tape.value(y).shape();
        let w = tape.constant(Tensor::from_fn(rows, cols, |i, j| proj.get(i % 4, j % 5) + 0.5));
        let prod = hadamard(tape, y, w)?;
        Ok(tape.sum(prod))
    };

    grad("grad/matmul", SMOOTH_TOL, vec![normal_matrix(4, 3, &mut r), normal_matrix(3, 5, &mut r)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y)
    });
    grad("grad/add_row", SMOOTH_TOL, vec![normal_matrix(4, 3, &mut r), normal_matrix(1, 3, &mut r)], &|t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted(t, y)
    });
    grad("grad/relu", SMOOTH_TOL, vec![off_kink_matrix(4, 5, 0.05, &mut r)], &|t, v| {
        let y = t.relu(v[0]);
        weighted(t, y)
    });
    grad("grad/square_scale", SMOOTH_TOL, vec![normal_matrix(3, 3, &mut r)], &|t, v| {
        let y = t.square(v[0]);
        let y = t.scale(y, 0.7);
        weighted(t, y)
    });
    let bn_inputs = vec![normal_matrix(6, 4, &mut r), off_kink_matrix(1, 4, 0.5, &mut r), normal_matrix(1, 4, &mut r)];
    grad("grad/batch_norm", 1e-5, bn_inputs.clone(), &|t, v| {
        let y = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
        weighted(t, y)
    });
    grad("grad/layer_norm", 1e-5, bn_inputs, &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted(t, y)
    });
    let g = random_graph(7, 0.4, &mut r);
    for kind in ShiftKind::ALL {
        let op: Arc<dyn LinearOperator<f64>> = Arc::new(ShiftMatrix::<f64>::new(&g, kind));
        let name = format!("grad/spmm_{}", kind_name(kind));
        grad(&name, SMOOTH_TOL, vec![normal_matrix(7, 4, &mut r)], &|t, v| {
            let y = t.sparse(v[0], &op)?;
            let y = t.sparse(y, &op)?;
            weighted(t, y)
        });
    }
    grad("grad/dropout", SMOOTH_TOL, vec![normal_matrix(4, 5, &mut r)], &|t, v| {
        let mut mask_rng = rng::seeded(7);
        let y = t.dropout(v[0], 0.4, &mut mask_rng, true)?;
        weighted(t, y)
    });
    grad("grad/covariance_penalties", SMOOTH_TOL, vec![normal_matrix(6, 3, &mut r)], &|t, v| {
        let c = t.covariance(v[0])?;
        let a = t.variance_penalty(c)?;
        let b = t.off_diagonal_penalty(c)?;
        let b = t.scale(b, 0.3);
        t.add(a, b)
    });
    grad("grad/mse", SMOOTH_TOL, vec![normal_matrix(4, 3, &mut r), normal_matrix(4, 3, &mut r)], &|t, v| {
        t.mse(v[0], v[1])
    });
    grad("grad/softmax_cross_entropy", SMOOTH_TOL, vec![normal_matrix(5, 3, &mut r)], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0])
    });
    let targets = Tensor::from_fn(4, 3, |i, j| ((i + 2 * j) % 3 == 0) as u8 as f64);
    grad("grad/bce_with_logits", SMOOTH_TOL, vec![normal_matrix(4, 3, &mut r)], &|t, v| {
        t.bce_with_logits(v[0], &targets)
    });
}

fn hadamard(tape: &mut Tape<f64>, a: Var, w: Var) -> Result<Var> {
    // a ⊙ w = ½((a + w)² − a² − w²), built from tape primitives.
    let s = tape.add(a, w)?;
    let s2 = tape.square(s);
    let a2 = tape.square(a);
    let w2 = tape.square(w);
    let na2 = tape.scale(a2, -1.0);
    let nw2 = tape.scale(w2, -1.0);
    let t = tape.add(s2, na2)?;
    let t = tape.add(t, nw2)?;
    Ok(tape.scale(t, 0.5))
}

fn kind_name(kind: ShiftKind) -> &'static str {
    match kind {
        ShiftKind::MeanAdjacency => "mean_adjacency",
        ShiftKind::SymNormAdjacency => "sym_norm_adjacency",
        ShiftKind::SymNormLaplacian => "sym_norm_laplacian",
    }
}

/// Dense `D⁻¹A`, `D^{-1/2}AD^{-1/2}` or `I − D^{-1/2}AD^{-1/2}`, built from the
/// adjacency matrix with no shared code path.
pub fn dense_shift(g: &SparseGraph, kind: ShiftKind) -> Tensor<f64> {
    let n = g.num_nodes();
    let a: Tensor<f64> = g.to_dense();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Tensor::from_fn(n, n, |i, j| {
        let aij = a.get(i, j);
        let adj = match kind {
            ShiftKind::MeanAdjacency => if deg[i] > 0.0 { aij / deg[i] } else { 0.0 },
            _ => if deg[i] > 0.0 && deg[j] > 0.0 { aij / (deg[i] * deg[j]).sqrt() } else { 0.0 },
        };
        match kind {
            ShiftKind::SymNormLaplacian => if i == j { 1.0 - adj } else { -adj },
            _ => adj,
        }
    })
}

/// Worst deviation of sparse propagation from dense matrix powers over
/// `graphs` random graphs of at most `max_nodes` nodes.
pub fn propagation_oracle(graphs: usize, max_nodes: usize, steps: &[usize], seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..graphs {
        let n = r.random_range(1..=max_nodes);
        let p = r.random::<f64>();
        let g = random_graph(n, p, &mut r);
        let u = normal_matrix(n, 3, &mut r);
        for kind in ShiftKind::ALL {
            let shift = ShiftMatrix::<f64>::new(&g, kind);
            let dense = dense_shift(&g, kind);
            for &k in steps {
                let got = graph::propagate(&u, &PropagationConfig { kind, steps: k }, &shift)?;
                let mut want = u.clone();
                for _ in 0..k {
                    want = dense.matmul(&want)?;
                }
                worst = worst.max(got.max_abs_diff(&want));
            }
        }
    }
    Ok(worst)
}

fn scalar_of(rows: &[&[f64]], f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(rows));
    let out = f(&mut tape, z)?;
    Ok(tape.scalar(out)?)
}

/// Largest deviation from the hand-computed loss values.
pub fn loss_analytic_error() -> Result<f64> {
    let h = 0.5f64.sqrt();
    let cases: Vec<(f64, f64)> = vec![
        (scalar_of(&[&[1.0, 0.0], &[-1.0, 0.0]], loss::variance_loss)?, 1.0),
        (scalar_of(&[&[2.0, -3.0], &[2.0, -3.0], &[2.0, -3.0]], loss::variance_loss)?, 1.0),
        (scalar_of(&[&[h, -h], &[-h, h]], loss::variance_loss)?, 0.0),
        (scalar_of(&[&[1.0, 1.0], &[-1.0, -1.0]], loss::covariance_loss)?, 4.0),
        (scalar_of(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]], loss::covariance_loss)?, 0.0),
        (scalar_of(&[&[1.0], &[-1.0], &[5.0]], loss::covariance_loss)?, 0.0),
        (LossWeights::default().combine(0.2, 0.1, 0.05), 2.55),
    ];
    Ok(cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max))
}

fn schedule_error() -> Result<f64> {
    let s = ScheduleConfig { base_lr: 1e-4, n_warmup: 100, n_epochs: 1000 };
    let cases = [
        (trainer::lr_at(99, &s)?, 1e-4),
        (trainer::lr_at(550, &s)?, 0.5e-4),
        (trainer::lr_at(49, &s)?, 0.5e-4),
        (trainer::lr_at(999, &s)?.max(1e-7) - 1e-7, 0.0),
    ];
    Ok(cases.iter().map(|(a, b)| (a - b).abs() / 1e-4).fold(0.0, f64::max))
}

/// Every registered check, in a fixed order. `fault` corrupts the backward
/// rule of one primitive on the analytic side of all gradient checks.
pub fn run_all(fault: Option<Primitive>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    primitive_checks(fault, &mut out);
    let fx = fixture(12, 5, 6, 8, 11);
    out.push(CheckResult::from_report(
        "grad/full_loss",
        COMPOSED_TOL,
        full_loss_gradcheck(&fx, Coords::All, fault),
    ));
    out.push(CheckResult::from_error(
        "oracle/propagation_dense_power",
        ORACLE_TOL,
        propagation_oracle(25, 10, &[1, 2, 5], 5),
    ));
    out.push(CheckResult::from_error("analytic/loss_cases", ORACLE_TOL, loss_analytic_error()));
    out.push(CheckResult::from_error("analytic/lr_schedule", 1e-9, schedule_error()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_suite_passes() {
        let results = run_all(None);
        assert!(results.len() >= 10);
        for r in &results {
            assert!(r.passed, "{} failed: err {} tol {} ({})", r.name, r.max_err, r.tol, r.note);
        }
    }

    #[test]
    fn corrupted_rules_are_caught() {
        for p in [Primitive::MatMul, Primitive::Covariance, Primitive::Sparse, Primitive::BatchNorm] {
            let results = run_all(Some(p));
            assert!(results.iter().any(|r| !r.passed), "fault in {p} went unnoticed");
        }
    }
}
