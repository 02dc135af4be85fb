//! Optimiser, learning-rate schedule and the full-graph training loop.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::GraphDataset;
use crate::encoder::{self, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{self, PropagationConfig, ShiftMatrix};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub n_warmup: usize,
    pub n_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, n_warmup: 100, n_epochs: 1000 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_warmup > 0 && self.n_warmup <= self.n_epochs) {
            return Err(Error::Config(format!(
                "schedule needs 0 < n_warmup <= n_epochs, got {} / {}",
                self.n_warmup, self.n_epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// Linear warmup reaching `base_lr` at epoch `n_warmup − 1`, then cosine
/// decay over the remaining epochs.
pub fn lr_at(epoch: usize, s: &ScheduleConfig) -> Result<f64> {
    if epoch >= s.n_epochs {
        return Err(Error::InvalidEpoch { epoch, n_epochs: s.n_epochs });
    }
    if epoch < s.n_warmup {
        return Ok(s.base_lr * (epoch + 1) as f64 / s.n_warmup as f64);
    }
    let progress = (epoch - s.n_warmup) as f64 / (s.n_epochs - s.n_warmup) as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Scalar = f64> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())))
            .unzip();
        Self { config, step: 0, first, second }
    }
}

/// One bias-corrected Adam update with coupled L2 weight decay
/// (`g ← g + wd·θ` before the moment updates).
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[&Tensor<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.first.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "adam_step")?;
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
    let bias1 = F::lit(1.0 - c.beta1.powi(state.step as i32));
    let bias2 = F::lit(1.0 - c.beta2.powi(state.step as i32));
    let (wd, eps, lr) = (F::lit(c.weight_decay), F::lit(c.eps), F::lit(lr));
    let one = F::one();

    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] + wd * *theta;
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub pred_hidden: usize,
    pub propagation: PropagationConfig,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Dropout applied to `U` on the propagation branch only.
    pub p_local: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.propagation.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.p_local) {
            return Err(Error::InvalidProbability(self.p_local));
        }
        if self.pred_hidden == 0 {
            return Err(Error::Config("predictor hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Shared per-graph operators for a training run.
pub struct TrainContext<F: Scalar> {
    pub features: Tensor<F>,
    pub encoder_shift: Arc<dyn graph::LinearOperator<F>>,
    pub shift: Arc<ShiftMatrix<F>>,
}

impl<F: Scalar> TrainContext<F> {
    pub fn new(ds: &GraphDataset, cfg: &TrainConfig) -> Self {
        Self {
            features: ds.features.cast(),
            encoder_shift: encoder::kipf_operator(&ds.graph),
            shift: Arc::new(ShiftMatrix::new(&ds.graph, cfg.propagation.kind)),
        }
    }
}

/// Record the full objective for `params` on a fresh tape. Returns the tape,
/// the parameter handles and the loss handles.
pub fn forward_loss<F: Scalar>(
    ctx: &TrainContext<F>,
    params: &ModelParams<F>,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
    training: bool,
) -> Result<(Tape<F>, encoder::ModelVars, loss::LossVars)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(ctx.features.clone());
    let u = encoder::encoder_forward(&mut tape, x, &ctx.encoder_shift, &vars, &cfg.encoder, rng, training)?;
    let u_drop = tape.dropout(u, cfg.p_local, rng, training)?;
    let v = graph::propagate_on_tape(&mut tape, u_drop, &cfg.propagation, &ctx.shift)?;
    let v_hat = encoder::predictor_forward(&mut tape, u, &vars.phi)?;
    let u_hat = encoder::predictor_forward(&mut tape, v, &vars.psi)?;
    let lv = loss::total_loss(&mut tape, u, v, u_hat, v_hat, &cfg.weights)?;
    Ok((tape, vars, lv))
}

/// Train from the seeded initialisation for `cfg.schedule.n_epochs` epochs.
pub fn train<F: Scalar>(ds: &GraphDataset, cfg: &TrainConfig) -> Result<(ModelParams<F>, Vec<EpochMetrics>)> {
    let params = encoder::init_params(&cfg.encoder, cfg.pred_hidden, cfg.seed)?;
    train_from(ds, cfg, params, |_, _, _| Ok(()))
}

/// Train starting from `params`, calling `on_epoch` after every update.
pub fn train_from<F, Cb>(
    ds: &GraphDataset,
    cfg: &TrainConfig,
    mut params: ModelParams<F>,
    mut on_epoch: Cb,
) -> Result<(ModelParams<F>, Vec<EpochMetrics>)>
where
    F: Scalar,
    Cb: FnMut(usize, &ModelParams<F>, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    if ds.feature_dim() != cfg.encoder.input_dim {
        return Err(Error::Config(format!(
            "encoder input_dim {} but dataset has {} features",
            cfg.encoder.input_dim,
            ds.feature_dim()
        )));
    }
    let ctx = TrainContext::<F>::new(ds, cfg);
    // Stream 0 seeds the initialisation; dropout masks use stream 1.
    let mut rng = rng::stream(cfg.seed, 1);
    let mut state = OptimizerState::new(cfg.adam, params.tensors());
    let mut history = Vec::with_capacity(cfg.schedule.n_epochs);

    for epoch in 0..cfg.schedule.n_epochs {
        let lr = lr_at(epoch, &cfg.schedule)?;
        let (mut tape, vars, lv) = forward_loss(&ctx, &params, cfg, &mut rng, true)?;
        let values = lv.values(&tape)?;
        if ![values.rec, values.var, values.cov, values.total].iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(epoch));
        }
        let mut grads = tape.backward(lv.total)?;
        let grads: Vec<Tensor<F>> = vars
            .all()
            .into_iter()
            .zip(params.tensors())
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect();
        let grad_refs: Vec<&Tensor<F>> = grads.iter().collect();
        adam_step(&mut params.tensors_mut(), &grad_refs, &mut state, lr)?;

        let m = EpochMetrics { epoch, lr, loss: values };
        on_epoch(epoch, &params, &m)?;
        history.push(m);
    }
    Ok((params, history))
}

/// Mean over columns of the per-column sample variance.
pub fn mean_dimension_variance<F: Scalar>(u: &Tensor<F>) -> f64 {
    let v = u.column_variances();
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64
}
