//! Reconstruction, variance and covariance terms of the training objective.
//!
//! Normalisations follow the reference pseudocode: covariance uses the `N−1`
//! divisor and reconstruction is a mean over all `N·D` elements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 5.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.lambda1) && ok(self.lambda2) && ok(self.lambda3)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, rec: f64, var: f64, cov: f64) -> f64 {
        self.lambda1 * rec + self.lambda2 * var + self.lambda3 * cov
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub var: f64,
    pub cov: f64,
    pub total: f64,
}

/// Tape handles of the loss terms; `total` is the node to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub var: Var,
    pub cov: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<F: Scalar>(&self, tape: &Tape<F>) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            rec: tape.scalar(self.rec)?.as_f64(),
            var: tape.scalar(self.var)?.as_f64(),
            cov: tape.scalar(self.cov)?.as_f64(),
            total: tape.scalar(self.total)?.as_f64(),
        })
    }
}

pub fn sample_covariance<F: Scalar>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    tape.covariance(z)
}

pub fn variance_loss<F: Scalar>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    let c = tape.covariance(z)?;
    tape.variance_penalty(c)
}

pub fn covariance_loss<F: Scalar>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    let c = tape.covariance(z)?;
    tape.off_diagonal_penalty(c)
}

/// `mse(u, û) + mse(v, v̂)`.
pub fn reconstruction_loss<F: Scalar>(tape: &mut Tape<F>, u: Var, u_hat: Var, v: Var, v_hat: Var) -> Result<Var> {
    let a = tape.mse(u, u_hat)?;
    let b = tape.mse(v, v_hat)?;
    tape.add(a, b)
}

/// Symmetrised objective `λ₁·rec + λ₂·var + λ₃·cov` over both views.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    u: Var,
    v: Var,
    u_hat: Var,
    v_hat: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    let rec = reconstruction_loss(tape, u, u_hat, v, v_hat)?;

    // One covariance per view, shared by both penalties.
    let cu = tape.covariance(u)?;
    let cv = tape.covariance(v)?;
    let var_u = tape.variance_penalty(cu)?;
    let var_v = tape.variance_penalty(cv)?;
    let var = tape.add(var_u, var_v)?;
    let cov_u = tape.off_diagonal_penalty(cu)?;
    let cov_v = tape.off_diagonal_penalty(cv)?;
    let cov = tape.add(cov_u, cov_v)?;

    let t1 = tape.scale(rec, F::lit(w.lambda1));
    let t2 = tape.scale(var, F::lit(w.lambda2));
    let t3 = tape.scale(cov, F::lit(w.lambda3));
    let t12 = tape.add(t1, t2)?;
    let total = tape.add(t12, t3)?;
    Ok(LossVars { rec, var, cov, total })
}
