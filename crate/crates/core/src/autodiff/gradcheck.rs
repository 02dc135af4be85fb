//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values; it never touches a
//! backward rule, so it is an independent oracle for [`Tape::backward`].

use rand::seq::index;

use crate::autodiff::{Primitive, Tape, Var};
use crate::error::Result;
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;

/// Lower bound on the denominator of the relative error, per unit of loss
/// magnitude. Gradients that are analytically zero (e.g. a bias feeding a batch
/// norm) have a finite-difference estimate made purely of round-off, about
/// `ulp(f) / 2h`; that residue grows with `|f|`, so the floor does too.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR · max(1, |f|))` where `f` is the
/// function value at the evaluation point.
pub fn relative_error(analytic: f64, numeric: f64, f: f64) -> f64 {
    let floor = REL_ERR_FLOOR * f.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// A seeded uniform sample of `count` coordinates over all inputs.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Options {
    /// Step is `eps * max(1, |x|)`.
    pub eps: f64,
    pub coords: Coords,
    pub fault: Option<Primitive>,
}

impl Default for Options {
    fn default() -> Self {
        Self { eps: 1e-5, coords: Coords::All, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates whose ±step crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl Report {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn run_forward<Fwd>(inputs: &[Tensor<f64>], forward: &Fwd) -> Result<(f64, Vec<bool>)>
where
    Fwd: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = forward(&mut tape, &vars)?;
    Ok((tape.scalar(out)?, tape.relu_pattern()))
}

/// Compare `backward` against central differences of `forward` at `inputs`.
pub fn check<Fwd>(inputs: &[Tensor<f64>], forward: Fwd, opts: &Options) -> Result<Report>
where
    Fwd: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    if let Some(p) = opts.fault {
        tape.inject_fault(p);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = forward(&mut tape, &vars)?;
    let f0 = tape.scalar(out)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();

    let flat: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |e| (k, e)))
        .collect();
    let coords: Vec<(usize, usize)> = match opts.coords {
        Coords::All => flat,
        Coords::Sample { count, seed } => {
            let mut r = rng::seeded(seed);
            let mut picked = index::sample(&mut r, flat.len(), count.min(flat.len())).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| flat[i]).collect()
        }
    };

    let results = parallel::map_indexed(coords.len(), |c| -> Result<Option<Mismatch>> {
        let (k, e) = coords[c];
        let x = inputs[k].data()[e];
        let h = opts.eps * x.abs().max(1.0);
        let mut shifted = inputs.to_vec();
        shifted[k].data_mut()[e] = x + h;
        let (fp, pp) = run_forward(&shifted, &forward)?;
        shifted[k].data_mut()[e] = x - h;
        let (fm, pm) = run_forward(&shifted, &forward)?;
        if pp != base_pattern || pm != base_pattern {
            return Ok(None);
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[k].data()[e];
        Ok(Some(Mismatch { input: k, element: e, analytic: a, numeric, rel_err: relative_error(a, numeric, f0) }))
    });

    let mut report = Report::default();
    for r in results {
        match r? {
            None => report.skipped += 1,
            Some(m) => {
                report.checked += 1;
                if report.worst.as_ref().is_none_or(|w| m.rel_err > w.rel_err) {
                    report.max_rel_err = m.rel_err;
                    report.worst = Some(m);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes_and_fault_is_caught() {
        let x = Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.7]]);
        let fwd = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.square(v[0]);
            Ok(t.sum(sq))
        };
        let ok = check(&[x.clone()], fwd, &Options::default()).unwrap();
        assert!(ok.passes(1e-8), "{ok:?}");
        let bad = check(&[x], fwd, &Options { fault: Some(Primitive::Square), ..Options::default() }).unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn sampling_is_bounded_and_deterministic() {
        let x = Tensor::from_fn(10, 10, |i, j| (i as f64 - j as f64) * 0.1);
        let fwd = |t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0]));
        let opts = Options { coords: Coords::Sample { count: 17, seed: 3 }, ..Options::default() };
        let a = check(&[x.clone()], fwd, &opts).unwrap();
        let b = check(&[x], fwd, &opts).unwrap();
        assert_eq!(a.checked, 17);
        assert_eq!(a.max_rel_err, b.max_rel_err);
    }
}
