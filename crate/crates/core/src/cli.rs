//! Implementations of the `rgi` subcommands. Argument parsing and exit-code
//! mapping live in the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{checkpoint, Primitive};
use crate::config::RunConfig;
use crate::data::{self, GraphDataset};
use crate::encoder::{self, ModelParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::selfcheck;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{self, EpochMetrics, Precision, TrainConfig};

pub const METRICS_HEADER: &str = "epoch,lr,rec,var,cov,total";
pub const FAULT_ENV: &str = "RGI_SELFCHECK_FAULT";
pub const THREADS_ENV: &str = "RGI_THREADS";

impl Error {
    /// Whether the error signals a broken internal invariant rather than bad
    /// user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Shape { .. } | Error::TapeConsumed)
    }
}

/// `printf("%.{sig}g")`: `sig` significant digits, trailing zeros removed,
/// scientific notation outside `1e-4 <= |x| < 10^sig`.
pub fn format_g(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        let l = &m.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            format_g(m.lr, 9),
            format_g(l.rec, 9),
            format_g(l.var, 9),
            format_g(l.cov, 9),
            format_g(l.total, 9)
        );
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train_typed<F: Scalar>(ds: &GraphDataset, cfg: &RunConfig, tc: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    let params = encoder::init_params::<F>(&tc.encoder, tc.pred_hidden, tc.seed)?;
    let (params, history) = trainer::train_from(ds, tc, params, |epoch, p, _| {
        match cfg.checkpoint_every {
            Some(every) if (epoch + 1) % every == 0 && epoch + 1 < tc.schedule.n_epochs => {
                let path = cfg.output_dir.join(format!("checkpoint_{:06}.rgi", epoch + 1));
                checkpoint::save(&path, &p.to_named(&tc.encoder))
            }
            _ => Ok(()),
        }
    })?;
    checkpoint::save(&cfg.checkpoint_path(), &params.to_named(&tc.encoder))?;
    Ok(history)
}

/// Train per the config, writing `checkpoint.rgi` and `metrics.csv` into the
/// output directory. Returns the metrics history.
pub fn cmd_train(config_path: &Path) -> Result<Vec<EpochMetrics>> {
    let cfg = RunConfig::load(config_path)?;
    let ds = cfg.load_dataset()?;
    let tc = cfg.train_config(ds.feature_dim());
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let history = match cfg.precision {
        Precision::F64 => train_typed::<f64>(&ds, &cfg, &tc)?,
        Precision::F32 => train_typed::<f32>(&ds, &cfg, &tc)?,
    };
    write_file(&cfg.metrics_path(), metrics_csv(&history).as_bytes())?;
    Ok(history)
}

fn embed_typed<F: Scalar>(ds: &GraphDataset, tc: &TrainConfig, params: &ModelParams<f64>) -> Result<Tensor<f64>> {
    let params: ModelParams<F> = params.cast();
    let u = encoder::embed(&ds.features.cast::<F>(), &ds.graph, &params, &tc.encoder)?;
    Ok(u.cast())
}

/// Load a checkpoint whose shapes must match the model described by `tc`.
pub fn load_params(tc: &TrainConfig, checkpoint_path: &Path) -> Result<ModelParams<f64>> {
    let entries = checkpoint::load::<f64>(checkpoint_path)?;
    ModelParams::from_named(entries, &tc.encoder, tc.pred_hidden)
}

/// Eval-mode embeddings of the configured dataset, written as an `N×D` CSV.
pub fn cmd_embed(config_path: &Path, checkpoint_path: &Path, out: &Path) -> Result<Tensor<f64>> {
    let cfg = RunConfig::load(config_path)?;
    let ds = cfg.load_dataset()?;
    let tc = cfg.train_config(ds.feature_dim());
    let params = load_params(&tc, checkpoint_path)?;
    let u = match cfg.precision {
        Precision::F64 => embed_typed::<f64>(&ds, &tc, &params)?,
        Precision::F32 => embed_typed::<f32>(&ds, &tc, &params)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    data::write_matrix_csv(out, &u)?;
    Ok(u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: &'static str,
    pub results: Vec<eval::SeedResult>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn csv_lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| format!("{},{},{},{},{}", self.dataset, r.seed, r.split_seed, self.metric, format_g(r.score, 9)))
            .collect()
    }

    pub fn summary(&self) -> String {
        format!("mean={:.4} std={:.4}", self.mean, self.std)
    }
}

/// Linear-probe evaluation of an embeddings CSV over seeds `0..num_seeds`.
/// Per-seed lines are also written to `eval.csv` in the output directory.
pub fn cmd_eval(config_path: &Path, embeddings: &Path, num_seeds: Option<usize>) -> Result<EvalReport> {
    let cfg = RunConfig::load(config_path)?;
    let ds = cfg.load_dataset()?;
    let emb = data::read_matrix_csv(embeddings)?;
    if emb.rows() != ds.num_nodes() {
        return Err(Error::CountMismatch(format!(
            "{} has {} rows but the dataset has {} nodes",
            embeddings.display(),
            emb.rows(),
            ds.num_nodes()
        )));
    }
    let n = num_seeds.unwrap_or(cfg.eval.num_seeds);
    if n == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).collect();
    let results = eval::evaluate_embeddings(&emb, &ds.labels, &seeds, cfg.eval.split_seed, cfg.eval.fractions)?;
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let (mean, std) = eval::mean_std(&scores);
    let report = EvalReport { dataset: ds.name.clone(), metric: eval::metric_name(ds.task()), results, mean, std };

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut text = report.csv_lines().join("\n");
    text.push('\n');
    write_file(&cfg.output_dir.join("eval.csv"), text.as_bytes())?;
    Ok(report)
}

/// Run every self-check, printing one line each. Returns whether all passed.
pub fn cmd_selfcheck(fault: Option<&str>, out: &mut impl std::io::Write) -> Result<bool> {
    let fault = match fault {
        None | Some("") => None,
        Some(name) => Some(Primitive::from_name(name).ok_or_else(|| {
            Error::Config(format!("{FAULT_ENV}={name} does not name a primitive"))
        })?),
    };
    let results = selfcheck::run_all(fault);
    let mut all = true;
    for r in &results {
        all &= r.passed;
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{status} {:<34} max_err={:<11} tol={:<7} {}",
            r.name,
            format_g(r.max_err, 3),
            format_g(r.tol, 1),
            r.note
        );
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(out, "{passed}/{} checks passed", results.len());
    let _ = out.flush();
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_formatting() {
        assert_eq!(format_g(1e-4, 9), "0.0001");
        assert_eq!(format_g(1.5e-5, 9), "1.5e-05");
        assert_eq!(format_g(0.1, 9), "0.1");
        assert_eq!(format_g(2.0 / 3.0, 9), "0.666666667");
        assert_eq!(format_g(123456789.0, 9), "123456789");
        assert_eq!(format_g(1234567890.0, 9), "1.23456789e+09");
        assert_eq!(format_g(-2.5, 9), "-2.5");
        assert_eq!(format_g(0.0, 9), "0");
        assert_eq!(format_g(9.9999999999, 9), "10");
    }

    #[test]
    fn internal_errors() {
        assert!(Error::TapeConsumed.is_internal());
        assert!(!Error::Config("x".into()).is_internal());
        assert!(!Error::BadCheckpointHeader.is_internal());
    }

    #[test]
    fn unknown_fault_is_a_config_error() {
        let mut sink = Vec::new();
        assert!(matches!(cmd_selfcheck(Some("nope"), &mut sink), Err(Error::Config(_))));
    }
}
