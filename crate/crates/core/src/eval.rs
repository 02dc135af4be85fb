//! Linear evaluation of frozen embeddings: row normalisation, random splits,
//! a logistic-regression probe and accuracy / micro-F1 scoring.

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::{Labels, TaskKind};
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamConfig, OptimizerState};

pub const PROBE_LR: f64 = 1e-2;
pub const PROBE_STEPS: usize = 1000;
pub const PROBE_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.1, 0.1, 0.8];

/// Divide every nonzero row by its Euclidean norm.
pub fn l2_normalize_rows(z: &Tensor<f64>) -> Tensor<f64> {
    let mut out = z.clone();
    let cols = out.cols();
    parallel::for_each_row(out.data_mut(), cols, |_, row| {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    });
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_idx.len(), self.val_idx.len(), self.test_idx.len())
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test: `floor(n·f)` nodes for
/// train and validation, the remainder (up to the third fraction) for test.
pub fn random_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Split(format!("fractions {fractions:?} must lie in [0,1] and sum to <= 1")));
    }
    let n_train = (n as f64 * fractions[0]).floor() as usize;
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let rest = n.saturating_sub(n_train + n_val);
    let covered = fractions.iter().sum::<f64>() >= 1.0 - 1e-12;
    let n_test = if covered { rest } else { ((n as f64 * fractions[2]).floor() as usize).min(rest) };
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Split(format!(
            "{n} nodes with fractions {fractions:?} leave an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    Ok(Split {
        train_idx: perm[..n_train].to_vec(),
        val_idx: perm[n_train..n_train + n_val].to_vec(),
        test_idx: perm[n_train + n_val..n_train + n_val + n_test].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `D×C` weight and `1×C` bias.
    pub linear: Linear<f64>,
    pub task: TaskKind,
}

impl LinearProbe {
    pub fn logits(&self, emb: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = emb.matmul(&self.linear.w)?;
        let b = self.linear.b.row(0).to_vec();
        let c = z.cols();
        parallel::for_each_row(z.data_mut(), c, |_, row| {
            row.iter_mut().zip(&b).for_each(|(v, bias)| *v += bias);
        });
        Ok(z)
    }
}

fn targets_for(labels: &Labels) -> (Option<Vec<usize>>, Option<Tensor<f64>>) {
    match labels {
        Labels::Multiclass { classes, .. } => (Some(classes.clone()), None),
        Labels::Multilabel(t) => (None, Some(t.clone())),
    }
}

fn check_degenerate(train: &Labels) -> Result<()> {
    let single = match train {
        Labels::Multiclass { classes, .. } => classes.windows(2).all(|w| w[0] == w[1]),
        Labels::Multilabel(t) => t.data().windows(2).all(|w| w[0] == w[1]),
    };
    if single {
        return Err(Error::DegenerateLabels(format!("the {} training labels are all one class", train.len())));
    }
    Ok(())
}

/// Fit a linear classifier on `split.train_idx`, keeping the step with the
/// best validation score. Test labels are never looked at: only the train and
/// validation rows of `labels` are extracted.
pub fn fit_linear_probe(emb: &Tensor<f64>, labels: &Labels, split: &Split, seed: u64) -> Result<LinearProbe> {
    if emb.rows() != labels.len() {
        return Err(Error::CountMismatch(format!("{} embedding rows but {} labels", emb.rows(), labels.len())));
    }
    let train_labels = labels.subset(&split.train_idx);
    let val_labels = labels.subset(&split.val_idx);
    fit_on(
        &emb.select_rows(&split.train_idx),
        &train_labels,
        &emb.select_rows(&split.val_idx),
        &val_labels,
        seed,
    )
}

/// Probe training on pre-extracted train and validation rows.
pub fn fit_on(
    x_train: &Tensor<f64>,
    y_train: &Labels,
    x_val: &Tensor<f64>,
    y_val: &Labels,
    seed: u64,
) -> Result<LinearProbe> {
    if x_train.rows() == 0 || x_val.rows() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    check_degenerate(y_train)?;
    let task = y_train.task();
    let (d, c) = (x_train.cols(), y_train.num_classes());
    let bound = (6.0 / (d + c) as f64).sqrt();
    let mut r = rng::seeded(seed);
    let w = Tensor::from_fn(d, c, |_, _| rand::Rng::random_range(&mut r, -bound..=bound));
    let mut probe = LinearProbe { linear: Linear { w, b: Tensor::zeros(1, c) }, task };

    let adam = AdamConfig { weight_decay: PROBE_WEIGHT_DECAY, ..AdamConfig::default() };
    let mut state = OptimizerState::new(adam, [&probe.linear.w, &probe.linear.b]);
    let (classes, multi) = targets_for(y_train);

    let mut best = (evaluate(&probe, x_val, y_val, &all(x_val.rows()))?, probe.clone());
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let w = tape.param(probe.linear.w.clone());
        let b = tape.param(probe.linear.b.clone());
        let xw = tape.matmul(x, w)?;
        let z = tape.add_row(xw, b)?;
        let loss = match (&classes, &multi) {
            (Some(t), _) => tape.softmax_cross_entropy(z, t)?,
            (_, Some(t)) => tape.bce_with_logits(z, t)?,
            _ => unreachable!("labels are either multiclass or multilabel"),
        };
        let mut g = tape.backward(loss)?;
        let (gw, gb) = (g.take(w).expect("weight gradient"), g.take(b).expect("bias gradient"));
        adam_step(&mut [&mut probe.linear.w, &mut probe.linear.b], &[&gw, &gb], &mut state, PROBE_LR)?;

        let score = evaluate(&probe, x_val, y_val, &all(x_val.rows()))?;
        if score > best.0 {
            best = (score, probe.clone());
        }
    }
    Ok(best.1)
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Accuracy (multiclass, argmax with ties to the lowest index) or micro-F1
/// (multilabel, logit > 0) of `probe` on the rows `idx`.
pub fn evaluate(probe: &LinearProbe, emb: &Tensor<f64>, labels: &Labels, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if probe.task != labels.task() {
        return Err(Error::Config(format!("probe is {:?} but labels are {:?}", probe.task, labels.task())));
    }
    let logits = probe.logits(&emb.select_rows(idx))?;
    let truth = labels.subset(idx);
    match truth {
        Labels::Multiclass { classes, .. } => Ok(accuracy(&logits, &classes)),
        Labels::Multilabel(t) => {
            let pred = logits.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            micro_f1(&pred, &t)
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Tensor<f64>, classes: &[usize]) -> f64 {
    let hits = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == classes[r]).count();
    hits as f64 / logits.rows().max(1) as f64
}

/// Micro-averaged F1 of 0/1 predictions; 0 when there are no true positives
/// and nothing to recall or predict.
pub fn micro_f1(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    pred.expect_same_shape(truth, "micro_f1")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0.5, t > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if tp == 0 || denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Outcome of one probe run.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub split_seed: u64,
    pub score: f64,
}

/// Normalise, then for each seed draw a split and fit and score a probe.
/// Seeds are independent and run in parallel; results are in seed order.
pub fn evaluate_embeddings(
    emb: &Tensor<f64>,
    labels: &Labels,
    seeds: &[u64],
    split_seed_base: u64,
    fractions: [f64; 3],
) -> Result<Vec<SeedResult>> {
    if emb.rows() != labels.len() {
        return Err(Error::CountMismatch(format!("{} embedding rows but {} labels", emb.rows(), labels.len())));
    }
    let z = l2_normalize_rows(emb);
    parallel::map_indexed(seeds.len(), |k| {
        let seed = seeds[k];
        let split_seed = split_seed_base.wrapping_add(seed);
        let split = random_split(z.rows(), fractions, split_seed)?;
        let probe = fit_linear_probe(&z, labels, &split, seed)?;
        let score = evaluate(&probe, &z, labels, &split.test_idx)?;
        Ok(SeedResult { seed, split_seed, score })
    })
    .into_iter()
    .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Multiclass => "accuracy",
        TaskKind::Multilabel => "micro_f1",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc(classes: &[usize], c: usize) -> Labels {
        Labels::Multiclass { classes: classes.to_vec(), num_classes: c }
    }

    #[test]
    fn l2_examples() {
        let z = l2_normalize_rows(&Tensor::from_rows(&[[3.0, 4.0], [0.0, 0.0]]));
        assert_eq!(z, Tensor::from_rows(&[[0.6, 0.8], [0.0, 0.0]]));
    }

    #[test]
    fn split_sizes_and_determinism() {
        assert_eq!(random_split(100, DEFAULT_FRACTIONS, 1).unwrap().sizes(), (10, 10, 80));
        assert_eq!(random_split(37, DEFAULT_FRACTIONS, 1).unwrap().sizes(), (3, 3, 31));
        assert_eq!(random_split(50, DEFAULT_FRACTIONS, 9).unwrap(), random_split(50, DEFAULT_FRACTIONS, 9).unwrap());
        assert!(matches!(random_split(5, DEFAULT_FRACTIONS, 1), Err(Error::Split(_))));
        assert!(matches!(random_split(100, [0.5, 0.5, 0.5], 1), Err(Error::Split(_))));
        let s = random_split(40, DEFAULT_FRACTIONS, 3).unwrap();
        let mut all: Vec<usize> = s.train_idx.iter().chain(&s.val_idx).chain(&s.test_idx).copied().collect();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn micro_f1_examples() {
        let truth = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(micro_f1(&truth, &truth).unwrap(), 1.0);
        assert_eq!(micro_f1(&Tensor::zeros(3, 2), &truth).unwrap(), 0.0);
        // TP=2, FP=1, FN=1.
        let pred = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert!((micro_f1(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(micro_f1(&Tensor::zeros(2, 2), &Tensor::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn empty_evaluation() {
        let probe = LinearProbe {
            linear: Linear { w: Tensor::zeros(2, 2), b: Tensor::zeros(1, 2) },
            task: TaskKind::Multiclass,
        };
        let emb = Tensor::zeros(3, 2);
        assert!(matches!(evaluate(&probe, &emb, &mc(&[0, 1, 0], 2), &[]), Err(Error::EmptyEvaluation)));
    }

    fn blobs() -> (Tensor<f64>, Labels) {
        let emb = Tensor::from_fn(40, 2, |i, j| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let jitter = ((i * 7 + j * 3) % 5) as f64 * 0.05;
            if j == 0 { side * (1.0 + jitter) } else { jitter - 0.1 }
        });
        let labels = mc(&(0..40).map(|i| i % 2).collect::<Vec<_>>(), 2);
        (emb, labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (emb, labels) = blobs();
        let split = Split { train_idx: (0..20).collect(), val_idx: (20..30).collect(), test_idx: (30..40).collect() };
        let probe = fit_linear_probe(&emb, &labels, &split, 0).unwrap();
        assert_eq!(evaluate(&probe, &emb, &labels, &split.train_idx).unwrap(), 1.0);
        assert_eq!(evaluate(&probe, &emb, &labels, &split.test_idx).unwrap(), 1.0);
        assert_eq!(probe, fit_linear_probe(&emb, &labels, &split, 0).unwrap());
    }

    #[test]
    fn degenerate_train_labels() {
        let emb = Tensor::from_fn(6, 2, |i, j| (i + j) as f64);
        let labels = mc(&[0, 0, 0, 1, 1, 1], 2);
        let split = Split { train_idx: vec![0, 1], val_idx: vec![3], test_idx: vec![4, 5] };
        assert!(matches!(fit_linear_probe(&emb, &labels, &split, 0), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn identical_embeddings_learn_only_the_prior() {
        let emb = Tensor::filled(50, 3, 0.5);
        let classes: Vec<usize> = (0..50).map(|i| usize::from(i % 5 == 0)).collect();
        let labels = mc(&classes, 2);
        let split = random_split(50, [0.4, 0.2, 0.4], 4).unwrap();
        let probe = fit_linear_probe(&emb, &labels, &split, 0).unwrap();
        let acc = evaluate(&probe, &emb, &labels, &split.val_idx).unwrap();
        let majority = split.val_idx.iter().filter(|&&i| classes[i] == 0).count() as f64 / split.val_idx.len() as f64;
        assert!((acc - majority).abs() < 1e-12, "acc {acc} vs majority {majority}");
    }

    #[test]
    fn multilabel_probe() {
        let emb = Tensor::from_fn(30, 2, |i, j| if (i >> j) & 1 == 1 { 1.0 } else { -1.0 });
        let truth = Tensor::from_fn(30, 2, |i, j| ((i >> j) & 1) as f64);
        let labels = Labels::Multilabel(truth);
        let split = random_split(30, [0.4, 0.3, 0.3], 2).unwrap();
        let probe = fit_linear_probe(&emb, &labels, &split, 1).unwrap();
        assert_eq!(evaluate(&probe, &emb, &labels, &split.test_idx).unwrap(), 1.0);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
