//! Node relabelling and label-leakage properties of the encoder and probe.

use rand::seq::SliceRandom;

use rgi::data::{self, Labels, SbmConfig};
use rgi::encoder;
use rgi::eval;
use rgi::rng;
use rgi::selfcheck;
use rgi::Tensor;

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    perm
}

#[test]
fn encoder_is_permutation_equivariant() {
    let fx = selfcheck::fixture(18, 5, 6, 10, 3);
    let enc = &fx.config.encoder;
    let u = encoder::embed(&fx.dataset.features, &fx.dataset.graph, &fx.params, enc).unwrap();
    for seed in 0..4 {
        let perm = shuffled(18, seed);
        let p = fx.dataset.permute(&perm).unwrap();
        let up = encoder::embed(&p.features, &p.graph, &fx.params, enc).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            let diff = u.row(i).iter().zip(up.row(pi)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff <= 1e-10, "node {i} moved to {pi}: diff {diff}");
        }
    }
}

fn toy() -> data::GraphDataset {
    data::generate_sbm(&SbmConfig {
        num_blocks: 3,
        nodes_per_block: 30,
        p_in: 0.2,
        p_out: 0.02,
        feature_dim: 8,
        signal: 1.0,
        noise_sigma: 1.0,
        seed: 11,
    })
    .unwrap()
}

#[test]
fn corrupting_test_labels_leaves_probe_unchanged() {
    let ds = toy();
    let split = eval::random_split(ds.num_nodes(), eval::DEFAULT_FRACTIONS, 5).unwrap();
    let probe = eval::fit_linear_probe(&ds.features, &ds.labels, &split, 0).unwrap();

    let Labels::Multiclass { mut classes, num_classes } = ds.labels.clone() else { unreachable!() };
    for &i in &split.test_idx {
        classes[i] = (classes[i] + 1) % num_classes;
    }
    let corrupted = Labels::Multiclass { classes, num_classes };
    let probe2 = eval::fit_linear_probe(&ds.features, &corrupted, &split, 0).unwrap();
    let (a, b) = (probe.logits(&ds.features).unwrap(), probe2.logits(&ds.features).unwrap());
    assert_eq!(a, b);
}

#[test]
fn one_hot_embeddings_are_perfectly_separable() {
    let ds = toy();
    let Labels::Multiclass { classes, .. } = &ds.labels else { unreachable!() };
    let emb = Tensor::from_fn(ds.num_nodes(), 3, |i, j| f64::from(u8::from(classes[i] == j)));
    let results = eval::evaluate_embeddings(&emb, &ds.labels, &[0, 1, 2], 0, eval::DEFAULT_FRACTIONS).unwrap();
    for r in results {
        assert_eq!(r.score, 1.0, "seed {}", r.seed);
    }
}

#[test]
fn evaluation_is_deterministic_per_seed() {
    let ds = toy();
    let a = eval::evaluate_embeddings(&ds.features, &ds.labels, &[0, 1, 2], 7, eval::DEFAULT_FRACTIONS).unwrap();
    let b = eval::evaluate_embeddings(&ds.features, &ds.labels, &[2, 1, 0], 7, eval::DEFAULT_FRACTIONS).unwrap();
    for r in &a {
        let same = b.iter().find(|s| s.seed == r.seed).unwrap();
        assert_eq!(r, same);
        assert_eq!(r.split_seed, r.seed + 7);
    }
}

#[test]
fn splits_partition_the_nodes() {
    let split = eval::random_split(101, eval::DEFAULT_FRACTIONS, 3).unwrap();
    let mut all: Vec<usize> =
        split.train_idx.iter().chain(&split.val_idx).chain(&split.test_idx).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
}
