//! Sequential vs rayon-parallel row kernels. Both paths produce bitwise
//! identical results; this measures only the speed difference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_distr::{Distribution, StandardNormal};

use rgi::data::{self, SbmConfig};
use rgi::graph::{ShiftKind, ShiftMatrix};
use rgi::rng;
use rgi::Tensor;

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [128, 512] {
        let a = normal(n, n, 1);
        let b = normal(n, n, 2);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bch, _| bch.iter(|| a.matmul_seq(&b).unwrap()));
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bch, _| bch.iter(|| a.matmul_par(&b).unwrap()));
    }
    group.finish();
}

fn bench_spmm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spmm");
    for blocks in [4, 16] {
        let ds = data::generate_sbm(&SbmConfig {
            num_blocks: blocks,
            nodes_per_block: 250,
            p_in: 0.02,
            p_out: 0.001,
            feature_dim: 1,
            signal: 1.0,
            noise_sigma: 1.0,
            seed: 3,
        })
        .unwrap();
        let shift = ShiftMatrix::<f64>::new(&ds.graph, ShiftKind::SymNormAdjacency);
        let m = shift.matrix();
        let u = normal(ds.num_nodes(), 256, 4);
        let n = ds.num_nodes();
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bch, _| bch.iter(|| m.spmm_seq(&u).unwrap()));
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bch, _| bch.iter(|| m.spmm_par(&u).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_spmm);
criterion_main!(benches);
