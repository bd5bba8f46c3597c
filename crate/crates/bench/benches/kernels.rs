use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use glmcert::linalg::gemm;
use glmcert::prox::pava_boundary;
use glmcert::{prox_step, root_node, BatchMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `X' R` for a 300x300 design at the batch widths the solver uses.
fn bench_gemm(c: &mut Criterion) {
    let (n, p) = (300, 300);
    let xt = random(p * n, 1);
    let mut group = c.benchmark_group("gemm_300x300");
    for m in [1usize, 8, 64, 256] {
        let r = random(n * m, 2);
        let mut out = vec![0.0; p * m];
        group.throughput(Throughput::Elements(m as u64));
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |bch, &m| {
            bch.iter(|| gemm(black_box(&xt), p, n, black_box(&r), m, &mut out))
        });
    }
    group.finish();
}

fn bench_prox(c: &mut Criterion) {
    let p = 300;
    let mut group = c.benchmark_group("prox_step_p300_k8");
    for m in [1usize, 64, 256] {
        let nodes: Vec<_> = (0..m).map(|_| root_node(p)).collect();
        let meta = BatchMeta::from_nodes(&nodes, 8);
        let u = glmcert::Matrix::from_row_major(p, m, random(p * m, 3).iter().map(|v| 3.0 * v).collect());
        group.throughput(Throughput::Elements(m as u64));
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |bch, _| {
            bch.iter(|| prox_step(black_box(&u), 0.01, 1.0, &meta, 2.0))
        });
    }
    group.finish();
}

fn bench_pava(c: &mut Criterion) {
    let mut a: Vec<f64> = random(1000, 4).iter().map(|v| v.abs() * 4.0).collect();
    a.sort_by(|x, y| y.total_cmp(x));
    let mut v = vec![0.0; a.len()];
    c.bench_function("pava_boundary_1000_k10", |bch| {
        bch.iter(|| pava_boundary(black_box(&a), 10, 1.0, 2.0, &mut v))
    });
}

criterion_group!(benches, bench_gemm, bench_prox, bench_pava);
criterion_main!(benches);
