use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use growlength::numeric::kernels;
use growlength::Graph;
use growlength_bench::filled;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for (m, k, n) in [(64, 64, 64), (256, 64, 256), (2048, 64, 64), (2048, 64, 256)] {
        let a = filled(&[m, k], 0.1);
        let b = filled(&[k, n], 0.7);
        let mut out = vec![0.0f32; m * n];
        group.throughput(Throughput::Elements((2 * m * k * n) as u64));
        group.bench_function(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), |bch| {
            bch.iter(|| kernels::matmul(black_box(a.data()), black_box(b.data()), &mut out, m, k, n))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (heads, hd) = (2usize, 32usize);
    let d = heads * hd;
    let mut group = c.benchmark_group("causal_attention_fwd_bwd");
    group.sample_size(20);
    for seq in [32usize, 64, 128, 256, 512] {
        let rows = 2048 / seq * seq;
        let (q, k, v) = (filled(&[rows, d], 0.1), filled(&[rows, d], 0.4), filled(&[rows, d], 0.9));
        group.throughput(Throughput::Elements(rows as u64));
        group.bench_function(BenchmarkId::from_parameter(seq), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
                let o = g.causal_attention(qv, kv, vv, seq, heads).unwrap();
                let s = g.sum(o);
                g.backward(s).unwrap();
                black_box(g.grad(qv).map(|x| x[0]))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
