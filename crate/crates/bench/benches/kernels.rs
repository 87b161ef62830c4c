use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use xmtl::adaptor::{Adaptor, AdaptorConfig, Mode};
use xmtl::numeric::kernels::gemm;
use xmtl::numeric::{conv1d, Graph, MultiHeadAttention, Owner, ParamRole, ParamStore, Rng, Tensor};

fn bench_gemm(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = Tensor::randn(&[64, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 128], 1.0, &mut rng);
    let mut out = vec![0.0; 64 * 128];
    c.bench_function("gemm 64x64x128", |bench| {
        bench.iter(|| gemm(64, 64, 128, black_box(a.data()), false, black_box(b.data()), false, &mut out, 0.0))
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(&[64, 96], 1.0, &mut rng);
    let w = Tensor::randn(&[64, 64, 3], 0.1, &mut rng);
    let b = Tensor::zeros(&[64]);
    c.bench_function("conv1d 64ch k3 s2 t96", |bench| bench.iter(|| conv1d(black_box(&x), &w, Some(&b), 2, 1).unwrap()));

    let mut store = ParamStore::new();
    let adaptor = Adaptor::new(AdaptorConfig::default(), &mut store, &mut rng).unwrap();
    let input = Tensor::randn(&[96, 64], 1.0, &mut rng);
    c.bench_function("adaptor forward+backward t96", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let y = adaptor.adapt(&mut g, &store, x, Mode::Eval, &mut Rng::new(0)).unwrap();
            let loss = g.sum(y.out);
            g.backward(loss).unwrap();
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 64, 4, ParamRole::SelfAttn, Owner::Encoder, &mut rng).unwrap();
    let input = Tensor::randn(&[96, 64], 1.0, &mut rng);
    c.bench_function("self-attention forward+backward t96 d64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let y = attn.forward(&mut g, &store, x, x, x, false).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
        })
    });
}

criterion_group!(benches, bench_gemm, bench_conv, bench_attention);
criterion_main!(benches);
