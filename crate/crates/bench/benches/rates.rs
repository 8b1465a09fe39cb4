use convldp::arch::{ExtractorKind, LayerSpec};
use convldp::ldp::{rate_layer, RateOptions};
use convldp::{Activation, ArchSpec, PsdMatrix, RngStream};
use criterion::{criterion_group, criterion_main, Criterion};

fn scalar_fcnn() -> ArchSpec {
    ArchSpec {
        hidden_layers: 1,
        inputs: 1,
        input_channels: 1,
        output_channels: 1,
        spatial: vec![1, 1, 1],
        channel_slopes: vec![1.0],
        activation: Activation::Relu,
        input_mask_norm: Default::default(),
        probe: Default::default(),
        layers: vec![LayerSpec::new(ExtractorKind::FullyConnected, 1.0); 2],
    }
}

fn bench(c: &mut Criterion) {
    let spec = scalar_fcnn();
    let k1 = PsdMatrix::scalar(1.0).unwrap();
    let q2 = PsdMatrix::scalar(0.8).unwrap();
    let opts = RateOptions {
        samples: 20_000,
        ..Default::default()
    };
    let s = RngStream::new(2);
    let mut g = c.benchmark_group("rate");
    g.sample_size(10);
    g.bench_function("rate_layer relu scalar", |b| b.iter(|| rate_layer(&spec, 1, &q2, &k1, &opts, &s).unwrap()));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
