use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lorafit::{inject_adapters, AdapterSpec, Bits, ModelConfig, QuantizedMatrix, Tape, TransformerModel};
use lorafit_bench::{random_batch, random_tensor};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for (m, k, n) in [(64, 128, 128), (256, 128, 512), (256, 512, 128)] {
        let a = random_tensor(&[m, k], 1);
        let b = random_tensor(&[k, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| black_box(a.matmul(b).unwrap()))
        });
    }
    group.finish();
}

fn quantization(c: &mut Criterion) {
    let w = random_tensor(&[512, 128], 3);
    let mut group = c.benchmark_group("quantize");
    for bits in [Bits::Eight, Bits::Four] {
        group.bench_function(format!("{}/quantize", bits.tag()), |b| {
            b.iter(|| black_box(QuantizedMatrix::quantize(&w, bits, 64).unwrap()))
        });
        let q = QuantizedMatrix::quantize(&w, bits, 64).unwrap();
        group.bench_function(format!("{}/dequantize", bits.tag()), |b| {
            b.iter(|| black_box(q.dequantize::<f32>().unwrap()))
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let model = inject_adapters(TransformerModel::<f32>::init(ModelConfig::default()).unwrap(), &AdapterSpec::default())
        .unwrap();
    let mut quantized = model.clone();
    quantized.quantize_frozen(Bits::Four, 64).unwrap();
    let batch = random_batch(16, 64, 4);
    let labels = vec![0usize; 16];

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward/dense", |b| b.iter(|| black_box(model.forward(&batch).unwrap())));
    group.bench_function("forward/q4", |b| b.iter(|| black_box(quantized.forward(&batch).unwrap())));
    group.bench_function("train_step/q4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let logits = quantized.forward_on_tape(&mut tape, &batch, true).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels, None).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, gemm, quantization, model);
criterion_main!(benches);
