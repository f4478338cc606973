use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftquant::engine::{decompose_filters, shift_conv2d, FixedPointTensor};
use shiftquant::nn::layers::ConvGeom;
use shiftquant::nn::{preset, Mode, Network};
use shiftquant::quant::{quantize_filter, ExponentRange, QuantizedLayer, Thresholds};
use shiftquant::Tensor;

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
}

fn bench_quantize_filter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("quantize_filter");
    for len in [9usize, 576, 4608] {
        let w = weights(&mut rng, len);
        let range = ExponentRange::for_weights(&w, 4).unwrap();
        let t = Thresholds::zeros(2);
        group.bench_with_input(BenchmarkId::from_parameter(len), &w, |b, w| {
            b.iter(|| quantize_filter(black_box(w), &t, 2, &range))
        });
    }
    group.finish();
}

fn bench_shift_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("shift_conv2d");
    for k in [1usize, 2] {
        let g = ConvGeom { in_c: 32, in_h: 14, in_w: 14, out_c: 64, kernel: 3, stride: 1, padding: 1 };
        let len = g.in_c * 9;
        let w = weights(&mut rng, g.out_c * len);
        let range = ExponentRange::for_weights(&w, 4).unwrap();
        let t = Thresholds::filled(k, f64::NEG_INFINITY);
        let filters = w.chunks(len).map(|f| quantize_filter(f, &t, k, &range).0).collect();
        let layer = QuantizedLayer { filter_shape: vec![g.in_c, 3, 3], range, filters };
        let banks = decompose_filters(&layer);
        let data = (0..g.in_c * g.in_h * g.in_w).map(|_| rng.gen_range(-128i16..128) as i8).collect();
        let a = FixedPointTensor::new(&[g.in_c, g.in_h, g.in_w], data, 5).unwrap();
        group.bench_with_input(BenchmarkId::new("k", k), &a, |b, a| b.iter(|| shift_conv2d(black_box(a), &g, &banks).unwrap()));
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let net = Network::new(preset("mnist-2conv").unwrap()).unwrap();
    let params = net.init_params::<f32>(3);
    let buffers = net.init_buffers::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = Tensor::from_vec(&[64, 1, 28, 28], weights(&mut rng, 64 * 784)).unwrap();
    c.bench_function("forward/mnist-2conv/64", |b| {
        b.iter(|| net.forward(&params, &buffers, black_box(&batch), Mode::Eval).unwrap())
    });
}

criterion_group!(benches, bench_quantize_filter, bench_shift_conv2d, bench_forward);
criterion_main!(benches);
