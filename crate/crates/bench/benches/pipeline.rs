use criterion::{criterion_group, criterion_main, Criterion};
use rand_chacha::rand_core::SeedableRng;

use wavemark::attacks::jpeg_attack;
use wavemark::model::{embed_pipeline, extract_pipeline, init_parameters, PipelineConfig, WatermarkBits};
use wavemark::ops::conv::{conv2d, ConvLayerParams, Padding};
use wavemark::tensor::Tensor;
use wavemark::wavelet::{dwt2_haar, idwt2_haar, BandId};

fn test_image() -> Tensor {
    Tensor::from_fn(&[256, 256, 3], |i| ((i * 31 % 255) as f32) / 254.0)
}

fn bench_wavelet(c: &mut Criterion) {
    let plane = Tensor::from_fn(&[256, 256], |i| ((i * 13 % 97) as f32) / 96.0);
    c.bench_function("dwt2_haar 256", |b| b.iter(|| dwt2_haar(&plane).unwrap()));
    let bands = dwt2_haar(&plane).unwrap();
    c.bench_function("idwt2_haar 256", |b| b.iter(|| idwt2_haar(&bands).unwrap()));
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::Rng;
    let x = Tensor::from_fn(&[1, 64, 128, 128], |_| rng.gen_range(-1.0..1.0f32));
    let layer = ConvLayerParams {
        kernels: Tensor::from_fn(&[64, 64, 3, 3], |_| rng.gen_range(-0.1..0.1f32)),
        bias: Tensor::zeros(&[64]),
    };
    c.bench_function("conv2d 64x64x128x128", |b| {
        b.iter(|| conv2d(&x, &layer, 1, Padding::Same).unwrap())
    });
}

fn bench_jpeg(c: &mut Criterion) {
    let img = test_image();
    c.bench_function("jpeg_attack q50 256", |b| b.iter(|| jpeg_attack(&img, 50).unwrap()));
}

fn bench_pipelines(c: &mut Criterion) {
    let params = init_parameters(0, BandId::Ll);
    let config = PipelineConfig::default();
    let host = test_image();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let wm = WatermarkBits::random(&mut rng);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("embed 256", |b| {
        b.iter(|| embed_pipeline(&host, &wm, &params, &config).unwrap())
    });
    let marked = embed_pipeline(&host, &wm, &params, &config).unwrap();
    group.bench_function("extract 256", |b| {
        b.iter(|| extract_pipeline(&marked, &params, &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_wavelet, bench_conv, bench_jpeg, bench_pipelines);
criterion_main!(benches);
