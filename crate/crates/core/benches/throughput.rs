//! Stage throughput with one worker thread against the full pool.
//!
//! `cargo bench -p spectromind` measures the rayon build; add
//! `--no-default-features` for the sequential fallback, where both thread
//! settings run the same single-threaded code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectromind::dataset::Trial;
use spectromind::dsp::Preprocessor;
use spectromind::nn::layers::Layer;
use spectromind::nn::{build_model, Model, ModelSpec, Tensor};
use spectromind::par::{is_parallel, with_threads};
use spectromind::pipeline::SynthSpec;
use spectromind::tfd::{Representation, TfdKind};

fn trials(n: usize, channels: usize) -> Vec<Trial> {
    let ds = SynthSpec {
        channels,
        classes: n,
        trials_per_class: 1,
        ..SynthSpec::default()
    }
    .generate()
    .unwrap();
    ds.trials
}

fn thread_settings() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("1-thread", 1), ("all-threads", all)]
}

fn label(name: &str) -> String {
    format!("{name}/{}", if is_parallel() { "rayon" } else { "sequential" })
}

fn preprocess(c: &mut Criterion) {
    let data = trials(16, 32);
    let pre = Preprocessor::standard(1000.0).unwrap();
    let mut g = c.benchmark_group(label("preprocess"));
    g.sample_size(10);
    for (name, threads) in thread_settings() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || pre.preprocess_all(&data).unwrap()))
        });
    }
    g.finish();
}

fn stft(c: &mut Criterion) {
    let data = trials(16, 32);
    let rep = Representation::default_for(TfdKind::Stft);
    let mut g = c.benchmark_group(label("stft"));
    g.sample_size(10);
    for (name, threads) in thread_settings() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || rep.transform_all(&data, 1000.0).unwrap()))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let spec = ModelSpec::student(TfdKind::Stft, [32, 33, 24], 40).scaled(vec![16, 32, 64]);
    let mut g = c.benchmark_group(label("train_step"));
    g.sample_size(10);
    for (name, threads) in thread_settings() {
        let mut model: Model = build_model(&spec, 1).unwrap();
        let x = Tensor::<f32>::zeros(&[32, 32, 33, 24]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    let y = model.net.forward_train(&x, &mut rng);
                    model.net.backward(&y)
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, preprocess, stft, train_step);
criterion_main!(benches);
