//! Analytic gradients against central finite differences, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectromind::nn::layers::{BatchNorm, Conv2d, Dropout, GlobalAvgPool, Layer, Linear, Param, Relu, Residual, Sequential};
use spectromind::nn::model::{build_conv1d_baseline, build_student_cnn, ModelSpec};
use spectromind::nn::Tensor;
use spectromind::tfd::TfdKind;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn objective(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, w: &[f64]) -> f64 {
    let y = layer.forward_train(x, &mut ChaCha8Rng::seed_from_u64(7));
    y.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn picks(n: usize, max: usize) -> Vec<usize> {
    let step = (n / max).max(1);
    (0..n).step_by(step).take(max).collect()
}

/// Returns the worst relative error over sampled inputs and parameters.
fn check(layer: &mut dyn Layer<f64>, x: Tensor<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = layer.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(7));
    let w: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    layer.visit_mut("", &mut |_, p: &mut Param<f64>| p.grad.fill(0.0));
    let dx = layer.backward(&Tensor::new(y.shape.clone(), w.clone()));
    assert_eq!(dx.shape, x.shape);

    let mut worst: f64 = 0.0;
    for i in picks(x.len(), 48) {
        let mut xp = x.clone();
        xp.data[i] += H;
        let mut xm = x.clone();
        xm.data[i] -= H;
        let fd = (objective(layer, &xp, &w) - objective(layer, &xm, &w)) / (2.0 * H);
        worst = worst.max(rel(dx.data[i], fd));
    }

    let mut grads = Vec::new();
    layer.visit("", &mut |name, p: &Param<f64>| {
        if p.trainable {
            grads.push((name.to_string(), p.grad.data.clone()));
        }
    });
    for (name, g) in &grads {
        for j in picks(g.len(), 24) {
            let nudge = |delta: f64, layer: &mut dyn Layer<f64>| {
                layer.visit_mut("", &mut |n, p: &mut Param<f64>| {
                    if n == name {
                        p.value.data[j] += delta;
                    }
                });
            };
            nudge(H, layer);
            let up = objective(layer, &x, &w);
            nudge(-2.0 * H, layer);
            let down = objective(layer, &x, &w);
            nudge(H, layer);
            let fd = (up - down) / (2.0 * H);
            let e = rel(g[j], fd);
            assert!(e < TOL, "{name}[{j}]: analytic {} vs numeric {fd}", g[j]);
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 3, 6, 7], &mut rng);
    for (stride, bias) in [(1, false), (2, true)] {
        let mut conv = Conv2d::<f64>::new(3, 4, (3, 3), (stride, stride), (1, 1), bias, &mut rng);
        assert!(check(&mut conv, x.clone()) < TOL);
    }
    let mut temporal = Conv2d::<f64>::new(3, 2, (1, 7), (1, 2), (0, 3), true, &mut rng);
    assert!(check(&mut temporal, random(&[2, 3, 1, 15], &mut rng)) < TOL);
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bn = BatchNorm::<f64>::new(3);
    bn.gamma.value = random(&[3], &mut rng);
    bn.beta.value = random(&[3], &mut rng);
    assert!(check(&mut bn, random(&[4, 3, 2, 3], &mut rng)) < TOL);
}

#[test]
fn pointwise_and_pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(check(&mut Relu::new(), random(&[3, 2, 4, 4], &mut rng)) < TOL);
    assert!(check(&mut Dropout::<f64>::new(0.4), random(&[3, 10], &mut rng)) < TOL);
    assert!(check(&mut GlobalAvgPool::new(), random(&[3, 4, 2, 5], &mut rng)) < TOL);
    assert!(check(&mut Linear::<f64>::new(6, 4, &mut rng), random(&[5, 6], &mut rng)) < TOL);
}

#[test]
fn residual_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut block = Residual::<f64>::basic_block(3, &mut rng);
    assert!(check(&mut block, random(&[4, 3, 5, 5], &mut rng)) < TOL);
}

#[test]
fn whole_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ModelSpec::student(TfdKind::Stft, [2, 8, 6], 5).scaled(vec![3, 4]);
    let mut model = build_student_cnn::<f64>(&spec, 9).unwrap();
    assert!(check(&mut model.net, random(&[4, 2, 8, 6], &mut rng)) < TOL);

    let spec = ModelSpec::conv1d(3, 20, 4).scaled(vec![4, 5, 4, 3]);
    let mut model = build_conv1d_baseline::<f64>(&spec, 9).unwrap();
    assert!(check(&mut model.net, random(&[3, 3, 1, 20], &mut rng)) < TOL);
}

#[test]
fn sequential_of_nothing_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut seq = Sequential::<f64>::new(vec![]);
    assert!(check(&mut seq, random(&[2, 3], &mut rng)) < TOL);
}
