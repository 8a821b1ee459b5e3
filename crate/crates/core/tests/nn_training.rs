use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectromind::nn::layers::{Layer, Linear, Param};
use spectromind::nn::model::{build_student_cnn, ModelSpec};
use spectromind::nn::optim::{clip_grad_norm, grad_norm};
use spectromind::nn::train::evaluate_loss;
use spectromind::nn::{train, Checkpoint, CrossEntropy, Objective, Tensor, TrainConfig, TrainData};
use spectromind::tfd::TfdKind;
use spectromind::Error;

/// Two classes separated by the sign of the mean of channel 0.
fn toy(n: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let shift = if y == 0 { -1.0 } else { 1.0 };
        for c in 0..2 {
            for _ in 0..16 {
                let base = if c == 0 { shift } else { 0.0 };
                data.push(base + 0.3 * rng.random_range(-1.0f32..1.0));
            }
        }
        labels.push(y);
    }
    let ids = (0..n).map(|i| format!("t{seed}_{i}")).collect();
    TrainData::new(Tensor::new(vec![n, 2, 4, 4], data), labels, ids)
}

fn toy_spec() -> ModelSpec {
    ModelSpec::student(TfdKind::Stft, [2, 4, 4], 2).scaled(vec![4, 8])
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 50,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_reaches_full_training_accuracy() {
    let (tr, va) = (toy(64, 1), toy(32, 2));
    let mut model = build_student_cnn(&toy_spec(), 0).unwrap();
    train(&mut model, &tr, &va, &quick_cfg(0), &CrossEntropy).unwrap();
    let (_, acc) = evaluate_loss(&model, &tr, 64);
    assert_eq!(acc, 1.0);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (tr, va) = (toy(48, 3), toy(16, 4));
    let cfg = TrainConfig {
        max_epochs: 4,
        early_stop_patience: 2,
        ..quick_cfg(5)
    };
    let run = || {
        let mut m = build_student_cnn(&toy_spec(), 1).unwrap();
        train(&mut m, &tr, &va, &cfg, &CrossEntropy).unwrap().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn thread_count_does_not_change_training() {
    let (tr, va) = (toy(48, 3), toy(16, 4));
    let cfg = TrainConfig {
        max_epochs: 3,
        early_stop_patience: 2,
        ..quick_cfg(5)
    };
    let run = |threads| {
        spectromind::par::with_threads(threads, || {
            let mut m = build_student_cnn(&toy_spec(), 1).unwrap();
            train(&mut m, &tr, &va, &cfg, &CrossEntropy).unwrap().to_bytes().unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let (tr, va) = (toy(32, 5), toy(16, 6));
    let cfg = TrainConfig {
        max_epochs: 3,
        early_stop_patience: 2,
        ..quick_cfg(1)
    };
    let mut model = build_student_cnn(&toy_spec(), 2).unwrap();
    let ck = train(&mut model, &tr, &va, &cfg, &CrossEntropy).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let reloaded = back.model().unwrap();
    assert_eq!(reloaded.forward_eval(&va.x), model.forward_eval(&va.x));
    assert_eq!(back.train_ids, tr.ids);
}

#[test]
fn batch_equals_per_sample_forward() {
    let model = build_student_cnn::<f32>(&toy_spec(), 3).unwrap();
    let data = toy(6, 7);
    let whole = model.forward_eval(&data.x);
    for i in 0..6 {
        let one = model.forward_eval(&data.x.gather(&[i]));
        for (a, b) in one.data.iter().zip(whole.item(i)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn clipping_bounds_and_preserves() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fc = Linear::<f32>::new(10, 5, &mut rng);
    for scale in [0.01f32, 50.0] {
        fc.visit_mut("", &mut |_, p: &mut Param<f32>| {
            p.grad.data.iter_mut().enumerate().for_each(|(i, g)| *g = scale * ((i as f32).sin()));
        });
        let before = fc.weight.grad.clone();
        let pre = clip_grad_norm(&mut fc, 1.0);
        let post = grad_norm(&fc);
        assert!(post <= 1.0 + 1e-9, "{post}");
        if pre < 1.0 {
            assert_eq!(fc.weight.grad, before);
        }
    }
}

struct Poison;

impl Objective for Poison {
    fn sample(&self, logits: &[f64], _row: usize, _label: usize) -> (f64, Vec<f64>) {
        (f64::NAN, vec![0.0; logits.len()])
    }
}

#[test]
fn non_finite_loss_aborts_with_position() {
    let (tr, va) = (toy(16, 1), toy(8, 2));
    let mut model = build_student_cnn(&toy_spec(), 0).unwrap();
    let err = train(&mut model, &tr, &va, &quick_cfg(0), &Poison).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }));
}

#[test]
fn empty_split_is_argument_error() {
    let tr = toy(16, 1);
    let empty = TrainData::new(Tensor::zeros(&[0, 2, 4, 4]), vec![], vec![]);
    let mut model = build_student_cnn(&toy_spec(), 0).unwrap();
    let err = train(&mut model, &tr, &empty, &quick_cfg(0), &CrossEntropy).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn predict_rows_on_simplex() {
    let model = build_student_cnn::<f32>(&toy_spec(), 4).unwrap();
    for row in model.predict_tensor(&toy(5, 9).x) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
