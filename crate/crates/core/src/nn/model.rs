//! Model specifications and the two network builders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Dropout, GlobalAvgPool, Layer, Linear, Param, Relu, Residual, Sequential};
use super::loss::softmax;
use super::tensor::{Scalar, Tensor};
use crate::tfd::{TfdImage, TfdKind};
use crate::{Error, Result};

/// Parameter range shared by the image CNN and the temporal baseline.
pub const PARAM_BUDGET: (usize, usize) = (1_000_000, 1_300_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    StudentCnn,
    Conv1dBaseline,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::StudentCnn => "student_cnn",
            Architecture::Conv1dBaseline => "conv1d_baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Image kind fed to the network. The temporal baseline reads `raw2d`
    /// images as `[channels × 1 × samples]`.
    pub input_kind: TfdKind,
    /// Per-item `[channels, rows, cols]`.
    pub input_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    /// Enforced parameter range; `None` for scaled-down experiments.
    pub budget: Option<(usize, usize)>,
}

impl ModelSpec {
    /// Student CNN with the reference widths 48/96/192. For `raw2d` input the
    /// widths are re-fitted to the budget (see [`fit_student_widths`]).
    pub fn student(kind: TfdKind, input_shape: [usize; 3], num_classes: usize) -> Self {
        let mut spec = Self {
            architecture: Architecture::StudentCnn,
            input_kind: kind,
            input_shape,
            widths: vec![48, 96, 192],
            dropout_rate: 0.3,
            num_classes,
            budget: Some(PARAM_BUDGET),
        };
        if kind == TfdKind::Raw2d {
            if let Some(w) = fit_student_widths(input_shape[0], num_classes, PARAM_BUDGET) {
                spec.widths = w;
            }
        }
        spec
    }

    /// Four-layer temporal baseline, widths 128/192/256/320.
    pub fn conv1d(channels: usize, samples: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Conv1dBaseline,
            input_kind: TfdKind::Raw2d,
            input_shape: [1, channels, samples],
            widths: vec![128, 192, 256, 320],
            dropout_rate: 0.3,
            num_classes,
            budget: Some(PARAM_BUDGET),
        }
    }

    /// Same architecture with explicit widths and no budget check.
    pub fn scaled(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self.budget = None;
        self
    }

    /// Per-item tensor shape the network consumes.
    pub fn tensor_shape(&self) -> [usize; 3] {
        let [c, r, w] = self.input_shape;
        match self.architecture {
            Architecture::StudentCnn => [c, r, w],
            Architecture::Conv1dBaseline => [c * r, 1, w],
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let k = self.num_classes;
        match self.architecture {
            Architecture::StudentCnn => {
                let cin = self.tensor_shape()[0];
                let mut total = 0;
                let mut prev = cin;
                for &w in &self.widths {
                    // entry conv, then two convs in the residual block
                    total += 9 * prev * w + 2 * 9 * w * w;
                    total += 2 * 3 * w; // batch-norm scale and shift
                    prev = w;
                }
                total + prev * k + k
            }
            Architecture::Conv1dBaseline => {
                let mut total = 0;
                let mut prev = self.tensor_shape()[0];
                for &w in &self.widths {
                    total += 7 * prev * w + w;
                    prev = w;
                }
                total + prev * k + k
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Parameter("widths must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        if self.architecture == Architecture::Conv1dBaseline && self.input_kind != TfdKind::Raw2d {
            return Err(Error::Parameter("temporal baseline reads raw2d input".into()));
        }
        if let Some((min, max)) = self.budget {
            let count = self.param_count();
            if count < min || count > max {
                return Err(Error::Budget { count, min, max });
            }
        }
        Ok(())
    }
}

/// Searches base widths `w` (multiples of 8, layout `w/2w/4w`) for the count
/// nearest the middle of `budget`.
pub fn fit_student_widths(in_channels: usize, num_classes: usize, budget: (usize, usize)) -> Option<Vec<usize>> {
    let target = (budget.0 + budget.1) as f64 / 2.0;
    (1..=64)
        .map(|i| vec![8 * i, 16 * i, 32 * i])
        .map(|w| {
            let spec = ModelSpec {
                architecture: Architecture::StudentCnn,
                input_kind: TfdKind::Raw2d,
                input_shape: [in_channels, 1, 1],
                widths: w.clone(),
                dropout_rate: 0.0,
                num_classes,
                budget: None,
            };
            (spec.param_count(), w)
        })
        .filter(|(n, _)| *n >= budget.0 && *n <= budget.1)
        .min_by(|a, b| (a.0 as f64 - target).abs().total_cmp(&(b.0 as f64 - target).abs()))
        .map(|(_, w)| w)
}

pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub net: Sequential<T>,
}

pub fn build_student_cnn<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    if spec.architecture != Architecture::StudentCnn {
        return Err(Error::Argument(format!("expected student_cnn, got {}", spec.architecture)));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
    let mut prev = spec.tensor_shape()[0];
    for (i, &w) in spec.widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        layers.push(Box::new(Conv2d::square(prev, w, 3, stride, &mut rng)));
        layers.push(Box::new(BatchNorm::new(w)));
        layers.push(Box::new(Relu::new()));
        layers.push(Box::new(Residual::basic_block(w, &mut rng)));
        layers.push(Box::new(Relu::new()));
        prev = w;
    }
    layers.push(Box::new(GlobalAvgPool::new()));
    layers.push(Box::new(Dropout::new(spec.dropout_rate)));
    layers.push(Box::new(Linear::new(prev, spec.num_classes, &mut rng)));
    Ok(Model {
        spec: spec.clone(),
        net: Sequential::new(layers),
    })
}

pub fn build_conv1d_baseline<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    if spec.architecture != Architecture::Conv1dBaseline {
        return Err(Error::Argument(format!("expected conv1d_baseline, got {}", spec.architecture)));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
    let mut prev = spec.tensor_shape()[0];
    for &w in &spec.widths {
        layers.push(Box::new(Conv2d::new(prev, w, (1, 7), (1, 2), (0, 3), true, &mut rng)));
        layers.push(Box::new(Relu::new()));
        layers.push(Box::new(Dropout::new(spec.dropout_rate)));
        prev = w;
    }
    layers.push(Box::new(GlobalAvgPool::new()));
    layers.push(Box::new(Linear::new(prev, spec.num_classes, &mut rng)));
    Ok(Model {
        spec: spec.clone(),
        net: Sequential::new(layers),
    })
}

pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    match spec.architecture {
        Architecture::StudentCnn => build_student_cnn(spec, seed),
        Architecture::Conv1dBaseline => build_conv1d_baseline(spec, seed),
    }
}

/// Trainable parameters of any layer stack, counted by walking it.
pub fn count_params<T: Scalar>(net: &dyn Layer<T>) -> usize {
    let mut n = 0;
    net.visit("", &mut |_, p: &Param<T>| {
        if p.trainable {
            n += p.value.len();
        }
    });
    n
}

impl<T: Scalar> Model<T> {
    pub fn count_params(&self) -> usize {
        count_params(&self.net)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.net.forward_eval(x)
    }

    /// Stacks images into the network's input tensor after checking kind and
    /// shape.
    pub fn input_tensor(&self, images: &[&TfdImage]) -> Result<Tensor<T>> {
        stack_images(&self.spec, images)
    }

    /// Softmax class probabilities, one row per image, dropout disabled.
    pub fn predict(&self, images: &[&TfdImage]) -> Result<Vec<Vec<f64>>> {
        let x = self.input_tensor(images)?;
        Ok(self.predict_tensor(&x))
    }

    pub fn predict_tensor(&self, x: &Tensor<T>) -> Vec<Vec<f64>> {
        let logits = self.forward_eval(x);
        logits
            .to_f64()
            .chunks(self.spec.num_classes)
            .map(softmax)
            .collect()
    }

    /// Named snapshot of every parameter and buffer.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.net.visit("", &mut |name, p: &Param<T>| out.push((name.to_string(), p.value.clone())));
        out
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.net.visit_mut("", &mut |name, p: &mut Param<T>| {
            if err.is_some() {
                return;
            }
            match state.get(i) {
                Some((n, t)) if n == name && t.shape == p.value.shape => p.value = t.clone(),
                Some((n, t)) => {
                    err = Some(format!("tensor {n} {:?} does not match {name} {:?}", t.shape, p.value.shape))
                }
                None => err = Some(format!("missing tensor {name}")),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(Error::Format(e));
        }
        if i != state.len() {
            return Err(Error::Format(format!("{} tensors given, model has {i}", state.len())));
        }
        Ok(())
    }
}

pub fn stack_images<T: Scalar>(spec: &ModelSpec, images: &[&TfdImage]) -> Result<Tensor<T>> {
    let [c, r, w] = spec.tensor_shape();
    let mut data = Vec::with_capacity(images.len() * c * r * w);
    for img in images {
        if img.kind != spec.input_kind {
            return Err(Error::Argument(format!(
                "model expects {} input, got {}",
                spec.input_kind, img.kind
            )));
        }
        if img.shape() != spec.input_shape {
            return Err(Error::Argument(format!(
                "model expects input shape {:?}, got {:?}",
                spec.input_shape,
                img.shape()
            )));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), c, r, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stft_spec() -> ModelSpec {
        ModelSpec::student(TfdKind::Stft, [128, 33, 24], 40)
    }

    #[test]
    fn student_reference_count() {
        let spec = stft_spec();
        // conv weights alone, summed layer by layer
        let convs = 9 * 128 * 48 + 18 * 48 * 48 + 9 * 48 * 96 + 18 * 96 * 96 + 9 * 96 * 192 + 18 * 192 * 192;
        assert_eq!(convs + 192 * 40 + 40, 1_141_288);
        assert_eq!(spec.param_count(), 1_141_288 + 2016);
        let model = build_student_cnn::<f32>(&spec, 0).unwrap();
        assert_eq!(model.count_params(), spec.param_count());
    }

    #[test]
    fn conv1d_reference_count() {
        let spec = ModelSpec::conv1d(128, 500, 40);
        let convs = 7 * (128 * 128 + 128 * 192 + 192 * 256 + 256 * 320);
        assert_eq!(convs, 1_204_224);
        let model = build_conv1d_baseline::<f32>(&spec, 0).unwrap();
        assert_eq!(model.count_params(), convs + 128 + 192 + 256 + 320 + 320 * 40 + 40);
        assert_eq!(model.count_params(), spec.param_count());
    }

    #[test]
    fn fc_alone_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fc = Linear::<f32>::new(192, 40, &mut rng);
        assert_eq!(count_params(&fc), 7720);
        assert_eq!(count_params(&Sequential::<f32>::new(vec![])), 0);
    }

    #[test]
    fn raw2d_widths_fit_budget() {
        let spec = ModelSpec::student(TfdKind::Raw2d, [1, 128, 500], 40);
        let n = spec.param_count();
        assert!((1_000_000..=1_300_000).contains(&n), "{n}");
        assert!(build_student_cnn::<f32>(&spec, 0).is_ok());
    }

    #[test]
    fn over_budget_is_rejected() {
        let spec = ModelSpec {
            widths: vec![64, 128, 256],
            ..stft_spec()
        };
        assert!(matches!(build_student_cnn::<f32>(&spec, 0), Err(Error::Budget { .. })));
    }

    #[test]
    fn forward_zero_input_is_finite() {
        let spec = stft_spec();
        let model = build_student_cnn::<f32>(&spec, 3).unwrap();
        let logits = model.forward_eval(&Tensor::zeros(&[1, 128, 33, 24]));
        assert_eq!(logits.shape, vec![1, 40]);
        assert!(logits.is_finite());
    }

    #[test]
    fn conv1d_shapes_and_determinism() {
        let spec = ModelSpec::conv1d(8, 100, 5).scaled(vec![8, 8, 8, 8]);
        let mut spec = spec;
        spec.dropout_rate = 0.0;
        let mut model = build_conv1d_baseline::<f32>(&spec, 2).unwrap();
        let x = Tensor::from_f64(vec![3, 8, 1, 100], &(0..2400).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.net.forward_train(&x, &mut rng);
        let b = model.net.forward_train(&x, &mut rng);
        assert_eq!(a.shape, vec![3, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn kind_mismatch_is_argument_error() {
        let spec = ModelSpec::student(TfdKind::Stft, [2, 4, 4], 3).scaled(vec![4]);
        let model = build_student_cnn::<f32>(&spec, 0).unwrap();
        let img = TfdImage {
            kind: TfdKind::Wavelet,
            channels: 2,
            rows: 4,
            cols: 4,
            hz_per_row: 0.0,
            samples_per_col: 1.0,
            data: vec![0.0; 32],
        };
        assert!(matches!(model.predict(&[&img]), Err(Error::Argument(_))));
        let ok = TfdImage { kind: TfdKind::Stft, ..img };
        let p = model.predict(&[&ok]).unwrap();
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
