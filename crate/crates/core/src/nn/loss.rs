//! Per-sample objectives over logits, evaluated in `f64`.

/// Numerically stable log-softmax (log-sum-exp shifted by the max).
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Cross-entropy of `logits` against class `label` and its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    (-lp[label], grad)
}

/// A differentiable loss for one sample. `row` identifies the sample in the
/// training set so objectives can look up per-sample side information.
pub trait Objective: Sync {
    fn sample(&self, logits: &[f64], row: usize, label: usize) -> (f64, Vec<f64>);

    /// Mean loss over a batch with the gradient of that mean.
    fn batch(&self, logits: &[f64], classes: usize, rows: &[usize], labels: &[usize]) -> (f64, Vec<f64>) {
        let n = rows.len();
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(logits.len());
        for (i, z) in logits.chunks(classes).enumerate() {
            let (l, g) = self.sample(z, rows[i], labels[i]);
            total += l;
            grad.extend(g.into_iter().map(|v| v / n as f64));
        }
        (total / n as f64, grad)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn sample(&self, logits: &[f64], _row: usize, label: usize) -> (f64, Vec<f64>) {
        cross_entropy(logits, label)
    }
}
