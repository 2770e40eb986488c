use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Softmax followed by mean cross-entropy over the batch.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    probs: Option<Matrix>,
    labels: Vec<usize>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(logits: &Matrix) -> Matrix {
        let mut p = logits.clone();
        for r in 0..p.rows() {
            let row = p.row_mut(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        p
    }

    pub fn forward(&mut self, logits: &Matrix, labels: &[usize]) -> Result<f32> {
        if labels.len() != logits.rows() {
            return Err(Error::ShapeMismatch {
                op: "SoftmaxCrossEntropy::forward",
                left: logits.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                logits.cols()
            )));
        }
        if !logits.is_finite() {
            return Err(Error::Contract("non-finite logits".into()));
        }
        // log-sum-exp in f64 for the reported value; gradients use the f32 softmax
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[label] as f64;
        }
        self.probs = Some(Self::softmax(logits));
        self.labels = labels.to_vec();
        Ok((total / labels.len() as f64) as f32)
    }

    /// `(softmax − onehot) / B`.
    pub fn backward(&self) -> Result<Matrix> {
        let probs = self
            .probs
            .as_ref()
            .ok_or_else(|| Error::Contract("loss backward called without a preceding forward".into()))?;
        let mut g = probs.clone();
        let scale = 1.0 / self.labels.len() as f32;
        for (r, &label) in self.labels.iter().enumerate() {
            let row = g.row_mut(r);
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(g)
    }

    pub fn probs(&self) -> Option<&Matrix> {
        self.probs.as_ref()
    }
}
