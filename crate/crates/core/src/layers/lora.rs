use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, MacCounter, Matrix};

use super::{ComputeType, Labels};

/// Low-rank adapter `y_B = (x·W_A)·W_B` that reads the input of FC layer
/// `source` and adds into the pre-activation output of FC layer `target`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    name: String,
    labels: Labels,
    source: usize,
    target: usize,
    a: Matrix,
    b: Matrix,
    input: Option<Matrix>,
    hidden: Option<Matrix>,
    grad_a: Option<Matrix>,
    grad_b: Option<Matrix>,
}

impl LoraAdapter {
    /// Fresh adapter: `W_A ~ N(0, 1/in_dim)`, `W_B = 0`, so its output starts at zero.
    pub fn init<R: Rng + ?Sized>(
        name: impl Into<String>,
        source: usize,
        target: usize,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(in_dim, out_dim, rank)?;
        let normal = Normal::new(0.0f32, (1.0 / in_dim as f32).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let a: Vec<f32> = (0..in_dim * rank).map(|_| normal.sample(rng)).collect();
        Self::from_weights(
            name,
            source,
            target,
            Matrix::from_vec(in_dim, rank, a)?,
            Matrix::zeros(rank, out_dim)?,
        )
    }

    pub fn from_weights(
        name: impl Into<String>,
        source: usize,
        target: usize,
        a: Matrix,
        b: Matrix,
    ) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::from_weights",
                left: a.shape(),
                right: b.shape(),
            });
        }
        check_rank(a.rows(), b.cols(), a.cols())?;
        if source > target {
            return Err(Error::InvalidArgument(format!(
                "adapter source layer {source} is after its target {target}"
            )));
        }
        let name = name.into();
        Ok(Self {
            labels: Labels::new(&name),
            name,
            source,
            target,
            a,
            b,
            input: None,
            hidden: None,
            grad_a: None,
            grad_b: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Index of the FC layer whose input feeds this adapter.
    pub fn source(&self) -> usize {
        self.source
    }

    /// Index of the FC layer whose output receives this adapter's contribution.
    pub fn target(&self) -> usize {
        self.target
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn weight_a(&self) -> &Matrix {
        &self.a
    }

    pub fn weight_a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn weight_b(&self) -> &Matrix {
        &self.b
    }

    pub fn weight_b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn grad_a(&self) -> Option<&Matrix> {
        self.grad_a.as_ref()
    }

    pub fn grad_b(&self) -> Option<&Matrix> {
        self.grad_b.as_ref()
    }

    /// Returns `y_B`; the caller adds it into the target layer's output.
    pub fn forward(&mut self, x: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
        let hidden = linalg::matmul(x, &self.a, counter, &self.labels.fwd)?;
        let out = linalg::matmul(&hidden, &self.b, counter, &self.labels.fwd)?;
        self.input = Some(x.clone());
        self.hidden = Some(hidden);
        Ok(out)
    }

    /// Forward pass without retaining anything.
    pub fn apply(&self, x: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
        let hidden = linalg::matmul(x, &self.a, counter, &self.labels.fwd)?;
        linalg::matmul(&hidden, &self.b, counter, &self.labels.fwd)
    }

    /// Computes `gW_B`, `gx_B`, `gW_A`, and `gx_A` when `ctype` is [`ComputeType::LoraYwx`].
    /// Accumulating `gx_A` into the source layer's input gradient is the caller's job.
    pub fn backward(
        &mut self,
        gy: &Matrix,
        ctype: ComputeType,
        counter: &mut MacCounter,
    ) -> Result<Option<Matrix>> {
        if !ctype.is_lora() {
            return Err(Error::Contract(format!(
                "{}: no adapter backward for compute type {ctype}",
                self.name
            )));
        }
        let (x, hidden) = match (&self.input, &self.hidden) {
            (Some(x), Some(h)) => (x, h),
            _ => {
                return Err(Error::Contract(format!(
                    "{}: backward called without a preceding forward",
                    self.name
                )))
            }
        };
        let label = &self.labels.bwd;
        let grad_b = linalg::matmul_at(hidden, gy, counter, label)?;
        let grad_hidden = linalg::matmul_bt(gy, &self.b, counter, label)?;
        let grad_a = linalg::matmul_at(x, &grad_hidden, counter, label)?;
        let grad_input = if ctype.input_grad() {
            Some(linalg::matmul_bt(&grad_hidden, &self.a, counter, label)?)
        } else {
            None
        };
        self.grad_a = Some(grad_a);
        self.grad_b = Some(grad_b);
        Ok(grad_input)
    }

    /// SGD step on both factors. Consumes the gradients.
    pub fn update(&mut self, eta: f32, counter: &mut MacCounter) -> Result<()> {
        let (Some(ga), Some(gb)) = (self.grad_a.take(), self.grad_b.take()) else {
            return Err(Error::Contract(format!(
                "{}: update requested without fresh gradients",
                self.name
            )));
        };
        linalg::scaled_sub_inplace(&mut self.a, &ga, eta, counter, &self.labels.upd)?;
        linalg::scaled_sub_inplace(&mut self.b, &gb, eta, counter, &self.labels.upd)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
        self.hidden = None;
    }
}

/// Rank must be positive and no larger than the wider side of the adapter.
fn check_rank(in_dim: usize, out_dim: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > in_dim.max(out_dim) {
        return Err(Error::InvalidArgument(format!(
            "adapter rank {rank} invalid for a {in_dim}x{out_dim} adapter"
        )));
    }
    Ok(())
}
