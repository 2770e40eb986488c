use crate::error::{Error, Result};
use crate::linalg::{self, MacCounter, Matrix};

use super::{ComputeType, Labels};

/// Fully-connected layer computing the pre-activation `x·W + b`.
#[derive(Debug, Clone)]
pub struct FcLayer {
    name: String,
    labels: Labels,
    weight: Matrix,
    bias: Vec<f32>,
    input: Option<Matrix>,
    grad_weight: Option<Matrix>,
    grad_bias: Option<Vec<f32>>,
}

impl FcLayer {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::ShapeMismatch {
                op: "FcLayer::new",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        let name = name.into();
        Ok(Self {
            labels: Labels::new(&name),
            name,
            weight,
            bias,
            input: None,
            grad_weight: None,
            grad_bias: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn grad_weight(&self) -> Option<&Matrix> {
        self.grad_weight.as_ref()
    }

    pub fn grad_bias(&self) -> Option<&[f32]> {
        self.grad_bias.as_deref()
    }

    /// Forward pass without retaining anything.
    pub fn apply(&self, x: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
        let mut y = linalg::matmul(x, &self.weight, counter, &self.labels.fwd)?;
        linalg::add_row_broadcast(&mut y, &self.bias, counter, &self.labels.fwd)?;
        Ok(y)
    }

    /// Forward pass; `retain` keeps `x` for a later weight-gradient computation.
    pub fn forward(&mut self, x: &Matrix, retain: bool, counter: &mut MacCounter) -> Result<Matrix> {
        let y = self.apply(x, counter)?;
        self.input = retain.then(|| x.clone());
        Ok(y)
    }

    /// Computes exactly the gradients `ctype` lists and returns `gx` when asked for.
    pub fn backward(
        &mut self,
        gy: &Matrix,
        ctype: ComputeType,
        counter: &mut MacCounter,
    ) -> Result<Option<Matrix>> {
        if !ctype.is_fc() || !ctype.has_backward() {
            return Err(Error::Contract(format!(
                "{}: no backward pass for compute type {ctype}",
                self.name
            )));
        }
        if gy.cols() != self.out_dim() {
            return Err(Error::ShapeMismatch {
                op: "FcLayer::backward",
                left: gy.shape(),
                right: self.weight.shape(),
            });
        }
        let label = &self.labels.bwd;
        if ctype.weight_grad() {
            let x = self.input.as_ref().ok_or_else(|| {
                Error::Contract(format!("{}: weight gradient requested without a retained input", self.name))
            })?;
            self.grad_weight = Some(linalg::matmul_at(x, gy, counter, label)?);
        }
        if ctype.bias_grad() {
            self.grad_bias = Some(linalg::col_sum(gy, counter, label));
        }
        if ctype.input_grad() {
            return Ok(Some(linalg::matmul_bt(gy, &self.weight, counter, label)?));
        }
        Ok(None)
    }

    /// SGD step on the flagged tensors. Consumes the gradients.
    pub fn update(&mut self, eta: f32, update_w: bool, update_b: bool, counter: &mut MacCounter) -> Result<()> {
        if (update_w && self.grad_weight.is_none()) || (update_b && self.grad_bias.is_none()) {
            return Err(Error::Contract(format!(
                "{}: update requested before gradients were computed",
                self.name
            )));
        }
        if update_w {
            let g = self.grad_weight.take().expect("checked above");
            linalg::scaled_sub_inplace(&mut self.weight, &g, eta, counter, &self.labels.upd)?;
        }
        if update_b {
            let g = self.grad_bias.take().expect("checked above");
            linalg::scaled_sub_slice(&mut self.bias, &g, eta, counter, &self.labels.upd)?;
        }
        Ok(())
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }
}
