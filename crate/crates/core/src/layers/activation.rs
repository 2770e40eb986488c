use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// ReLU with a zero subgradient at the origin.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(x: &Matrix) -> Matrix {
        let mut y = x.clone();
        y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        self.mask = Some(x.as_slice().iter().map(|&v| v > 0.0).collect());
        Self::apply(x)
    }

    pub fn backward(&self, gy: &Matrix) -> Result<Matrix> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract("relu backward called without a preceding forward".into()))?;
        if mask.len() != gy.as_slice().len() {
            return Err(Error::ShapeMismatch {
                op: "Relu::backward",
                left: gy.shape(),
                right: (1, mask.len()),
            });
        }
        let mut gx = gy.clone();
        for (g, &on) in gx.as_mut_slice().iter_mut().zip(mask) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(gx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.mask = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let mut r = Relu::new();
        let y = r.forward(&Matrix::from_rows(&[[-1.0f32, 2.0]]).unwrap());
        assert_eq!(y.as_slice(), &[0.0, 2.0]);
        let gx = r.backward(&Matrix::from_rows(&[[5.0f32, 5.0]]).unwrap()).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 5.0]);

        let pos = Matrix::from_rows(&[[0.5f32, 3.0], [1.0, 2.0]]).unwrap();
        assert_eq!(r.forward(&pos), pos);
        assert_eq!(r.backward(&pos).unwrap(), pos);

        let y = r.forward(&Matrix::from_rows(&[[0.0f32]]).unwrap());
        assert_eq!(y.as_slice(), &[0.0]);
        assert_eq!(r.backward(&Matrix::from_rows(&[[1.0f32]]).unwrap()).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn backward_needs_forward() {
        assert!(Relu::new().backward(&Matrix::zeros(1, 1).unwrap()).is_err());
    }
}
