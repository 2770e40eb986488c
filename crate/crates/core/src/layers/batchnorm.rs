use crate::error::{Error, Result};
use crate::linalg::{self, MacCounter, Matrix};

use super::Labels;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and update the running averages.
    TrainStats,
    /// Normalise with the running statistics; a fixed per-feature affine map.
    FrozenStats,
}

#[derive(Debug, Clone)]
struct BnCache {
    mode: BnMode,
    normalized: Matrix,
    inv_std: Vec<f32>,
}

/// Per-feature batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    name: String,
    labels: Labels,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    eps: f32,
    momentum: f32,
    mode: BnMode,
    cache: Option<BnCache>,
    grad_gamma: Option<Vec<f32>>,
    grad_beta: Option<Vec<f32>>,
}

impl BatchNormLayer {
    /// Identity-initialised layer (`gamma = 1`, `beta = 0`, stats `(0, 1)`) in train-stats mode.
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        let name = name.into();
        Self {
            labels: Labels::new(&name),
            name,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: BnMode::TrainStats,
            cache: None,
            grad_gamma: None,
            grad_beta: None,
        }
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps = eps;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
        self.cache = None;
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut [f32] {
        &mut self.gamma
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut [f32] {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &[f32] {
        &self.running_mean
    }

    pub fn running_mean_mut(&mut self) -> &mut [f32] {
        &mut self.running_mean
    }

    pub fn running_var(&self) -> &[f32] {
        &self.running_var
    }

    pub fn running_var_mut(&mut self) -> &mut [f32] {
        &mut self.running_var
    }

    pub fn grad_gamma(&self) -> Option<&[f32]> {
        self.grad_gamma.as_deref()
    }

    pub fn grad_beta(&self) -> Option<&[f32]> {
        self.grad_beta.as_deref()
    }

    fn frozen_inv_std(&self) -> Vec<f32> {
        self.running_var
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect()
    }

    fn check_cols(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: (1, self.dim()),
            });
        }
        Ok(())
    }

    /// Normalises with the given statistics; returns `(normalized, output)`.
    fn affine(&self, x: &Matrix, mean: &[f32], inv_std: &[f32]) -> (Matrix, Matrix) {
        let mut normalized = x.clone();
        let mut out = x.clone();
        let cols = self.dim();
        for r in 0..x.rows() {
            let n_row = normalized.row_mut(r);
            for m in 0..cols {
                n_row[m] = (n_row[m] - mean[m]) * inv_std[m];
            }
            let o_row = out.row_mut(r);
            for m in 0..cols {
                o_row[m] = self.gamma[m] * n_row[m] + self.beta[m];
            }
        }
        (normalized, out)
    }

    /// Frozen-stats map without touching any state, regardless of [`Self::mode`].
    pub fn apply_frozen(&self, x: &Matrix) -> Result<Matrix> {
        self.check_cols(x, "BatchNormLayer::apply_frozen")?;
        Ok(self.affine(x, &self.running_mean, &self.frozen_inv_std()).1)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.check_cols(x, "BatchNormLayer::forward")?;
        let (mean, inv_std) = match self.mode {
            BnMode::FrozenStats => (self.running_mean.clone(), self.frozen_inv_std()),
            BnMode::TrainStats => {
                let b = x.rows();
                if b < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: batch statistics need at least 2 samples, got {b}",
                        self.name
                    )));
                }
                let mut mean = vec![0.0f32; self.dim()];
                for r in 0..b {
                    for (s, &v) in mean.iter_mut().zip(x.row(r)) {
                        *s += v;
                    }
                }
                mean.iter_mut().for_each(|s| *s /= b as f32);
                let mut var = vec![0.0f32; self.dim()];
                for r in 0..b {
                    for ((s, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f32);
                let unbias = b as f32 / (b - 1) as f32;
                for m in 0..self.dim() {
                    self.running_mean[m] =
                        (1.0 - self.momentum) * self.running_mean[m] + self.momentum * mean[m];
                    self.running_var[m] =
                        (1.0 - self.momentum) * self.running_var[m] + self.momentum * var[m] * unbias;
                }
                let inv_std = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
                (mean, inv_std)
            }
        };
        let (normalized, out) = self.affine(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            mode: self.mode,
            normalized,
            inv_std,
        });
        Ok(out)
    }

    /// Returns `gx`; writes `ggamma`/`gbeta` only when `train_affine`.
    pub fn backward(&mut self, gy: &Matrix, train_affine: bool, counter: &mut MacCounter) -> Result<Matrix> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::Contract(format!("{}: backward called without a preceding forward", self.name))
        })?;
        if cache.mode != self.mode {
            return Err(Error::Contract(format!(
                "{}: forward ran in {:?} mode but layer is now {:?}",
                self.name, cache.mode, self.mode
            )));
        }
        if gy.shape() != cache.normalized.shape() {
            return Err(Error::ShapeMismatch {
                op: "BatchNormLayer::backward",
                left: gy.shape(),
                right: cache.normalized.shape(),
            });
        }
        let (b, cols) = gy.shape();
        let mut gx = gy.clone();
        match self.mode {
            BnMode::FrozenStats => {
                for r in 0..b {
                    for ((v, g), s) in gx.row_mut(r).iter_mut().zip(&self.gamma).zip(&cache.inv_std) {
                        *v = *v * g * s;
                    }
                }
            }
            BnMode::TrainStats => {
                // gx = inv_std/B · (B·gn − Σgn − n·Σ(gn·n)), gn = gy·γ
                let mut sum_g = vec![0.0f32; cols];
                let mut sum_gn = vec![0.0f32; cols];
                for r in 0..b {
                    let n_row = cache.normalized.row(r);
                    for (m, &g) in gy.row(r).iter().enumerate() {
                        let gn = g * self.gamma[m];
                        sum_g[m] += gn;
                        sum_gn[m] += gn * n_row[m];
                    }
                }
                let bf = b as f32;
                for r in 0..b {
                    let n_row = cache.normalized.row(r);
                    let row = gx.row_mut(r);
                    for m in 0..cols {
                        let gn = row[m] * self.gamma[m];
                        row[m] = cache.inv_std[m] / bf * (bf * gn - sum_g[m] - n_row[m] * sum_gn[m]);
                    }
                }
            }
        }
        if train_affine {
            let mut gg = vec![0.0f32; cols];
            for r in 0..b {
                for ((s, &g), &n) in gg.iter_mut().zip(gy.row(r)).zip(cache.normalized.row(r)) {
                    *s += g * n;
                }
            }
            self.grad_gamma = Some(gg);
            self.grad_beta = Some(linalg::col_sum(gy, counter, &self.labels.bwd));
        }
        Ok(gx)
    }

    /// SGD step on `gamma`/`beta`. Consumes the gradients.
    pub fn update(&mut self, eta: f32, counter: &mut MacCounter) -> Result<()> {
        let (Some(gg), Some(gb)) = (self.grad_gamma.take(), self.grad_beta.take()) else {
            return Err(Error::Contract(format!(
                "{}: update requested without fresh gradients",
                self.name
            )));
        };
        linalg::scaled_sub_slice(&mut self.gamma, &gg, eta, counter, &self.labels.upd)?;
        linalg::scaled_sub_slice(&mut self.beta, &gb, eta, counter, &self.labels.upd)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
