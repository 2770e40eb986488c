use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{BnMode, SoftmaxCrossEntropy, BN_EPS};
use crate::linalg::Matrix;
use crate::network::{Model, ParamId};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |g_a − g_n| / max(|g_a|, |g_n|, 1e-6)` over every trainable scalar.
    pub max_rel_error: f64,
    /// Tensor and element index where the maximum occurred.
    pub worst: Option<(ParamId, usize)>,
    /// Maximum relative error of each trainable tensor.
    pub per_tensor: Vec<(ParamId, f64)>,
    pub scalars_checked: usize,
}

/// Compares the model's analytic gradients with central finite differences of a
/// double-precision re-implementation of the forward pass and loss.
///
/// Works on a clone; `model` is not modified. Fails with a contract error if
/// backward writes a gradient for a frozen tensor or skips a trainable one.
pub fn grad_check(model: &Model, features: &Matrix, labels: &[usize], h: f64) -> Result<GradCheck> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = model.clone();
    work.clear_caches();
    let out = work.forward(features, false)?;
    let mut ce = SoftmaxCrossEntropy::new();
    ce.forward(&out.logits, labels)?;
    work.backward(&ce.backward()?)?;

    let mut shadow = Shadow::new(model, features, labels);
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        per_tensor: Vec::new(),
        scalars_checked: 0,
    };
    for id in model.param_ids() {
        let grad = work.grad(id);
        if !model.is_trainable(id) {
            if grad.is_some() {
                return Err(Error::Contract(format!("gradient written for frozen tensor {id:?}")));
            }
            continue;
        }
        let grad = grad.ok_or_else(|| Error::Contract(format!("no gradient for trainable tensor {id:?}")))?;
        let mut tensor_max: f64 = 0.0;
        for (e, &ga) in grad.iter().enumerate() {
            let orig = shadow.params[&id][e];
            shadow.set(id, e, orig + h);
            let plus = shadow.loss();
            shadow.set(id, e, orig - h);
            let minus = shadow.loss();
            shadow.set(id, e, orig);
            let gn = (plus - minus) / (2.0 * h);
            let ga = ga as f64;
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-6);
            tensor_max = tensor_max.max(rel);
            if rel > result.max_rel_error || result.worst.is_none() {
                result.max_rel_error = rel.max(result.max_rel_error);
                result.worst = Some((id, e));
            }
            result.scalars_checked += 1;
        }
        result.per_tensor.push((id, tensor_max));
    }
    Ok(result)
}

struct Shadow {
    dims: Vec<usize>,
    rank: usize,
    wiring: Vec<(usize, usize)>,
    batch_stats: bool,
    params: BTreeMap<ParamId, Vec<f64>>,
    x: Vec<f64>,
    labels: Vec<usize>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `out[b×o] += a[b×i] · w[i×o]`
fn gemm_acc(a: &[f64], w: &[f64], b: usize, i: usize, o: usize, out: &mut [f64]) {
    for r in 0..b {
        for p in 0..i {
            let av = a[r * i + p];
            for q in 0..o {
                out[r * o + q] += av * w[p * o + q];
            }
        }
    }
}

impl Shadow {
    fn new(model: &Model, x: &Matrix, labels: &[usize]) -> Self {
        let params = model
            .param_ids()
            .into_iter()
            .map(|id| (id, widen(model.tensor(id).expect("listed id"))))
            .collect();
        Self {
            dims: model.dims().to_vec(),
            rank: model.spec().rank,
            wiring: model.adapters().iter().map(|a| (a.source(), a.target())).collect(),
            batch_stats: model.batch_norm(0).is_some_and(|bn| bn.mode() == BnMode::TrainStats),
            params,
            x: widen(x.as_slice()),
            labels: labels.to_vec(),
        }
    }

    fn set(&mut self, id: ParamId, e: usize, v: f64) {
        self.params.get_mut(&id).expect("known id")[e] = v;
    }

    fn loss(&self) -> f64 {
        let n = self.dims.len() - 1;
        let b = self.labels.len();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut cur = self.x.clone();
        for k in 0..n {
            let (i, o) = (self.dims[k], self.dims[k + 1]);
            let bias = &self.params[&ParamId::FcBias(k)];
            let mut y: Vec<f64> = (0..b * o).map(|j| bias[j % o]).collect();
            gemm_acc(&cur, &self.params[&ParamId::FcWeight(k)], b, i, o, &mut y);
            inputs.push(cur);
            for (j, &(src, _)) in self.wiring.iter().enumerate().filter(|(_, w)| w.1 == k) {
                let mut hidden = vec![0.0; b * self.rank];
                gemm_acc(&inputs[src], &self.params[&ParamId::AdapterA(j)], b, self.dims[src], self.rank, &mut hidden);
                gemm_acc(&hidden, &self.params[&ParamId::AdapterB(j)], b, self.rank, o, &mut y);
            }
            if k + 1 < n {
                let gamma = &self.params[&ParamId::BnGamma(k)];
                let beta = &self.params[&ParamId::BnBeta(k)];
                for m in 0..o {
                    let (mean, var) = if self.batch_stats {
                        let mean = (0..b).map(|r| y[r * o + m]).sum::<f64>() / b as f64;
                        let var = (0..b).map(|r| (y[r * o + m] - mean).powi(2)).sum::<f64>() / b as f64;
                        (mean, var)
                    } else {
                        (
                            self.params[&ParamId::BnRunningMean(k)][m],
                            self.params[&ParamId::BnRunningVar(k)][m],
                        )
                    };
                    let inv = 1.0 / (var + BN_EPS as f64).sqrt();
                    for r in 0..b {
                        let v = &mut y[r * o + m];
                        *v = (gamma[m] * (*v - mean) * inv + beta[m]).max(0.0);
                    }
                }
            }
            cur = y;
        }
        let c = self.dims[n];
        let mut total = 0.0;
        for (r, &label) in self.labels.iter().enumerate() {
            let row = &cur[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total / b as f64
    }
}
