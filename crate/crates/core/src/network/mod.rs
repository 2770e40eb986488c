//! The n-layer network: `FC → BN → ReLU` blocks followed by a final FC layer,
//! with LoRA adapters wired according to the fine-tuning mode.

mod checkpoint;
mod mode;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnMode, ComputeType, FcLayer, LoraAdapter, Relu};
use crate::linalg::{self, MacCounter, Matrix};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mode::{compute_type_assignment, ComputeTypes, FineTuneMode};

pub const DEFAULT_HIDDEN: usize = 96;
pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// `[d0, d1, ..., dn]`: input features, hidden widths, classes.
    pub dims: Vec<usize>,
    pub rank: usize,
    pub mode: FineTuneMode,
    /// Seeds weight and adapter initialisation.
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(dims: Vec<usize>, mode: FineTuneMode) -> Self {
        Self {
            dims,
            rank: DEFAULT_RANK,
            mode,
            seed: 0,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 layers (3 dims), got dims {:?}",
                self.dims
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in dims {:?}", self.dims)));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        let n = self.num_layers();
        for (src, dst) in self.mode.adapter_wiring(n) {
            let (i, o) = (self.dims[src], self.dims[dst + 1]);
            if self.rank > i.max(o) {
                return Err(Error::InvalidArgument(format!(
                    "rank {} too large for a {i}x{o} adapter",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Identifies one tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    FcWeight(usize),
    FcBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    BnRunningMean(usize),
    BnRunningVar(usize),
    AdapterA(usize),
    AdapterB(usize),
}

#[derive(Debug, Clone)]
struct Block {
    fc: FcLayer,
    norm: Option<(BatchNormLayer, Relu)>,
}

#[derive(Debug, Clone)]
struct Trainable {
    fc_weight: Vec<bool>,
    fc_bias: Vec<bool>,
    bn_affine: Vec<bool>,
    adapters: bool,
}

/// Activations exposed by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Taps {
    /// Post-ReLU output of every block except the last.
    pub block_outputs: Vec<Matrix>,
    /// Output of the last FC layer before any adapter contribution.
    pub last_fc: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub taps: Option<Taps>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    blocks: Vec<Block>,
    adapters: Vec<LoraAdapter>,
    types: ComputeTypes,
    trainable: Trainable,
    macs: MacCounter,
    forward_done: bool,
}

impl Model {
    /// Builds a freshly initialised model: He-initialised FC weights, zero biases,
    /// identity BN, and zero-output adapters. BN starts in frozen-stats mode.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_layers();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut blocks = Vec::with_capacity(n);
        for k in 0..n {
            let (fan_in, fan_out) = (spec.dims[k], spec.dims[k + 1]);
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            let fc = FcLayer::new(
                format!("FC{}", k + 1),
                Matrix::from_vec(fan_in, fan_out, w)?,
                vec![0.0; fan_out],
            )?;
            let norm = (k + 1 < n).then(|| {
                let mut bn = BatchNormLayer::new(format!("BN{}", k + 1), fan_out);
                bn.set_mode(BnMode::FrozenStats);
                (bn, Relu::new())
            });
            blocks.push(Block { fc, norm });
        }

        let adapters = spec
            .mode
            .adapter_wiring(n)
            .into_iter()
            .map(|(src, dst)| {
                LoraAdapter::init(
                    format!("LoRA{}", src + 1),
                    src,
                    dst,
                    spec.dims[src],
                    spec.dims[dst + 1],
                    spec.rank,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let types = compute_type_assignment(spec.mode, n);
        let trainable = Trainable {
            fc_weight: types.fc.iter().map(|t| t.weight_grad()).collect(),
            fc_bias: types.fc.iter().map(|t| t.bias_grad()).collect(),
            bn_affine: (0..n)
                .map(|k| k + 1 < n && spec.mode.trains_bn_affine())
                .collect(),
            adapters: spec.mode.has_adapters(),
        };
        Ok(Self {
            spec: spec.clone(),
            blocks,
            adapters,
            types,
            trainable,
            macs: MacCounter::new(),
            forward_done: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> FineTuneMode {
        self.spec.mode
    }

    pub fn dims(&self) -> &[usize] {
        &self.spec.dims
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn compute_types(&self) -> &ComputeTypes {
        &self.types
    }

    pub fn fc(&self, k: usize) -> &FcLayer {
        &self.blocks[k].fc
    }

    pub fn fc_mut(&mut self, k: usize) -> &mut FcLayer {
        &mut self.blocks[k].fc
    }

    pub fn batch_norm(&self, k: usize) -> Option<&BatchNormLayer> {
        self.blocks[k].norm.as_ref().map(|(bn, _)| bn)
    }

    pub fn batch_norm_mut(&mut self, k: usize) -> Option<&mut BatchNormLayer> {
        self.blocks[k].norm.as_mut().map(|(bn, _)| bn)
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs.reset();
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for block in &mut self.blocks {
            if let Some((bn, _)) = &mut block.norm {
                bn.set_mode(mode);
            }
        }
    }

    fn adapter_type(&self, j: usize) -> ComputeType {
        self.types.lora[self.adapters[j].source()]
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.dims[0] {
            return Err(Error::ShapeMismatch {
                op: "Model::forward",
                left: x.shape(),
                right: (x.rows(), self.spec.dims[0]),
            });
        }
        Ok(())
    }

    /// Adds the contribution of every adapter targeting layer `k` to `y`,
    /// in adapter order. `inputs[s]` is the input of FC layer `s`.
    fn add_adapters(&mut self, k: usize, y: &mut Matrix, inputs: &[Matrix]) -> Result<()> {
        for ad in self.adapters.iter_mut().filter(|a| a.target() == k) {
            let contribution = ad.forward(&inputs[ad.source()], &mut self.macs)?;
            let label = format!("{}.fwd", ad.name());
            linalg::add_inplace(y, &contribution, &mut self.macs, &label)?;
        }
        Ok(())
    }

    /// Training forward pass. Retains what the compute-type table needs for
    /// [`Model::backward`].
    pub fn forward(&mut self, x: &Matrix, collect_taps: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let n = self.num_layers();
        let mut inputs: Vec<Matrix> = Vec::with_capacity(n);
        let mut current = x.clone();
        let mut last_fc = None;
        for k in 0..n {
            let retain = self.types.fc[k].weight_grad();
            let mut y = self.blocks[k].fc.forward(&current, retain, &mut self.macs)?;
            inputs.push(current);
            if k + 1 == n && collect_taps {
                last_fc = Some(y.clone());
            }
            self.add_adapters(k, &mut y, &inputs)?;
            if let Some((bn, relu)) = &mut self.blocks[k].norm {
                let normed = bn.forward(&y)?;
                y = relu.forward(&normed);
            }
            current = y;
        }
        self.forward_done = true;
        let taps = last_fc.map(|last_fc| Taps {
            block_outputs: inputs.drain(1..).collect(),
            last_fc,
        });
        Ok(ForwardOutput {
            logits: current,
            taps,
        })
    }

    /// Frozen base-network activations for a batch, without adapters and without
    /// retaining anything: the post-ReLU output of each block but the last, then
    /// the last FC output.
    pub fn frozen_path(&mut self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let n = self.num_layers();
        let mut out = Vec::with_capacity(n);
        let mut current = x.clone();
        for k in 0..n {
            let block = &self.blocks[k];
            let mut y = block.fc.apply(&current, &mut self.macs)?;
            if let Some((bn, _)) = &block.norm {
                y = Relu::apply(&bn.apply_frozen(&y)?);
            }
            out.push(y.clone());
            current = y;
        }
        Ok(out)
    }

    /// Skip-topology recomposition: `last_fc + Σ_k x^k·W_A·W_B`, where
    /// `inputs[k]` is the input of FC layer `k`. Prepares adapter backward.
    pub fn recompose_skip(&mut self, last_fc: Matrix, inputs: &[Matrix]) -> Result<Matrix> {
        if !self.spec.mode.is_skip() {
            return Err(Error::Contract(format!(
                "recomposition requires skip wiring, model is {}",
                self.spec.mode
            )));
        }
        let n = self.num_layers();
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!("expected {n} layer inputs, got {}", inputs.len())));
        }
        let mut y = last_fc;
        self.add_adapters(n - 1, &mut y, inputs)?;
        self.forward_done = true;
        Ok(y)
    }

    /// Inference forward pass. Uses running BN statistics and mutates nothing.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut scratch = MacCounter::new();
        let n = self.num_layers();
        let mut inputs: Vec<Matrix> = Vec::with_capacity(n);
        let mut current = x.clone();
        for k in 0..n {
            let mut y = self.blocks[k].fc.apply(&current, &mut scratch)?;
            inputs.push(current);
            for ad in self.adapters.iter().filter(|a| a.target() == k) {
                let c = ad.apply(&inputs[ad.source()], &mut scratch)?;
                linalg::add_inplace(&mut y, &c, &mut scratch, "")?;
            }
            if let Some((bn, _)) = &self.blocks[k].norm {
                y = Relu::apply(&bn.apply_frozen(&y)?);
            }
            current = y;
        }
        Ok(current)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    /// Backpropagates `glogits` exactly as the compute-type table prescribes.
    pub fn backward(&mut self, glogits: &Matrix) -> Result<()> {
        if !self.forward_done {
            return Err(Error::Contract("backward called without a preceding forward".into()));
        }
        self.forward_done = false;
        let n = self.num_layers();
        let mut input_grads: Vec<Option<Matrix>> = vec![None; n];
        let mut grad_out = Some(glogits.clone());
        for k in (0..n).rev() {
            if let Some(gy) = grad_out.take() {
                let fc_type = self.types.fc[k];
                if fc_type.has_backward() {
                    if let Some(gx) = self.blocks[k].fc.backward(&gy, fc_type, &mut self.macs)? {
                        input_grads[k] = Some(gx);
                    }
                }
                let targeting: Vec<usize> = (0..self.adapters.len())
                    .filter(|&j| self.adapters[j].target() == k)
                    .collect();
                for j in targeting {
                    let ctype = self.adapter_type(j);
                    let ad = &mut self.adapters[j];
                    if let Some(gxa) = ad.backward(&gy, ctype, &mut self.macs)? {
                        let src = ad.source();
                        match &mut input_grads[src] {
                            Some(acc) => {
                                let label = format!("{}.bwd", ad.name());
                                linalg::add_inplace(acc, &gxa, &mut self.macs, &label)?
                            }
                            slot @ None => *slot = Some(gxa),
                        }
                    }
                }
            }
            if k == 0 {
                break;
            }
            if let Some(gx) = input_grads[k].take() {
                let train_affine = self.trainable.bn_affine[k - 1];
                let (bn, relu) = self.blocks[k - 1]
                    .norm
                    .as_mut()
                    .expect("every block but the last has BN and ReLU");
                let g = relu.backward(&gx)?;
                grad_out = Some(bn.backward(&g, train_affine, &mut self.macs)?);
            }
        }
        Ok(())
    }

    /// SGD step on every trainable tensor.
    pub fn update(&mut self, eta: f32) -> Result<()> {
        for (k, block) in self.blocks.iter_mut().enumerate() {
            block.fc.update(
                eta,
                self.trainable.fc_weight[k],
                self.trainable.fc_bias[k],
                &mut self.macs,
            )?;
            if self.trainable.bn_affine[k] {
                if let Some((bn, _)) = &mut block.norm {
                    bn.update(eta, &mut self.macs)?;
                }
            }
        }
        if self.trainable.adapters {
            for ad in &mut self.adapters {
                ad.update(eta, &mut self.macs)?;
            }
        }
        Ok(())
    }

    pub fn backward_and_update(&mut self, glogits: &Matrix, eta: f32) -> Result<()> {
        self.backward(glogits)?;
        self.update(eta)
    }

    /// Drops activations retained by the last forward pass.
    pub fn clear_caches(&mut self) {
        for block in &mut self.blocks {
            block.fc.clear_cache();
            if let Some((bn, relu)) = &mut block.norm {
                bn.clear_cache();
                relu.clear_cache();
            }
        }
        for ad in &mut self.adapters {
            ad.clear_cache();
        }
        self.forward_done = false;
    }

    /// All tensors in checkpoint order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        param_layout(self.mode(), self.num_layers())
    }

    pub fn tensor(&self, id: ParamId) -> Option<&[f32]> {
        use ParamId::*;
        Some(match id {
            FcWeight(k) => self.blocks.get(k)?.fc.weight().as_slice(),
            FcBias(k) => self.blocks.get(k)?.fc.bias(),
            BnGamma(k) => self.batch_norm_opt(k)?.gamma(),
            BnBeta(k) => self.batch_norm_opt(k)?.beta(),
            BnRunningMean(k) => self.batch_norm_opt(k)?.running_mean(),
            BnRunningVar(k) => self.batch_norm_opt(k)?.running_var(),
            AdapterA(j) => self.adapters.get(j)?.weight_a().as_slice(),
            AdapterB(j) => self.adapters.get(j)?.weight_b().as_slice(),
        })
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Option<&mut [f32]> {
        use ParamId::*;
        Some(match id {
            FcWeight(k) => self.blocks.get_mut(k)?.fc.weight_mut().as_mut_slice(),
            FcBias(k) => self.blocks.get_mut(k)?.fc.bias_mut(),
            BnGamma(k) => self.batch_norm_opt_mut(k)?.gamma_mut(),
            BnBeta(k) => self.batch_norm_opt_mut(k)?.beta_mut(),
            BnRunningMean(k) => self.batch_norm_opt_mut(k)?.running_mean_mut(),
            BnRunningVar(k) => self.batch_norm_opt_mut(k)?.running_var_mut(),
            AdapterA(j) => self.adapters.get_mut(j)?.weight_a_mut().as_mut_slice(),
            AdapterB(j) => self.adapters.get_mut(j)?.weight_b_mut().as_mut_slice(),
        })
    }

    /// Most recent gradient of a tensor, if one has been computed and not yet applied.
    pub fn grad(&self, id: ParamId) -> Option<&[f32]> {
        use ParamId::*;
        match id {
            FcWeight(k) => self.blocks.get(k)?.fc.grad_weight().map(Matrix::as_slice),
            FcBias(k) => self.blocks.get(k)?.fc.grad_bias(),
            BnGamma(k) => self.batch_norm_opt(k)?.grad_gamma(),
            BnBeta(k) => self.batch_norm_opt(k)?.grad_beta(),
            BnRunningMean(_) | BnRunningVar(_) => None,
            AdapterA(j) => self.adapters.get(j)?.grad_a().map(Matrix::as_slice),
            AdapterB(j) => self.adapters.get(j)?.grad_b().map(Matrix::as_slice),
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        use ParamId::*;
        match id {
            FcWeight(k) => self.trainable.fc_weight.get(k).copied().unwrap_or(false),
            FcBias(k) => self.trainable.fc_bias.get(k).copied().unwrap_or(false),
            BnGamma(k) | BnBeta(k) => self.trainable.bn_affine.get(k).copied().unwrap_or(false),
            BnRunningMean(_) | BnRunningVar(_) => false,
            AdapterA(j) | AdapterB(j) => self.trainable.adapters && j < self.adapters.len(),
        }
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.param_ids().into_iter().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Bit-pattern hash of every tensor, in checkpoint order.
    pub fn checksums(&self) -> Vec<(ParamId, u64)> {
        self.param_ids()
            .into_iter()
            .map(|id| (id, checksum(self.tensor(id).expect("listed id"))))
            .collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable_params()
            .into_iter()
            .map(|id| self.tensor(id).map_or(0, <[f32]>::len))
            .sum()
    }

    fn batch_norm_opt(&self, k: usize) -> Option<&BatchNormLayer> {
        self.blocks.get(k)?.norm.as_ref().map(|(bn, _)| bn)
    }

    fn batch_norm_opt_mut(&mut self, k: usize) -> Option<&mut BatchNormLayer> {
        self.blocks.get_mut(k)?.norm.as_mut().map(|(bn, _)| bn)
    }
}

/// Tensor ids of an `n`-layer model in `mode`, in checkpoint order.
pub fn param_layout(mode: FineTuneMode, n: usize) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for k in 0..n {
        ids.extend([ParamId::FcWeight(k), ParamId::FcBias(k)]);
        if k + 1 < n {
            ids.extend([
                ParamId::BnGamma(k),
                ParamId::BnBeta(k),
                ParamId::BnRunningMean(k),
                ParamId::BnRunningVar(k),
            ]);
        }
    }
    for j in 0..mode.adapter_wiring(n).len() {
        ids.extend([ParamId::AdapterA(j), ParamId::AdapterB(j)]);
    }
    ids
}

pub fn checksum(values: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
