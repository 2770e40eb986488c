#![allow(dead_code)]

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skip2lora::data::{gen_drifted, normalize, DriftSplits};
use skip2lora::linalg::{self, MacCounter};
use skip2lora::network::Checkpoint;
use skip2lora::trainer::{self, TrainConfig};
use skip2lora::{DriftSpec, FineTuneMode, Matrix, Model, ModelSpec, ParamId};

pub const DIMS: [usize; 4] = [256, 96, 96, 3];
pub const RANK: usize = 4;
pub const BATCH: usize = 20;
pub const PRETRAIN_EPOCHS: usize = 100;

/// Standardised default drift task plus a model pre-trained on its first split.
pub struct Fixture {
    pub splits: DriftSplits,
    pub base: Checkpoint,
}

pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut splits = gen_drifted(&DriftSpec::default()).unwrap();
        let DriftSplits {
            pretrain,
            finetune,
            test,
        } = &mut splits;
        normalize(pretrain, &mut [finetune, test]).unwrap();
        let mut model = Model::build(&ModelSpec::new(DIMS.to_vec(), FineTuneMode::FtAll)).unwrap();
        let config = TrainConfig {
            epochs: PRETRAIN_EPOCHS,
            ..TrainConfig::new(FineTuneMode::FtAll)
        };
        trainer::pretrain(&mut model, &splits.pretrain, &config).unwrap();
        Fixture {
            base: model.to_checkpoint(),
            splits,
        }
    })
}

pub fn finetune_config(mode: FineTuneMode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::new(mode)
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every tensor with seeded random values so no gradient is trivially
/// zero: nonzero `W_B`, non-identity BN statistics, nonzero biases.
pub fn scramble(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    for id in model.param_ids() {
        let values = model.tensor_mut(id).unwrap();
        for v in values.iter_mut() {
            *v = match id {
                ParamId::BnRunningVar(_) => r.random_range(0.5..2.0),
                ParamId::BnGamma(_) => r.random_range(0.5..1.5),
                _ => r.random_range(-1.0..1.0),
            };
        }
    }
}

pub fn bits(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

/// Smallest |value| entering any ReLU when `x` is fed through `model` with
/// frozen BN statistics. Finite differences are only meaningful when this is
/// comfortably larger than the perturbation the step causes.
pub fn relu_margin(model: &Model, x: &Matrix) -> f32 {
    let n = model.num_layers();
    let mut scratch = MacCounter::new();
    let mut inputs = vec![x.clone()];
    let mut margin = f32::INFINITY;
    for k in 0..n - 1 {
        let mut y = model.fc(k).apply(&inputs[k], &mut scratch).unwrap();
        for ad in model.adapters().iter().filter(|a| a.target() == k) {
            let c = ad.apply(&inputs[ad.source()], &mut scratch).unwrap();
            linalg::add_inplace(&mut y, &c, &mut scratch, "").unwrap();
        }
        let mut z = model.batch_norm(k).unwrap().apply_frozen(&y).unwrap();
        margin = z.as_slice().iter().fold(margin, |m, v| m.min(v.abs()));
        z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        inputs.push(z);
    }
    margin
}
