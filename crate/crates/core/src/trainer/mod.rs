//! Pre-training and fine-tuning loops, the cache-aware forward pass, batch
//! sampling, evaluation and gradient checking.

mod gradcheck;
mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{BnMode, SoftmaxCrossEntropy};
use crate::linalg::Matrix;
use crate::network::{FineTuneMode, Model};
use crate::skipcache::SkipCache;

pub use gradcheck::{grad_check, GradCheck};
pub use metrics::{classify, BatchRecord, MacClass, RunMetrics, Totals};

pub const DEFAULT_BATCH_SIZE: usize = 20;
pub const DEFAULT_EPOCHS: usize = 300;
pub const DEFAULT_LEARNING_RATE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    /// `B` indices drawn uniformly with replacement for every batch.
    #[default]
    WithReplacement,
    /// A fresh permutation per epoch, consumed in consecutive chunks.
    ShuffledEpoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Seeds batch sampling.
    pub seed: u64,
    pub mode: FineTuneMode,
    pub cache_enabled: bool,
    pub sampler: Sampler,
}

impl TrainConfig {
    /// Defaults for `mode`; the cache is on exactly for Skip2-LoRA.
    pub fn new(mode: FineTuneMode) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            mode,
            cache_enabled: mode.uses_cache(),
            sampler: Sampler::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.cache_enabled && self.mode != FineTuneMode::Skip2Lora {
            return Err(Error::InvalidArgument(format!(
                "the skip cache is only available for {}, not {}",
                FineTuneMode::Skip2Lora,
                self.mode
            )));
        }
        Ok(())
    }
}

/// The batch-sampling generator for `seed`: ChaCha8 on stream 1, so it never
/// overlaps the initialisation stream of the same seed.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// `batch_size` indices drawn uniformly with replacement from `0..num_samples`.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, num_samples: usize, batch_size: usize) -> Result<Vec<usize>> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
    }
    Ok((0..batch_size).map(|_| rng.random_range(0..num_samples)).collect())
}

struct BatchSampler {
    rng: ChaCha8Rng,
    kind: Sampler,
    num_samples: usize,
    batch_size: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    fn new(config: &TrainConfig, num_samples: usize) -> Self {
        Self {
            rng: sampling_rng(config.seed),
            kind: config.sampler,
            num_samples,
            batch_size: config.batch_size,
            order: (0..num_samples).collect(),
        }
    }

    fn next(&mut self, batch: usize) -> Result<Vec<usize>> {
        match self.kind {
            Sampler::WithReplacement => sample_batch(&mut self.rng, self.num_samples, self.batch_size),
            Sampler::ShuffledEpoch => {
                if batch == 0 {
                    self.order.shuffle(&mut self.rng);
                }
                let start = batch * self.batch_size;
                Ok(self.order[start..start + self.batch_size].to_vec())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CachedForward {
    pub logits: Matrix,
    /// Samples whose frozen path was computed during this call.
    pub computed: usize,
}

/// Skip2-LoRA forward for one batch. `features` row `r` belongs to dataset
/// sample `indices[r]`.
///
/// Every sample is looked up once. A miss runs the frozen path for that sample
/// alone and stores it; afterwards all rows are read back from the cache so hits
/// and misses feed the recomposition identical values.
pub fn forward_fc_cached(
    model: &mut Model,
    cache: &mut SkipCache,
    indices: &[usize],
    features: &Matrix,
) -> Result<CachedForward> {
    if !model.mode().is_skip() {
        return Err(Error::Contract(format!("cached forward needs skip wiring, model is {}", model.mode())));
    }
    let n = model.num_layers();
    if cache.layer_dims() != &model.dims()[1..] {
        return Err(Error::InvalidArgument(format!(
            "cache holds layers {:?}, model produces {:?}",
            cache.layer_dims(),
            &model.dims()[1..]
        )));
    }
    if features.rows() != indices.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_fc_cached",
            left: features.shape(),
            right: (indices.len(), features.cols()),
        });
    }
    let mut computed = 0;
    for (r, &i) in indices.iter().enumerate() {
        if cache.lookup(i)?.is_none() {
            let path = model.frozen_path(&features.gather_rows(&[r])?)?;
            let rows: Vec<&[f32]> = path.iter().map(Matrix::as_slice).collect();
            cache.insert(i, &rows)?;
            computed += 1;
        }
    }

    let mut stacked: Vec<Vec<f32>> = cache
        .layer_dims()
        .iter()
        .map(|&d| Vec::with_capacity(d * indices.len()))
        .collect();
    for &i in indices {
        let entry = cache
            .get(i)?
            .ok_or_else(|| Error::Contract(format!("cache slot {i} empty after insertion")))?;
        for (k, buf) in stacked.iter_mut().enumerate() {
            buf.extend_from_slice(entry.layer(k));
        }
    }
    let b = indices.len();
    let mut layers = stacked
        .into_iter()
        .zip(&model.dims()[1..])
        .map(|(data, &d)| Matrix::from_vec(b, d, data))
        .collect::<Result<Vec<_>>>()?;
    let last_fc = layers.pop().expect("at least two layers");
    let mut inputs = Vec::with_capacity(n);
    inputs.push(features.clone());
    inputs.extend(layers);
    let logits = model.recompose_skip(last_fc, &inputs)?;
    Ok(CachedForward { logits, computed })
}

fn check_dataset(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<()> {
    if data.feature_dim() != model.dims()[0] {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} features, model expects {}",
            data.feature_dim(),
            model.dims()[0]
        )));
    }
    let classes = *model.dims().last().expect("validated dims");
    if data.num_classes() > classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model outputs {classes}",
            data.num_classes()
        )));
    }
    if data.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training samples cannot fill a batch of {}; lower the batch size",
            data.len(),
            config.batch_size
        )));
    }
    Ok(())
}

fn micros(start: Instant) -> u64 {
    start.elapsed().as_micros() as u64
}

fn run_loop(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&BatchRecord),
) -> Result<RunMetrics> {
    let batches = data.len() / config.batch_size;
    let mut cache = if config.cache_enabled {
        Some(SkipCache::new(data.len(), &model.dims()[1..])?)
    } else {
        None
    };
    let mut sampler = BatchSampler::new(config, data.len());
    let mut ce = SoftmaxCrossEntropy::new();
    let mut metrics = RunMetrics::default();
    let run_start_macs = model.macs().clone();
    let run_start = Instant::now();

    for epoch in 0..config.epochs {
        for batch in 0..batches {
            let indices = sampler.next(batch)?;
            let (x, labels) = data.batch(&indices)?;
            let macs_before = model.macs().clone();
            let cache_before = cache.as_ref().map(|c| c.stats());

            let t0 = Instant::now();
            let logits = match cache.as_mut() {
                Some(c) => {
                    let out = forward_fc_cached(model, c, &indices, &x)?;
                    metrics.samples_computed += out.computed as u64;
                    out.logits
                }
                None => {
                    metrics.samples_computed += indices.len() as u64;
                    model.forward(&x, false)?.logits
                }
            };
            let loss = ce.forward(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at epoch {epoch}, batch {batch}")));
            }
            let forward_us = micros(t0);
            let t1 = Instant::now();
            model.backward(&ce.backward()?)?;
            let backward_us = micros(t1);
            let t2 = Instant::now();
            model.update(config.learning_rate)?;
            let update_us = micros(t2);

            let mut record = BatchRecord {
                epoch,
                batch,
                loss,
                forward_us,
                backward_us,
                update_us,
                elapsed_us: micros(run_start),
                ..Default::default()
            };
            record.set_macs(&model.macs().delta_since(&macs_before));
            if let (Some(c), Some(before)) = (cache.as_ref(), cache_before) {
                let now = c.stats();
                record.cache_hits = now.hits - before.hits;
                record.cache_misses = now.misses - before.misses;
            }
            observer(&record);
            metrics.records.push(record);
        }
    }
    model.clear_caches();
    metrics.macs = model.macs().delta_since(&run_start_macs);
    metrics.cache = cache.map(|c| c.stats());
    Ok(metrics)
}

/// Fine-tunes with BN statistics frozen: `epochs × ⌊|T|/B⌋` batches of forward,
/// loss, backward and SGD update, as the model's compute-type table prescribes.
pub fn finetune(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<RunMetrics> {
    finetune_with(model, data, config, |_| {})
}

/// [`finetune`], calling `observer` after every batch.
pub fn finetune_with(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&BatchRecord),
) -> Result<RunMetrics> {
    config.validate()?;
    if model.mode() != config.mode {
        return Err(Error::InvalidArgument(format!(
            "model was built for {} but the run is configured for {}",
            model.mode(),
            config.mode
        )));
    }
    check_dataset(model, data, config)?;
    model.set_bn_mode(BnMode::FrozenStats);
    run_loop(model, data, config, &mut observer)
}

/// Full-backprop training of an FT-All model with batch statistics in BN;
/// running statistics are frozen afterwards. `config.mode` is not consulted.
pub fn pretrain(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<RunMetrics> {
    let config = TrainConfig {
        mode: FineTuneMode::FtAll,
        ..config.clone()
    };
    config.validate()?;
    if model.mode() != FineTuneMode::FtAll {
        return Err(Error::InvalidArgument(format!(
            "pre-training needs an {} model, got {}",
            FineTuneMode::FtAll,
            model.mode()
        )));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument("pre-training needs batches of at least 2 for BN statistics".into()));
    }
    check_dataset(model, data, &config)?;
    model.set_bn_mode(BnMode::TrainStats);
    let result = run_loop(model, data, &config, &mut |_| {});
    model.set_bn_mode(BnMode::FrozenStats);
    result
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let predictions = model.predict(data.features())?;
    let correct = predictions.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
