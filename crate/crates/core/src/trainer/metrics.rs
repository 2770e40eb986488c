use crate::linalg::MacCounter;
use crate::skipcache::CacheStats;

/// Which part of a training step a MAC label belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacClass {
    FcForward,
    LoraForward,
    Backward,
    Update,
    Other,
}

pub fn classify(label: &str) -> MacClass {
    if label.ends_with(".fwd") {
        if label.starts_with("FC") {
            MacClass::FcForward
        } else if label.starts_with("LoRA") {
            MacClass::LoraForward
        } else {
            MacClass::Other
        }
    } else if label.ends_with(".bwd") {
        MacClass::Backward
    } else if label.ends_with(".upd") {
        MacClass::Update
    } else {
        MacClass::Other
    }
}

fn class_sum(macs: &MacCounter, class: MacClass) -> u64 {
    macs.sum_where(|l| classify(l) == class)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
    pub fc_fwd_macs: u64,
    pub lora_fwd_macs: u64,
    pub bwd_macs: u64,
    pub update_macs: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub forward_us: u64,
    pub backward_us: u64,
    pub update_us: u64,
    /// Wall-clock time since the start of the run, at the end of this batch.
    pub elapsed_us: u64,
}

impl BatchRecord {
    pub(crate) fn set_macs(&mut self, delta: &MacCounter) {
        self.fc_fwd_macs = class_sum(delta, MacClass::FcForward);
        self.lora_fwd_macs = class_sum(delta, MacClass::LoraForward);
        self.bwd_macs = class_sum(delta, MacClass::Backward);
        self.update_macs = class_sum(delta, MacClass::Update);
    }

    pub fn forward_macs(&self) -> u64 {
        self.fc_fwd_macs + self.lora_fwd_macs
    }

    pub fn total_macs(&self) -> u64 {
        self.forward_macs() + self.bwd_macs + self.update_macs
    }

    pub fn train_us(&self) -> u64 {
        self.forward_us + self.backward_us + self.update_us
    }
}

/// Totals over a set of batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Totals {
    pub batches: usize,
    pub fc_fwd_macs: u64,
    pub lora_fwd_macs: u64,
    pub bwd_macs: u64,
    pub update_macs: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub forward_us: u64,
    pub backward_us: u64,
    pub update_us: u64,
}

impl Totals {
    pub fn forward_macs(&self) -> u64 {
        self.fc_fwd_macs + self.lora_fwd_macs
    }

    pub fn total_macs(&self) -> u64 {
        self.forward_macs() + self.bwd_macs + self.update_macs
    }

    fn mean(&self, v: u64) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            v as f64 / self.batches as f64
        }
    }

    pub fn mean_forward_us(&self) -> f64 {
        self.mean(self.forward_us)
    }

    pub fn mean_backward_us(&self) -> f64 {
        self.mean(self.backward_us)
    }

    pub fn mean_update_us(&self) -> f64 {
        self.mean(self.update_us)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub records: Vec<BatchRecord>,
    /// Cumulative MACs per kernel label over the whole run.
    pub macs: MacCounter,
    /// Final cache state, when the run used one.
    pub cache: Option<CacheStats>,
    /// Samples whose frozen path was computed (cache misses, or every sample without a cache).
    pub samples_computed: u64,
}

impl RunMetrics {
    fn fold<'a>(records: impl Iterator<Item = &'a BatchRecord>) -> Totals {
        records.fold(Totals::default(), |mut t, r| {
            t.batches += 1;
            t.fc_fwd_macs += r.fc_fwd_macs;
            t.lora_fwd_macs += r.lora_fwd_macs;
            t.bwd_macs += r.bwd_macs;
            t.update_macs += r.update_macs;
            t.cache_hits += r.cache_hits;
            t.cache_misses += r.cache_misses;
            t.forward_us += r.forward_us;
            t.backward_us += r.backward_us;
            t.update_us += r.update_us;
            t
        })
    }

    pub fn totals(&self) -> Totals {
        Self::fold(self.records.iter())
    }

    /// Totals over every epoch but the first, whose batches are dominated by
    /// cache misses. Equal to [`Self::totals`] for single-epoch runs.
    pub fn totals_after_first_epoch(&self) -> Totals {
        let first = self.records.first().map_or(0, |r| r.epoch);
        let rest: Vec<_> = self.records.iter().filter(|r| r.epoch != first).collect();
        if rest.is_empty() {
            self.totals()
        } else {
            Self::fold(rest.into_iter())
        }
    }

    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss per epoch, in epoch order.
    pub fn epoch_losses(&self) -> Vec<f32> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, sum, count)) if *e == r.epoch => {
                    *sum += r.loss as f64;
                    *count += 1;
                }
                _ => out.push((r.epoch, r.loss as f64, 1)),
            }
        }
        out.into_iter().map(|(_, s, c)| (s / c as f64) as f32).collect()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.epoch_losses().last().copied()
    }
}
