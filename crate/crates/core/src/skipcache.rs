//! Direct-indexed store of frozen-path activations, one slot per training sample.
//!
//! A slot holds, for an `n`-layer network, the post-ReLU output of blocks
//! `1..n-1` followed by the last FC layer's output before adapters. Slots are
//! written once and never change afterwards; a lookup touches exactly one slot.

use std::mem::size_of;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub occupancy: usize,
    /// Bytes of cached activations.
    pub payload_bytes: usize,
    /// Bytes of the slot table itself.
    pub bookkeeping_bytes: usize,
}

impl CacheStats {
    pub fn bytes_used(&self) -> usize {
        self.payload_bytes + self.bookkeeping_bytes
    }
}

/// Borrowed view of one cached sample.
#[derive(Debug, Clone, Copy)]
pub struct CachedActivations<'a> {
    data: &'a [f32],
    offsets: &'a [usize],
}

impl<'a> CachedActivations<'a> {
    /// Activation vector of cached layer `k` (0-based over the stored layers).
    pub fn layer(&self, k: usize) -> &'a [f32] {
        &self.data[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn num_layers(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct SkipCache {
    layer_dims: Vec<usize>,
    offsets: Vec<usize>,
    slots: Vec<Option<Box<[f32]>>>,
    hits: u64,
    misses: u64,
    occupancy: usize,
}

impl SkipCache {
    /// `layer_dims` are the widths of the stored vectors, `[d1, ..., dn]`.
    pub fn new(num_samples: usize, layer_dims: &[usize]) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::InvalidArgument("cache needs at least one sample slot".into()));
        }
        if layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid cached layer widths {layer_dims:?}")));
        }
        let mut offsets = Vec::with_capacity(layer_dims.len() + 1);
        offsets.push(0);
        for d in layer_dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            offsets,
            slots: vec![None; num_samples],
            hits: 0,
            misses: 0,
            occupancy: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Floats stored per occupied slot.
    pub fn entry_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.slots.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                capacity: self.slots.len(),
            });
        }
        Ok(())
    }

    fn view(&self, i: usize) -> Option<CachedActivations<'_>> {
        self.slots[i].as_deref().map(|data| CachedActivations {
            data,
            offsets: &self.offsets,
        })
    }

    /// Counted lookup: a hit if slot `i` is occupied, a miss otherwise.
    pub fn lookup(&mut self, i: usize) -> Result<Option<CachedActivations<'_>>> {
        self.check_index(i)?;
        if self.slots[i].is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        Ok(self.view(i))
    }

    /// Uncounted read of slot `i`.
    pub fn get(&self, i: usize) -> Result<Option<CachedActivations<'_>>> {
        self.check_index(i)?;
        Ok(self.view(i))
    }

    pub fn contains(&self, i: usize) -> bool {
        self.slots.get(i).is_some_and(Option::is_some)
    }

    /// Stores all layer vectors of sample `i` at once. Slots are write-once.
    pub fn insert<V: AsRef<[f32]>>(&mut self, i: usize, activations: &[V]) -> Result<()> {
        self.check_index(i)?;
        if self.slots[i].is_some() {
            return Err(Error::Contract(format!("cache slot {i} is already filled")));
        }
        if activations.len() != self.layer_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} activation vectors, got {}",
                self.layer_dims.len(),
                activations.len()
            )));
        }
        let mut data = Vec::with_capacity(self.entry_len());
        for (k, (v, &d)) in activations.iter().zip(&self.layer_dims).enumerate() {
            let v = v.as_ref();
            if v.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "layer {k}: expected {d} values, got {}",
                    v.len()
                )));
            }
            data.extend_from_slice(v);
        }
        self.slots[i] = Some(data.into_boxed_slice());
        self.occupancy += 1;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            occupancy: self.occupancy,
            payload_bytes: self.occupancy * self.entry_len() * size_of::<f32>(),
            bookkeeping_bytes: self.slots.len() * size_of::<Option<Box<[f32]>>>(),
        }
    }
}
