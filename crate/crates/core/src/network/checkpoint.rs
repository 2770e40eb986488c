//! Little-endian binary checkpoint:
//!
//! ```text
//! magic "SKL2" | version u32 | mode id u8 | n u16 | dims u32[n+1] | rank u32
//! tensors, f32 row-major, in order:
//!   per layer: W, b, then gamma, beta, running_mean, running_var if the layer has BN
//!   per adapter: W_A, W_B
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{param_layout, FineTuneMode, Model, ModelSpec, ParamId};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SKL2";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: FineTuneMode,
    pub dims: Vec<usize>,
    pub rank: usize,
    /// Flat tensors in the order documented at module level.
    pub tensors: Vec<Vec<f32>>,
}

/// Expected length of every tensor for a given layout.
fn tensor_lengths(mode: FineTuneMode, dims: &[usize], rank: usize) -> Vec<usize> {
    let n = dims.len() - 1;
    let mut lens = Vec::new();
    for k in 0..n {
        lens.push(dims[k] * dims[k + 1]);
        lens.push(dims[k + 1]);
        if k + 1 < n {
            lens.extend([dims[k + 1]; 4]);
        }
    }
    for (src, dst) in mode.adapter_wiring(n) {
        lens.push(dims[src] * rank);
        lens.push(rank * dims[dst + 1]);
    }
    lens
}

impl Checkpoint {
    pub fn header_len(num_layers: usize) -> usize {
        4 + 4 + 1 + 2 + 4 * (num_layers + 1) + 4
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(mode: FineTuneMode, dims: &[usize], rank: usize) -> usize {
        Self::header_len(dims.len() - 1) + 4 * tensor_lengths(mode, dims, rank).iter().sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.dims.len() - 1;
        let mut out = Vec::with_capacity(Self::encoded_len(self.mode, &self.dims, self.rank));
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.mode.id());
        out.extend_from_slice(&(n as u16).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.rank as u32).to_le_bytes());
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SKL2 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mode_id = r.take(1)?[0];
        let mode = FineTuneMode::from_id(mode_id)
            .ok_or_else(|| Error::Checkpoint(format!("unknown mode id {mode_id}")))?;
        let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        if n < 2 {
            return Err(Error::Checkpoint(format!("need at least 2 layers, header says {n}")));
        }
        let dims = (0..=n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(Error::Checkpoint(format!("zero dimension in {dims:?}")));
        }
        let rank = r.u32()? as usize;
        let lens = tensor_lengths(mode, &dims, rank);
        let expected = Self::header_len(n) + 4 * lens.iter().sum::<usize>();
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            )));
        }
        let tensors = lens
            .into_iter()
            .map(|len| {
                r.take(4 * len).map(|b| {
                    b.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            dims,
            rank,
            tensors,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            mode: self.mode(),
            dims: self.dims().to_vec(),
            rank: self.spec().rank,
            tensors: self
                .param_ids()
                .into_iter()
                .map(|id| self.tensor(id).expect("listed id").to_vec())
                .collect(),
        }
    }

    /// Builds a `mode` model on top of a checkpoint's base network.
    ///
    /// Adapter tensors are resumed when the checkpoint carries the same adapter
    /// wiring; a checkpoint with a different wiring is rejected. Otherwise
    /// adapters are freshly initialised from `rank` and `seed`.
    pub fn from_checkpoint(ckpt: &Checkpoint, mode: FineTuneMode, rank: usize, seed: u64) -> Result<Self> {
        let n = ckpt.dims.len() - 1;
        let resume = ckpt.mode.has_adapters();
        if resume {
            if ckpt.mode.adapter_wiring(n) != mode.adapter_wiring(n) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {} adapters, incompatible with mode {mode}",
                    ckpt.mode
                )));
            }
            if rank != ckpt.rank {
                return Err(Error::Checkpoint(format!(
                    "checkpoint adapters have rank {}, requested {rank}",
                    ckpt.rank
                )));
            }
        }
        let spec = ModelSpec {
            dims: ckpt.dims.clone(),
            rank,
            mode,
            seed,
        };
        let mut model = Model::build(&spec)?;
        let ids = param_layout(ckpt.mode, n);
        if ids.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                ids.len(),
                ckpt.tensors.len()
            )));
        }
        for (id, values) in ids.into_iter().zip(&ckpt.tensors) {
            let is_adapter = matches!(id, ParamId::AdapterA(_) | ParamId::AdapterB(_));
            if is_adapter && !resume {
                continue;
            }
            let dst = model
                .tensor_mut(id)
                .ok_or_else(|| Error::Checkpoint(format!("no tensor {id:?} in target model")))?;
            if dst.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "{id:?}: expected {} values, found {}",
                    dst.len(),
                    values.len()
                )));
            }
            dst.copy_from_slice(values);
        }
        Ok(model)
    }

    /// Copies a matrix-shaped tensor by id.
    pub fn tensor_matrix(&self, id: ParamId) -> Option<Matrix> {
        let values = self.tensor(id)?.to_vec();
        let (rows, cols) = match id {
            ParamId::FcWeight(k) => self.fc(k).weight().shape(),
            ParamId::AdapterA(j) => self.adapters().get(j)?.weight_a().shape(),
            ParamId::AdapterB(j) => self.adapters().get(j)?.weight_b().shape(),
            _ => (1, values.len()),
        };
        Matrix::from_vec(rows, cols, values).ok()
    }
}
