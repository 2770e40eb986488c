use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::ComputeType::{self, *};

/// The eight fine-tuning methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FineTuneMode {
    /// Weights and biases of every layer.
    FtAll,
    /// Weights and bias of the last layer only.
    FtLast,
    /// Biases of every layer.
    FtBias,
    /// `FtAll` plus per-layer adapters.
    FtAllLora,
    /// One adapter per layer, base network frozen.
    LoraAll,
    /// One adapter on the last layer.
    LoraLast,
    /// One adapter from the input of every layer into the last layer's output.
    SkipLora,
    /// `SkipLora` with the forward-activation cache enabled.
    Skip2Lora,
}

impl FineTuneMode {
    pub const ALL: [FineTuneMode; 8] = [
        Self::FtAll,
        Self::FtLast,
        Self::FtBias,
        Self::FtAllLora,
        Self::LoraAll,
        Self::LoraLast,
        Self::SkipLora,
        Self::Skip2Lora,
    ];

    /// Stable identifier stored in checkpoints.
    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&m| m == self).expect("listed") as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FtAll => "ft-all",
            Self::FtLast => "ft-last",
            Self::FtBias => "ft-bias",
            Self::FtAllLora => "ft-all-lora",
            Self::LoraAll => "lora-all",
            Self::LoraLast => "lora-last",
            Self::SkipLora => "skip-lora",
            Self::Skip2Lora => "skip2-lora",
        }
    }

    pub fn has_adapters(self) -> bool {
        !matches!(self, Self::FtAll | Self::FtLast | Self::FtBias)
    }

    pub fn is_skip(self) -> bool {
        matches!(self, Self::SkipLora | Self::Skip2Lora)
    }

    pub fn uses_cache(self) -> bool {
        self == Self::Skip2Lora
    }

    /// BN `gamma`/`beta` are trained only by the full fine-tuning modes.
    pub fn trains_bn_affine(self) -> bool {
        matches!(self, Self::FtAll | Self::FtAllLora)
    }

    /// `(source, target)` FC-layer indices of each adapter, for an `n`-layer network.
    pub fn adapter_wiring(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            Self::FtAll | Self::FtLast | Self::FtBias => Vec::new(),
            Self::FtAllLora | Self::LoraAll => (0..n).map(|k| (k, k)).collect(),
            Self::LoraLast => vec![(n - 1, n - 1)],
            Self::SkipLora | Self::Skip2Lora => (0..n).map(|k| (k, n - 1)).collect(),
        }
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown mode '{s}', expected one of {}", known.join(", ")))
            })
    }
}

/// Per-layer compute types. `lora[k]` describes the adapter associated with
/// layer `k` (its target for per-layer adapters, its source for skip adapters)
/// and is [`ComputeType::Absent`] where no adapter exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeTypes {
    pub fc: Vec<ComputeType>,
    pub lora: Vec<ComputeType>,
}

pub fn compute_type_assignment(mode: FineTuneMode, n: usize) -> ComputeTypes {
    use FineTuneMode as M;
    // first layer never propagates gx; later layers repeat the second layer's type
    let pattern = |first: ComputeType, rest: ComputeType| -> Vec<ComputeType> {
        (0..n).map(|k| if k == 0 { first } else { rest }).collect()
    };
    let last_only = |t: ComputeType, other: ComputeType| -> Vec<ComputeType> {
        (0..n).map(|k| if k + 1 == n { t } else { other }).collect()
    };
    let (fc, lora) = match mode {
        M::FtAll => (pattern(FcYwb, FcYwbx), vec![Absent; n]),
        M::FtLast => (last_only(FcYwb, FcY), vec![Absent; n]),
        M::FtBias => (pattern(FcYb, FcYbx), vec![Absent; n]),
        M::FtAllLora => (pattern(FcYwb, FcYwbx), pattern(LoraYw, LoraYwx)),
        M::LoraAll => (pattern(FcY, FcYx), pattern(LoraYw, LoraYwx)),
        M::LoraLast => (vec![FcY; n], last_only(LoraYw, Absent)),
        M::SkipLora | M::Skip2Lora => (vec![FcY; n], vec![LoraYw; n]),
    };
    ComputeTypes { fc, lora }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in FineTuneMode::ALL {
            assert_eq!(m.name().parse::<FineTuneMode>().unwrap(), m);
            assert_eq!(FineTuneMode::from_id(m.id()), Some(m));
        }
        assert!("lora".parse::<FineTuneMode>().is_err());
        assert_eq!(FineTuneMode::from_id(8), None);
    }

    #[test]
    fn general_n_extends_pattern() {
        let t = compute_type_assignment(FineTuneMode::FtAll, 5);
        assert_eq!(t.fc, vec![FcYwb, FcYwbx, FcYwbx, FcYwbx, FcYwbx]);
        let t = compute_type_assignment(FineTuneMode::LoraLast, 2);
        assert_eq!(t.lora, vec![Absent, LoraYw]);
        assert_eq!(FineTuneMode::SkipLora.adapter_wiring(4), vec![(0, 3), (1, 3), (2, 3), (3, 3)]);
    }

    #[test]
    fn adapter_slots_match_wiring() {
        for mode in FineTuneMode::ALL {
            for n in 2..6 {
                let t = compute_type_assignment(mode, n);
                let present = t.lora.iter().filter(|c| **c != Absent).count();
                assert_eq!(present, mode.adapter_wiring(n).len(), "{mode} n={n}");
            }
        }
    }
}
