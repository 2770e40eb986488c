//! Network building blocks. Each layer owns whatever it must remember from its
//! last training forward pass and writes only the gradients its
//! [`ComputeType`] asks for.

mod activation;
mod batchnorm;
mod fc;
mod loss;
mod lora;

use std::fmt;

pub use activation::Relu;
pub use batchnorm::{BatchNormLayer, BnMode, BN_EPS, BN_MOMENTUM};
pub use fc::FcLayer;
pub use loss::SoftmaxCrossEntropy;
pub use lora::LoraAdapter;

/// Which outputs and gradients a layer computes in a given fine-tuning mode.
///
/// FC variants list the quantities computed among `y`, `gW`, `gb` and `gx`.
/// Both LoRA variants compute `y_A`, `y_B`, `gW_B`, `gW_A` and `gx_B`;
/// `LoraYwx` additionally returns `gx_A` to the adapter's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputeType {
    FcY,
    FcYwbx,
    FcYwb,
    FcYbx,
    FcYb,
    FcYx,
    LoraYwx,
    LoraYw,
    /// No adapter at this position.
    Absent,
}

impl ComputeType {
    pub fn is_fc(self) -> bool {
        matches!(
            self,
            Self::FcY | Self::FcYwbx | Self::FcYwb | Self::FcYbx | Self::FcYb | Self::FcYx
        )
    }

    pub fn is_lora(self) -> bool {
        matches!(self, Self::LoraYwx | Self::LoraYw)
    }

    /// FC weight gradient (`gW`) or LoRA weight gradients (`gW_A`, `gW_B`).
    pub fn weight_grad(self) -> bool {
        matches!(self, Self::FcYwbx | Self::FcYwb | Self::LoraYwx | Self::LoraYw)
    }

    pub fn bias_grad(self) -> bool {
        matches!(self, Self::FcYwbx | Self::FcYwb | Self::FcYbx | Self::FcYb)
    }

    /// Gradient propagated to the layer input (`gx`, or `gx_A` for adapters).
    pub fn input_grad(self) -> bool {
        matches!(self, Self::FcYwbx | Self::FcYbx | Self::FcYx | Self::LoraYwx)
    }

    /// Whether any backward work exists for this type.
    pub fn has_backward(self) -> bool {
        self.weight_grad() || self.bias_grad() || self.input_grad()
    }
}

impl fmt::Display for ComputeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::FcY => "FC_y",
            Self::FcYwbx => "FC_ywbx",
            Self::FcYwb => "FC_ywb",
            Self::FcYbx => "FC_ybx",
            Self::FcYb => "FC_yb",
            Self::FcYx => "FC_yx",
            Self::LoraYwx => "LoRA_ywx",
            Self::LoraYw => "LoRA_yw",
            Self::Absent => "none",
        };
        f.write_str(s)
    }
}

/// MAC-counter labels for one named layer.
#[derive(Debug, Clone)]
pub(crate) struct Labels {
    pub fwd: String,
    pub bwd: String,
    pub upd: String,
}

impl Labels {
    pub fn new(name: &str) -> Self {
        Self {
            fwd: format!("{name}.fwd"),
            bwd: format!("{name}.bwd"),
            upd: format!("{name}.upd"),
        }
    }
}
