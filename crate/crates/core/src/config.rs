//! Variant and ablation configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::CALIBRATED;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    XS,
    S,
    B,
    L,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::XS, Variant::S, Variant::B, Variant::L];

    pub fn stage_dims(self) -> [usize; 3] {
        match self {
            Variant::XS => [96, 160, 288],
            Variant::S => [96, 192, 320],
            Variant::B => [128, 256, 384],
            Variant::L => [192, 288, 384],
        }
    }

    pub fn mattn_counts(self) -> [usize; 3] {
        match self {
            Variant::XS => [2, 3, 2],
            Variant::S | Variant::B | Variant::L => [2, 4, 3],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::XS => "XS",
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XS" => Ok(Variant::XS),
            "S" => Ok(Variant::S),
            "B" => Ok(Variant::B),
            "L" => Ok(Variant::L),
            _ => Err(Error::config("variant", format!("unknown variant {s:?} (expected XS, S, B or L)"))),
        }
    }
}

/// Where the learnable positional bias enters the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// `scores[i][j] += b[j]`: one bias per key position.
    PerKey,
    /// `scores[i][j] += b[i]`: constant along each softmax row, so it has no
    /// effect on the output. Kept to reproduce the literal formulation.
    PerQuery,
}

/// Channel widths of the first two stem convolutions relative to the
/// stage-1 width `C`. The third stem convolution always produces `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StemWidths {
    /// `3 -> C/4 -> C/2 -> C`
    QuarterHalf,
    /// `3 -> C/2 -> C/2 -> C`
    HalfHalf,
    /// `3 -> C/2 -> C -> C`
    HalfFull,
    /// `3 -> C -> C -> C`
    Full,
}

impl StemWidths {
    pub const ALL: [StemWidths; 4] = [
        StemWidths::QuarterHalf,
        StemWidths::HalfHalf,
        StemWidths::HalfFull,
        StemWidths::Full,
    ];

    pub fn channels(self, c1: usize) -> [usize; 4] {
        match self {
            StemWidths::QuarterHalf => [3, c1 / 4, c1 / 2, c1],
            StemWidths::HalfHalf => [3, c1 / 2, c1 / 2, c1],
            StemWidths::HalfFull => [3, c1 / 2, c1, c1],
            StemWidths::Full => [3, c1, c1, c1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Drop the local pass-through and the sigmoid gate; the merge projection
    /// sees only the global stream.
    pub no_local_stream: bool,
    /// Replace the modified attention with canonical Q/K/V attention.
    pub standard_attention: bool,
}

impl AblationFlags {
    pub const NONE: AblationFlags = AblationFlags {
        no_local_stream: false,
        standard_attention: false,
    };
    pub const NO_LOCAL: AblationFlags = AblationFlags {
        no_local_stream: true,
        standard_attention: false,
    };
    pub const STANDARD_ATTENTION: AblationFlags = AblationFlags {
        no_local_stream: false,
        standard_attention: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.no_local_stream, self.standard_attention) {
            (false, false) => "full",
            (true, false) => "no-local",
            (false, true) => "std-attn",
            (true, true) => "no-local+std-attn",
        }
    }
}

/// Hyperparameters not fixed by the variant table, chosen by
/// [`crate::calibration::calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyperparams {
    /// InvRes expansion ratio per stage (also used by that stage's Mixer).
    pub expansion: [usize; 3],
    /// Hidden width of the attention feed-forward network, as a multiple of `C`.
    pub ffn_ratio: usize,
    /// Width of the shared point-wise projection feeding attention, as a
    /// multiple of `C`.
    pub attn_ratio: usize,
    pub head_dim: usize,
    pub stem: StemWidths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub stage_dims: [usize; 3],
    pub invres_counts: [usize; 3],
    pub mattn_counts: [usize; 3],
    pub mixer_counts: [usize; 3],
    pub hyper: Hyperparams,
    pub bias_mode: BiasMode,
    pub num_classes: usize,
    pub input_hw: usize,
    /// Spatial size the global stream pools to before attention.
    pub attn_hw: usize,
}

pub const INVRES_COUNTS: [usize; 3] = [2, 2, 1];

impl VariantSpec {
    pub fn named(v: Variant) -> Self {
        Self::with_hyper(v, CALIBRATED)
    }

    pub fn with_hyper(v: Variant, hyper: Hyperparams) -> Self {
        Self {
            name: v.as_str().to_string(),
            stage_dims: v.stage_dims(),
            invres_counts: INVRES_COUNTS,
            mattn_counts: v.mattn_counts(),
            mixer_counts: [1, 1, 1],
            hyper,
            bias_mode: BiasMode::PerKey,
            num_classes: 1000,
            input_hw: 224,
            attn_hw: 7,
        }
    }

    /// Feature-map extent of stage `s` (0-based) for the configured input.
    pub fn stage_hw(&self, s: usize) -> usize {
        self.input_hw >> (3 + s)
    }

    pub fn attn_width(&self, s: usize) -> usize {
        self.hyper.attn_ratio * self.stage_dims[s]
    }

    pub fn heads(&self, s: usize, standard: bool) -> usize {
        let width = if standard { self.stage_dims[s] } else { self.attn_width(s) };
        width / self.hyper.head_dim
    }

    pub fn upsample_factor(&self, s: usize) -> usize {
        self.stage_hw(s) / self.attn_hw
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if h.expansion.iter().any(|&e| e == 0) {
            return Err(Error::config("hyper.expansion", "ratios must be >= 1"));
        }
        if h.ffn_ratio == 0 || h.attn_ratio == 0 || h.head_dim == 0 {
            return Err(Error::config("hyper", "ffn_ratio, attn_ratio and head_dim must be >= 1"));
        }
        if self.mixer_counts != [1, 1, 1] {
            return Err(Error::config("mixer_counts", "each stage carries exactly one Mixer"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be >= 1"));
        }
        if self.input_hw == 0 || self.input_hw % 32 != 0 {
            return Err(Error::config("input_hw", format!("{} is not a positive multiple of 32", self.input_hw)));
        }
        if self.attn_hw == 0 {
            return Err(Error::config("attn_hw", "must be >= 1"));
        }
        for s in 0..3 {
            let c = self.stage_dims[s];
            if c == 0 || c % 4 != 0 {
                return Err(Error::config(format!("stage_dims[{s}]"), format!("{c} is not a positive multiple of 4")));
            }
            if self.attn_width(s) % h.head_dim != 0 || c % h.head_dim != 0 {
                return Err(Error::config(
                    "hyper.head_dim",
                    format!("head_dim {} does not divide stage {} width {c}", h.head_dim, s + 1),
                ));
            }
            let hw = self.stage_hw(s);
            if hw % self.attn_hw != 0
                || !crate::kernels::SUPPORTED_UPSAMPLE_FACTORS.contains(&(hw / self.attn_hw))
            {
                return Err(Error::config(
                    "input_hw",
                    format!(
                        "stage {} map {hw}x{hw} cannot be restored from {}x{} with a supported factor",
                        s + 1,
                        self.attn_hw,
                        self.attn_hw
                    ),
                ));
            }
        }
        Ok(())
    }
}
