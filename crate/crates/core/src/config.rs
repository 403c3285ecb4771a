//! Stage and model hyperparameters, including the built-in B0–B5 grid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How keys and values are spatially reduced before attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Strided `R×R` convolution; `R = 1` is plain multi-head attention.
    Sra { reduction_ratio: usize },
    /// Adaptive average pooling to a fixed `P×P` grid.
    LinearSra { pool_size: usize },
}

impl AttentionKind {
    pub const DEFAULT_POOL_SIZE: usize = 7;

    pub fn is_linear(&self) -> bool {
        matches!(self, AttentionKind::LinearSra { .. })
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Sra { reduction_ratio } => write!(f, "sra:{reduction_ratio}"),
            AttentionKind::LinearSra { pool_size } => write!(f, "linear:{pool_size}"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `sra:R` or `linear:P`, got `{s}`"))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| format!("`{n}` is not a non-negative integer"))?;
        if n == 0 {
            return Err(format!("`{s}`: size must be >= 1"));
        }
        match kind.trim() {
            "sra" => Ok(AttentionKind::Sra { reduction_ratio: n }),
            "linear" => Ok(AttentionKind::LinearSra { pool_size: n }),
            other => Err(format!("unknown attention kind `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Patch-embedding stride `S`.
    pub stride: usize,
    /// Output channels `C`.
    pub channels: usize,
    /// Encoder layers `L`.
    pub depth: usize,
    pub attn: AttentionKind,
    /// Attention heads `N`.
    pub heads: usize,
    /// Feed-forward expansion ratio `E`.
    pub expansion: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Patch embedding with kernel `2S−1` and padding `S−1`; otherwise kernel
    /// `S` with no padding.
    pub overlapping_patch_embed: bool,
    /// 3×3 depthwise convolution between the first FC layer and GELU.
    pub conv_ffn: bool,
    /// For linear SRA, a 1×1 convolution, layer norm and GELU after pooling.
    pub pool_refine: bool,
}

impl ModelConfig {
    pub const MAX_STAGES: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n == 0 || n > Self::MAX_STAGES {
            return Err(Error::config(format!("{n} stages (expected 1 to 4)")));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("num_classes and in_channels must be >= 1"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let at = i + 1;
            if s.channels == 0 || s.depth == 0 || s.heads == 0 || s.expansion == 0 {
                return Err(Error::config(format!("stage{at}: all counts must be >= 1")));
            }
            if s.stride != 2 && s.stride != 4 {
                return Err(Error::config(format!("stage{at}: stride {} not in {{2, 4}}", s.stride)));
            }
            if s.channels < s.heads || s.channels % s.heads != 0 {
                return Err(Error::config(format!(
                    "stage{at}: {} heads do not divide {} channels",
                    s.heads, s.channels
                )));
            }
            match s.attn {
                AttentionKind::Sra { reduction_ratio: 0 } | AttentionKind::LinearSra { pool_size: 0 } => {
                    return Err(Error::config(format!("stage{at}: attention size must be >= 1")))
                }
                _ => {}
            }
            if i > 0 && s.channels < self.stages[i - 1].channels {
                return Err(Error::config(format!("stage{at}: channels decrease")));
            }
        }
        if n == Self::MAX_STAGES && self.total_stride() != 32 {
            return Err(Error::config(format!(
                "four-stage stride product is {}, expected 32",
                self.total_stride()
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Two-stage model small enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        let stage = |stride, channels, heads, r| StageConfig {
            stride,
            channels,
            depth: 1,
            attn: AttentionKind::Sra { reduction_ratio: r },
            heads,
            expansion: 2,
        };
        ModelConfig {
            name: "micro".into(),
            stages: vec![stage(4, 8, 1, 2), stage(2, 16, 2, 1)],
            num_classes: 5,
            in_channels: 3,
            overlapping_patch_embed: true,
            conv_ffn: true,
            pool_refine: true,
        }
    }

    /// Applies the three independent architecture switches. With
    /// `linear_sra`, every stage gets `LinearSra { pool_size }`; otherwise
    /// stage attention is left as configured.
    pub fn with_ablation(&self, ablation: Ablation, pool_size: usize) -> Self {
        let mut cfg = self.clone();
        cfg.overlapping_patch_embed = ablation.overlapping_patch_embed;
        cfg.conv_ffn = ablation.conv_ffn;
        if ablation.linear_sra {
            for s in &mut cfg.stages {
                s.attn = AttentionKind::LinearSra { pool_size };
            }
        }
        cfg
    }
}

/// The three toggleable architecture changes: overlapping patch embedding,
/// convolutional FFN and linear SRA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub overlapping_patch_embed: bool,
    pub conv_ffn: bool,
    pub linear_sra: bool,
}

impl Ablation {
    /// All eight on/off combinations.
    pub fn all() -> impl Iterator<Item = Ablation> {
        (0..8u8).map(|bits| Ablation {
            overlapping_patch_embed: bits & 1 != 0,
            conv_ffn: bits & 2 != 0,
            linear_sra: bits & 4 != 0,
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on: bool| if on { '+' } else { '-' };
        write!(
            f,
            "{}OPE {}CFFN {}LSRA",
            flag(self.overlapping_patch_embed),
            flag(self.conv_ffn),
            flag(self.linear_sra)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    B0,
    B1,
    B2,
    B2Li,
    B3,
    B4,
    B5,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::B0,
        Variant::B1,
        Variant::B2,
        Variant::B2Li,
        Variant::B3,
        Variant::B4,
        Variant::B5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::B0 => "B0",
            Variant::B1 => "B1",
            Variant::B2 => "B2",
            Variant::B2Li => "B2-Li",
            Variant::B3 => "B3",
            Variant::B4 => "B4",
            Variant::B5 => "B5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

pub fn config_for(variant: Variant) -> ModelConfig {
    let small = variant == Variant::B0;
    let channels = if small { [32, 64, 160, 256] } else { [64, 128, 320, 512] };
    let depths = match variant {
        Variant::B0 | Variant::B1 => [2, 2, 2, 2],
        Variant::B2 | Variant::B2Li => [3, 3, 6, 3],
        Variant::B3 => [3, 3, 18, 3],
        Variant::B4 => [3, 8, 27, 3],
        Variant::B5 => [3, 6, 40, 3],
    };
    let expansion = if variant == Variant::B5 {
        [4, 4, 4, 4]
    } else {
        [8, 8, 4, 4]
    };
    let strides = [4, 2, 2, 2];
    let ratios = [8, 4, 2, 1];
    let heads = [1, 2, 5, 8];
    let stages = (0..4)
        .map(|i| StageConfig {
            stride: strides[i],
            channels: channels[i],
            depth: depths[i],
            attn: if variant == Variant::B2Li {
                AttentionKind::LinearSra {
                    pool_size: AttentionKind::DEFAULT_POOL_SIZE,
                }
            } else {
                AttentionKind::Sra {
                    reduction_ratio: ratios[i],
                }
            },
            heads: heads[i],
            expansion: expansion[i],
        })
        .collect();
    ModelConfig {
        name: variant.name().to_string(),
        stages,
        num_classes: 1000,
        in_channels: 3,
        overlapping_patch_embed: true,
        conv_ffn: true,
        pool_refine: true,
    }
}

/// Looks up a built-in variant by name (case-insensitive).
pub fn config_for_name(name: &str) -> Result<ModelConfig> {
    Ok(config_for(name.parse()?))
}
