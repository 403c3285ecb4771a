//! The four-stage pyramid backbone and its classification head.

use crate::attention::SpatialReductionAttention;
use crate::config::{ModelConfig, StageConfig};
use crate::error::{Error, Result};
use crate::nn::{gelu, map_to_tokens, tokens_to_map, Conv2d, Conv2dParams, Initializer, LayerNorm, Linear, Module};
use crate::tensor::{Scalar, Tensor};

/// Strided convolution tokenizer followed by layer norm.
#[derive(Clone)]
pub struct PatchEmbed<T: Scalar> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    /// `overlapping` selects kernel `2S−1` / padding `S−1`; otherwise kernel
    /// `S` with no padding.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        overlapping: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let params = if overlapping {
            Conv2dParams::overlapping_patch(in_channels, out_channels, stride)?
        } else {
            Conv2dParams::plain_patch(in_channels, out_channels, stride)?
        };
        Ok(PatchEmbed {
            proj: Conv2d::new(format!("{name}.proj"), params, init)?,
            norm: LayerNorm::new(format!("{name}.norm"), out_channels)?,
        })
    }

    /// `[n, c, h, w]` → (`[n, h′·w′, C′]`, h′, w′).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let map = self.proj.forward(x)?;
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let tokens = self.norm.forward(&map_to_tokens(&map)?)?;
        Ok((tokens, h, w))
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.proj.visit(f);
        self.norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.proj.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// FC → (3×3 depthwise conv) → GELU → FC.
#[derive(Clone)]
pub struct FeedForward<T: Scalar> {
    pub fc1: Linear<T>,
    pub dwconv: Option<Conv2d<T>>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(name: &str, channels: usize, expansion: usize, conv: bool, init: &mut Initializer) -> Result<Self> {
        let hidden = channels * expansion;
        let fc1 = Linear::new(format!("{name}.fc1"), channels, hidden, init)?;
        let dwconv = if conv {
            Some(Conv2d::new(
                format!("{name}.dwconv"),
                Conv2dParams::depthwise3x3(hidden)?,
                init,
            )?)
        } else {
            None
        };
        let fc2 = Linear::new(format!("{name}.fc2"), hidden, channels, init)?;
        Ok(FeedForward { fc1, dwconv, fc2 })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        if x.rank() != 3 || x.shape()[1] != h * w {
            return Err(Error::shape(format!(
                "feed-forward on {:?} tokens for a {h}x{w} map",
                x.shape()
            )));
        }
        let mut hidden = self.fc1.forward(x)?;
        if let Some(dw) = &self.dwconv {
            hidden = map_to_tokens(&dw.forward(&tokens_to_map(&hidden, h, w)?)?)?;
        }
        self.fc2.forward(&gelu(&hidden))
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.fc1.visit(f);
        if let Some(dw) = &self.dwconv {
            dw.visit(f);
        }
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc1.visit_mut(f);
        if let Some(dw) = &mut self.dwconv {
            dw.visit_mut(f);
        }
        self.fc2.visit_mut(f);
    }
}

/// Pre-norm residual block: `y = x + attn(norm1(x))`, `y + ffn(norm2(y))`.
#[derive(Clone)]
pub struct EncoderBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: SpatialReductionAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(name: &str, stage: &StageConfig, cfg: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        let c = stage.channels;
        Ok(EncoderBlock {
            norm1: LayerNorm::new(format!("{name}.norm1"), c)?,
            attn: SpatialReductionAttention::new(
                &format!("{name}.attn"),
                c,
                stage.heads,
                stage.attn,
                cfg.pool_refine,
                init,
            )?,
            norm2: LayerNorm::new(format!("{name}.norm2"), c)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), c, stage.expansion, cfg.conv_ffn, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let y = x.add(&self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        y.add(&self.ffn.forward(&self.norm2.forward(&y)?, h, w)?)
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Clone)]
pub struct Stage<T: Scalar> {
    pub patch_embed: PatchEmbed<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Stage<T> {
    /// `[n, c_in, h, w]` → `[n, C, h′, w′]`.
    pub fn forward(&self, map: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut x, h, w) = self.patch_embed.forward(map)?;
        for block in &self.blocks {
            x = block.forward(&x, h, w)?;
        }
        tokens_to_map(&self.norm.forward(&x)?, h, w)
    }
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_embed.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_embed.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.norm.visit_mut(f);
    }
}

/// Per-stage feature maps `[n, C_i, h_i, w_i]`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Scalar> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }
}

/// Backbone plus mean-pooled linear classifier.
#[derive(Clone)]
pub struct PvtModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> PvtModel<T> {
    /// Builds a model with seeded weights. No parameter depends on input size.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_initializer(config, &mut Initializer::new(seed))
    }

    pub fn with_initializer(config: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_channels = config.in_channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let patch_embed = PatchEmbed::new(
                &format!("{name}.patch_embed"),
                in_channels,
                sc.channels,
                sc.stride,
                config.overlapping_patch_embed,
                init,
            )?;
            let blocks = (0..sc.depth)
                .map(|j| EncoderBlock::new(&format!("{name}.block{j}"), sc, config, init))
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(format!("{name}.norm"), sc.channels)?;
            stages.push(Stage {
                patch_embed,
                blocks,
                norm,
            });
            in_channels = sc.channels;
        }
        let head = Linear::new("head", in_channels, config.num_classes, init)?;
        Ok(PvtModel {
            config: config.clone(),
            stages,
            head,
        })
    }

    pub fn forward_features(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        match *image.shape() {
            [_, c, h, w] if c == self.config.in_channels && h >= 1 && w >= 1 => {}
            _ => {
                return Err(Error::shape(format!(
                    "image must be [n, {}, H, W], got {:?}",
                    self.config.in_channels,
                    image.shape()
                )))
            }
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
            maps.push(x.clone());
        }
        Ok(FeaturePyramid { maps })
    }

    /// Logits `[n, num_classes]` from the mean of the last stage's normalized tokens.
    pub fn classify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let pyramid = self.forward_features(image)?;
        self.classify_features(&pyramid)
    }

    pub fn classify_features(&self, pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let last = pyramid
            .maps
            .last()
            .ok_or_else(|| Error::shape("empty feature pyramid"))?;
        let [n, c, h, w] = *last.shape() else {
            return Err(Error::shape("feature map must be rank 4"));
        };
        let pooled = last.reshape(&[n, c, h * w])?.mean_axis(2)?;
        self.head.forward(&pooled)
    }
}

impl<T: Scalar> Module<T> for PvtModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stages.iter().for_each(|s| s.visit(f));
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
        self.head.visit_mut(f);
    }
}
