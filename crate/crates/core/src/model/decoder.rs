//! Multi-scale fusion decoders, mask heads and the classification path.

use rand::Rng;

use super::encoder::MultiScaleFeatures;
use super::layers::{Conv2d, LayerNorm, Linear};
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// One fusion decoder: per-stage channel projection, upsampling to stride 4,
/// concatenation, 1×1 convolution with normalization and GELU, and a
/// channel MLP.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    stage_proj: Vec<Linear>,
    fuse: Conv2d,
    fuse_norm: LayerNorm,
    mlp: Linear,
    channels: usize,
}

/// Intermediate tensors of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderPass {
    /// `[4·C_dec, H/4, W/4]` concatenation.
    pub concat: Var,
    /// `[C_dec, H/4, W/4]` decoder output.
    pub output: Var,
    /// `[H/4·W/4, C_dec]` token view of `output`.
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl FusionDecoder {
    pub fn new(store: &mut ParamStore, name: &str, stage_channels: &[usize; 4], channels: usize, rng: &mut impl Rng) -> Self {
        let stage_proj = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &format!("{name}.proj{}", i + 1), c, channels, rng))
            .collect();
        Self {
            stage_proj,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 4 * channels, channels, 1, 1, 0, rng),
            fuse_norm: LayerNorm::new(store, &format!("{name}.fuse_norm"), channels),
            mlp: Linear::new(store, &format!("{name}.mlp"), channels, channels, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &MultiScaleFeatures) -> Result<DecoderPass> {
        let base = &features.stages[0];
        let (h, w) = (base.height, base.width);
        for (i, s) in features.stages.iter().enumerate() {
            let f = 1 << i;
            if s.height * f != h || s.width * f != w {
                return Err(Error::Shape(format!(
                    "stage {} is {}x{}, expected {}x{} for a {}x{} stride-4 map",
                    i + 1,
                    s.height,
                    s.width,
                    h / f,
                    w / f,
                    h,
                    w
                )));
            }
        }
        let mut parts = Vec::with_capacity(4);
        for (stage, proj) in features.stages.iter().zip(&self.stage_proj) {
            let projected = proj.forward(g, store, stage.tokens);
            let map = g.to_map(projected, stage.height, stage.width);
            let up = if stage.height == h && stage.width == w {
                map
            } else {
                g.upsample(map, h, w)
            };
            parts.push(up);
        }
        let concat = g.concat_channels(&parts);
        let fused = self.fuse.forward(g, store, concat);
        let fused = g.to_tokens(fused);
        // Per-token normalization stands in for batch normalization, which
        // would couple the samples of a batch.
        let fused = self.fuse_norm.forward(g, store, fused);
        let fused = g.gelu(fused);
        let tokens = self.mlp.forward(g, store, fused);
        let output = g.to_map(tokens, h, w);
        Ok(DecoderPass {
            concat,
            output,
            tokens,
            height: h,
            width: w,
        })
    }
}

/// 1×1 projection to a single channel followed by ×4 bilinear upsampling.
#[derive(Clone, Debug)]
pub struct MaskHead {
    proj: Linear,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, name, channels, 1, rng),
        }
    }

    /// Returns `[1, 4h, 4w]` logits from `[h·w, C]` decoder tokens.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, h: usize, w: usize) -> Var {
        let logits = self.proj.forward(g, store, tokens);
        let map = g.to_map(logits, h, w);
        g.upsample(map, 4 * h, 4 * w)
    }
}

/// Global average pooling of the coarsest stage followed by a linear
/// projection to the decoder width.
#[derive(Clone, Debug)]
pub struct ClsFeature {
    proj: Linear,
}

impl ClsFeature {
    pub fn new(store: &mut ParamStore, name: &str, stage4_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, name, stage4_channels, channels, rng),
        }
    }

    /// `[1, C_dec]` from stage-4 tokens; also returns the pooled `[1, C4]` vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stage4_tokens: Var) -> (Var, Var) {
        let pooled = g.mean_rows(stage4_tokens);
        (self.proj.forward(g, store, pooled), pooled)
    }
}

/// Final linear map from the classification vector to one logit.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub(crate) proj: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, name, channels, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cls: Var) -> Var {
        self.proj.forward(g, store, cls)
    }
}
