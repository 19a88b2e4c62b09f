//! The detector: hierarchical encoder, two fusion decoders with mask heads,
//! and a classification path corrected by cross-attention from the decoders.

mod attention;
mod checkpoint;
mod decoder;
mod encoder;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{position_codes, Attended, AttnVariant, ClsFusion, CrossAttention, FusionMode, QueryGrid};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decoder::{ClsFeature, Classifier, DecoderPass, FusionDecoder, MaskHead};
pub use encoder::{Encoder, MultiScaleFeatures, StageOutput};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoder stage strides; fixed by the architecture.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub attention_heads: [usize; 4],
    /// Spatial reduction of keys/values in each stage's self-attention.
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_channels: usize,
    pub attn_variant: AttnVariant,
    pub fusion: FusionMode,
    pub cross_attn_heads: usize,
    /// Learned Q/K/V projections in the cross-attention.
    pub qkv_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments and tests.
    pub fn toy() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            attention_heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_channels: 64,
            attn_variant: AttnVariant::SpatialKv,
            fusion: FusionMode::Reverse,
            cross_attn_heads: 1,
            qkv_projections: true,
        }
    }

    /// Desk-scale configuration.
    pub fn desk() -> Self {
        Self {
            stage_channels: [32, 64, 160, 256],
            stage_depths: [2, 2, 2, 2],
            attention_heads: [1, 2, 5, 8],
            decoder_channels: 256,
            ..Self::toy()
        }
    }

    /// Tiny configuration used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            stage_channels: [4, 4, 8, 8],
            stage_depths: [1, 1, 1, 1],
            attention_heads: [1, 1, 2, 2],
            mlp_ratio: 2,
            decoder_channels: 8,
            ..Self::toy()
        }
    }

    pub fn strides(&self) -> [usize; 4] {
        STRIDES
    }

    #[allow(clippy::needless_range_loop)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for i in 0..4 {
            let (c, h) = (self.stage_channels[i], self.attention_heads[i]);
            if c == 0 || h == 0 || self.stage_depths[i] == 0 || self.sr_ratios[i] == 0 {
                return bad(format!("stage {} has a zero channel/head/depth/sr entry", i + 1));
            }
            if c % h != 0 {
                return bad(format!("stage {} channels {c} not divisible by {h} heads", i + 1));
            }
            if STRIDES[i] * self.sr_ratios[i] > 32 {
                return bad(format!(
                    "stage {} reduction ratio {} exceeds the stride-32 budget",
                    i + 1,
                    self.sr_ratios[i]
                ));
            }
        }
        if self.decoder_channels == 0 {
            return bad("decoder_channels must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.cross_attn_heads == 0 || !self.decoder_channels.is_multiple_of(self.cross_attn_heads) {
            return bad(format!(
                "decoder_channels {} not divisible by {} cross-attention heads",
                self.decoder_channels, self.cross_attn_heads
            ));
        }
        Ok(())
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: MultiScaleFeatures,
    pub dec_ai: DecoderPass,
    pub dec_ma: DecoderPass,
    /// `[1, H, W]` logits.
    pub mask_ai: Var,
    pub mask_ma: Var,
    /// `[1, C4]` pooled stage-4 features.
    pub pooled: Var,
    /// `[1, C_dec]` classification vector before fusion.
    pub cls_base: Var,
    /// `[1, C_dec]` classification vector after fusion.
    pub cls_feature: Var,
    /// `[1, 1]` logit.
    pub cls_logit: Var,
}

/// Plain outputs of the detector for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// `[H, W]` logits.
    pub mask_ai_logits: Tensor,
    pub mask_ma_logits: Tensor,
    pub cls_logit: f64,
    pub cls_feature: Tensor,
}

impl PredictionBundle {
    pub fn probability(&self) -> f64 {
        crate::autograd::sigmoid(self.cls_logit)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    dec_ai: FusionDecoder,
    dec_ma: FusionDecoder,
    head_ai: MaskHead,
    head_ma: MaskHead,
    cls_feature: ClsFeature,
    fusion: ClsFusion,
    classifier: Classifier,
}

impl Model {
    /// Builds a randomly initialized model; identical seeds give identical
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.decoder_channels;
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let dec_ai = FusionDecoder::new(&mut params, "decoder_ai", &config.stage_channels, c, &mut rng);
        let dec_ma = FusionDecoder::new(&mut params, "decoder_ma", &config.stage_channels, c, &mut rng);
        let head_ai = MaskHead::new(&mut params, "head_ai", c, &mut rng);
        let head_ma = MaskHead::new(&mut params, "head_ma", c, &mut rng);
        let cls_feature = ClsFeature::new(&mut params, "cls.proj", config.stage_channels[3], c, &mut rng);
        let fusion = ClsFusion::new(
            &mut params,
            config.fusion,
            config.attn_variant,
            c,
            config.stage_channels[3],
            config.cross_attn_heads,
            config.qkv_projections,
            &mut rng,
        );
        let classifier = Classifier::new(&mut params, "cls.head", c, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            dec_ai,
            dec_ma,
            head_ai,
            head_ma,
            cls_feature,
            fusion,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fusion(&self) -> &ClsFusion {
        &self.fusion
    }

    /// Replaces all parameters with `params`, which must match names and
    /// shapes of the current store.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            let other = params
                .id(name)
                .map(|i| params.get(i))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if other.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        let mut reordered = ParamStore::new();
        for (_, name, _) in self.params.iter() {
            reordered.insert(name, params.get(params.id(name).expect("checked")).clone());
        }
        self.params = reordered;
        Ok(())
    }

    /// Names of every parameter owned by the module with `prefix`.
    pub fn param_names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    fn check_input(shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        for (axis, n) in [("height", h), ("width", w)] {
            if n == 0 || n % 32 != 0 {
                return Err(Error::Shape(format!("{axis} {n} is not a positive multiple of 32")));
            }
        }
        Ok((h, w))
    }

    /// Four stage feature maps of a `[3, H, W]` image.
    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<MultiScaleFeatures> {
        Self::check_input(g.shape(image))?;
        Ok(self.encoder.forward(g, &self.params, image))
    }

    pub fn decoder(&self, which: Branch) -> &FusionDecoder {
        match which {
            Branch::Ai => &self.dec_ai,
            Branch::Ma => &self.dec_ma,
        }
    }

    pub fn fuse_decoder(&self, g: &mut Graph, features: &MultiScaleFeatures, which: Branch) -> Result<DecoderPass> {
        self.decoder(which).forward(g, &self.params, features)
    }

    pub fn predict_mask(&self, g: &mut Graph, pass: &DecoderPass, which: Branch) -> Var {
        let head = match which {
            Branch::Ai => &self.head_ai,
            Branch::Ma => &self.head_ma,
        };
        head.forward(g, &self.params, pass.tokens, pass.height, pass.width)
    }

    /// Pooled-then-projected classification vector and the pooled stage-4 vector.
    pub fn cls_feature(&self, g: &mut Graph, features: &MultiScaleFeatures) -> (Var, Var) {
        self.cls_feature.forward(g, &self.params, features.stages[3].tokens)
    }

    pub fn reverse_cross_attention(
        &self,
        g: &mut Graph,
        dec_ai: &DecoderPass,
        dec_ma: &DecoderPass,
        cls: Var,
        features: &MultiScaleFeatures,
    ) -> Result<Var> {
        let grid = |p: &DecoderPass| QueryGrid {
            tokens: p.tokens,
            height: p.height,
            width: p.width,
        };
        self.fusion
            .apply(g, &self.params, cls, [grid(dec_ma), grid(dec_ai)], &features.stages[3])
    }

    pub fn classify(&self, g: &mut Graph, cls: Var) -> Var {
        self.classifier.forward(g, &self.params, cls)
    }

    /// Full forward pass on a `[3, H, W]` input tensor.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardPass> {
        Self::check_input(image.shape())?;
        let input = g.input(image.clone());
        let features = self.encode(g, input)?;
        let dec_ai = self.fuse_decoder(g, &features, Branch::Ai)?;
        let dec_ma = self.fuse_decoder(g, &features, Branch::Ma)?;
        let mask_ai = self.predict_mask(g, &dec_ai, Branch::Ai);
        let mask_ma = self.predict_mask(g, &dec_ma, Branch::Ma);
        let (cls_base, pooled) = self.cls_feature(g, &features);
        let cls_feature = self.reverse_cross_attention(g, &dec_ai, &dec_ma, cls_base, &features)?;
        let cls_logit = self.classify(g, cls_feature);
        Ok(ForwardPass {
            features,
            dec_ai,
            dec_ma,
            mask_ai,
            mask_ma,
            pooled,
            cls_base,
            cls_feature,
            cls_logit,
        })
    }

    /// Inference on one image.
    pub fn predict(&self, image: &Tensor) -> Result<PredictionBundle> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, image)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        Ok(PredictionBundle {
            mask_ai_logits: g.value(pass.mask_ai).clone().reshape(&[h, w]),
            mask_ma_logits: g.value(pass.mask_ma).clone().reshape(&[h, w]),
            cls_logit: g.value(pass.cls_logit).item(),
            cls_feature: g.value(pass.cls_feature).clone(),
        })
    }
}

/// Which decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Ai,
    Ma,
}
