//! Hierarchical transformer encoder producing four feature maps at strides
//! 4, 8, 16 and 32.
//!
//! Each stage is an overlapping patch embedding followed by transformer
//! blocks whose self-attention attends to a spatially reduced key/value
//! sequence, and whose feed-forward path mixes neighbors with a 3×3
//! depthwise convolution.

use rand::Rng;

use super::layers::{Conv2d, DepthwiseConv, LayerNorm, Linear};
use super::ModelConfig;
use crate::autograd::{Graph, ParamStore, Var};

/// One stage output: a `[C, H, W]` map and its `[H·W, C]` token view.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub map: Var,
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

/// The four encoder stage outputs, finest first.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub stages: [StageOutput; 4],
}

#[derive(Clone, Debug)]
struct SelfAttention {
    query: Linear,
    key_value: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    channels: usize,
}

impl SelfAttention {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let q = self.query.forward(g, store, x);
        let kv_in = match &self.reduce {
            Some((conv, norm)) => {
                let map = g.to_map(x, h, w);
                let reduced = conv.forward(g, store, map);
                let tokens = g.to_tokens(reduced);
                norm.forward(g, store, tokens)
            }
            None => x,
        };
        let kv = self.key_value.forward(g, store, kv_in);
        let c = self.channels;
        let head_dim = c / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(kv, lo, hi);
            let vh = g.slice_cols(kv, c + lo, c + hi);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.proj.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
struct MixFfn {
    fc1: Linear,
    dwconv: DepthwiseConv,
    fc2: Linear,
}

impl MixFfn {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let hidden = self.fc1.forward(g, store, x);
        let map = g.to_map(hidden, h, w);
        let mixed = self.dwconv.forward(g, store, map);
        let tokens = g.to_tokens(mixed);
        let act = g.gelu(tokens);
        self.fc2.forward(g, store, act)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for i in 0..4 {
            let c = config.stage_channels[i];
            let name = format!("encoder.stage{}", i + 1);
            let (kernel, stride, pad) = if i == 0 { (7, 4, 3) } else { (3, 2, 1) };
            let embed = Conv2d::new(store, &format!("{name}.patch_embed"), cin, c, kernel, stride, pad, rng);
            let embed_norm = LayerNorm::new(store, &format!("{name}.patch_norm"), c);
            let sr = config.sr_ratios[i];
            let blocks = (0..config.stage_depths[i])
                .map(|b| {
                    let bn = format!("{name}.block{b}");
                    let reduce = (sr > 1).then(|| {
                        (
                            Conv2d::new(store, &format!("{bn}.attn.sr"), c, c, sr, sr, 0, rng),
                            LayerNorm::new(store, &format!("{bn}.attn.sr_norm"), c),
                        )
                    });
                    let hidden = c * config.mlp_ratio;
                    Block {
                        norm1: LayerNorm::new(store, &format!("{bn}.norm1"), c),
                        attn: SelfAttention {
                            query: Linear::new(store, &format!("{bn}.attn.q"), c, c, rng),
                            key_value: Linear::new(store, &format!("{bn}.attn.kv"), c, 2 * c, rng),
                            proj: Linear::new(store, &format!("{bn}.attn.proj"), c, c, rng),
                            reduce,
                            heads: config.attention_heads[i],
                            channels: c,
                        },
                        norm2: LayerNorm::new(store, &format!("{bn}.norm2"), c),
                        ffn: MixFfn {
                            fc1: Linear::new(store, &format!("{bn}.ffn.fc1"), c, hidden, rng),
                            dwconv: DepthwiseConv::new(store, &format!("{bn}.ffn.dwconv"), hidden, rng),
                            fc2: Linear::new(store, &format!("{bn}.ffn.fc2"), hidden, c, rng),
                        },
                    }
                })
                .collect();
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c);
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
            });
            cin = c;
        }
        Self { stages }
    }

    /// Runs all stages on a `[3, H, W]` input whose sides are multiples of 32.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> MultiScaleFeatures {
        let mut x = image;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            let embedded = stage.embed.forward(g, store, x);
            let (h, w) = (g.shape(embedded)[1], g.shape(embedded)[2]);
            let tokens = g.to_tokens(embedded);
            let mut t = stage.embed_norm.forward(g, store, tokens);
            for block in &stage.blocks {
                let n1 = block.norm1.forward(g, store, t);
                let a = block.attn.forward(g, store, n1, h, w);
                t = g.add(t, a);
                let n2 = block.norm2.forward(g, store, t);
                let f = block.ffn.forward(g, store, n2, h, w);
                t = g.add(t, f);
            }
            let tokens = stage.norm.forward(g, store, t);
            let map = g.to_map(tokens, h, w);
            outputs.push(StageOutput {
                map,
                tokens,
                height: h,
                width: w,
            });
            x = map;
        }
        MultiScaleFeatures {
            stages: [outputs[0], outputs[1], outputs[2], outputs[3]],
        }
    }
}
