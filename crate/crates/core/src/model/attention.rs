//! Cross-attention between the segmentation decoders and the
//! classification vector.
//!
//! In the reverse direction the queries come from a decoder's tokens and the
//! keys/values from the classification side; the per-query outputs are mean
//! pooled and added back onto the classification vector. With the literal
//! single-token key/value set every query receives weight 1 on that token,
//! so the pooled output cannot depend on the queries; the spatial variant
//! instead uses the projected stage-4 tokens as keys/values, with fixed
//! sinusoidal position codes on queries and keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::StageOutput;
use super::layers::Linear;
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where the classification-side keys and values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    /// The single classification token.
    LiteralToken,
    /// Stage-4 tokens projected to the decoder width.
    SpatialKv,
}

/// How the decoders and the classification vector interact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No attention; the classification vector is used as is.
    None,
    /// Classification vector as query over decoder tokens.
    Forward,
    /// Both directions, summed.
    Dual,
    /// Decoder tokens as queries over the classification side.
    Reverse,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::None, FusionMode::Forward, FusionMode::Dual, FusionMode::Reverse];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Forward => "forward",
            FusionMode::Dual => "dual",
            FusionMode::Reverse => "reverse",
        }
    }

    fn uses_reverse(self) -> bool {
        matches!(self, FusionMode::Reverse | FusionMode::Dual)
    }

    fn uses_forward(self) -> bool {
        matches!(self, FusionMode::Forward | FusionMode::Dual)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention mode `{s}`")))
    }
}

/// Scaled dot-product attention with optional learned Q/K/V projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub(crate) query: Option<Linear>,
    pub(crate) key: Option<Linear>,
    pub(crate) value: Option<Linear>,
    heads: usize,
    dim: usize,
}

/// Output of one attention call.
#[derive(Clone, Debug)]
pub struct Attended {
    /// `[Nq, C]` per-query outputs.
    pub output: Var,
    /// Per-head `[Nq, Nk]` attention weights.
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, projections: bool, rng: &mut impl Rng) -> Self {
        let mut proj = |suffix: &str| projections.then(|| Linear::new(store, &format!("{name}.{suffix}"), dim, dim, rng));
        Self {
            query: proj("q"),
            key: proj("k"),
            value: proj("v"),
            heads,
            dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `softmax(Q Kᵀ / √d_head) V`, per head, heads concatenated.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, values: Var) -> Result<Attended> {
        let project = |g: &mut Graph, layer: &Option<Linear>, x: Var| match layer {
            Some(l) => l.forward(g, store, x),
            None => x,
        };
        let q = project(g, &self.query, queries);
        let k = project(g, &self.key, keys);
        let v = project(g, &self.value, values);
        let (qd, kd, vd) = (g.shape(q)[1], g.shape(k)[1], g.shape(v)[1]);
        if qd != kd {
            return Err(Error::Shape(format!("query width {qd} != key width {kd}")));
        }
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(Error::Shape("key and value counts differ".into()));
        }
        if qd % self.heads != 0 || vd % self.heads != 0 {
            return Err(Error::Shape(format!("widths {qd}/{vd} not divisible by {} heads", self.heads)));
        }
        let dq = qd / self.heads;
        let dv = vd / self.heads;
        let scale = 1.0 / (dq as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dq, (h + 1) * dq),
                    g.slice_cols(k, h * dq, (h + 1) * dq),
                    g.slice_cols(v, h * dv, (h + 1) * dv),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            weights.push(a);
            outs.push(g.matmul(a, vh));
        }
        let output = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        debug_assert_eq!(g.shape(output)[1], self.dim);
        Ok(Attended { output, weights })
    }
}

/// Fixed 2-D sinusoidal codes for an `h×w` grid, `[h·w, dim]`.
///
/// Coordinates are cell centers normalized to `(0, 1)`, so grids of
/// different resolution over the same image share a coordinate frame. The
/// first half of the channels encodes rows, the second half columns.
pub fn position_codes(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; h * w * dim];
    let encode = |row: &mut [f64], pos: f64| {
        for (k, pair) in row.chunks_exact_mut(2).enumerate() {
            let angle = pos * std::f64::consts::PI * (1u64 << k.min(30)) as f64;
            pair[0] = angle.sin();
            pair[1] = angle.cos();
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            let (ry, rx) = row.split_at_mut(half);
            encode(ry, (y as f64 + 0.5) / h as f64);
            encode(&mut rx[..half], (x as f64 + 0.5) / w as f64);
        }
    }
    Tensor::new(vec![h * w, dim], data)
}

/// Query-side grid of one decoder branch.
#[derive(Clone, Copy, Debug)]
pub struct QueryGrid {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

/// Combines the classification vector with the decoder branches.
#[derive(Clone, Debug)]
pub struct ClsFusion {
    mode: FusionMode,
    variant: AttnVariant,
    pub(crate) reverse: Option<CrossAttention>,
    pub(crate) forward: Option<CrossAttention>,
    kv_proj: Option<Linear>,
    dim: usize,
}

impl ClsFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        mode: FusionMode,
        variant: AttnVariant,
        dim: usize,
        stage4_channels: usize,
        heads: usize,
        projections: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let reverse = mode
            .uses_reverse()
            .then(|| CrossAttention::new(store, "fusion.reverse", dim, heads, projections, rng));
        let forward = mode
            .uses_forward()
            .then(|| CrossAttention::new(store, "fusion.forward", dim, heads, projections, rng));
        let kv_proj = (mode.uses_reverse() && variant == AttnVariant::SpatialKv)
            .then(|| Linear::new(store, "fusion.kv_proj", stage4_channels, dim, rng));
        Self {
            mode,
            variant,
            reverse,
            forward,
            kv_proj,
            dim,
        }
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn variant(&self) -> AttnVariant {
        self.variant
    }

    /// Classification-side keys and values for the reverse direction.
    pub fn reverse_kv(&self, g: &mut Graph, store: &ParamStore, cls: Var, stage4: &StageOutput) -> (Var, Var) {
        match (&self.kv_proj, self.variant) {
            (Some(proj), AttnVariant::SpatialKv) => {
                let kv = proj.forward(g, store, stage4.tokens);
                let pe = g.input(position_codes(stage4.height, stage4.width, self.dim));
                (g.add(kv, pe), kv)
            }
            _ => (cls, cls),
        }
    }

    /// Mean-pooled reverse attention for one branch, `[1, C]`.
    pub fn reverse_branch(&self, g: &mut Graph, store: &ParamStore, query: QueryGrid, keys: Var, values: Var) -> Result<(Var, Attended)> {
        let attn = self
            .reverse
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("reverse attention is not enabled".into()))?;
        let queries = if self.variant == AttnVariant::SpatialKv {
            let pe = g.input(position_codes(query.height, query.width, self.dim));
            g.add(query.tokens, pe)
        } else {
            query.tokens
        };
        let attended = attn.attend(g, store, queries, keys, values)?;
        Ok((g.mean_rows(attended.output), attended))
    }

    /// Classification-vector-as-query attention over one branch, `[1, C]`.
    fn forward_branch(&self, g: &mut Graph, store: &ParamStore, cls: Var, query: QueryGrid) -> Result<Var> {
        let attn = self.forward.as_ref().expect("forward attention enabled");
        let pe = g.input(position_codes(query.height, query.width, self.dim));
        let keys = g.add(query.tokens, pe);
        let attended = attn.attend(g, store, cls, keys, query.tokens)?;
        Ok(attended.output)
    }

    /// Updated `[1, C]` classification vector.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, cls: Var, branches: [QueryGrid; 2], stage4: &StageOutput) -> Result<Var> {
        if g.shape(cls) != [1, self.dim] {
            return Err(Error::Shape(format!("classification vector {:?}, expected [1, {}]", g.shape(cls), self.dim)));
        }
        for b in &branches {
            let width = g.shape(b.tokens)[1];
            if width != self.dim {
                return Err(Error::Shape(format!("decoder tokens have width {width}, expected {}", self.dim)));
            }
        }
        let mut out = cls;
        if self.mode.uses_reverse() {
            let (keys, values) = self.reverse_kv(g, store, cls, stage4);
            for branch in branches {
                let (pooled, _) = self.reverse_branch(g, store, branch, keys, values)?;
                out = g.add(out, pooled);
            }
        }
        if self.mode.uses_forward() {
            for branch in branches {
                let attended = self.forward_branch(g, store, cls, branch)?;
                out = g.add(out, attended);
            }
        }
        Ok(out)
    }
}
