//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and enter the graph through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are collected into [`Gradients`].

use std::collections::BTreeMap;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, element by element.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => add_into(m.data_mut(), t.data()),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ToTokens(Var),
    ToMap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        eps: f64,
    },
    Gelu(Var),
    MeanRows(Var),
    Upsample(Var),
    ConcatChannels(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    BceLogits {
        x: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recording.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// 2-D convolution of a `[Ci, H, W]` map with `[Co, Ci, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), spec);
        let cols = im2col(xv.data(), &geo);
        let mut out = vec![0.0; geo.co * geo.out_area()];
        gemm(
            geo.co,
            geo.patch(),
            geo.out_area(),
            wv.data(),
            geo.patch(),
            1,
            &cols,
            geo.out_area(),
            1,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), geo.co);
            for (o, row) in out.chunks_mut(geo.out_area()).enumerate() {
                let bias = bv.data()[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let out = Tensor::new(vec![geo.co, geo.oh, geo.ow], out);
        self.push(out, Op::Conv2d { x, w, b, spec })
    }

    /// Depthwise stride-1 convolution with `[C, 1, k, k]` weights.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c, h, wd) = dims3(xv.shape());
        let k = wv.shape()[2];
        assert_eq!(wv.shape(), &[c, 1, k, k], "depthwise: weight shape");
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let bias = b.map_or(0.0, |b| self.value(b).data()[ch]);
            let xs = &xv.data()[ch * h * wd..(ch + 1) * h * wd];
            let ws = &wv.data()[ch * k * k..(ch + 1) * k * k];
            let os = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += ws[ky * k + kx] * xs[iy as usize * wd + ix as usize];
                        }
                    }
                    os[oy * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out);
        self.push(out, Op::Depthwise { x, w, b, pad })
    }

    /// `[C, H, W]` → `[H·W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv.shape());
        let out = transpose(xv.data(), c, h * w);
        self.push(Tensor::new(vec![h * w, c], out), Op::ToTokens(x))
    }

    /// `[H·W, C]` → `[C, H, W]`.
    pub fn to_map(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = dims2(xv.shape());
        assert_eq!(n, h * w, "to_map: token count {n} != {h}x{w}");
        let out = transpose(xv.data(), n, c);
        self.push(Tensor::new(vec![c, h, w], out), Op::ToMap(x))
    }

    /// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din) = dims2(xv.shape());
        let (win, dout) = dims2(wv.shape());
        assert_eq!(din, win, "linear: input width {din} != weight rows {win}");
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, xv.data(), din, 1, wv.data(), dout, 1, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), dout);
            for row in out.chunks_mut(dout) {
                add_into(row, bv.data());
            }
        }
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av.shape());
        let (k2, n) = dims2(bv.shape());
        assert_eq!(k, k2, "matmul: inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out, false);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av.shape());
        let (n, k2) = dims2(bv.shape());
        assert_eq!(k, k2, "matmul_bt: inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), 1, k, &mut out, false);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulBt(a, b))
    }

    /// Row-wise softmax of a `[N, M]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, m) = dims2(xv.shape());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Tensor::new(xv.shape().to_vec(), out), Op::Softmax(x))
    }

    /// Per-row layer normalization of `[N, C]` with affine `g`, `b` of length `C`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (_, c) = dims2(xv.shape());
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        assert_eq!(gv.len(), c);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let (mean, rstd) = moments(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv[i] + bv[i];
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out),
            Op::LayerNorm { x, g, b, eps },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Mean over the rows of `[N, C]`, giving `[1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = dims2(xv.shape());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push(Tensor::new(vec![1, c], out), Op::MeanRows(x))
    }

    /// Bilinear resize of a `[C, H, W]` map (half-pixel centers, edge clamped).
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv.shape());
        let ys = interp_axis(h, out_h);
        let xs = interp_axis(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &xv.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        self.push(Tensor::new(vec![c, out_h, out_w], out), Op::Upsample(x))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = dims3(self.shape(xs[0]));
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let xv = self.value(x);
            let (ci, hi, wi) = dims3(xv.shape());
            assert_eq!((hi, wi), (h, w), "concat_channels: spatial mismatch");
            data.extend_from_slice(xv.data());
            c += ci;
        }
        self.push(
            Tensor::new(vec![c, h, w], data),
            Op::ConcatChannels(xs.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (ni, ci) = dims2(self.shape(x));
                assert_eq!(ni, n, "concat_cols: row mismatch");
                ci
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&x, &wi) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..n {
                out[r * total + offset..r * total + offset + wi]
                    .copy_from_slice(&src[r * wi..(r + 1) * wi]);
            }
            offset += wi;
        }
        self.push(Tensor::new(vec![n, total], out), Op::ConcatCols(xs.to_vec()))
    }

    /// Columns `start..end` of `[N, C]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = dims2(xv.shape());
        assert!(start < end && end <= c, "slice_cols: {start}..{end} of {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(Tensor::new(vec![n, w], out), Op::SliceCols { x, start })
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`, computed
    /// from logits.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "bce: size mismatch");
        let loss = bce_with_logits_mean(xv.data(), target.data());
        self.push(Tensor::scalar(loss), Op::BceLogits { x, target })
    }

    /// Runs reverse accumulation from a scalar `loss` and returns parameter
    /// gradients for `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), dy);
                    match &mut out.grads[id.0] {
                        Some(acc) => add_into(acc.data_mut(), t.data()),
                        slot @ None => *slot = Some(t),
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut grads);
                    send(*b, dy, &mut grads);
                }
                Op::Scale(a, s) => {
                    send(*a, dy.iter().map(|v| v * s).collect(), &mut grads);
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let geo = ConvGeometry::new(xv.shape(), wv.shape(), *spec);
                    let area = geo.out_area();
                    if let Some(b) = b {
                        let db = dy.chunks(area).map(|r| r.iter().sum()).collect();
                        send(*b, db, &mut grads);
                    }
                    let cols = im2col(xv.data(), &geo);
                    if self.nodes[w.0].needs_grad {
                        // dW = dY · colsᵀ
                        let mut dw = vec![0.0; geo.co * geo.patch()];
                        gemm(
                            geo.co,
                            area,
                            geo.patch(),
                            &dy,
                            area,
                            1,
                            &cols,
                            1,
                            area,
                            &mut dw,
                            false,
                        );
                        send(*w, dw, &mut grads);
                    }
                    if self.nodes[x.0].needs_grad {
                        // dcols = Wᵀ · dY
                        let mut dcols = vec![0.0; geo.patch() * area];
                        gemm(
                            geo.patch(),
                            geo.co,
                            area,
                            wv.data(),
                            1,
                            geo.patch(),
                            &dy,
                            area,
                            1,
                            &mut dcols,
                            false,
                        );
                        send(*x, col2im(&dcols, &geo), &mut grads);
                    }
                }
                Op::Depthwise { x, w, b, pad } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (c, h, wd) = dims3(xv.shape());
                    let k = wv.shape()[2];
                    let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                    let mut dx = vec![0.0; c * h * wd];
                    let mut dw = vec![0.0; c * k * k];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        let xs = &xv.data()[ch * h * wd..(ch + 1) * h * wd];
                        let ws = &wv.data()[ch * k * k..(ch + 1) * k * k];
                        let gs = &dy[ch * oh * ow..(ch + 1) * oh * ow];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gs[oy * ow + ox];
                                db[ch] += g;
                                for ky in 0..k {
                                    let iy = (oy + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = iy as usize * wd + ix as usize;
                                        dw[ch * k * k + ky * k + kx] += g * xs[xi];
                                        dx[ch * h * wd + xi] += g * ws[ky * k + kx];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        send(*b, db, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                    send(*x, dx, &mut grads);
                }
                Op::ToTokens(x) => {
                    let (c, h, w) = dims3(self.shape(*x));
                    send(*x, transpose(&dy, h * w, c), &mut grads);
                }
                Op::ToMap(x) => {
                    let (n, c) = dims2(self.shape(*x));
                    send(*x, transpose(&dy, c, n), &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, din) = dims2(xv.shape());
                    let dout = wv.shape()[1];
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for row in dy.chunks(dout) {
                            add_into(&mut db, row);
                        }
                        send(*b, db, &mut grads);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; din * dout];
                        gemm(din, n, dout, xv.data(), 1, din, &dy, dout, 1, &mut dw, false);
                        send(*w, dw, &mut grads);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; n * din];
                        gemm(n, dout, din, &dy, dout, 1, wv.data(), 1, dout, &mut dx, false);
                        send(*x, dx, &mut grads);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = dims2(av.shape());
                    let n = bv.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy, n, 1, bv.data(), 1, n, &mut da, false);
                        send(*a, da, &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), 1, k, &dy, n, 1, &mut db, false);
                        send(*b, db, &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = dims2(av.shape());
                    let n = bv.shape()[0];
                    if self.nodes[a.0].needs_grad {
                        // dA = dY · B
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy, n, 1, bv.data(), k, 1, &mut da, false);
                        send(*a, da, &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = dYᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, &dy, 1, n, av.data(), k, 1, &mut db, false);
                        send(*b, db, &mut grads);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let m = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..m {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::LayerNorm { x, g, b, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*g).data();
                    let c = xv.shape()[1];
                    let mut dx = vec![0.0; xv.len()];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for ((xr, gr), dr) in xv.data().chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                        let (mean, rstd) = moments(xr, *eps);
                        for i in 0..c {
                            xhat[i] = (xr[i] - mean) * rstd;
                            dxhat[i] = gr[i] * gv[i];
                            dg[i] += gr[i] * xhat[i];
                            db[i] += gr[i];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for i in 0..c {
                            dr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                    send(*g, dg, &mut grads);
                    send(*b, db, &mut grads);
                    send(*x, dx, &mut grads);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let dx = xv.iter().zip(&dy).map(|(&v, &g)| g * gelu_grad(v)).collect();
                    send(*x, dx, &mut grads);
                }
                Op::MeanRows(x) => {
                    let (n, c) = dims2(self.shape(*x));
                    let mut dx = Vec::with_capacity(n * c);
                    for _ in 0..n {
                        dx.extend(dy.iter().map(|g| g / n as f64));
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Upsample(x) => {
                    let (c, h, w) = dims3(self.shape(*x));
                    let (out_h, out_w) = (node.value.shape()[1], node.value.shape()[2]);
                    let ys = interp_axis(h, out_h);
                    let xs = interp_axis(w, out_w);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let src = &dy[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let g = src[oy * out_w + ox];
                                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                                dst[y1 * w + x1] += g * ly * lx;
                            }
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::ConcatChannels(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        send(x, dy[offset..offset + n].to_vec(), &mut grads);
                        offset += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let (n, total) = dims2(node.value.shape());
                    let mut offset = 0;
                    for &x in xs {
                        let wi = self.shape(x)[1];
                        let mut dx = Vec::with_capacity(n * wi);
                        for r in 0..n {
                            dx.extend_from_slice(&dy[r * total + offset..r * total + offset + wi]);
                        }
                        send(x, dx, &mut grads);
                        offset += wi;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n, c) = dims2(self.shape(*x));
                    let w = node.value.shape()[1];
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        dx[r * c + start..r * c + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                    }
                    send(*x, dx, &mut grads);
                }
                Op::BceLogits { x, target } => {
                    let xv = self.value(*x).data();
                    let n = xv.len() as f64;
                    let g = dy[0];
                    let dx = xv
                        .iter()
                        .zip(target.data())
                        .map(|(&l, &t)| g * (sigmoid(l) - t) / n)
                        .collect();
                    send(*x, dx, &mut grads);
                }
            }
        }
        out
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(a, b) | Op::MatMul(a, b) | Op::MatMulBt(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::ToTokens(a)
        | Op::ToMap(a)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::MeanRows(a)
        | Op::Upsample(a) => vec![*a],
        Op::Conv2d { x, w, b, .. } | Op::Depthwise { x, w, b, .. } | Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::LayerNorm { x, g, b, .. } => vec![*x, *g, *b],
        Op::ConcatChannels(xs) | Op::ConcatCols(xs) => xs.clone(),
        Op::SliceCols { x, .. } | Op::BceLogits { x, .. } => vec![*x],
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected [N, C], got {shape:?}");
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    assert_eq!(acc.len(), other.len());
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable mean BCE from logits.
pub fn bce_with_logits_mean(logits: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    sum / logits.len() as f64
}

/// Source taps `(i0, i1, weight_of_i1)` for each output index of a bilinear
/// resize from `n_in` to `n_out` samples.
pub(crate) fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Self {
        let (ci, h, wd) = dims3(x);
        assert_eq!(w.len(), 4, "conv weight must be [Co, Ci, k, k]");
        let (co, wci, k, k2) = (w[0], w[1], w[2], w[3]);
        assert_eq!(wci, ci, "conv: input channels {ci} != weight channels {wci}");
        assert_eq!(k, k2, "conv: square kernels only");
        assert!(h + 2 * spec.pad >= k && wd + 2 * spec.pad >= k, "conv: kernel larger than input");
        let oh = (h + 2 * spec.pad - k) / spec.stride + 1;
        let ow = (wd + 2 * spec.pad - k) / spec.stride + 1;
        Self {
            ci,
            h,
            w: wd,
            co,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh,
            ow,
        }
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// Input index feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let area = geo.out_area();
    let mut cols = vec![0.0; geo.patch() * area];
    for c in 0..geo.ci {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        if let Some((iy, ix)) = geo.source(oy, ox, ky, kx) {
                            dst[oy * geo.ow + ox] = x[(c * geo.h + iy) * geo.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let area = geo.out_area();
    let mut x = vec![0.0; geo.ci * geo.h * geo.w];
    for c in 0..geo.ci {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        if let Some((iy, ix)) = geo.source(oy, ox, ky, kx) {
                            x[(c * geo.h + iy) * geo.w + ix] += src[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
