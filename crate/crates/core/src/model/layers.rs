//! Parameterized building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2·std by resampling.
pub(crate) fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Normal(0, √(2 / fan_out)) for a convolution kernel `[cout, cin/groups, k, k]`
/// whose output fan is `k·k·cout/groups`.
pub(crate) fn fan_out_normal(shape: &[usize], fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// `x · W + b` over token rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert(format!("{name}.weight"), trunc_normal(&[din, dout], INIT_STD, rng));
        let bias = Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            fan_out_normal(&[cout, cin, kernel, kernel], kernel * kernel * cout, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            spec: ConvSpec { stride, pad },
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert(format!("{name}.weight"), fan_out_normal(&[channels, 1, 3, 3], 9, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[channels]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise(x, w, Some(b), 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.insert(format!("{name}.weight"), Tensor::full(&[channels], 1.0));
        let shift = store.insert(format!("{name}.bias"), Tensor::zeros(&[channels]));
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift, Self::EPS)
    }
}
