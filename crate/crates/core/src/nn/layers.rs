//! Parameter-owning building blocks wired onto a [`Graph`].

use rand::Rng;

use super::params::{randn, uniform};
use super::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.weight"), uniform(rng, &[din, dout], bound)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (a, b) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, a, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in), zero bias; `pad = k/2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            w: store.add(format!("{name}.weight"), randn(rng, &[cout, cin, k, k], std)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (a, b) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, a, b, self.groups)
    }
}
