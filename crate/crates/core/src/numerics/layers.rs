//! Parameterized building blocks shared by every network module.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `x W + b` with `W: [d_in x d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), d_in, d_out, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Affine layers with ReLU between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, hidden..., d_out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!("{name}: mlp needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        affine_relu_stack(g, store, x, &self.layers, true)
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(Linear::numel).sum()
    }
}

/// Composition of affine maps, optionally with ReLU between hidden layers.
pub fn affine_relu_stack(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    layers: &[Linear],
    relu_between: bool,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        if g.value(h).cols() != layer.d_in {
            return Err(Error::dim(format!(
                "layer {i} expects {} inputs, got {}",
                layer.d_in,
                g.value(h).cols()
            )));
        }
        h = layer.forward(g, store, h)?;
        if relu_between && i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?;
        Ok(Self {
            kind,
            gain,
            bias,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        match self.kind {
            NormKind::Layer => g.layer_norm(x, gain, bias, NORM_EPS),
            NormKind::Batch => g.batch_norm(x, gain, bias, NORM_EPS),
        }
    }

    pub fn numel(&self) -> usize {
        2 * self.dim
    }
}

/// Stack of `Linear -> Norm -> ReLU` blocks. When `plain_last` is set the final
/// block is a bare `Linear`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormMlp {
    pub blocks: Vec<(Linear, Option<Norm>)>,
}

impl NormMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        kind: NormKind,
        plain_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!("{name}: needs at least one layer")));
        }
        let n = dims.len() - 1;
        let mut blocks = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let lin = Linear::new(store, &format!("{name}.{i}.linear"), w[0], w[1], rng)?;
            let norm = if plain_last && i + 1 == n {
                None
            } else {
                Some(Norm::new(store, &format!("{name}.{i}.norm"), kind, w[1])?)
            };
            blocks.push((lin, norm));
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, norm) in &self.blocks {
            h = lin.forward(g, store, h)?;
            if let Some(norm) = norm {
                h = norm.forward(g, store, h)?;
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn d_out(&self) -> usize {
        self.blocks.last().map_or(0, |(l, _)| l.d_out)
    }

    pub fn numel(&self) -> usize {
        self.blocks
            .iter()
            .map(|(l, n)| l.numel() + n.map_or(0, |n| n.numel()))
            .sum()
    }

    /// Zeroes every parameter of the stack, which makes its output zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for (lin, norm) in &self.blocks {
            lin.zero(store);
            if let Some(norm) = norm {
                store.value_mut(norm.gain).data_mut().fill(0.0);
                store.value_mut(norm.bias).data_mut().fill(0.0);
            }
        }
    }
}
