use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamSet};

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = params.add_uniform(format!("{name}.weight"), in_dim, out_dim);
        let b = params.add_zeros(format!("{name}.bias"), 1, out_dim);
        Self { w, b, in_dim, out_dim }
    }

    /// Same shapes, weights drawn from `U(-scale, scale)`.
    pub fn with_scale(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, scale: f64) -> Self {
        let w = params.add_uniform_scaled(format!("{name}.weight"), in_dim, out_dim, scale);
        let b = params.add_zeros(format!("{name}.bias"), 1, out_dim);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p[self.w]);
        g.add_row(h, p[self.b])
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.add_filled(format!("{name}.gain"), 1, dim, 1.0);
        let bias = params.add_zeros(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, p[self.gain]);
        g.add_row(s, p[self.bias])
    }
}

/// Two-layer perceptron with a GELU hidden activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            hidden: Linear::new(params, &format!("{name}.hidden"), in_dim, hidden),
            out: Linear::new(params, &format!("{name}.out"), hidden, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

/// Stack of GELU-activated linear layers; no activation after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, p, h);
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}
