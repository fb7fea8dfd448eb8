//! Small layer library on top of [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use crate::error::Result;

/// Epsilon used by layer normalization inside models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = ps.add_uniform(format!("{name}.b"), &[d_out], d_in, rng);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// `x W` without the bias term.
    pub fn forward_no_bias(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        g.matmul(x, w)
    }
}

/// Stack of linear layers with ReLU after each; the last layer's activation
/// is optional.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, dims: &[usize], relu_last: bool, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(ps, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers, relu_last }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, ps, x)?;
            if i + 1 < n || self.relu_last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }
}

/// Single-head scaled dot-product attention with a residual connection and
/// layer normalization: `LN(q + softmax(q Wq (c Wk)^T / sqrt(d)) c Wv)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, d_context: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            wq: ps.add_uniform(format!("{name}.wq"), &[dim, dim], dim, rng),
            wk: ps.add_uniform(format!("{name}.wk"), &[d_context, dim], d_context, rng),
            wv: ps.add_uniform(format!("{name}.wv"), &[d_context, dim], d_context, rng),
            dim,
        }
    }

    /// Projects the context into (keys^T, values) for reuse across queries.
    pub fn project_context(&self, g: &mut Graph, ps: &ParamSet, context: Var) -> Result<(Var, Var)> {
        let wk = g.param(ps, self.wk);
        let wv = g.param(ps, self.wv);
        let k = g.matmul(context, wk)?;
        let kt = g.transpose(k)?;
        let v = g.matmul(context, wv)?;
        Ok((kt, v))
    }

    pub fn attend(&self, g: &mut Graph, ps: &ParamSet, query: Var, keys_t: Var, values: Var) -> Result<Var> {
        if g.shape(values)[0] == 0 {
            return Ok(query);
        }
        let wq = g.param(ps, self.wq);
        let q = g.matmul(query, wq)?;
        let s = g.matmul(q, keys_t)?;
        let s = g.scale(s, 1.0 / (self.dim as f64).sqrt());
        let a = g.softmax(s, 1)?;
        let ctx = g.matmul(a, values)?;
        let r = g.add(query, ctx)?;
        g.layernorm_eps(r, 1, LAYER_NORM_EPS)
    }

    /// Attention of `query` rows over `context` rows. An empty context
    /// returns `query` unchanged.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, query: Var, context: Var) -> Result<Var> {
        if g.shape(context)[0] == 0 {
            return Ok(query);
        }
        let (kt, v) = self.project_context(g, ps, context)?;
        self.attend(g, ps, query, kt, v)
    }
}
