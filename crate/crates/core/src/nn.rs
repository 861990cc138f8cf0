//! Parameterized layers on top of the graph.

use metatpp_autograd::ndarray::IxDyn;
use metatpp_autograd::{Array, Bound, Graph, ParamId, ParamStore, Rng, TensorError, Var};

type TResult<T> = std::result::Result<T, TensorError>;

/// Affine map over the last axis, initialized uniformly in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = ps.add(
            format!("{name}.w"),
            rng.uniform_array(&[d_in, d_out], -bound, bound),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Array::zeros(IxDyn(&[d_out]))));
        Self { w, b, d_in, d_out }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> TResult<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Learned gain and shift for layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Array::ones(IxDyn(&[d]))),
            beta: ps.add(format!("{name}.beta"), Array::zeros(IxDyn(&[d]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> TResult<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            first: Linear::new(ps, &format!("{name}.0"), d_in, hidden, true, rng),
            second: Linear::new(ps, &format!("{name}.1"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> TResult<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}
