//! Context pooling, latent path, cross-attention and output heads.

use metatpp_autograd::{Bound, Graph, ParamStore, Rng, TensorError, Var};

use crate::encoder::has_context;
use crate::kernels::{banded_attention, prefix_mean, relu_affine, AttnSpec};
use crate::nn::{Linear, Mlp};

type TResult<T> = std::result::Result<T, TensorError>;

/// Lower bound added to every softplus scale.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Permutation-invariant task feature: position `l` receives the mean of
/// the context features strictly before it, position 0 receives zeros.
pub fn pool_context(g: &mut Graph, r: Var) -> TResult<Var> {
    prefix_mean(g, r)
}

fn split_last(g: &mut Graph, x: Var, sizes: &[usize]) -> TResult<Vec<Var>> {
    let axis = g.shape(x).len() - 1;
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        out.push(g.slice(x, axis, start, n)?);
        start += n;
    }
    Ok(out)
}

fn positive_scale(g: &mut Graph, x: Var) -> Var {
    let s = g.softplus(x);
    g.add_scalar(s, SCALE_FLOOR)
}

/// Diagonal Gaussian `(mu, sigma)` over the task latent.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub sigma: Var,
}

/// Two-layer map from the pooled feature to the latent distribution.
#[derive(Clone, Debug)]
pub struct LatentHead {
    mlp: Mlp,
    d: usize,
}

impl LatentHead {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(ps, name, d, hidden, 2 * d, rng),
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, pooled: Var) -> TResult<Gaussian> {
        let out = self.mlp.forward(g, p, pooled)?;
        let parts = split_last(g, out, &[self.d, self.d])?;
        Ok(Gaussian {
            mu: parts[0],
            sigma: positive_scale(g, parts[1]),
        })
    }
}

/// `z = mu + sigma * eps` with `eps` supplied by the caller.
pub fn reparameterize(g: &mut Graph, q: Gaussian, eps: Var) -> TResult<Var> {
    let s = g.mul(q.sigma, eps)?;
    g.add(q.mu, s)
}

/// Closed-form `KL(p || q)` between diagonal Gaussians, summed over the
/// last axis. Shapes broadcast.
pub fn kl_diag(g: &mut Graph, p: Gaussian, q: Gaussian) -> TResult<Var> {
    let lq = g.log(q.sigma)?;
    let lp = g.log(p.sigma)?;
    let log_ratio = g.sub(lq, lp)?;
    let vp = g.square(p.sigma);
    let diff = g.sub(p.mu, q.mu)?;
    let d2 = g.square(diff);
    let num = g.add(vp, d2)?;
    let vq = g.square(q.sigma);
    let vq2 = g.scale(vq, 2.0);
    let frac = g.div(num, vq2)?;
    let t = g.add(log_ratio, frac)?;
    let t = g.add_scalar(t, -0.5);
    let axis = g.shape(t).len() - 1;
    g.sum_axis(t, axis)
}

/// Attention from each event's feature to the features of all earlier
/// events. Keys and queries are projected, values are the raw features,
/// heads are concatenated and mapped back to `D`, then passed through a
/// one-hidden-layer MLP. Position 0 has no context and yields zeros.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    w: Linear,
    fc: Mlp,
    heads: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, false, rng),
            w: Linear::new(ps, &format!("{name}.w"), heads * d, d, false, rng),
            fc: Mlp::new(ps, &format!("{name}.fc"), d, d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, r: Var, lens: &[usize]) -> TResult<Var> {
        let s = g.shape(r).to_vec();
        let q = self.wq.forward(g, p, r)?;
        let k = self.wk.forward(g, p, r)?;
        let v = if self.heads == 1 {
            r
        } else {
            g.concat(&vec![r; self.heads], 2)?
        };
        let spec = AttnSpec {
            heads: self.heads,
            window: None,
            strict: true,
        };
        let h = banded_attention(g, q, k, v, lens, &spec)?;
        let h = self.w.forward(g, p, h)?;
        let out = self.fc.forward(g, p, h)?;
        let m = g.constant(has_context(s[0], s[1]));
        g.mul(out, m)
    }
}

/// Source of the task-level input to the decoder.
#[derive(Clone, Copy, Debug)]
pub enum TaskInput {
    None,
    /// Deterministic pooled feature `[B, L, D]`.
    Pooled(Var),
    /// One latent sample per sequence: `[B, S, D]`.
    PerSequence(Var),
    /// One latent sample per sequence and position: `[B, S, L, D]`.
    PerEvent(Var),
}

/// First affine layer over the concatenation `[z, r, r']`, stored as
/// separate blocks so the `r` part is computed once and broadcast over
/// latent samples.
#[derive(Clone, Debug)]
pub struct SplitAffine {
    wr: Linear,
    wa: Option<Linear>,
    wz: Option<Linear>,
}

impl SplitAffine {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        out: usize,
        attention: bool,
        task: bool,
        rng: &mut Rng,
    ) -> Self {
        Self {
            wr: Linear::new(ps, &format!("{name}.wr"), d, out, true, rng),
            wa: attention.then(|| Linear::new(ps, &format!("{name}.wa"), d, out, false, rng)),
            wz: task.then(|| Linear::new(ps, &format!("{name}.wz"), d, out, false, rng)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.wr.num_params()
            + self.wa.as_ref().map_or(0, Linear::num_params)
            + self.wz.as_ref().map_or(0, Linear::num_params)
    }

    /// Splits the output into the per-position part `[B, 1, L, out]`,
    /// including the bias, and the per-sample part, if any.
    pub fn parts(
        &self,
        g: &mut Graph,
        p: &Bound,
        r: Var,
        r_prime: Option<Var>,
        task: TaskInput,
    ) -> TResult<(Var, Option<Var>)> {
        let s = g.shape(r).to_vec();
        let (b, l) = (s[0], s[1]);
        let mut h = self.wr.forward(g, p, r)?;
        if let (Some(wa), Some(rp)) = (&self.wa, r_prime) {
            let a = wa.forward(g, p, rp)?;
            h = g.add(h, a)?;
        }
        let n = g.shape(h)[2];
        h = g.reshape(h, &[b, 1, l, n])?;
        let Some(wz) = &self.wz else {
            return Ok((h, None));
        };
        let zpart = match task {
            TaskInput::None => return Ok((h, None)),
            TaskInput::Pooled(z) => {
                let t = wz.forward(g, p, z)?;
                g.reshape(t, &[b, 1, l, n])?
            }
            TaskInput::PerSequence(z) => {
                let sn = g.shape(z)[1];
                let t = wz.forward(g, p, z)?;
                g.reshape(t, &[b, sn, 1, n])?
            }
            TaskInput::PerEvent(z) => wz.forward(g, p, z)?,
        };
        Ok((h, Some(zpart)))
    }

    /// Returns `[B, S, L, out]` (`S = 1` without per-sample input).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        r: Var,
        r_prime: Option<Var>,
        task: TaskInput,
    ) -> TResult<Var> {
        match self.parts(g, p, r, r_prime, task)? {
            (h, None) => Ok(h),
            (h, Some(z)) => g.add(h, z),
        }
    }
}

/// Mixture parameters as graph nodes, each `[B, S, L, K]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub log_w: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Two fully connected layers mapping the concatenated features to a
/// `K`-component log-normal mixture.
#[derive(Clone, Debug)]
pub struct MixtureDecoder {
    first: SplitAffine,
    out: Linear,
    k: usize,
}

impl MixtureDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        k: usize,
        attention: bool,
        task: bool,
        rng: &mut Rng,
    ) -> Self {
        Self {
            first: SplitAffine::new(ps, &format!("{name}.in"), d, hidden, attention, task, rng),
            out: Linear::new(ps, &format!("{name}.out"), hidden, 3 * k, true, rng),
            k,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        r: Var,
        r_prime: Option<Var>,
        task: TaskInput,
    ) -> TResult<MixtureVars> {
        let (base, z) = self.first.parts(g, p, r, r_prime, task)?;
        let bias = p.var(self.out.b.expect("decoder output has a bias"));
        let o = relu_affine(g, base, z, p.var(self.out.w), bias)?;
        let parts = split_last(g, o, &[self.k, self.k, self.k])?;
        Ok(MixtureVars {
            log_w: g.log_softmax(parts[0])?,
            mu: parts[1],
            sigma: positive_scale(g, parts[2]),
        })
    }
}

/// One fully connected layer over the decoder's input features producing
/// mark log-probabilities `[B, S, L, C]`.
#[derive(Clone, Debug)]
pub struct MarkHead {
    layer: SplitAffine,
}

impl MarkHead {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        num_marks: usize,
        attention: bool,
        task: bool,
        rng: &mut Rng,
    ) -> Self {
        Self {
            layer: SplitAffine::new(ps, name, d, num_marks, attention, task, rng),
        }
    }

    pub fn logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        r: Var,
        r_prime: Option<Var>,
        task: TaskInput,
    ) -> TResult<Var> {
        self.layer.forward(g, p, r, r_prime, task)
    }
}
