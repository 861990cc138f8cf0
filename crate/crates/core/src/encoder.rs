//! Masked transformer encoder over event sequences.
//!
//! With a single layer and window `k`, the feature at position `i` is a
//! function of events `i-k+1..=i` only. Stacking layers widens the
//! receptive field to roughly `layers * k`.

use metatpp_autograd::ndarray::{Array3, IxDyn};
use metatpp_autograd::{Array, Bound, Graph, ParamId, ParamStore, Rng, Var};
use serde::{Deserialize, Serialize};

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::kernels::{banded_attention, dense_attention, AttnSpec};
use crate::nn::{LayerNorm, Linear, Mlp};

/// Added to inter-event times before taking their log.
pub const LOG_DT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Local history window; `None` attends to the full causal prefix.
    pub window: Option<usize>,
    pub ffn_dim: usize,
    pub num_marks: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.num_marks == 0 {
            return Err(Error::Config(
                "layers, ffn_dim and num_marks must be positive".into(),
            ));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of absolute times: even dims use `sin(t w_d)`, odd
/// dims `cos(t w_d)`, with `w_d = 10000^(-2 floor(d/2) / D)`.
pub fn temporal_encode(times: &[f64], rows: usize, d: usize) -> Array3<f64> {
    let l = if rows == 0 { 0 } else { times.len() / rows };
    let freqs: Vec<f64> = (0..d)
        .map(|c| 10000f64.powf(-((2 * (c / 2)) as f64) / d as f64))
        .collect();
    Array3::from_shape_fn((rows, l, d), |(b, i, c)| {
        let x = times[b * l + i] * freqs[c];
        if c % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Attention kernel used by the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionImpl {
    Banded,
    /// Dense masked softmax, quadratic in length.
    Dense,
}

#[derive(Clone, Debug)]
struct Layer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    mark_emb: Option<ParamId>,
    lift: Linear,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mark_emb = (config.num_marks > 1).then(|| {
            ps.add(
                format!("{name}.mark_emb"),
                rng.normal_array(&[config.num_marks, d]).mapv(|v| v * 0.1),
            )
        });
        let lift = Linear::new(ps, &format!("{name}.lift"), 1, d, true, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Layer {
                    wq: Linear::new(ps, &format!("{n}.wq"), d, d, true, rng),
                    wk: Linear::new(ps, &format!("{n}.wk"), d, d, true, rng),
                    wv: Linear::new(ps, &format!("{n}.wv"), d, d, true, rng),
                    wo: Linear::new(ps, &format!("{n}.wo"), d, d, true, rng),
                    ln1: LayerNorm::new(ps, &format!("{n}.ln1"), d),
                    ffn: Mlp::new(ps, &format!("{n}.ffn"), d, config.ffn_dim, d, rng),
                    ln2: LayerNorm::new(ps, &format!("{n}.ln2"), d),
                }
            })
            .collect();
        Ok(Self {
            config,
            mark_emb,
            lift,
            layers,
        })
    }

    /// Sum of temporal encoding, mark embedding and a linear lift of
    /// `log(dt + eps)`. Returns `[B, L, D]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, batch: &PaddedBatch) -> Result<Var> {
        let (b, l, d) = (batch.batch_size(), batch.max_len(), self.config.d_model);
        for (r, &len) in batch.lens.iter().enumerate() {
            if let Some(i) = (0..len).find(|&i| !(batch.dt[[r, i]] >= 0.0)) {
                return Err(Error::Config(format!(
                    "negative inter-event time at row {r}, position {i}"
                )));
            }
        }
        let times = batch.times.as_standard_layout();
        let te = temporal_encode(times.as_slice().unwrap(), b, d).into_dyn();
        let mut x = g.constant(te);
        let log_dt = batch
            .dt
            .mapv(|v| (v + LOG_DT_EPS).ln())
            .into_shape_with_order(IxDyn(&[b, l, 1]))
            .unwrap();
        let log_dt = g.constant(log_dt);
        let lifted = self.lift.forward(g, p, log_dt)?;
        x = g.add(x, lifted)?;
        if let Some(emb) = self.mark_emb {
            let ids: Vec<usize> = batch.marks.iter().copied().collect();
            let m = g.embedding(p.var(emb), &ids, &[b, l])?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    /// Runs the attention layers on embedded inputs `[B, L, D]`.
    pub fn layers(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        lens: &[usize],
        window: Option<usize>,
        imp: AttentionImpl,
    ) -> Result<Var> {
        let spec = AttnSpec {
            heads: self.config.heads,
            window,
            strict: false,
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let q = layer.wq.forward(g, p, x)?;
            let k = layer.wk.forward(g, p, x)?;
            let v = layer.wv.forward(g, p, x)?;
            let a = match imp {
                AttentionImpl::Banded => banded_attention(g, q, k, v, lens, &spec)?,
                AttentionImpl::Dense => dense_attention(g, q, k, v, lens, &spec)?,
            };
            let o = layer.wo.forward(g, p, a)?;
            let h = g.add(x, o)?;
            let h = layer.ln1.forward(g, p, h)?;
            let f = layer.ffn.forward(g, p, h)?;
            let h2 = g.add(h, f)?;
            x = layer.ln2.forward(g, p, h2)?;
            if g.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
        }
        Ok(x)
    }

    /// Context features `[B, L, D]` for every position of the batch.
    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &PaddedBatch) -> Result<Var> {
        let x = self.embed(g, p, batch)?;
        self.layers(
            g,
            p,
            x,
            &batch.lens,
            self.config.window,
            AttentionImpl::Banded,
        )
    }
}

/// Zero-filled `[B, L, 1]` indicator of positions with at least one
/// earlier event.
pub fn has_context(b: usize, l: usize) -> Array {
    Array::from_shape_fn(IxDyn(&[b, l, 1]), |ix| if ix[1] > 0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_alternates() {
        let te = temporal_encode(&[0.0], 1, 6);
        let row: Vec<f64> = te.iter().copied().collect();
        assert_eq!(row, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let cfg = EncoderConfig {
            d_model: 10,
            heads: 3,
            layers: 1,
            window: Some(2),
            ffn_dim: 4,
            num_marks: 1,
        };
        assert!(cfg.validate().is_err());
    }
}
