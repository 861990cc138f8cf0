//! Model variants and their forward pass.

use std::fmt;
use std::str::FromStr;

use metatpp_autograd::ndarray::{Array2, IxDyn};
use metatpp_autograd::{Array, Bound, Graph, ParamStore, Rng, Var};
use serde::{Deserialize, Serialize};

use crate::data::PaddedBatch;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{
    kl_diag, pool_context, reparameterize, CrossAttention, Gaussian, LatentHead, MarkHead,
    MixtureDecoder, MixtureVars, TaskInput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised transformer baseline with a mixture decoder.
    ThpPlus,
    /// Deterministic pooled context feature.
    CondMeta,
    /// Latent context, variational objective.
    MetaVi,
    /// Latent context, Monte-Carlo objective.
    MetaMc,
    /// Latent context plus cross-attention, variational objective.
    AttentiveVi,
    /// Latent context plus cross-attention, Monte-Carlo objective.
    AttentiveMc,
    /// Deterministic pooled context plus cross-attention.
    CondAttentive,
}

/// Which training objective a variant uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Supervised,
    Variational,
    MonteCarlo,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::ThpPlus,
        Variant::CondMeta,
        Variant::MetaVi,
        Variant::MetaMc,
        Variant::AttentiveVi,
        Variant::AttentiveMc,
        Variant::CondAttentive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ThpPlus => "thp_plus",
            Variant::CondMeta => "cond_meta",
            Variant::MetaVi => "meta_vi",
            Variant::MetaMc => "meta_mc",
            Variant::AttentiveVi => "attentive_vi",
            Variant::AttentiveMc => "attentive_mc",
            Variant::CondAttentive => "cond_attentive",
        }
    }

    pub fn has_latent(self) -> bool {
        matches!(
            self,
            Variant::MetaVi | Variant::MetaMc | Variant::AttentiveVi | Variant::AttentiveMc
        )
    }

    pub fn has_pooled(self) -> bool {
        matches!(self, Variant::CondMeta | Variant::CondAttentive)
    }

    pub fn has_attention(self) -> bool {
        matches!(
            self,
            Variant::AttentiveVi | Variant::AttentiveMc | Variant::CondAttentive
        )
    }

    pub fn objective(self) -> Objective {
        match self {
            Variant::MetaVi | Variant::AttentiveVi => Objective::Variational,
            Variant::MetaMc | Variant::AttentiveMc => Objective::MonteCarlo,
            _ => Objective::Supervised,
        }
    }

    pub fn names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}', expected one of: {}",
                    Self::names()
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_marks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub window: Option<usize>,
    pub ffn_dim: usize,
    pub latent_hidden: usize,
    pub dec_hidden: usize,
    pub components: usize,
    pub attn_heads: usize,
    /// Use one encoder for both the pooled/latent and attention paths.
    pub share_encoder: bool,
}

impl ModelConfig {
    /// Defaults sized so every variant has 50K-60K parameters outside the
    /// mark head at `D = 64`.
    pub fn for_variant(variant: Variant, num_marks: usize) -> Self {
        let (window, ffn_dim, dec_hidden) = match variant {
            Variant::ThpPlus => (None, 256, 64),
            Variant::CondMeta => (Some(20), 128, 128),
            Variant::MetaVi | Variant::MetaMc => (Some(20), 96, 128),
            Variant::AttentiveVi | Variant::AttentiveMc => (Some(20), 32, 48),
            Variant::CondAttentive => (Some(20), 64, 48),
        };
        Self {
            variant,
            num_marks,
            d_model: 64,
            heads: 4,
            layers: 1,
            window,
            ffn_dim,
            latent_hidden: 32,
            dec_hidden,
            components: 8,
            attn_heads: 1,
            share_encoder: true,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            window: self.window,
            ffn_dim: self.ffn_dim,
            num_marks: self.num_marks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.components == 0
            || self.dec_hidden == 0
            || self.latent_hidden == 0
            || self.attn_heads == 0
        {
            return Err(Error::Config(
                "components, dec_hidden, latent_hidden and attn_heads must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How latent samples are drawn in [`Model::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// One draw per sequence from the distribution given the whole
    /// sequence's context.
    Posterior,
    /// One draw per position from the distribution given the context
    /// before that position.
    Prior,
}

/// Outputs of one forward pass. `S` is the number of latent samples
/// (1 for deterministic variants).
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub mixture: MixtureVars,
    /// Mark log-probabilities `[B, S, L, C]`, present when `C > 1`.
    pub mark_logp: Option<Var>,
    /// Per-position KL from posterior to prior `[B, L]` (posterior mode).
    pub kl: Option<Var>,
    pub samples: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    attn_encoder: Option<Encoder>,
    latent: Option<LatentHead>,
    cross: Option<CrossAttention>,
    decoder: MixtureDecoder,
    marks: Option<MarkHead>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            attn_encoder: self.attn_encoder.clone(),
            latent: self.latent.clone(),
            cross: self.cross.clone(),
            decoder: self.decoder.clone(),
            marks: self.marks.clone(),
        }
    }
}

/// Parameter-name prefix of the mark output layer.
pub const MARK_PREFIX: &str = "mark.";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        let v = config.variant;
        let d = config.d_model;
        let encoder = Encoder::new(&mut ps, "enc", config.encoder(), &mut rng)?;
        let attn_encoder = if v.has_attention() && !config.share_encoder {
            Some(Encoder::new(
                &mut ps,
                "attn_enc",
                config.encoder(),
                &mut rng,
            )?)
        } else {
            None
        };
        let latent = v
            .has_latent()
            .then(|| LatentHead::new(&mut ps, "latent", d, config.latent_hidden, &mut rng));
        let cross = v
            .has_attention()
            .then(|| CrossAttention::new(&mut ps, "cross", d, config.attn_heads, &mut rng));
        let task = v.has_latent() || v.has_pooled();
        let decoder = MixtureDecoder::new(
            &mut ps,
            "dec",
            d,
            config.dec_hidden,
            config.components,
            v.has_attention(),
            task,
            &mut rng,
        );
        let marks = (config.num_marks > 1).then(|| {
            MarkHead::new(
                &mut ps,
                "mark",
                d,
                config.num_marks,
                v.has_attention(),
                task,
                &mut rng,
            )
        });
        Ok(Self {
            config,
            params: ps,
            encoder,
            attn_encoder,
            latent,
            cross,
            decoder,
            marks,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Parameter count excluding the mark output layer.
    pub fn num_params(&self) -> usize {
        self.params
            .num_scalars_where(|n| !n.starts_with(MARK_PREFIX))
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Context features `[B, L, D]`.
    pub fn context(&self, g: &mut Graph, p: &Bound, batch: &PaddedBatch) -> Result<Var> {
        self.encoder.encode(g, p, batch)
    }

    /// Latent distribution at every position given the context before it.
    pub fn prior(&self, g: &mut Graph, p: &Bound, r: Var) -> Result<Option<Gaussian>> {
        let Some(head) = &self.latent else {
            return Ok(None);
        };
        let pooled = pool_context(g, r)?;
        Ok(Some(head.forward(g, p, pooled)?))
    }

    /// Runs the model on a batch. Latent variants draw `samples` latent
    /// values per sequence (posterior) or per position (prior).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PaddedBatch,
        mode: LatentMode,
        samples: usize,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let v = self.config.variant;
        let (b, l, d) = (batch.batch_size(), batch.max_len(), self.config.d_model);
        let r = self.encoder.encode(g, p, batch)?;
        let r_prime = match &self.cross {
            Some(cross) => {
                let ra = match &self.attn_encoder {
                    Some(enc) => enc.encode(g, p, batch)?,
                    None => r,
                };
                Some(cross.forward(g, p, ra, &batch.lens)?)
            }
            None => None,
        };
        let mut kl = None;
        let mut n = 1;
        let task = if v.has_pooled() {
            TaskInput::Pooled(pool_context(g, r)?)
        } else if let Some(prior) = self.prior(g, p, r)? {
            n = samples.max(1);
            match mode {
                LatentMode::Posterior => {
                    // Posterior: the prior at the last position, whose
                    // context covers every earlier event.
                    let rows: Vec<usize> = batch
                        .lens
                        .iter()
                        .enumerate()
                        .map(|(i, &len)| i * l + len - 1)
                        .collect();
                    let pick = |g: &mut Graph, x: Var| -> Result<Var> {
                        let flat = g.reshape(x, &[b * l, d])?;
                        let sel = g.index_select(flat, &rows)?;
                        Ok(g.reshape(sel, &[b, 1, d])?)
                    };
                    let post = Gaussian {
                        mu: pick(g, prior.mu)?,
                        sigma: pick(g, prior.sigma)?,
                    };
                    kl = Some(kl_diag(g, post, prior)?);
                    let eps = g.constant(rng.normal_array(&[b, n, d]));
                    TaskInput::PerSequence(reparameterize(g, post, eps)?)
                }
                LatentMode::Prior => {
                    let mu = g.reshape(prior.mu, &[b, 1, l, d])?;
                    let sigma = g.reshape(prior.sigma, &[b, 1, l, d])?;
                    let eps = g.constant(rng.normal_array(&[b, n, l, d]));
                    TaskInput::PerEvent(reparameterize(g, Gaussian { mu, sigma }, eps)?)
                }
            }
        } else {
            TaskInput::None
        };
        let mixture = self.decoder.forward(g, p, r, r_prime, task)?;
        let mark_logp = match &self.marks {
            Some(head) => {
                let logits = head.logits(g, p, r, r_prime, task)?;
                Some(g.log_softmax(logits)?)
            }
            None => None,
        };
        Ok(Forward {
            mixture,
            mark_logp,
            kl,
            samples: n,
        })
    }
}

/// Prediction targets of a batch: position `i` predicts event `i + 1`.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `ln dt` of the next event, 0 where there is no target. `[B, L]`.
    pub log_dt: Array,
    /// Whether position `i` has a next event.
    pub valid: Array2<bool>,
    /// Mark of the next event (0 where there is none).
    pub marks: Array2<usize>,
    pub count: usize,
}

pub fn targets(batch: &PaddedBatch) -> Targets {
    let (b, l) = (batch.batch_size(), batch.max_len());
    let mut log_dt = Array::zeros(IxDyn(&[b, l]));
    let mut valid = Array2::from_elem((b, l), false);
    let mut marks = Array2::zeros((b, l));
    for (r, &len) in batch.lens.iter().enumerate() {
        for i in 0..len.saturating_sub(1) {
            log_dt[[r, i]] = batch.dt[[r, i + 1]].ln();
            valid[[r, i]] = true;
            marks[[r, i]] = batch.marks[[r, i + 1]];
        }
    }
    Targets {
        log_dt,
        valid,
        marks,
        count: batch.num_targets(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "foo".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("attentive_mc"), "{err}");
    }

    #[test]
    fn default_budgets() {
        for v in Variant::ALL {
            let m = Model::new(ModelConfig::for_variant(v, 1), 0).unwrap();
            let n = m.num_params();
            assert!((50_000..=60_000).contains(&n), "{v}: {n}");
        }
    }

    #[test]
    fn mark_head_excluded_from_budget() {
        let a = Model::new(ModelConfig::for_variant(Variant::MetaVi, 1), 0).unwrap();
        let b = Model::new(ModelConfig::for_variant(Variant::MetaVi, 5), 0).unwrap();
        // Only the mark embedding table differs.
        assert_eq!(b.num_params() - a.num_params(), 5 * 64);
        assert!(b.params.num_scalars() > b.num_params());
    }
}
