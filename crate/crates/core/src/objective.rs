//! Training losses.
//!
//! All losses average over the valid prediction targets of a batch.
//! Latent variants combine per-sample log-likelihoods either by averaging
//! them (variational bound with samples from the posterior, plus KL to the
//! per-position prior) or by a log-mean-exp over samples from the prior.

use metatpp_autograd::ndarray::IxDyn;
use metatpp_autograd::{Array, Bound, Graph, Rng, Var};

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::kernels::{mixture_logpdf, mixture_logsurvival};
use crate::model::{targets, LatentMode, Model, Objective};

#[derive(Clone, Debug, Default)]
pub struct LossOptions {
    /// Adds the log-survival of the last event up to the end of the
    /// observation window, for sequences that record one.
    pub survival: bool,
    /// Overrides the variant's objective (e.g. to score a variational
    /// model with the Monte-Carlo estimator).
    pub objective: Option<Objective>,
}

/// Loss value and its components, all per target event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub mark: f64,
    pub events: usize,
}

/// Loss node plus its report.
pub struct Loss {
    pub var: Var,
    pub report: LossReport,
}

/// Combines per-sample log-likelihoods `[B, S, L]` into `[B, L]`.
fn combine(g: &mut Graph, logp: Var, objective: Objective, samples: usize) -> Result<Var> {
    Ok(match objective {
        Objective::MonteCarlo => {
            let lse = g.logsumexp(logp, 1)?;
            g.add_scalar(lse, -(samples as f64).ln())
        }
        _ => g.mean_axis(logp, 1)?,
    })
}

fn weighted_sum(g: &mut Graph, x: Var, weights: &Array) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

pub fn loss(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    batch: &PaddedBatch,
    samples: usize,
    rng: &mut Rng,
    opts: &LossOptions,
) -> Result<Loss> {
    let objective = opts.objective.unwrap_or(model.variant().objective());
    let mode = match objective {
        Objective::Variational => LatentMode::Posterior,
        _ => LatentMode::Prior,
    };
    let t = targets(batch);
    if t.count == 0 {
        return Err(Error::Config("batch has no prediction targets".into()));
    }
    let inv = 1.0 / t.count as f64;
    let weights = t.valid.mapv(|v| if v { inv } else { 0.0 }).into_dyn();
    let fwd = model.forward(g, p, batch, mode, samples, rng)?;
    let mix = fwd.mixture;
    let logp = mixture_logpdf(g, mix.log_w, mix.mu, mix.sigma, &t.log_dt)?;
    let logp = combine(g, logp, objective, fwd.samples)?;
    let mut ll = weighted_sum(g, logp, &weights)?;
    if opts.survival {
        let (b, l) = (batch.batch_size(), batch.max_len());
        let mut log_t = Array::zeros(IxDyn(&[b, l]));
        let mut w = Array::zeros(IxDyn(&[b, l]));
        for (r, &len) in batch.lens.iter().enumerate() {
            if let Some(t_end) = batch.t_end[r] {
                let gap = t_end - batch.times[[r, len - 1]];
                if gap > 0.0 {
                    log_t[[r, len - 1]] = gap.ln();
                    w[[r, len - 1]] = inv;
                }
            }
        }
        let ls = mixture_logsurvival(g, mix.log_w, mix.mu, mix.sigma, &log_t)?;
        let ls = combine(g, ls, objective, fwd.samples)?;
        let s = weighted_sum(g, ls, &w)?;
        ll = g.add(ll, s)?;
    }
    let nll = g.neg(ll);
    let mut total = nll;
    let mut report = LossReport {
        nll: g.item(nll),
        events: t.count,
        ..Default::default()
    };
    if let (Some(kl), Objective::Variational) = (fwd.kl, objective) {
        let k = weighted_sum(g, kl, &weights)?;
        report.kl = g.item(k);
        total = g.add(total, k)?;
    }
    if let Some(mark_logp) = fwd.mark_logp {
        let shape = g.shape(mark_logp).to_vec();
        let idx: Vec<usize> = (0..shape[0])
            .flat_map(|bi| {
                let row: Vec<usize> = t.marks.row(bi).to_vec();
                std::iter::repeat_n(row, shape[1]).flatten()
            })
            .collect();
        let lp = g.gather_last(mark_logp, &idx)?;
        let lp = combine(g, lp, objective, fwd.samples)?;
        let s = weighted_sum(g, lp, &weights)?;
        let ce = g.neg(s);
        report.mark = g.item(ce);
        total = g.add(total, ce)?;
    }
    report.total = g.item(total);
    if !report.total.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: 0 });
    }
    Ok(Loss { var: total, report })
}
