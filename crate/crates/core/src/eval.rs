//! Metrics, bootstrap, baselines and experiment harnesses.
//!
//! Every sequence is scored independently with its own random stream, so
//! results do not depend on thread scheduling. Per-sequence sums are cached
//! and the bootstrap resamples those sums instead of re-running the model.

use std::path::Path;

use metatpp_autograd::{Graph, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, EventSequence};
use crate::error::Result;
use crate::kernels::mixture_logpdf;
use crate::model::{targets, LatentMode, Model};
use crate::synth::drop_events;

pub const DEFAULT_SAMPLES: usize = 256;
pub const DEFAULT_RESAMPLES: usize = 200;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Latent samples per prediction (ignored by deterministic variants).
    pub samples: usize,
    /// Samples evaluated per forward pass, bounding memory.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            chunk: 32,
            seed: 0,
        }
    }
}

/// Model outputs for one sequence, one entry per position.
#[derive(Clone, Debug, Default)]
pub struct SequencePrediction {
    /// Expected next inter-event time; `None` when the mixture mean
    /// overflowed for some sample.
    pub mean_dt: Vec<Option<f64>>,
    /// Log-density of the observed next inter-event time (positions with a
    /// next event only).
    pub logp: Vec<f64>,
    /// Sample-averaged class probabilities for the next mark.
    pub mark_probs: Option<Vec<Vec<f64>>>,
}

fn logmeanexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Runs the model on one sequence, drawing latent samples from the prior
/// at each position and averaging over them.
pub fn predict_sequence(
    model: &Model,
    seq: &EventSequence,
    samples: usize,
    chunk: usize,
    rng: &mut Rng,
) -> Result<SequencePrediction> {
    let batch = make_batch(&[seq], None)?;
    let t = targets(&batch);
    let l = seq.len();
    let total = if model.variant().has_latent() {
        samples.max(1)
    } else {
        1
    };
    let k = model.config.components;
    let c = model.config.num_marks;
    let mut logps: Vec<Vec<f64>> = vec![Vec::with_capacity(total); l - 1];
    let mut mean_sum = vec![0.0; l];
    let mut overflow = vec![false; l];
    let mut mark_sum = (c > 1).then(|| vec![vec![0.0; c]; l]);
    let mut done = 0;
    while done < total {
        let n = chunk.max(1).min(total - done);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let fwd = model.forward(&mut g, &p, &batch, LatentMode::Prior, n, rng)?;
        let mix = fwd.mixture;
        let lp = mixture_logpdf(&mut g, mix.log_w, mix.mu, mix.sigma, &t.log_dt)?;
        let s = fwd.samples;
        let (lw, mu, sg, lpv) = (
            g.value(mix.log_w),
            g.value(mix.mu),
            g.value(mix.sigma),
            g.value(lp),
        );
        for si in 0..s {
            for i in 0..l {
                if i + 1 < l {
                    logps[i].push(lpv[[0, si, i]]);
                }
                let mut m = 0.0;
                for kk in 0..k {
                    let e =
                        lw[[0, si, i, kk]] + mu[[0, si, i, kk]] + 0.5 * sg[[0, si, i, kk]].powi(2);
                    m += e.exp();
                }
                if m.is_finite() {
                    mean_sum[i] += m;
                } else {
                    overflow[i] = true;
                }
            }
        }
        if let (Some(acc), Some(mlp)) = (mark_sum.as_mut(), fwd.mark_logp) {
            let v = g.value(mlp);
            for si in 0..s {
                for (i, row) in acc.iter_mut().enumerate() {
                    for (cc, a) in row.iter_mut().enumerate() {
                        *a += v[[0, si, i, cc]].exp();
                    }
                }
            }
        }
        done += n;
    }
    let denom = total as f64;
    Ok(SequencePrediction {
        mean_dt: mean_sum
            .iter()
            .zip(&overflow)
            .map(|(&m, &o)| (!o).then_some(m / denom))
            .collect(),
        logp: logps.iter().map(|v| logmeanexp(v)).collect(),
        mark_probs: mark_sum.map(|rows| {
            rows.into_iter()
                .map(|r| r.into_iter().map(|x| x / denom).collect())
                .collect()
        }),
    })
}

/// Additive statistics of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqStats {
    pub sq_err: f64,
    pub n_rmse: usize,
    pub nll: f64,
    pub n_nll: usize,
    pub correct: usize,
    pub n_acc: usize,
    /// Targets skipped because the predicted mean overflowed.
    pub skipped: usize,
}

impl SeqStats {
    fn add(&mut self, o: &SeqStats) {
        self.sq_err += o.sq_err;
        self.n_rmse += o.n_rmse;
        self.nll += o.nll;
        self.n_nll += o.n_nll;
        self.correct += o.correct;
        self.n_acc += o.n_acc;
        self.skipped += o.skipped;
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.n_rmse > 0).then(|| (self.sq_err / self.n_rmse as f64).sqrt())
    }

    pub fn mean_nll(&self) -> Option<f64> {
        (self.n_nll > 0).then(|| self.nll / self.n_nll as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.n_acc > 0).then(|| self.correct as f64 / self.n_acc as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores next-event predictions of one sequence.
pub fn sequence_stats(seq: &EventSequence, pred: &SequencePrediction) -> SeqStats {
    let dt = seq.inter_event_times();
    let mut s = SeqStats::default();
    for i in 0..seq.len() - 1 {
        match pred.mean_dt[i] {
            Some(m) => {
                s.sq_err += (m - dt[i + 1]).powi(2);
                s.n_rmse += 1;
            }
            None => s.skipped += 1,
        }
        s.nll -= pred.logp[i];
        s.n_nll += 1;
        if let (Some(probs), Some(_)) = (&pred.mark_probs, &seq.marks) {
            s.correct += usize::from(argmax(&probs[i]) == seq.mark(i + 1));
            s.n_acc += 1;
        }
    }
    s
}

fn par_sequences<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// Per-sequence statistics of the whole dataset.
pub fn evaluate_stats(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<Vec<SeqStats>> {
    par_sequences(data.len(), |i| {
        let mut rng = Rng::stream(opts.seed, i as u64);
        let seq = &data.sequences[i];
        let pred = predict_sequence(model, seq, opts.samples, opts.chunk, &mut rng)?;
        Ok(sequence_stats(seq, &pred))
    })
}

pub fn total(stats: &[SeqStats]) -> SeqStats {
    let mut t = SeqStats::default();
    stats.iter().for_each(|s| t.add(s));
    t
}

/// Mean negative log-likelihood per target event.
pub fn eval_nll(model: &Model, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
    let opts = EvalOptions {
        samples,
        seed,
        ..Default::default()
    };
    Ok(total(&evaluate_stats(model, data, &opts)?)
        .mean_nll()
        .unwrap_or(f64::NAN))
}

pub fn eval_rmse(model: &Model, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
    let opts = EvalOptions {
        samples,
        seed,
        ..Default::default()
    };
    Ok(total(&evaluate_stats(model, data, &opts)?)
        .rmse()
        .unwrap_or(f64::NAN))
}

/// Next-mark accuracy; `None` for unmarked data.
pub fn eval_accuracy(
    model: &Model,
    data: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let opts = EvalOptions {
        samples,
        seed,
        ..Default::default()
    };
    Ok(total(&evaluate_stats(model, data, &opts)?).accuracy())
}

/// Mean and standard deviation (population) of a bootstrap distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> Option<MeanStd> {
    if v.is_empty() {
        return None;
    }
    // Deviations from the first value keep the spread of identical
    // values exactly zero.
    let n = v.len() as f64;
    let shift = v[0];
    let d_mean = v.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - shift - d_mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean: shift + d_mean,
        std: var.sqrt(),
    })
}

/// Bootstrap summary of cached per-sequence statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Bootstrap {
    pub rmse: Option<MeanStd>,
    pub nll: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    pub n_resamples: usize,
}

/// Resamples sequences with replacement `n_resamples` times and
/// recomputes event-weighted metrics from the cached sums.
pub fn bootstrap(stats: &[SeqStats], n_resamples: usize, seed: u64) -> Bootstrap {
    let mut rng = Rng::new(seed);
    let (mut rmse, mut nll, mut acc) = (Vec::new(), Vec::new(), Vec::new());
    if !stats.is_empty() {
        for _ in 0..n_resamples {
            let mut t = SeqStats::default();
            for _ in 0..stats.len() {
                t.add(&stats[rng.below(stats.len())]);
            }
            rmse.extend(t.rmse());
            nll.extend(t.mean_nll());
            acc.extend(t.accuracy());
        }
    }
    Bootstrap {
        rmse: mean_std(&rmse),
        nll: mean_std(&nll),
        accuracy: mean_std(&acc),
        n_resamples,
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub dataset: String,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub nll_mean: Option<f64>,
    pub nll_std: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub n_resamples: usize,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    /// Point estimates on the full set, without resampling.
    pub rmse: Option<f64>,
    pub nll: Option<f64>,
    pub accuracy: Option<f64>,
    pub events: usize,
    pub skipped: usize,
}

impl MetricReport {
    pub fn from_stats(
        variant: &str,
        dataset: &str,
        stats: &[SeqStats],
        n_resamples: usize,
        seed: u64,
        m: usize,
    ) -> Self {
        let b = bootstrap(stats, n_resamples, seed);
        let t = total(stats);
        Self {
            variant: variant.to_string(),
            dataset: dataset.to_string(),
            rmse_mean: b.rmse.map(|x| x.mean),
            rmse_std: b.rmse.map(|x| x.std),
            nll_mean: b.nll.map(|x| x.mean),
            nll_std: b.nll.map(|x| x.std),
            acc_mean: b.accuracy.map(|x| x.mean),
            acc_std: b.accuracy.map(|x| x.std),
            n_resamples,
            seed,
            m,
            rmse: t.rmse(),
            nll: t.mean_nll(),
            accuracy: t.accuracy(),
            events: t.n_rmse + t.skipped,
            skipped: t.skipped,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Full evaluation with bootstrap.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    opts: &EvalOptions,
    n_resamples: usize,
) -> Result<MetricReport> {
    let stats = evaluate_stats(model, data, opts)?;
    Ok(MetricReport::from_stats(
        model.variant().name(),
        &data.name,
        &stats,
        n_resamples,
        opts.seed,
        opts.samples,
    ))
}

/// Predictions of the running-median baseline: for each position `l >= 1`
/// (0-based) the median of the gaps observed so far, excluding the gap
/// from time 0, predicts the next gap.
pub fn naive_predictions(seq: &EventSequence) -> Vec<(f64, f64)> {
    let t = &seq.times;
    let mut sorted: Vec<f64> = Vec::with_capacity(t.len());
    let mut out = Vec::new();
    for l in 1..t.len().saturating_sub(1) {
        let gap = t[l] - t[l - 1];
        let pos = sorted.partition_point(|&x| x < gap);
        sorted.insert(pos, gap);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        out.push((median, t[l + 1] - t[l]));
    }
    out
}

pub fn naive_stats(data: &Dataset) -> Vec<SeqStats> {
    data.sequences
        .iter()
        .map(|s| {
            let mut st = SeqStats::default();
            for (pred, target) in naive_predictions(s) {
                st.sq_err += (pred - target).powi(2);
                st.n_rmse += 1;
            }
            st
        })
        .collect()
}

/// RMSE-only report for the median baseline.
pub fn naive_report(data: &Dataset, n_resamples: usize, seed: u64) -> MetricReport {
    let stats = naive_stats(data);
    let mut r = MetricReport::from_stats("naive", &data.name, &stats, n_resamples, seed, 0);
    r.nll_mean = None;
    r.nll_std = None;
    r.nll = None;
    r
}

/// Imputation statistics of one sequence: every dropped event is
/// predicted from the last observed event before it, using only the
/// observed history up to that event.
pub fn imputation_stats(
    model: &Model,
    seq: &EventSequence,
    ratio: f64,
    opts: &EvalOptions,
    rng: &mut Rng,
) -> Result<SeqStats> {
    let (obs, dropped) = drop_events(seq, ratio, rng);
    let mut st = SeqStats::default();
    if dropped.is_empty() {
        return Ok(st);
    }
    let pred = predict_sequence(model, &obs, opts.samples, opts.chunk, rng)?;
    for d in dropped {
        let tau = seq.times[d];
        let j = obs.times.partition_point(|&t| t < tau);
        if j == 0 {
            st.skipped += 1;
            continue;
        }
        match pred.mean_dt[j - 1] {
            Some(m) => {
                st.sq_err += (m - (tau - obs.times[j - 1])).powi(2);
                st.n_rmse += 1;
            }
            None => st.skipped += 1,
        }
    }
    Ok(st)
}

pub fn imputation_eval(
    model: &Model,
    data: &Dataset,
    ratio: f64,
    opts: &EvalOptions,
    n_resamples: usize,
) -> Result<MetricReport> {
    let stats = par_sequences(data.len(), |i| {
        let mut rng = Rng::stream(opts.seed, i as u64);
        imputation_stats(model, &data.sequences[i], ratio, opts, &mut rng)
    })?;
    let mut r = MetricReport::from_stats(
        model.variant().name(),
        &data.name,
        &stats,
        n_resamples,
        opts.seed,
        opts.samples,
    );
    r.nll_mean = None;
    r.nll_std = None;
    r.nll = None;
    Ok(r)
}

/// One report per dataset, in the order given.
pub fn drift_eval(
    model: &Model,
    datasets: &[Dataset],
    opts: &EvalOptions,
    n_resamples: usize,
) -> Result<Vec<MetricReport>> {
    datasets
        .iter()
        .map(|d| evaluate(model, d, opts, n_resamples))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_start: f64,
    pub target_count: usize,
    pub predicted_count: usize,
}

/// Histogram of target and predicted event times over bins of
/// `bin_width` starting at 0. Every bin up to the latest event is
/// emitted, including empty ones.
pub fn binned_counts(target: &[f64], predicted: &[f64], bin_width: f64) -> Vec<BinRow> {
    assert!(bin_width > 0.0, "bin width must be positive");
    let last = target
        .iter()
        .chain(predicted)
        .copied()
        .fold(0.0f64, f64::max);
    let n = (last / bin_width).floor() as usize + 1;
    let mut rows: Vec<BinRow> = (0..n)
        .map(|i| BinRow {
            bin_start: i as f64 * bin_width,
            target_count: 0,
            predicted_count: 0,
        })
        .collect();
    let bin = |t: f64| ((t.max(0.0) / bin_width).floor() as usize).min(n - 1);
    for &t in target {
        rows[bin(t)].target_count += 1;
    }
    for &t in predicted {
        rows[bin(t)].predicted_count += 1;
    }
    rows
}

/// Target times `tau_2..tau_L` of every sequence and the model's
/// predicted times `tau_l + E[dt]`, pairs with an overflowing mean
/// dropped.
pub fn predicted_times(
    model: &Model,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per_seq = par_sequences(data.len(), |i| {
        let mut rng = Rng::stream(opts.seed, i as u64);
        let s = &data.sequences[i];
        let pred = predict_sequence(model, s, opts.samples, opts.chunk, &mut rng)?;
        let mut pairs = Vec::new();
        for l in 0..s.len() - 1 {
            if let Some(m) = pred.mean_dt[l] {
                pairs.push((s.times[l + 1], s.times[l] + m));
            }
        }
        Ok(pairs)
    })?;
    Ok(per_seq.into_iter().flatten().unzip())
}

pub fn write_bins_csv(path: impl AsRef<Path>, rows: &[BinRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
