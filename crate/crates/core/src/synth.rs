//! Synthetic point processes and corruption utilities.

use std::f64::consts::PI;

use metatpp_autograd::Rng;

use crate::data::{Dataset, EventSequence};

/// Samples an inhomogeneous Poisson process on `[t0, t1)` by thinning a
/// homogeneous process of rate `lambda_max`, which must bound `intensity`.
pub fn thinning(
    intensity: impl Fn(f64) -> f64,
    lambda_max: f64,
    t0: f64,
    t1: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = t0;
    loop {
        t += rng.exponential(lambda_max);
        if t >= t1 {
            return out;
        }
        if rng.uniform() * lambda_max <= intensity(t) {
            out.push(t);
        }
    }
}

/// Parameters of the sinusoidal generator.
#[derive(Clone, Debug)]
pub struct SinusoidalConfig {
    pub n_sequences: usize,
    pub horizon: f64,
    pub min_count: u64,
    pub max_count: u64,
    /// Phase added inside the sine, used to build drifted variants.
    pub phase: f64,
}

impl Default for SinusoidalConfig {
    fn default() -> Self {
        Self {
            n_sequences: 1000,
            horizon: 32.0 * PI,
            min_count: 20,
            max_count: 200,
            phase: 0.0,
        }
    }
}

/// Offset of the intensity relative to its base rate.
pub const SINE_FLOOR: f64 = 0.01;

/// `c (1 + sin(t/2 + phase)) / 2 + 0.01 c`.
pub fn sinusoidal_intensity(t: f64, c: f64, phase: f64) -> f64 {
    c * (1.0 + (t / 2.0 + phase).sin()) / 2.0 + SINE_FLOOR * c
}

/// Base rate giving `target` expected events over a horizon spanning
/// whole periods of the sine.
pub fn sinusoidal_rate(target: f64, horizon: f64) -> f64 {
    target / ((0.5 + SINE_FLOOR) * horizon)
}

pub fn generate_sinusoidal(cfg: &SinusoidalConfig, seed: u64) -> Dataset {
    let mut sequences = Vec::with_capacity(cfg.n_sequences);
    for i in 0..cfg.n_sequences {
        let mut rng = Rng::stream(seed, i as u64);
        let target = rng.int_inclusive(cfg.min_count, cfg.max_count) as f64;
        let c = sinusoidal_rate(target, cfg.horizon);
        let times = loop {
            let t = thinning(
                |t| sinusoidal_intensity(t, c, cfg.phase),
                c * (1.0 + SINE_FLOOR),
                0.0,
                cfg.horizon,
                &mut rng,
            );
            if t.len() >= 2 {
                break t;
            }
        };
        let mut s = EventSequence::new(format!("sin{i}"), times);
        s.t_end = Some(cfg.horizon);
        sequences.push(s);
    }
    Dataset::new("sinusoidal", 1, sequences)
}

/// Homogeneous Poisson sequences on `[0, horizon)` with marks drawn
/// uniformly from `num_marks` classes (unmarked when `num_marks == 1`).
pub fn generate_poisson(n: usize, rate: f64, horizon: f64, num_marks: usize, seed: u64) -> Dataset {
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::stream(seed, i as u64);
        let times = loop {
            let t = thinning(|_| rate, rate, 0.0, horizon, &mut rng);
            if t.len() >= 2 {
                break t;
            }
        };
        let mut s = EventSequence::new(format!("poi{i}"), times);
        if num_marks > 1 {
            let marks = (0..s.len()).map(|_| rng.below(num_marks)).collect();
            s = s.with_marks(marks);
        }
        s.t_end = Some(horizon);
        sequences.push(s);
    }
    Dataset::new("poisson", num_marks, sequences)
}

/// Drops each event independently with probability `ratio`, redrawing
/// until at least two events remain. Returns the observed sequence and the
/// sorted indices of the dropped events.
pub fn drop_events(seq: &EventSequence, ratio: f64, rng: &mut Rng) -> (EventSequence, Vec<usize>) {
    assert!((0.0..1.0).contains(&ratio), "drop ratio must be in [0, 1)");
    if ratio == 0.0 {
        return (seq.clone(), Vec::new());
    }
    loop {
        let keep: Vec<bool> = (0..seq.len()).map(|_| rng.uniform() >= ratio).collect();
        if keep.iter().filter(|&&k| k).count() < 2 {
            continue;
        }
        let mut obs = EventSequence::new(seq.id.clone(), Vec::new());
        obs.t_end = seq.t_end;
        let mut marks = Vec::new();
        let mut dropped = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                obs.times.push(seq.times[i]);
                marks.push(seq.mark(i));
            } else {
                dropped.push(i);
            }
        }
        if seq.marks.is_some() {
            obs.marks = Some(marks);
        }
        return (obs, dropped);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_matches_target_count() {
        // Integral of the intensity over whole periods is c * T * (1/2 + floor).
        let c = sinusoidal_rate(100.0, 32.0 * PI);
        let n = 200_000;
        let h = 32.0 * PI / n as f64;
        let integral: f64 = (0..n)
            .map(|i| sinusoidal_intensity((i as f64 + 0.5) * h, c, 0.0) * h)
            .sum();
        assert!((integral - 100.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn ratio_zero_is_identity() {
        let s = EventSequence::new("a", vec![0.5, 1.0, 2.0]);
        let (o, d) = drop_events(&s, 0.0, &mut Rng::new(1));
        assert_eq!(o, s);
        assert!(d.is_empty());
    }
}
