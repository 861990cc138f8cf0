//! Log-normal mixtures evaluated outside the graph.

use metatpp_autograd::Rng;
use thiserror::Error;

use crate::kernels::{log_normal_tail, HALF_LN_2PI};

/// Largest exponent whose `exp` is finite in double precision.
const MAX_EXP: f64 = 709.78;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("mixture mean overflows: exponent {exponent}")]
pub struct MeanOverflow {
    pub exponent: f64,
}

/// One mixture over the next inter-event time.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub log_w: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn logsumexp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MixtureParams {
    pub fn new(weights: &[f64], mu: &[f64], sigma: &[f64]) -> Self {
        Self {
            log_w: weights.iter().map(|w| w.ln()).collect(),
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        }
    }

    pub fn components(&self) -> usize {
        self.mu.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|w| w.exp()).collect()
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        assert!(x > 0.0, "log-normal density needs x > 0");
        let lx = x.ln();
        logsumexp((0..self.components()).map(|k| {
            let u = (lx - self.mu[k]) / self.sigma[k];
            self.log_w[k] - self.sigma[k].ln() - HALF_LN_2PI - 0.5 * u * u - lx
        }))
    }

    pub fn logsurvival(&self, t: f64) -> f64 {
        assert!(t > 0.0, "survival needs t > 0");
        let lt = t.ln();
        logsumexp(
            (0..self.components())
                .map(|k| self.log_w[k] + log_normal_tail((lt - self.mu[k]) / self.sigma[k])),
        )
    }

    /// `sum_k w_k exp(mu_k + sigma_k^2 / 2)`.
    pub fn mean(&self) -> Result<f64, MeanOverflow> {
        let mut total = 0.0;
        for k in 0..self.components() {
            let e = self.log_w[k] + self.mu[k] + 0.5 * self.sigma[k] * self.sigma[k];
            if e > MAX_EXP {
                return Err(MeanOverflow { exponent: e });
            }
            total += e.exp();
        }
        if total.is_finite() {
            Ok(total)
        } else {
            Err(MeanOverflow {
                exponent: f64::INFINITY,
            })
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (c, w) in self.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                k = c;
                break;
            }
        }
        (self.mu[k] + self.sigma[k] * rng.normal()).exp()
    }
}

/// Closed-form `KL(N(mu_p, s_p^2) || N(mu_q, s_q^2))` summed over
/// dimensions.
pub fn kl_diag_gaussian(mu_p: &[f64], s_p: &[f64], mu_q: &[f64], s_q: &[f64]) -> f64 {
    (0..mu_p.len())
        .map(|d| {
            let r = s_p[d] / s_q[d];
            let m = (mu_p[d] - mu_q[d]) / s_q[d];
            -r.ln() + 0.5 * (r * r + m * m) - 0.5
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_lognormal_at_one() {
        let m = MixtureParams::new(&[1.0], &[0.0], &[1.0]);
        assert!((m.logpdf(1.0) + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((m.logsurvival(1.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((m.mean().unwrap() - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn mean_overflow_is_reported() {
        let m = MixtureParams::new(&[1.0], &[700.0], &[5.0]);
        assert!(m.mean().is_err());
    }
}
