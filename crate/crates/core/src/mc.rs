//! Euler Monte Carlo for `dS = sigma_D(S) dW + mu(t) dt`.
//!
//! Paths are split into fixed-size batches; batch `i` draws from the ChaCha
//! stream `i` of the seed, so results do not depend on thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LocalVolModel, MarketSetup};
use crate::special::inverse_norm_cdf;

const BATCH: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSpec {
    pub n_paths: usize,
    pub steps_per_year: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McSpec {
    fn default() -> Self {
        Self { n_paths: 100_000, steps_per_year: 500, seed: 20_240_917, antithetic: true }
    }
}

impl McSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 || self.steps_per_year == 0 {
            return Err(Error::InvalidParameter("need n_paths >= 2 and steps_per_year >= 1".into()));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::InvalidParameter("antithetic runs need an even n_paths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Paths that left the positivity domain at least once.
    pub exits: usize,
}

/// Sums in a balanced tree, which keeps the rounding error logarithmic.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    // midpoint of one of 2^53 equal cells, never 0 or 1
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Count, mean and sum of squared deviations of one batch.
struct Batch {
    count: usize,
    mean: f64,
    m2: f64,
    exits: usize,
}

impl Batch {
    fn merge(self, o: Batch) -> Batch {
        let n = (self.count + o.count) as f64;
        let d = o.mean - self.mean;
        Batch {
            count: self.count + o.count,
            mean: self.mean + d * o.count as f64 / n,
            m2: self.m2 + o.m2 + d * d * self.count as f64 * o.count as f64 / n,
            exits: self.exits + o.exits,
        }
    }
}

/// Mean of `payoff(S_T)` with its standard error. With antithetic pairing
/// each sample is the average over a path and its mirror.
pub fn mc_estimate<P>(
    model: &LocalVolModel,
    setup: &MarketSetup,
    t: f64,
    spec: &McSpec,
    payoff: P,
) -> Result<McEstimate>
where
    P: Fn(f64) -> f64 + Sync,
{
    spec.validate()?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter("maturity must be positive".into()));
    }
    model.check_interval(setup.s0, setup.s0)?;
    let steps = ((spec.steps_per_year as f64 * t).ceil() as usize).max(1);
    let dt = t / steps as f64;
    let sq = dt.sqrt();
    let (lo, hi) = model.positivity_domain();
    let vol = |s: f64| -> (f64, bool) {
        if s <= lo || s >= hi {
            (model.eval(s.clamp(lo, hi)).max(0.0), true)
        } else {
            (model.eval(s), false)
        }
    };
    let samples = if spec.antithetic { spec.n_paths / 2 } else { spec.n_paths };
    let n_batches = samples.div_ceil(BATCH);

    let batches: Vec<Batch> = (0..n_batches)
        .into_par_iter()
        .map(|bi| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(bi as u64);
            let size = BATCH.min(samples - bi * BATCH);
            let mut vals = Vec::with_capacity(size);
            let mut exits = 0;
            let legs = if spec.antithetic { 2 } else { 1 };
            for _ in 0..size {
                let mut s = [setup.s0; 2];
                let mut out = [false; 2];
                for j in 0..steps {
                    let z = inverse_norm_cdf(uniform(&mut rng));
                    let drift = setup.forward((j + 1) as f64 * dt) - setup.forward(j as f64 * dt);
                    for leg in 0..legs {
                        let (v, o) = vol(s[leg]);
                        out[leg] |= o;
                        let w = if leg == 0 { z } else { -z };
                        s[leg] += v * sq * w + drift;
                    }
                }
                let mut acc = 0.0;
                for leg in 0..legs {
                    acc += payoff(s[leg]);
                    exits += out[leg] as usize;
                }
                vals.push(acc / legs as f64);
            }
            let mean = pairwise_sum(&vals) / size as f64;
            let dev: Vec<f64> = vals.iter().map(|v| (v - mean).powi(2)).collect();
            Batch { count: size, mean, m2: pairwise_sum(&dev), exits }
        })
        .collect();

    // Merged in batch order, so the result is independent of the thread count.
    let total = batches.into_iter().reduce(Batch::merge).expect("at least one batch");
    let var = total.m2 / (total.count - 1) as f64;
    Ok(McEstimate {
        mean: total.mean,
        std_error: (var / total.count as f64).sqrt(),
        exits: total.exits,
    })
}

/// Call price `E[(S_T - K)+]` by simulation.
pub fn mc_call(
    model: &LocalVolModel,
    setup: &MarketSetup,
    k: f64,
    t: f64,
    spec: &McSpec,
) -> Result<McEstimate> {
    mc_estimate(model, setup, t, spec, |s| (s - k).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bachelier::bachelier_call;

    fn small() -> McSpec {
        McSpec { n_paths: 20_000, steps_per_year: 50, seed: 7, antithetic: true }
    }

    #[test]
    fn constant_vol_atm() {
        let m = LocalVolModel::shifted_lognormal(0.01, 0.0, 0.03).unwrap();
        let s = MarketSetup::driftless(0.03);
        let e = mc_call(&m, &s, 0.03, 1.0, &small()).unwrap();
        let exact = bachelier_call(0.03, 0.03, 1.0, 0.01).unwrap();
        assert!((e.mean - exact).abs() < 3.0 * e.std_error, "{e:?} {exact}");
        assert_eq!(e.exits, 0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let m = LocalVolModel::quadratic_sabr(0.008, 0.4, -0.2, 0.03).unwrap();
        let s = MarketSetup::new(0.03, 0.002, 0.0).unwrap();
        let a = mc_call(&m, &s, 0.031, 0.5, &small()).unwrap();
        let b = mc_call(&m, &s, 0.031, 0.5, &small()).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        let c = mc_call(&m, &s, 0.031, 0.5, &McSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn forward_is_reproduced() {
        let m = LocalVolModel::shifted_lognormal(0.006, 0.1, 0.03).unwrap();
        let s = MarketSetup::new(0.03, 0.004, 0.001).unwrap();
        let spec = McSpec { antithetic: false, ..small() };
        let e = mc_estimate(&m, &s, 2.0, &spec, |x| x).unwrap();
        assert!((e.mean - s.forward(2.0)).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn error_halves_with_four_times_the_paths() {
        let m = LocalVolModel::shifted_lognormal(0.01, 0.0, 0.03).unwrap();
        let s = MarketSetup::driftless(0.03);
        let base = McSpec { n_paths: 10_000, steps_per_year: 4, seed: 3, antithetic: false };
        let a = mc_call(&m, &s, 0.03, 1.0, &base).unwrap();
        let b = mc_call(&m, &s, 0.03, 1.0, &McSpec { n_paths: 40_000, ..base }).unwrap();
        let r = a.std_error / b.std_error;
        assert!((r / 2.0 - 1.0).abs() < 0.2, "{r}");
    }

    #[test]
    fn exits_are_counted() {
        // sigma_D vanishes at S = 0.01; a coarse step overshoots it.
        let m = LocalVolModel::shifted_lognormal(-0.01, 0.5, 0.03).unwrap();
        let s = MarketSetup::driftless(0.03);
        let spec = McSpec { n_paths: 2_000, steps_per_year: 1, seed: 1, antithetic: true };
        let e = mc_call(&m, &s, 0.03, 4.0, &spec).unwrap();
        assert!(e.exits > 0);
        assert!(e.mean.is_finite());
    }

    #[test]
    fn invalid_specs() {
        let m = LocalVolModel::shifted_lognormal(0.01, 0.0, 0.03).unwrap();
        let s = MarketSetup::driftless(0.03);
        assert!(mc_call(&m, &s, 0.03, 1.0, &McSpec { n_paths: 3, ..small() }).is_err());
        assert!(mc_call(&m, &s, 0.03, 0.0, &small()).is_err());
    }
}
