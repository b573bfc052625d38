//! Renewal sampling grids on a finite horizon.
//!
//! Inter-arrival gaps `xi_i` are i.i.d., almost surely positive, with closed
//! form moments. At sampling rate `n` the arrival times are
//!
//! ```text
//! tau_k = (xi_1 + ... + xi_k) / n,    k = 0, 1, 2, ...
//! ```
//!
//! A grid keeps every arrival with `tau_k <= T` (inclusive), plus `tau_0 = 0`
//! and the first overshoot `tau_{N+1} > T`. `pi(t)` is the last arrival at or
//! before `t`; the long-run mean of the age `t - pi(t)` is
//! `M = E[xi^2] / (2 E[xi])`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Uniform};
use thiserror::Error;

use crate::streams;

#[derive(Debug, Error)]
pub enum RenewalError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Inter-arrival gap law. Every variant is almost surely positive and has
/// finite moments of all orders.
#[derive(Debug, Clone, PartialEq)]
pub enum Interarrival {
    /// Every gap equals `a` (periodic sampling).
    Deterministic { a: f64 },
    /// Uniform on [a, b] with 0 <= a < b.
    Uniform { a: f64, b: f64 },
    /// Exponential with the given rate (mean 1/rate).
    Exponential { rate: f64 },
    /// Gamma with shape `k` and scale `theta` (mean k*theta).
    Gamma { shape: f64, scale: f64 },
}

/// Moment summary of a gap law.
///
/// `mean_age` is the long-run time average of `t - pi(t)`, equal to
/// `second_moment / (2 mean)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenewalConstants {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
    pub mean_age: f64,
}

impl Interarrival {
    /// Parameter validation. With `strict_positive` set, laws that place mass
    /// arbitrarily close to zero boundary points are still fine, but a Uniform
    /// left endpoint of exactly zero is rejected.
    pub fn validate(&self, strict_positive: bool) -> Result<(), RenewalError> {
        let bad = |msg: String| Err(RenewalError::Parameter(msg));
        match *self {
            Interarrival::Deterministic { a } => {
                if !(a.is_finite() && a > 0.0) {
                    return bad(format!("Deterministic gap must be positive, got {a}"));
                }
            }
            Interarrival::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && a >= 0.0 && a < b) {
                    return bad(format!("Uniform requires 0 <= a < b, got a={a}, b={b}"));
                }
                if strict_positive && a == 0.0 {
                    return bad("Uniform left endpoint 0 rejected under strict positivity".into());
                }
            }
            Interarrival::Exponential { rate } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return bad(format!("Exponential rate must be positive, got {rate}"));
                }
            }
            Interarrival::Gamma { shape, scale } => {
                if !(shape.is_finite() && scale.is_finite() && shape > 0.0 && scale > 0.0) {
                    return bad(format!(
                        "Gamma requires positive shape and scale, got shape={shape}, scale={scale}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// k-th raw moment E[xi^k], closed form, k in 1..=4.
    pub fn moment(&self, k: u32) -> f64 {
        assert!((1..=4).contains(&k), "moments available for k = 1..=4");
        let k_f = f64::from(k);
        match *self {
            Interarrival::Deterministic { a } => a.powi(k as i32),
            Interarrival::Uniform { a, b } => {
                // E[xi^k] = (b^{k+1} - a^{k+1}) / ((k+1)(b-a))
                (b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / ((k_f + 1.0) * (b - a))
            }
            Interarrival::Exponential { rate } => {
                let mut fact = 1.0;
                for j in 2..=k {
                    fact *= f64::from(j);
                }
                fact / rate.powi(k as i32)
            }
            Interarrival::Gamma { shape, scale } => {
                let mut prod = 1.0;
                for j in 0..k {
                    prod *= shape + f64::from(j);
                }
                prod * scale.powi(k as i32)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    /// Closed-form renewal constants; errors on invalid parameters.
    pub fn constants(&self) -> Result<RenewalConstants, RenewalError> {
        self.validate(false)?;
        let mean = self.moment(1);
        let second_moment = self.moment(2);
        Ok(RenewalConstants {
            mean,
            second_moment,
            variance: second_moment - mean * mean,
            mean_age: second_moment / (2.0 * mean),
        })
    }

    fn sampler(&self) -> GapSampler {
        match *self {
            Interarrival::Deterministic { a } => GapSampler::Deterministic(a),
            Interarrival::Uniform { a, b } => GapSampler::Uniform(Uniform::new(a, b)),
            Interarrival::Exponential { rate } => {
                GapSampler::Exponential(Exp::new(rate).expect("validated rate"))
            }
            Interarrival::Gamma { shape, scale } => {
                GapSampler::Gamma(Gamma::new(shape, scale).expect("validated shape/scale"))
            }
        }
    }
}

enum GapSampler {
    Deterministic(f64),
    Uniform(Uniform<f64>),
    Exponential(Exp<f64>),
    Gamma(Gamma<f64>),
}

impl GapSampler {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        // Redraw on an exact zero so every realized gap is strictly positive.
        loop {
            let xi = match self {
                GapSampler::Deterministic(a) => *a,
                GapSampler::Uniform(d) => d.sample(rng),
                GapSampler::Exponential(d) => d.sample(rng),
                GapSampler::Gamma(d) => d.sample(rng),
            };
            if xi > 0.0 {
                return xi;
            }
        }
    }
}

/// Realized renewal sampling grid at rate `n` on `[0, T]`.
///
/// Gaps are accumulated in unscaled units (`xi_1 + ... + xi_k` compared with
/// `n*T`) so that grids built at `(n, T)` and `(1, n*T)` from one seed count
/// the same arrivals exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    n: u64,
    horizon: f64,
    times: Vec<f64>,
    overshoot: f64,
    xi_total: f64,
}

/// Generation cap; a grid denser than this indicates a mis-scaled law.
const MAX_ARRIVALS: u64 = 1 << 33;

/// Draws a grid for `dist` at rate `n` on `[0, T]`. Deterministic in
/// `(dist, n, T, seed)`. `T = 0` yields the trivial grid `{0}`.
pub fn sample_grid(
    dist: &Interarrival,
    n: u64,
    horizon: f64,
    seed: u64,
) -> Result<SamplingGrid, RenewalError> {
    dist.validate(false)?;
    if n == 0 {
        return Err(RenewalError::Parameter("n must be >= 1".into()));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(RenewalError::Parameter(format!(
            "horizon must be finite and non-negative, got {horizon}"
        )));
    }
    let sampler = dist.sampler();
    let mut rng = streams::rng(seed, streams::GRID_CHANNEL);
    let nf = n as f64;
    let unscaled_horizon = nf * horizon;
    let mut times = vec![0.0];
    let mut unscaled = 0.0_f64;
    let mut drawn: u64 = 0;
    let overshoot = loop {
        let xi = sampler.draw(&mut rng);
        drawn += 1;
        if drawn > MAX_ARRIVALS {
            return Err(RenewalError::Parameter(format!(
                "grid exceeds {MAX_ARRIVALS} arrivals on [0, {horizon}]"
            )));
        }
        unscaled += xi;
        let t = (unscaled / nf).min(horizon);
        if unscaled <= unscaled_horizon {
            debug_assert!(t > *times.last().unwrap(), "arrival times must increase");
            times.push(t);
        } else {
            break unscaled / nf;
        }
    };
    Ok(SamplingGrid {
        n,
        horizon,
        times,
        overshoot,
        xi_total: unscaled,
    })
}

impl SamplingGrid {
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Arrival times `tau_0 = 0 < tau_1 < ... <= T`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of arrivals in `(0, T]`.
    pub fn count(&self) -> u64 {
        (self.times.len() - 1) as u64
    }

    /// First arrival beyond the horizon, `tau_{N+1} > T`.
    pub fn overshoot(&self) -> f64 {
        self.overshoot
    }

    /// Unscaled stopped sum `xi_1 + ... + xi_{N+1}` (the Wald statistic).
    pub fn xi_total(&self) -> f64 {
        self.xi_total
    }

    /// Last arrival at or before `t` (inclusive).
    pub fn pi_of(&self, t: f64) -> Result<f64, RenewalError> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(RenewalError::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        let idx = self.times.partition_point(|&tau| tau <= t);
        Ok(self.times[idx - 1])
    }

    /// Exact value of `integral_0^T (s - pi(s))^p ds`, summed in closed form
    /// over full gaps plus the final partial interval.
    pub fn mean_age_integral(&self, p: f64) -> Result<f64, RenewalError> {
        if !(p.is_finite() && p > 0.0) {
            return Err(RenewalError::Domain(format!("p must be positive, got {p}")));
        }
        let q = p + 1.0;
        let mut acc = 0.0;
        for w in self.times.windows(2) {
            acc += (w[1] - w[0]).powf(q) / q;
        }
        let last = *self.times.last().unwrap();
        acc += (self.horizon - last).powf(q) / q;
        Ok(acc)
    }
}
