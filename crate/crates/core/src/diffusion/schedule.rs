use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
    /// Squared-cosine ᾱ curve; βs are clipped into `[β_min, β_max]`.
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Usage(format!(
                "unknown schedule `{s}` (linear|cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// `beta[t-1]` is β_t for `t = 1..=T`; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(
    t_max: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if t_max == 1 => vec![beta_min],
        ScheduleKind::Linear => (0..t_max)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Domain("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Reverse-step mean from a noise estimate:
    /// `(z − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
    pub fn reverse_mean(&self, t: usize, z: &[f64], eps_hat: &[f64]) -> Vec<f64> {
        let c = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let s = self.alpha(t).sqrt();
        z.iter()
            .zip(eps_hat)
            .map(|(z, e)| (z - c * e) / s)
            .collect()
    }

    /// Reverse-step variance σ_t².
    pub fn reverse_variance(&self, t: usize, kind: ReverseVariance) -> f64 {
        match kind {
            ReverseVariance::Marginal => 1.0 - self.alpha_bar(t),
            ReverseVariance::Posterior => {
                self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
            }
        }
    }
}

/// Variance of each ancestral sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReverseVariance {
    /// `1 − ᾱ_t`.
    #[default]
    Marginal,
    /// `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

impl std::str::FromStr for ReverseVariance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(ReverseVariance::Marginal),
            "posterior" => Ok(ReverseVariance::Posterior),
            _ => Err(Error::Usage(format!(
                "unknown reverse variance `{s}` (marginal|posterior)"
            ))),
        }
    }
}

impl std::fmt::Display for ReverseVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReverseVariance::Marginal => "marginal",
            ReverseVariance::Posterior => "posterior",
        })
    }
}

/// Closed-form noising `√ᾱ_t z0 + √(1−ᾱ_t) ε`; returns the state and ε.
pub fn forward_sample<R: Rng + ?Sized>(
    z0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_step(t)?;
    let eps: Vec<f64> = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
    Ok((noised(z0, &eps, t, schedule), eps))
}

pub fn noised(z0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}
