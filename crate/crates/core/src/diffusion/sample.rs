use rand::Rng;
use rand_distr::StandardNormal;

use super::denoiser::predict_noise;
use super::train::TrainedModel;
use crate::error::{Error, Result};
use crate::features::ConditionSet;
use crate::od::ODMatrix;

/// Supplies the Gaussian draws of a reverse chain: first the N×N start
/// state, then one N×N draw per noisy step, from `t = T` downwards.
pub trait NoiseSource {
    fn draw(&mut self, len: usize) -> Vec<f64>;
}

pub struct RngNoise<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn draw(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.0.sample(StandardNormal)).collect()
    }
}

/// Re-indexes another source's N×N draws: entry `(i, j)` takes the inner
/// draw at `(perm[i], perm[j])`.
pub struct PermutedNoise<S> {
    pub inner: S,
    pub perm: Vec<usize>,
}

impl<S: NoiseSource> NoiseSource for PermutedNoise<S> {
    fn draw(&mut self, len: usize) -> Vec<f64> {
        let raw = self.inner.draw(len);
        let n = self.perm.len();
        assert_eq!(len, n * n, "permuted noise needs square draws");
        let mut out = vec![0.0; len];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = raw[self.perm[i] * n + self.perm[j]];
            }
        }
        out
    }
}

/// Runs the reverse chain and returns the final continuous state.
pub fn sample_state(
    m: &TrainedModel,
    cond: &ConditionSet,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    if cond.cols() != m.model.config.cond_dim {
        return Err(Error::Validation(format!(
            "conditions have {} columns, the model was trained on {}",
            cond.cols(),
            m.model.config.cond_dim
        )));
    }
    let n = cond.n();
    let sch = &m.schedule;
    let mut z = noise.draw(n * n);
    for t in (1..=sch.steps()).rev() {
        let eps_hat = predict_noise(&m.model, &z, t, cond)?;
        let mean = sch.reverse_mean(t, &z, &eps_hat);
        z = if t > 1 {
            let sd = sch.reverse_variance(t, m.variance).sqrt();
            let e = noise.draw(n * n);
            mean.iter().zip(&e).map(|(mu, e)| mu + sd * e).collect()
        } else {
            mean
        };
    }
    Ok(z)
}

pub fn generate_with_noise(
    m: &TrainedModel,
    cond: &ConditionSet,
    noise: &mut dyn NoiseSource,
) -> Result<ODMatrix> {
    let z = sample_state(m, cond, noise)?;
    m.codec.decode(cond.region_ids.clone(), &z)
}

pub fn generate<R: Rng + ?Sized>(
    m: &TrainedModel,
    cond: &ConditionSet,
    rng: &mut R,
) -> Result<ODMatrix> {
    generate_with_noise(m, cond, &mut RngNoise(rng))
}
