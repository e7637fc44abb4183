//! Forward noising and deterministic DDIM stepping on a linear beta schedule.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::seed;

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_TIMESTEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut prod = 1.0;
        let alpha_bars = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                prod *= 1.0 - beta;
                prod
            })
            .collect();
        Self { alpha_bars }
    }

    /// A schedule with given `alpha_bar` values, mostly for tests.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() || alpha_bars.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        Ok(Self { alpha_bars })
    }

    pub fn train_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    /// `alpha_bar` at a training timestep; `None` is the clean endpoint (1).
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    /// Leading spacing: `t_k = (N - 1 - k) * (T / N)`.
    pub fn sampler_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.train_steps();
        if steps == 0 || steps > t {
            return Err(Error::invalid(format!(
                "sampler steps must lie in 1..={t}, got {steps}"
            )));
        }
        let ratio = t / steps;
        Ok((0..steps).map(|k| (steps - 1 - k) * ratio).collect())
    }

    /// Standard-normal noise keyed by `(seed, t)`.
    pub fn noise(&self, shape: (usize, usize, usize), seed: u64, t: Option<usize>) -> Latent {
        let index = t.map_or(u64::MAX, |t| t as u64);
        let mut rng = seed::stream(seed, "noise", index);
        let mut out = Latent::zeros(shape.0, shape.1, shape.2);
        out.data.mapv_inplace(|_| rng.sample(StandardNormal));
        out
    }

    /// `sqrt(a) z0 + sqrt(1 - a) eps`.
    pub fn add_noise(&self, z0: &Latent, eps: &Latent, alpha_bar: f64) -> Latent {
        let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        Latent::from_array(&z0.data * a + &eps.data * b)
    }

    pub fn noise_latent(&self, z0: &Latent, t: Option<usize>, seed: u64) -> Latent {
        let eps = self.noise(z0.shape(), seed, t);
        self.add_noise(z0, &eps, self.alpha_bar(t))
    }

    /// Deterministic DDIM update from `t` to `t_prev` (`None` = clean endpoint).
    pub fn ddim_step(&self, latent: &Latent, eps: &Latent, t: usize, t_prev: Option<usize>) -> Latent {
        let a_t = self.alpha_bar(Some(t));
        let a_prev = self.alpha_bar(t_prev);
        let x0 = (&latent.data - &(&eps.data * (1.0 - a_t).sqrt())) / a_t.sqrt();
        Latent::from_array(x0 * a_prev.sqrt() + &eps.data * (1.0 - a_prev).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_decreasing_in_unit_interval() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_steps(), 1000);
        assert!(s.alpha_bar(Some(0)) < 1.0);
        for t in 1..1000 {
            assert!(s.alpha_bar(Some(t)) < s.alpha_bar(Some(t - 1)));
        }
        assert!(s.alpha_bar(Some(999)) > 0.0);
    }

    #[test]
    fn clean_endpoint_is_identity() {
        let s = NoiseSchedule::default();
        let mut z0 = Latent::zeros(2, 3, 3);
        z0.data.mapv_inplace(|_| 0.37);
        assert_eq!(s.noise_latent(&z0, None, 5), z0);
    }

    #[test]
    fn quarter_alpha_bar_hand_value() {
        let s = NoiseSchedule::default();
        let mut ones = Latent::zeros(1, 2, 2);
        ones.data.fill(1.0);
        let out = s.add_noise(&ones, &ones, 0.25);
        for v in out.data.iter() {
            assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed_and_timestep() {
        let s = NoiseSchedule::default();
        let z0 = Latent::zeros(4, 4, 4);
        assert_eq!(s.noise_latent(&z0, Some(500), 1), s.noise_latent(&z0, Some(500), 1));
        assert_ne!(s.noise_latent(&z0, Some(500), 1), s.noise_latent(&z0, Some(480), 1));
    }

    #[test]
    fn leading_timesteps() {
        let s = NoiseSchedule::default();
        let ts = s.sampler_timesteps(50).unwrap();
        assert_eq!((ts[0], ts[49], ts.len()), (980, 0, 50));
        assert!(s.sampler_timesteps(0).is_err());
    }

    #[test]
    fn ddim_recovers_clean_latent_with_true_noise() {
        let s = NoiseSchedule::default();
        let mut z0 = Latent::zeros(1, 2, 2);
        z0.data.mapv_inplace(|_| -0.4);
        let eps = s.noise((1, 2, 2), 9, Some(300));
        let zt = s.add_noise(&z0, &eps, s.alpha_bar(Some(300)));
        let back = s.ddim_step(&zt, &eps, 300, None);
        assert!((&back.data - &z0.data).iter().all(|d| d.abs() < 1e-12));
    }
}
