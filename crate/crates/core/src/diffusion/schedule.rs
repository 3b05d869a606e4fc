use crate::config::ScheduleConfig;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Linear-β noise schedule indexed `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need T >= 2 and 0 < beta_start < beta_end < 1, got T={steps} [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// `steps` evenly strided timesteps in descending order, from `T`
    /// down to 1.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(invalid(format!("{steps} sampling steps for a {t_max}-step schedule")));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        Ok((0..steps)
            .rev()
            .map(|k| 1 + (k * (t_max - 1) + (steps - 1) / 2) / (steps - 1))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn q_sample_closed_forms() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let zero = Tensor::zeros([3]);
        let t = 300;
        let out = s.q_sample(&x, t, &zero).unwrap();
        assert_eq!(out, x.map(|v| s.alpha_bar(t).sqrt() * v));
        assert!(s.q_sample(&x, 0, &zero).is_err());
        assert!(s.q_sample(&x, 1001, &zero).is_err());
    }

    #[test]
    fn ddim_timesteps_span_the_schedule() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(s.ddim_timesteps(1001).is_err());
    }
}
