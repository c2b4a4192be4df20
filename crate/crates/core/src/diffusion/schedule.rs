use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionError;
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Offset keeping `α_t²` inside `[s, 1 − s]`.
pub const SCHEDULE_PRECISION: f64 = 1e-5;

/// Below this `α_t` is clamped when inverting the forward process.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Polynomial,
    Cosine,
}

/// `α_t`, `σ_t` for `t = 0..=T` with `α_t² + σ_t² = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha2: Vec<T>,
    sigma2: Vec<T>,
    alpha: Vec<T>,
    sigma: Vec<T>,
}

/// `α_t² = (1 − 2s)·f(t/T) + s` with `f` decreasing from 1 to 0.
pub fn build_schedule<T: Real>(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule<T>, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::ZeroSteps);
    }
    let s = SCHEDULE_PRECISION;
    let f = |u: f64| -> f64 {
        match kind {
            ScheduleKind::Polynomial => (1.0 - u * u).powi(2),
            ScheduleKind::Cosine => {
                let off = 0.008;
                let c = |v: f64| ((v + off) / (1.0 + off) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                c(u) / c(0.0)
            }
        }
    };
    let alpha2 = (0..=steps)
        .map(|t| {
            let v = f(t as f64 / steps as f64).clamp(0.0, 1.0);
            T::c((1.0 - 2.0 * s) * v + s)
        })
        .collect();
    NoiseSchedule::from_alpha2(alpha2)
}

impl<T: Real> NoiseSchedule<T> {
    /// Schedule from explicit `α_t²` values (non-increasing, inside (0, 1)).
    pub fn from_alpha2(alpha2: Vec<T>) -> Result<Self, DiffusionError> {
        if alpha2.len() < 2 {
            return Err(DiffusionError::ZeroSteps);
        }
        if alpha2.iter().any(|&a| !(a > T::zero() && a < T::one())) {
            return Err(DiffusionError::InvalidSchedule("α² must lie in (0, 1)".into()));
        }
        if alpha2.windows(2).any(|w| w[1] > w[0]) {
            return Err(DiffusionError::InvalidSchedule("α² must be non-increasing".into()));
        }
        let sigma2: Vec<T> = alpha2.iter().map(|&a| T::one() - a).collect();
        Ok(Self {
            alpha: alpha2.iter().map(|a| a.sqrt()).collect(),
            sigma: sigma2.iter().map(|s| s.sqrt()).collect(),
            alpha2,
            sigma2,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha2.len() - 1
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigma[t]
    }

    pub fn alpha2(&self, t: usize) -> T {
        self.alpha2[t]
    }

    pub fn sigma2(&self, t: usize) -> T {
        self.sigma2[t]
    }

    pub fn snr(&self, t: usize) -> T {
        self.alpha2[t] / self.sigma2[t]
    }

    fn check(&self, s: usize, t: usize) -> Result<(), DiffusionError> {
        if s >= t || t > self.steps() {
            return Err(DiffusionError::StepOrder { s, t });
        }
        Ok(())
    }

    /// `(α_{t|s}, σ²_{t|s})` of `q(z_t | z_s)`.
    pub fn transition(&self, s: usize, t: usize) -> Result<(T, T), DiffusionError> {
        self.check(s, t)?;
        let a = self.alpha[t] / self.alpha[s];
        let v = (self.sigma2[t] - a * a * self.sigma2[s]).max(T::zero());
        Ok((a, v))
    }

    /// Coefficients of `q(z_s | z_t, x)`: `μ = c_z·z_t + c_x·x`, variance.
    pub fn posterior(&self, s: usize, t: usize) -> Result<PosteriorCoeffs<T>, DiffusionError> {
        let (a_ts, v_ts) = self.transition(s, t)?;
        let st2 = self.sigma2[t];
        Ok(PosteriorCoeffs {
            cz: a_ts * self.sigma2[s] / st2,
            cx: self.alpha[s] * v_ts / st2,
            var: v_ts * self.sigma2[s] / st2,
        })
    }

    /// `SNR(t−1)/SNR(t) − 1`.
    pub fn elbo_weight(&self, t: usize) -> Result<T, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::ElboStep(t));
        }
        Ok(self.snr(t - 1) / self.snr(t) - T::one())
    }

    /// Mean per-entry `KL(q(z_T | x) ‖ N(0, I))`.
    pub fn prior_kl(&self, x: &Tensor<T>) -> T {
        let t = self.steps();
        let (a2, s2) = (self.alpha2[t], self.sigma2[t]);
        let half = T::c(0.5);
        let total: T = x
            .data()
            .iter()
            .map(|&v| half * (s2 + a2 * v * v - T::one() - s2.ln()))
            .sum();
        total / T::c(x.len().max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs<T> {
    pub cz: T,
    pub cx: T,
    pub var: T,
}

pub fn transition_coeffs<T: Real>(schedule: &NoiseSchedule<T>, s: usize, t: usize) -> Result<(T, T), DiffusionError> {
    schedule.transition(s, t)
}

/// `(μ_{s|t}, σ²_{s|t})` of the forward-process posterior.
pub fn posterior_params<T: Real>(
    schedule: &NoiseSchedule<T>,
    s: usize,
    t: usize,
    z_t: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, T), DiffusionError> {
    let c = schedule.posterior(s, t)?;
    Ok((z_t.zip_map(x, |z, xv| c.cz * z + c.cx * xv), c.var))
}

/// `x̂ = z_t/α_t − (σ_t/α_t)·ε̂`.
pub fn predict_x<T: Real>(schedule: &NoiseSchedule<T>, z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>) -> Tensor<T> {
    let mut a = schedule.alpha(t);
    if a < T::c(ALPHA_FLOOR) {
        log::warn!("α_{t} = {a} below {ALPHA_FLOOR}; clamped");
        a = T::c(ALPHA_FLOOR);
    }
    let s = schedule.sigma(t);
    z_t.zip_map(eps_hat, |z, e| z / a - s / a * e)
}

pub fn elbo_terms<T: Real>(schedule: &NoiseSchedule<T>, t: usize) -> Result<T, DiffusionError> {
    schedule.elbo_weight(t)
}
