use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{posterior_params, predict_x, DiffusionError, NoiseSchedule};
use crate::nets::{Denoiser, GraphBatch};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::rotation::zero_cog_noise;
use crate::scalar::Real;

/// Anything that predicts `ε` from `(z_t, t)` on a graph batch.
pub trait NoiseModel<T: Real> {
    /// Raw prediction, `[N, D]`; the coordinate block need not be centred.
    #[allow(clippy::too_many_arguments)]
    fn predict_noise(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        z: Var,
        t: &[usize],
        big_t: usize,
        cond: Option<&Tensor<T>>,
    ) -> Var;
}

impl<T: Real> NoiseModel<T> for Denoiser {
    fn predict_noise(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        z: Var,
        t: &[usize],
        big_t: usize,
        cond: Option<&Tensor<T>>,
    ) -> Var {
        self.forward(g, store, batch, z, t, big_t, cond)
    }
}

/// Latent `z_t` of a batch at step `t`; columns `0..3` are `z_x`, the rest `z_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub z: Tensor<T>,
    pub t: usize,
}

impl<T: Real> LatentState<T> {
    pub fn z_x(&self) -> Tensor<T> {
        slice_cols(&self.z, 0, 3)
    }

    pub fn z_h(&self) -> Tensor<T> {
        slice_cols(&self.z, 3, self.z.cols())
    }
}

fn slice_cols<T: Real>(x: &Tensor<T>, a: usize, b: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.rows() * (b - a));
    for i in 0..x.rows() {
        data.extend_from_slice(&x.row(i)[a..b]);
    }
    Tensor::from_vec(&[x.rows(), b - a], data)
}

/// `[N, D]` noise: zero-CoG per molecule on columns `0..3`, standard normal elsewhere.
pub fn latent_noise<T: Real>(batch: &GraphBatch, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    assert!(dim >= 3, "latent carries three coordinate columns");
    let mut out = Tensor::zeros(&[batch.num_nodes(), dim]);
    for (&off, &n) in batch.offsets().iter().zip(batch.sizes()) {
        let ex = zero_cog_noise::<T>(n, rng);
        for i in 0..n {
            out.row_mut(off + i)[..3].copy_from_slice(ex.row(i));
            for k in 3..dim {
                out.set(off + i, k, T::c(rng.sample::<f64, _>(StandardNormal)));
            }
        }
    }
    out
}

/// Centre the coordinate block of a `[N, D]` prediction per molecule.
pub fn cog_correct<T: Real>(g: &mut Graph<T>, batch: &GraphBatch, eps: Var) -> Var {
    let d = g.value(eps).cols();
    let x = g.slice_cols(eps, 0, 3);
    let x = batch.center(g, x);
    if d == 3 {
        return x;
    }
    let h = g.slice_cols(eps, 3, d);
    g.concat_cols(&[x, h])
}

/// Step and noise draws for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    /// One step per molecule, uniform on `0..=T`.
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

pub fn draw_noise<T: Real>(batch: &GraphBatch, dim: usize, steps: usize, rng: &mut impl Rng) -> NoiseDraw<T> {
    let t = (0..batch.num_molecules()).map(|_| rng.random_range(0..=steps)).collect();
    NoiseDraw {
        t,
        eps: latent_noise(batch, dim, rng),
    }
}

/// `α_t z + σ_t ε` with per-molecule `t`.
pub fn forward_noise<T: Real>(schedule: &NoiseSchedule<T>, batch: &GraphBatch, z: &Tensor<T>, draw: &NoiseDraw<T>) -> Tensor<T> {
    let mut out = z.clone();
    let node_mol = batch.node_mol();
    for i in 0..z.rows() {
        let t = draw.t[node_mol[i]];
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for (o, &e) in out.row_mut(i).iter_mut().zip(draw.eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    out
}

/// `Σ_m (1/B)(1/N_m) Σ_i ‖ε_i − ε̂_i‖²` for a fixed draw.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_with<T: Real, M: NoiseModel<T>>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &M,
    schedule: &NoiseSchedule<T>,
    batch: &GraphBatch,
    latents: &Tensor<T>,
    draw: &NoiseDraw<T>,
    cond: Option<&Tensor<T>>,
) -> Var {
    let zt = g.constant(forward_noise(schedule, batch, latents, draw));
    let raw = model.predict_noise(g, store, batch, zt, &draw.t, schedule.steps(), cond);
    let eps_hat = cog_correct(g, batch, raw);
    let target = g.constant(draw.eps.clone());
    let b = T::c(batch.num_molecules() as f64);
    let w: Vec<T> = batch.node_weights::<T>().iter().map(|&w| w / b).collect();
    g.squared_error(eps_hat, target, w.into())
}

/// Noise-prediction loss with a fresh draw of steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Real, M: NoiseModel<T>>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &M,
    schedule: &NoiseSchedule<T>,
    batch: &GraphBatch,
    latents: &Tensor<T>,
    rng: &mut impl Rng,
    cond: Option<&Tensor<T>>,
) -> Var {
    let draw = draw_noise(batch, latents.cols(), schedule.steps(), rng);
    training_loss_with(g, store, model, schedule, batch, latents, &draw, cond)
}

/// CoG-corrected `ε̂(z_t, t)` as a plain tensor.
pub fn predict_noise_tensor<T: Real, M: NoiseModel<T>>(
    model: &M,
    store: &ParamStore<T>,
    batch: &GraphBatch,
    z: &Tensor<T>,
    t: usize,
    big_t: usize,
    cond: Option<&Tensor<T>>,
) -> Tensor<T> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let ts = vec![t; batch.num_molecules()];
    let raw = model.predict_noise(&mut g, store, batch, zv, &ts, big_t, cond);
    let out = cog_correct(&mut g, batch, raw);
    g.value(out).clone()
}

/// One ancestral step `z_t → z_{t−1}`; the step into `s = 0` is the posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<T: Real, M: NoiseModel<T>>(
    schedule: &NoiseSchedule<T>,
    state: &LatentState<T>,
    model: &M,
    store: &ParamStore<T>,
    batch: &GraphBatch,
    rng: &mut impl Rng,
    cond: Option<&Tensor<T>>,
) -> Result<LatentState<T>, DiffusionError> {
    let t = state.t;
    if t == 0 {
        return Err(DiffusionError::StepOrder { s: 0, t: 0 });
    }
    let s = t - 1;
    let eps = predict_noise_tensor(model, store, batch, &state.z, t, schedule.steps(), cond);
    let x_hat = predict_x(schedule, &state.z, t, &eps);
    let (mu, var) = posterior_params(schedule, s, t, &state.z, &x_hat)?;
    let z = if s == 0 || var <= T::zero() {
        mu
    } else {
        let sd = var.sqrt();
        let noise = latent_noise::<T>(batch, state.z.cols(), rng);
        mu.zip_map(&noise, |m, e| m + sd * e)
    };
    if !z.is_finite() {
        return Err(DiffusionError::NonFinite(t));
    }
    Ok(LatentState { z, t: s })
}

/// Full chain from `z_T ~ N(0, I)`; returns `x̂_0 = x̂(z_0, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_latents<T: Real, M: NoiseModel<T>>(
    schedule: &NoiseSchedule<T>,
    model: &M,
    store: &ParamStore<T>,
    batch: &GraphBatch,
    dim: usize,
    rng: &mut impl Rng,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>, DiffusionError> {
    let mut state = LatentState {
        z: latent_noise(batch, dim, rng),
        t: schedule.steps(),
    };
    while state.t > 0 {
        state = reverse_step(schedule, &state, model, store, batch, rng, cond)?;
    }
    let eps = predict_noise_tensor(model, store, batch, &state.z, 0, schedule.steps(), cond);
    Ok(predict_x(schedule, &state.z, 0, &eps))
}
