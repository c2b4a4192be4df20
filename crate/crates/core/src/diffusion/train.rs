use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{encode, AEState};
use crate::diffusion::{build_schedule, latent_noise, training_loss, NoiseSchedule, ScheduleKind};
use crate::molecules::Molecule;
use crate::nets::{Denoiser, DenoiserConfig, GraphBatch};
use crate::numcore::{clip_grad_norm, Adam, CosineSchedule, Graph, ParamStore, Tensor};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmConfig {
    pub denoiser: DenoiserConfig,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Optimiser iterations.
    pub iterations: usize,
    pub grad_clip: Option<f64>,
    /// Decay of the parameter moving average used for sampling.
    pub ema: Option<f64>,
    /// Divide the coordinate and feature blocks by their corpus RMS before
    /// diffusing.
    pub scale_latents: bool,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::dit_small(),
            steps: 1000,
            schedule: ScheduleKind::Polynomial,
            lr: 1e-4,
            lr_floor: 0.0,
            batch_size: 64,
            iterations: 10_000,
            grad_clip: Some(1.0),
            ema: None,
            scale_latents: true,
        }
    }
}

/// Per-block divisors mapping encoder latents to diffusion space: one for
/// the `[N, 3]` coordinate block, one for the feature block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScale {
    pub x: f64,
    pub h: f64,
}

impl Default for LatentScale {
    fn default() -> Self {
        Self { x: 1.0, h: 1.0 }
    }
}

impl LatentScale {
    /// RMS of each block over all atoms; an all-zero block keeps divisor 1.
    pub fn fit<T: Real>(mu: &[Tensor<T>]) -> Self {
        let (mut sx, mut nx, mut sh, mut nh) = (0.0, 0usize, 0.0, 0usize);
        for m in mu {
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    let v2 = v.f64() * v.f64();
                    if c < 3 {
                        sx += v2;
                        nx += 1;
                    } else {
                        sh += v2;
                        nh += 1;
                    }
                }
            }
        }
        let rms = |s: f64, n: usize| {
            let r = (s / n.max(1) as f64).sqrt();
            if r > 0.0 && r.is_finite() { r } else { 1.0 }
        };
        Self { x: rms(sx, nx), h: rms(sh, nh) }
    }

    fn apply<T: Real>(&self, z: &Tensor<T>, inverse: bool) -> Tensor<T> {
        let (fx, fh) = if inverse { (self.x, self.h) } else { (1.0 / self.x, 1.0 / self.h) };
        let (fx, fh) = (T::c(fx), T::c(fh));
        let w = z.cols();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= if i % w < 3 { fx } else { fh };
        }
        out
    }

    /// Encoder latent to diffusion space.
    pub fn normalize<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        self.apply(z, false)
    }

    /// Diffusion space back to the encoder latent.
    pub fn denormalize<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        self.apply(z, true)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LdmError {
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

/// Mean encodings of a corpus, the input to latent diffusion.
#[derive(Clone, Debug)]
pub struct LatentCorpus<T> {
    /// `[N_i, 3 + d']` per molecule.
    pub mu: Vec<Tensor<T>>,
    /// Latent noise scale of the encoder.
    pub sigma: f64,
    /// Standardised condition rows, one per molecule.
    pub cond: Option<Vec<Vec<f64>>>,
}

impl<T: Real> LatentCorpus<T> {
    /// Encode `mols` with the frozen encoder.
    pub fn encode(ae: &AEState<T>, mols: &[Molecule<T>], cond: Option<Vec<Vec<f64>>>) -> Self {
        let mut mu = Vec::with_capacity(mols.len());
        for chunk in mols.chunks(ae.model.config.batch_size.max(1)) {
            let refs: Vec<&Molecule<T>> = chunk.iter().collect();
            let e = encode::<T, ChaCha8Rng>(ae, &refs, None);
            for (&off, &n) in e.batch.offsets().iter().zip(e.batch.sizes()) {
                let w = e.mu.cols();
                mu.push(Tensor::from_vec(&[n, w], e.mu.data()[off * w..(off + n) * w].to_vec()));
            }
        }
        Self {
            mu,
            sigma: ae.model.config.sigma,
            cond,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn width(&self) -> usize {
        self.mu.first().map_or(0, |m| m.cols())
    }

    pub fn cond_dim(&self) -> usize {
        self.cond.as_ref().and_then(|c| c.first()).map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub max_abs_cog: f64,
}

/// Trained denoiser with the schedule it was trained under.
#[derive(Clone, Debug)]
pub struct LdmState<T> {
    pub denoiser: Denoiser,
    /// Parameters used for sampling (the moving average when enabled).
    pub store: ParamStore<T>,
    pub schedule: NoiseSchedule<T>,
    pub config: LdmConfig,
    pub scale: LatentScale,
}

impl LdmConfig {
    pub fn validate(&self) -> Result<(), LdmError> {
        let bad = |m: &str| Err(LdmError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let Some(d) = self.ema {
            if !(0.0..1.0).contains(&d) {
                return bad("ema must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// Fit `ε_φ` on latents `z = μ + σ·ε` redrawn every step.
pub fn train_ldm<T: Real>(
    corpus: &LatentCorpus<T>,
    config: &LdmConfig,
    seed: u64,
    mut observe: impl FnMut(&StepLog),
) -> Result<(LdmState<T>, Vec<StepLog>), LdmError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(LdmError::Config("empty latent corpus".into()));
    }
    let schedule = build_schedule::<T>(config.steps, config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let width = corpus.width();
    let denoiser = Denoiser::new(&mut store, "den", &config.denoiser, width, corpus.cond_dim(), &mut rng);
    let mut adam = Adam::new(&store);
    let mut ema = config.ema.map(|_| store.clone());
    let lr = CosineSchedule {
        base: T::c(config.lr),
        floor: T::c(config.lr_floor),
        total: config.iterations,
    };
    let scale = if config.scale_latents {
        LatentScale::fit(&corpus.mu)
    } else {
        LatentScale::default()
    };
    let sigma = T::c(corpus.sigma);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let mut pick = Vec::with_capacity(config.batch_size);
        while pick.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(order[cursor]);
            cursor += 1;
        }
        let sizes: Vec<usize> = pick.iter().map(|&i| corpus.mu[i].rows()).collect();
        let batch = GraphBatch::new(&sizes);
        let mut data = Vec::with_capacity(batch.num_nodes() * width);
        for &i in &pick {
            data.extend_from_slice(corpus.mu[i].data());
        }
        let noise = latent_noise::<T>(&batch, width, &mut rng);
        let z = scale.normalize(&Tensor::from_vec(&[batch.num_nodes(), width], data).zip_map(&noise, |m, e| m + sigma * e));
        let cond = corpus.cond.as_ref().map(|c| {
            let rows: Vec<T> = pick.iter().flat_map(|&i| c[i].iter().map(|&v| T::c(v))).collect();
            Tensor::from_vec(&[pick.len(), corpus.cond_dim()], rows)
        });

        store.zero_grad();
        let mut g = Graph::new();
        let loss = training_loss(&mut g, &store, &denoiser, &schedule, &batch, &z, &mut rng, cond.as_ref());
        let value = g.value(loss).item();
        let grads = g.backward(loss).map_err(|e| LdmError::NonFinite {
            step,
            detail: e.to_string(),
        })?;
        if !value.is_finite() {
            return Err(LdmError::NonFinite {
                step,
                detail: format!("loss = {value}"),
            });
        }
        grads.accumulate(&mut store);
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut store, T::c(c));
        }
        let rate = lr.lr(step);
        adam.step(&mut store, rate);
        if let (Some(avg), Some(d)) = (ema.as_mut(), config.ema) {
            let d = T::c(d);
            for (a, p) in avg.iter_mut().zip(store.iter()) {
                a.value = a.value.zip_map(&p.1.value, |x, y| d * x + (T::one() - d) * y);
            }
        }
        let log = StepLog {
            step,
            lr: rate.f64(),
            loss: value.f64(),
            max_abs_cog: batch.max_abs_cog(&z, 3).f64(),
        };
        observe(&log);
        history.push(log);
    }
    Ok((
        LdmState {
            denoiser,
            store: ema.unwrap_or(store),
            schedule,
            config: config.clone(),
            scale,
        },
        history,
    ))
}
