use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autoencoder::{AEConfig, AeBatch, AeError, Autoencoder, CHARGE_SCALE};
use crate::diffusion::{latent_noise, LatentState};
use crate::molecules::Molecule;
use crate::nets::GraphBatch;
use crate::numcore::{clip_grad_norm, Adam, CosineSchedule, Graph, ParamStore, Tensor};
use crate::rotation::{apply_rotation, haar_rotation, RotationMatrix};
use crate::scalar::Real;

/// Parameters `θ, η, ψ` with optimiser moments and progress counters.
#[derive(Clone, Debug)]
pub struct AEState<T> {
    pub model: Autoencoder,
    pub store: ParamStore<T>,
    pub optimizer: Adam<T>,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl<T: Real> AEState<T> {
    pub fn new(config: &AEConfig, num_types: usize, seed: u64) -> Result<Self, AeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Autoencoder::new(&mut store, config, num_types, &mut rng);
        Ok(Self {
            optimizer: Adam::new(&store),
            model,
            store,
            epoch: 0,
            best_epoch: 0,
            best_val: f64::INFINITY,
        })
    }
}

/// Training-curve record, one per epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rmsd: f64,
    pub val_type_accuracy: f64,
    pub grad_theta_min: f64,
    pub grad_theta_max: f64,
    pub max_abs_cog: f64,
}

/// Result of [`encode`].
#[derive(Clone, Debug)]
pub struct Encoding<T> {
    pub batch: GraphBatch,
    pub latent: LatentState<T>,
    pub mu: Tensor<T>,
    pub rotations: Vec<RotationMatrix<T>>,
}

fn rotations_from<T: Real>(r: &Tensor<T>) -> Vec<RotationMatrix<T>> {
    (0..r.rows())
        .map(|b| {
            let m = r.row(b);
            RotationMatrix::from_matrix_unchecked(std::array::from_fn(|i| std::array::from_fn(|j| m[3 * i + j])))
        })
        .collect()
}

/// Encode molecules; `rng = None` returns the mean (`σ·ε` omitted).
pub fn encode<T: Real, R: Rng>(state: &AEState<T>, mols: &[&Molecule<T>], rng: Option<&mut R>) -> Encoding<T> {
    let ab = AeBatch::new(mols, state.model.num_types, state.model.config.charges);
    let noise = rng.map(|r| latent_noise::<T>(&ab.batch, state.model.latent_width(), r));
    let mut g = Graph::new();
    let e = state.model.encode_graph(&mut g, &state.store, &ab, None, noise.as_ref());
    Encoding {
        latent: LatentState {
            z: g.value(e.z).clone(),
            t: 0,
        },
        mu: g.value(e.mu).clone(),
        rotations: rotations_from(g.value(e.r)),
        batch: ab.batch,
    }
}

/// Decode latents into molecules: argmax types, charges rounded back to integers.
pub fn decode<T: Real>(state: &AEState<T>, batch: &GraphBatch, z: &Tensor<T>) -> Vec<Molecule<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let d = state.model.decode_graph(&mut g, &state.store, batch, zv);
    let (x, logits) = (g.value(d.x), g.value(d.logits));
    let charge = d.charge.map(|c| g.value(c).clone());
    batch
        .offsets()
        .iter()
        .zip(batch.sizes())
        .map(|(&off, &n)| {
            let coords = Tensor::from_vec(&[n, 3], x.data()[off * 3..(off + n) * 3].to_vec());
            let types = (off..off + n).map(|i| argmax(logits.row(i))).collect();
            let mut m = Molecule::new(coords, types);
            if let Some(c) = &charge {
                m.charges = Some((off..off + n).map(|i| (c.at(i, 0).f64() / CHARGE_SCALE).round() as i32).collect());
            }
            m
        })
        .collect()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Loss of one batch with a fresh latent-noise draw.
pub fn reconstruction_loss<T: Real>(state: &AEState<T>, mols: &[&Molecule<T>], rng: &mut impl Rng) -> f64 {
    let ab = AeBatch::new(mols, state.model.num_types, state.model.config.charges);
    let noise = latent_noise::<T>(&ab.batch, state.model.latent_width(), rng);
    let mut g = Graph::new();
    let l = state.model.loss_graph(&mut g, &state.store, &ab, Some(&noise), None);
    g.value(l.total).item().f64()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconMetrics {
    /// Loss with a fixed noise draw.
    pub loss: f64,
    /// Over all atoms, from the mean encoding, against `R x`.
    pub rmsd: f64,
    pub type_accuracy: f64,
}

/// Loss (noise seeded by `seed`), RMSD and type accuracy over `mols`.
pub fn reconstruction_metrics<T: Real>(state: &AEState<T>, mols: &[&Molecule<T>], seed: u64) -> ReconMetrics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = state.model.config.batch_size;
    let (mut loss, mut sq, mut atoms, mut hit) = (0.0, 0.0, 0usize, 0usize);
    for chunk in mols.chunks(bs) {
        let ab = AeBatch::new(chunk, state.model.num_types, state.model.config.charges);
        let noise = latent_noise::<T>(&ab.batch, state.model.latent_width(), &mut rng);
        let mut g = Graph::new();
        let l = state.model.loss_graph(&mut g, &state.store, &ab, Some(&noise), None);
        loss += g.value(l.total).item().f64() * chunk.len() as f64;

        let mut g = Graph::new();
        let p = state.model.loss_graph(&mut g, &state.store, &ab, None, None);
        let (x, t, lg) = (g.value(p.dec.x), g.value(p.enc.xr), g.value(p.dec.logits));
        sq += x.zip_map(t, |a, b| (a - b) * (a - b)).sum().f64();
        atoms += x.rows();
        hit += (0..x.rows()).filter(|&i| argmax(lg.row(i)) == ab.types[i]).count();
    }
    ReconMetrics {
        loss: loss / mols.len().max(1) as f64,
        rmsd: (sq / atoms.max(1) as f64).sqrt(),
        type_accuracy: hit as f64 / atoms.max(1) as f64,
    }
}

/// Stop once validation RMSD falls below this with perfect type accuracy.
fn reached(target: Option<f64>, m: &ReconMetrics) -> bool {
    target.is_some_and(|r| m.rmsd < r && m.type_accuracy == 1.0)
}

/// Joint training of rotation network, encoder and decoder with early
/// stopping on the validation loss. Returns the best-validation state.
pub fn train_autoencoder<T: Real>(
    train: &[Molecule<T>],
    validation: Option<&[Molecule<T>]>,
    config: &AEConfig,
    num_types: usize,
    seed: u64,
    stop_rmsd: Option<f64>,
    mut observe: impl FnMut(&EpochLog),
) -> Result<(AEState<T>, Vec<EpochLog>), AeError> {
    config.validate()?;
    if train.is_empty() {
        return Err(AeError::EmptyDataset);
    }
    let mut state = AEState::new(config, num_types, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ae00);
    let val_seed = seed.wrapping_add(1);

    let mut idx: Vec<usize> = (0..train.len()).collect();
    let (train_idx, val): (Vec<usize>, Vec<&Molecule<T>>) = match validation {
        Some(v) => (idx, v.iter().collect()),
        None if config.val_fraction > 0.0 && train.len() > 1 => {
            idx.shuffle(&mut rng);
            let k = ((train.len() as f64 * config.val_fraction).ceil() as usize).clamp(1, train.len() - 1);
            let val = idx[..k].iter().map(|&i| &train[i]).collect();
            (idx[k..].to_vec(), val)
        }
        None => (idx, train.iter().collect()),
    };
    let mut order = train_idx;
    let per_epoch = order.len().div_ceil(config.batch_size);
    let lr = CosineSchedule {
        base: T::c(config.lr),
        floor: T::c(config.lr_floor),
        total: per_epoch * config.epochs,
    };
    let rot_ids = state.store.ids_with_prefix(state.model.rotation_prefix());
    let mut best = state.clone();
    let mut history = Vec::new();
    let mut stale = 0;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        let (mut gmin, mut gmax, mut cog) = (f64::INFINITY, 0.0f64, 0.0f64);
        let mut lr_now = config.lr;
        for chunk in order.chunks(config.batch_size) {
            let mols: Vec<Molecule<T>> = chunk
                .iter()
                .map(|&i| {
                    let m = &train[i];
                    if config.augment_rotations {
                        m.with_coords(apply_rotation(&haar_rotation(&mut rng), &m.coords))
                    } else {
                        m.clone()
                    }
                })
                .collect();
            let refs: Vec<&Molecule<T>> = mols.iter().collect();
            let ab = AeBatch::new(&refs, num_types, config.charges);
            let noise = latent_noise::<T>(&ab.batch, state.model.latent_width(), &mut rng);

            state.store.zero_grad();
            let mut g = Graph::new();
            let parts = state.model.loss_graph(&mut g, &state.store, &ab, Some(&noise), None);
            let value = g.value(parts.total).item();
            cog = cog.max(ab.batch.max_abs_cog(g.value(parts.enc.z), 3).f64());
            let grads = g.backward(parts.total).map_err(|e| AeError::NonFinite {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            if !value.is_finite() {
                return Err(AeError::NonFinite {
                    epoch,
                    step,
                    detail: format!("loss = {value}"),
                });
            }
            grads.accumulate(&mut state.store);
            let gt = state.store.grad_norm(rot_ids.iter().copied()).f64();
            gmin = gmin.min(gt);
            gmax = gmax.max(gt);
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut state.store, T::c(c));
            }
            let rate = lr.lr(step);
            lr_now = rate.f64();
            state.optimizer.step(&mut state.store, rate);
            step += 1;
            total += value.f64() * chunk.len() as f64;
            count += chunk.len();
        }
        state.epoch = epoch;
        let m = reconstruction_metrics(&state, &val, val_seed);
        let log = EpochLog {
            epoch,
            lr: lr_now,
            train_loss: total / count as f64,
            val_loss: m.loss,
            val_rmsd: m.rmsd,
            val_type_accuracy: m.type_accuracy,
            grad_theta_min: if gmin.is_finite() { gmin } else { 0.0 },
            grad_theta_max: gmax,
            max_abs_cog: cog,
        };
        observe(&log);
        history.push(log);
        if m.loss < state.best_val {
            state.best_val = m.loss;
            state.best_epoch = epoch;
            best = state.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if reached(stop_rmsd, &m) {
            best = state.clone();
            best.best_val = m.loss;
            best.best_epoch = epoch;
            break;
        }
        if stale >= config.patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", state.best_epoch);
            break;
        }
    }
    best.epoch = state.epoch;
    Ok((best, history))
}
