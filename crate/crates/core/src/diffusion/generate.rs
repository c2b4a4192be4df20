use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{decode, AEState};
use crate::diffusion::{sample_latents, DiffusionError, LdmState, SizeDistribution, Standardizer};
use crate::molecules::Molecule;
use crate::nets::GraphBatch;
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Everything needed to sample molecules.
#[derive(Clone, Copy, Debug)]
pub struct ModelBundle<'a, T> {
    pub ae: &'a AEState<T>,
    pub ldm: &'a LdmState<T>,
    pub sizes: &'a SizeDistribution,
    pub standardizer: Option<&'a Standardizer>,
}

/// Molecules sampled per reverse chain batch.
pub const SAMPLE_BATCH: usize = 50;

/// Draw `N ~ p(N)`, run the reverse chain from `z_T`, decode.
/// `condition` holds raw property values, one row shared by all samples.
pub fn generate<T: Real>(
    bundle: &ModelBundle<'_, T>,
    n_samples: usize,
    seed: u64,
    condition: Option<&[f64]>,
) -> Result<Vec<Molecule<T>>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..n_samples).map(|_| bundle.sizes.sample(&mut rng)).collect();
    let width = bundle.ldm.denoiser.latent_dim;
    let cond_dim = bundle.ldm.denoiser.cond_dim;
    let expects = || DiffusionError::Condition(format!("model expects {cond_dim} condition values"));
    let row = if cond_dim == 0 {
        if condition.is_some() {
            return Err(DiffusionError::Condition("model is unconditional".into()));
        }
        None
    } else {
        let (c, st) = condition.zip(bundle.standardizer).ok_or_else(expects)?;
        if c.len() != cond_dim {
            return Err(expects());
        }
        Some(st.transform(c))
    };
    let mut out = Vec::with_capacity(n_samples);
    for chunk in sizes.chunks(SAMPLE_BATCH) {
        let batch = GraphBatch::new(chunk);
        let cond = row.as_ref().map(|c| {
            let data = (0..chunk.len()).flat_map(|_| c.iter().map(|&v| T::c(v))).collect();
            Tensor::from_vec(&[chunk.len(), cond_dim], data)
        });
        let z = sample_latents(
            &bundle.ldm.schedule,
            &bundle.ldm.denoiser,
            &bundle.ldm.store,
            &batch,
            width,
            &mut rng,
            cond.as_ref(),
        )?;
        out.extend(decode(bundle.ae, &batch, &bundle.ldm.scale.denormalize(&z)));
    }
    Ok(out)
}
