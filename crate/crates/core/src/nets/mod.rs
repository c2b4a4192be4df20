//! Message-passing layers, the rotation network and the two denoisers.

mod batch;
mod denoiser;
mod layers;

pub use batch::{GraphBatch, PaddedBatch};
pub use denoiser::{timestep_embedding, Denoiser, DenoiserConfig, DenoiserInput};
pub use layers::{EdgeDims, EdgeMlp, EgnnLayer, GnnLayer, LayerDims, Linear, Mlp, RotationNet};

use rand::Rng;

use crate::numcore::{ParamStore, Tensor};
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("molecule {0} has no real atoms")]
    EmptyMolecule(usize),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Overwrite every parameter whose name starts with `prefix` with
/// Uniform(−scale, scale) values. Used to probe zero-initialised blocks.
pub fn randomize_params<T: Real>(store: &mut ParamStore<T>, prefix: &str, scale: f64, rng: &mut impl Rng) {
    for id in store.ids_with_prefix(prefix) {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.random_range(-scale..scale))).collect();
        store.get_mut(id).value = Tensor::from_vec(&shape, data);
    }
}
