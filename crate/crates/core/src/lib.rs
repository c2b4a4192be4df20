//! Rotationally aligned latent diffusion for 3D molecules: an autodiff core,
//! SO(3) utilities, graph and transformer networks, the alignment
//! autoencoder, latent diffusion, molecule metrics and a run harness.
//!
//! Everything numeric is generic over [`scalar::Real`]; the aliases below
//! fix the scalar to `f64` (the precision all training uses) or `f32`.

pub mod autoencoder;
pub mod diffusion;
pub mod harness;
pub mod molecules;
pub mod nets;
pub mod numcore;
pub mod rotation;
pub mod scalar;

pub type Tensor = numcore::Tensor<f64>;
pub type Graph = numcore::Graph<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
pub type RotationMatrix = rotation::RotationMatrix<f64>;
pub type Molecule = molecules::Molecule<f64>;
pub type AEState = autoencoder::AEState<f64>;
pub type NoiseSchedule = diffusion::NoiseSchedule<f64>;
pub type LdmState = diffusion::LdmState<f64>;

pub type TensorF32 = numcore::Tensor<f32>;
pub type MoleculeF32 = molecules::Molecule<f32>;
pub type NoiseScheduleF32 = diffusion::NoiseSchedule<f32>;
