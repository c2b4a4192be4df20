//! Alignment autoencoder: a rotation network feeding a 1-layer EGNN
//! encoder and a non-equivariant GNN decoder, trained jointly.

mod model;
mod train;

pub use model::{AeBatch, Autoencoder, Decoded, Encoded, LossParts, CHARGE_SCALE};
pub use train::{
    decode, encode, reconstruction_loss, reconstruction_metrics, train_autoencoder, AEState, Encoding, EpochLog,
    ReconMetrics,
};

use serde::{Deserialize, Serialize};

/// Decoder family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    #[default]
    Gnn,
    /// Equivariant stand-in; with it the rotation network receives no signal.
    Egnn,
}

/// Source of the per-molecule rotation applied before encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    #[default]
    Learned,
    /// `R = I`; inputs are used in their given frame (e.g. after PCA alignment).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AEConfig {
    /// Latent feature channels `d'`.
    pub latent_dim: usize,
    /// Latent noise scale `σ`.
    pub sigma: f64,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub encoder_hidden: usize,
    pub rotation_hidden: usize,
    pub decoder: DecoderKind,
    pub rotation: RotationMode,
    /// Apply a Haar-random rotation to every training molecule.
    pub augment_rotations: bool,
    /// Feed and reconstruct formal charges.
    pub charges: bool,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Held-out fraction when no validation set is given; 0 validates on the training set.
    pub val_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            sigma: 0.1,
            decoder_layers: 3,
            decoder_hidden: 128,
            encoder_hidden: 64,
            rotation_hidden: 64,
            decoder: DecoderKind::Gnn,
            rotation: RotationMode::Learned,
            augment_rotations: false,
            charges: false,
            lr: 1e-4,
            lr_floor: 0.0,
            batch_size: 64,
            epochs: 200,
            patience: 20,
            val_fraction: 0.1,
            grad_clip: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AeError {
    #[error("invalid autoencoder config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
}

impl AEConfig {
    pub fn validate(&self) -> Result<(), AeError> {
        let bad = |m: &str| Err(AeError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be finite and non-negative");
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.decoder_hidden == 0 || self.encoder_hidden == 0 || self.rotation_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

