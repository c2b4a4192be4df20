//! Configuration, checkpoints and the train / sample / eval / align commands.

mod checkpoint;
mod commands;
mod config;

use std::path::{Path, PathBuf};

pub use checkpoint::{ArrayEntry, Checkpoint, Manifest, FORMAT_VERSION};
pub use commands::{
    ae_checkpoint, cmd_align_pca, cmd_eval, cmd_sample, cmd_train_ae, cmd_train_ldm, load_ae, load_ldm,
    load_training_set, log_path, JsonLog, LoadedLdm, TrainAeReport, TrainLdmReport,
};
pub use config::{RunConfig, SampleConfig};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Archive(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Molecule(#[from] crate::molecules::MoleculeError),
    #[error(transparent)]
    Autoencoder(#[from] crate::autoencoder::AeError),
    #[error(transparent)]
    Ldm(#[from] crate::diffusion::LdmError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

impl HarnessError {
    pub fn io(path: &Path, e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source: e.into(),
        }
    }

    /// 1 for usage and configuration errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            _ => 2,
        }
    }
}
