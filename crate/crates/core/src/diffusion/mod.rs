//! Latent diffusion: noise schedule, forward process and posterior,
//! noise-prediction loss, ancestral sampling, `p(N)` and conditioning.

mod condition;
mod generate;
mod process;
mod schedule;
mod size;
mod train;

pub use condition::Standardizer;
pub use process::{
    cog_correct, draw_noise, forward_noise, latent_noise, predict_noise_tensor, reverse_step, sample_latents,
    training_loss, training_loss_with, LatentState, NoiseDraw, NoiseModel,
};
pub use schedule::{
    build_schedule, elbo_terms, posterior_params, predict_x, transition_coeffs, NoiseSchedule, PosteriorCoeffs,
    ScheduleKind, ALPHA_FLOOR, SCHEDULE_PRECISION,
};
pub use generate::{generate, ModelBundle, SAMPLE_BATCH};
pub use size::SizeDistribution;
pub use train::{train_ldm, LatentCorpus, LatentScale, LdmConfig, LdmError, LdmState, StepLog};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("steps must satisfy 0 <= s < t <= T (got s={s}, t={t})")]
    StepOrder { s: usize, t: usize },
    #[error("ELBO weight is defined for 1 <= t <= T (got {0})")]
    ElboStep(usize),
    #[error("size distribution: {0}")]
    Sizes(String),
    #[error("conditioning: {0}")]
    Condition(String),
    #[error("non-finite latent after the step from t={0}")]
    NonFinite(usize),
}
