//! ELBO evaluation, gradient assembly, closed-form π/b updates, expert
//! pretraining and the decoder schedules.

mod closed_form;
mod objective;
mod pretrain;
mod train;

pub use closed_form::{update_pi_b, Accumulators};
pub use objective::{
    decoder_gradient, encoder_gradient, encoder_gradient_component, kl_gaussian_standard,
    objective, Component, FrozenNoise, HeadTerm, ObjectiveOutput, ObjectiveSpec,
};
pub use pretrain::{pretrain_expert, Expert, PretrainConfig};
pub use train::{build_model, train, DecoderSchedule, EpochRecord, TrainConfig, TrainReport};

use crate::error::Result;
use crate::inference::posterior_pass;
use crate::msvae::MsVae;

/// Eval-mode ELBO estimate per data point over the rows of `x`, using `M`
/// joint latent samples per point drawn from `seed`.
pub fn elbo(model: &MsVae, x: &[f64], m: usize, seed: u64) -> Result<f64> {
    Ok(posterior_pass(model, x, m, seed)?.elbo)
}
