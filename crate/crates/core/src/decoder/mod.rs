//! Language-tagged autoregressive text decoder, its denoising pretraining
//! objective and beam search.

pub mod beam;
pub mod loss;
pub mod model;
pub mod noise;
pub mod vocab;

pub use beam::{beam_search, greedy_decode, DecoderScorer, Hypothesis, StepScorer};
pub use loss::label_smoothed_ce;
pub use model::{bracket, teacher_forcing, DecoderConfig, TextDecoder, TextEncoder};
pub use noise::{apply_noise, apply_noise_detailed, denoising_loss, pretrain_denoising, DenoisingConfig, NoiseConfig, Noised, TaggedText};
pub use vocab::{lang_token, Vocab, BOS, EOS, MASK, PAD};
