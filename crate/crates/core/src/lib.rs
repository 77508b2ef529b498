//! C-RNN-GAN: adversarially trained recurrent networks over continuous tone
//! quadruplets (duration, frequency, intensity, onset delta) extracted from
//! MIDI files.
//!
//! * [`midi`] reads and writes Standard MIDI Files.
//! * [`features`] turns songs into normalized sequences and samples batches.
//! * [`nn`] holds the LSTM/dense layers, gradients, SGD and gradient checking.
//! * [`models`] defines the generator and the bidirectional discriminator.
//! * [`training`] implements the losses, pretraining, adversarial training
//!   with freezing and feature matching, and the maximum-likelihood baseline.
//! * [`metrics`] computes the evaluation statistics of generated music.
//! * [`cli`] wires everything into reproducible command-line runs.

pub mod cli;
pub mod features;
pub mod metrics;
pub mod midi;
pub mod models;
pub mod nn;
pub mod training;
