//! Monaural speech separation in the time domain.
//!
//! A mixture waveform is cut into overlapping frames and encoded by a stack
//! of gated 1-D convolutions with layer normalization. Bidirectional LSTMs
//! then run over the frame sequence, and dense layers emit one waveform frame
//! per source. Overlap-add turns those frames back into signals. Training maximizes the
//! utterance-level SDR under the best output-to-speaker permutation, with
//! gradients from the reverse-mode engine in [`autodiff`].
//!
//! Independent units of work (examples in a batch, evaluation utterances,
//! corpus synthesis, STFT frames) go through [`par`], which uses rayon when
//! the `parallel` feature is on and [`par::Execution::Parallel`] is chosen.
//!
//! ```no_run
//! use furcanet::corpus::{generate_examples, CorpusConfig, Split};
//! use furcanet::model::ModelConfig;
//! use furcanet::par::Execution;
//! use furcanet::training::{train, CheckpointPolicy, TrainConfig};
//!
//! let train_set = generate_examples(&CorpusConfig::desk(Split::Train, 0), Execution::Parallel)?;
//! let dev_set = generate_examples(&CorpusConfig::desk(Split::Dev, 0), Execution::Parallel)?;
//! let (model, report) = train(
//!     &ModelConfig::default(),
//!     &train_set,
//!     &dev_set,
//!     &TrainConfig::default(),
//!     &CheckpointPolicy::default(),
//! )?;
//! let estimates = model.separate(&dev_set[0].mixture)?;
//! println!("best dev loss {:.2} dB, {} outputs", report.best_dev_loss, estimates.len());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corpus;
pub mod evaluate;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod signal;
pub mod spectral;
pub mod training;
