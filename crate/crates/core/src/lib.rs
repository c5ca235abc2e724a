//! Memory-augmented encoder-decoder for sentence simplification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: `f64` tensors with a
//!   reverse-mode tape and a finite-difference checker.
//! * [`layers`]: embeddings, LSTM cell, MLP, affine maps.
//! * [`encoder`]: two-layer LSTM encoder and the Neural Semantic Encoder.
//! * [`decoder`], [`model`]: dot-product attention LSTM decoder and the full
//!   sequence-to-sequence model.
//! * [`search`]: greedy and beam decoding with attention-based UNK
//!   replacement.
//! * [`train`], [`checkpoint`]: cross-entropy training with Adam, model
//!   selection and the binary checkpoint format.
//! * [`metrics`]: corpus BLEU and SARI.
//! * [`corpus`], [`config`]: data ingestion, vocabularies and run presets.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod search;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, EwKind, Gradients, ParamGrad, Tape, Var};
pub use checkpoint::Checkpoint;
pub use corpus::{ParallelCorpus, Vocabulary};
pub use encoder::EncoderKind;
pub use error::{Error, Result};
pub use metrics::{bleu_corpus, evaluate, sari_corpus, EvalInstance, MetricReport, SariScore};
pub use model::{ModelConfig, Seq2Seq};
pub use search::{beam_decode, greedy_decode, replace_unks, BeamConfig, Hypothesis, StepModel};
pub use tensor::{ParamId, ParamStore, Tensor};
pub use train::{select_model, train, EpochRecord, TrainConfig, TrainOutcome, TuneMetric};
