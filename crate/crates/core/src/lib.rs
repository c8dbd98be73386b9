//! Paraphrastic sentence embeddings.
//!
//! Six compositional encoders (word averaging, projection, deep averaging
//! network, RNN, identity-RNN, LSTM) trained on paraphrase pairs with a
//! margin-based contrastive loss over in-batch negatives, together with
//! supervised similarity/entailment/sentiment heads, transfer modes, and the
//! evaluation and analysis tools used to study the trained models.
//!
//! The crate is organised bottom-up:
//!
//! - [`textdata`]: tokenization, vocabulary, embedding and dataset files.
//! - [`numerics`]: dense linear algebra, seeded RNG, correlations, gradient checks.
//! - [`encoders`]: forward and reverse-mode passes for every architecture.
//! - [`objective`]: negative selection and the regularized margin loss.
//! - [`optim`]: AdaGrad, Adam, clipping and the paraphrase training loop.
//! - [`supervised`]: task heads and the scratch/universal/frozen training modes.
//! - [`eval`]: STS-style evaluation and the qualitative analyses.
//! - [`bundle`]: on-disk model persistence.
//! - [`cli`]: command implementations behind the `sentemb` binary.

pub mod bundle;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod supervised;
pub mod synth;
pub mod textdata;

pub use encoders::{Activation, Architecture, Encoder, EncoderGrads};
pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use objective::{Sampling, TrainConfig};
pub use optim::OptimizerKind;
pub use textdata::{EmbeddingTable, Vocab};
