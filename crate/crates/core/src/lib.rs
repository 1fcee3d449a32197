//! Negative-sampling embeddings of discrete joint distributions and
//! unnormalized language models trained with the NEG and NCE objectives.
//!
//! The crate is split into:
//!
//! * [`distlab`]: exact small-alphabet scores, PMI matrices, KL gaps and
//!   embedding trainers for a joint distribution `p(x, y)`.
//! * [`sampling`]: smoothed-unigram noise distributions with alias-method draws.
//! * [`encoder`]: context encoders (window log-bilinear and LSTM) with analytic
//!   gradients and truncated backpropagation through time.
//! * [`lm`]: the NCE / NEG / NEGLM / NEGLM-B estimators, training loop and
//!   perplexity evaluation.
//! * [`corpus`]: vocabulary, token streams and batching.
//! * [`synthetic`]: bigram chains with a known entropy rate.
//! * [`verify`]: randomized numerical checks behind the `verify` command.
//! * [`model_file`] and [`config`]: the binary model format and the flat
//!   key-value run configuration used by the `neglm` binary.

pub mod config;
pub mod corpus;
pub mod distlab;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod model_file;
pub mod numeric;
pub mod optim;
pub mod sampling;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};
