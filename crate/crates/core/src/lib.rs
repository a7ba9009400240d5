//! Federated transfer learning of a dense classification head.
//!
//! A frozen feature extractor (upstream, out of process) turns each input into
//! an embedding. Devices train only the final fully-connected layer on the
//! embeddings they see, each sample exactly once, and a server periodically
//! averages the device heads.
//!
//! - [`nn`]: the head itself: forward, softmax cross-entropy, backward, SGD.
//! - [`federation`]: FedAvg rounds and evaluation.
//! - [`wire`]: byte-exact model encoding and 4-byte framing.
//! - [`data`]: embedding dataset files, device streams, synthetic generators.
//! - [`simulator`]: seeded parameter sweeps with CSV output.
//! - [`runtime`]: TCP server and device agent speaking the wire format.

pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod nn;
pub mod runtime;
pub mod simulator;
pub mod wire;

pub use error::{Error, Result};
pub use federation::{average_blobs, evaluate, federated_round, run_training, ModelBlob, RoundConfig};
pub use nn::{footprint_bytes, DenseHead, EmbeddingSample, HeadShape, InitMode};
