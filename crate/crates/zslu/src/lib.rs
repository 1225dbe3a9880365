//! Named entity recognition directly from speech, trained with zero paired
//! audio/annotation data. The pipeline trains a CTC speech recognizer on a
//! synthetic feature world, learns a text-to-embedding model that mimics the
//! recognizer's hidden representations, trains a tagging decoder on those
//! simulated embeddings, and grafts the decoder onto the recognizer to form a
//! single end-to-end model — plus the synthetic-speech and cascade baselines
//! it is compared against.

pub mod align;
pub mod alphabet;
pub mod asr;
pub mod checkpoint;
pub mod corpus;
pub mod ctc;
pub mod kvtext;
pub mod mat;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod slu;
pub mod t2e;
pub mod tags;
pub mod train;

/// Scalar used by the desk-scale pipeline. Gradient checks instantiate all
/// numeric code at `f64` instead.
pub type Real = f32;

/// Time-major matrix of pipeline scalars.
pub type RealMat = mat::Mat<Real>;
