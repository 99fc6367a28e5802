//! Streaming matrix factorisation with matrix-variate recursive linear filters.
//!
//! `Y ≈ C X` is learned one column at a time. The dictionary `C` is the latent
//! state of a linear-Gaussian model whose covariance stays Kronecker-structured
//! (`V ⊗ I_m`), so each update costs `O(m·r + r²)` plus an `r×r` solve.
//!
//! - [`linalg`]: dense kernels (Cholesky, Kronecker, `vec`).
//! - [`model`]: the filter itself, masked variants and the pass loop.
//! - [`oracle`]: the naive `mr`-dimensional filter, for certification.
//! - [`baselines`]: SGD / Broyden and multiplicative-update NMF.
//! - [`data`]: CSV and PGM I/O, masks, sampling, synthetic data.
//! - [`experiment`]: restoration runs, SNR and comparison tables.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector};
pub use model::{DictionaryState, ModelConfig, Observation};
