//! Parameter superposition (PSP).
//!
//! Several task-specific linear models share one parameter block. Each model
//! is bound with a task context key before it is summed into the block, and is
//! read back out by binding the block with the same key:
//!
//! ```text
//! store:     W <- W + W_k C_k^-1
//! retrieve:  W_k ~ W C_k
//! apply:     y_k = W (C_k x)
//! ```
//!
//! Retrieval returns the stored model plus a residual that is unbiased and
//! whose variance shrinks as `1/M` in the input dimension. The crate is split
//! into:
//!
//! - [`linalg`]: dense real/complex matrices, seeded randomness, QR and Haar
//!   sampling of orthogonal matrices.
//! - [`context`]: binary, complex-phase, one-power and rotational keys.
//! - [`superposition`]: the superposed memory and its exact residual split.
//! - [`verify`]: Monte-Carlo suites for bias, variance and interference.

pub mod context;
pub mod error;
pub mod linalg;
pub mod superposition;
pub mod verify;

pub use context::{Bindable, ContextKey, ContextRegistry, Family};
pub use error::{PspError, Result};
pub use linalg::{ComplexMatrix, Matrix, RealMatrix, Scalar, SeededRng};
pub use num_complex::Complex64;
pub use superposition::{StoredModelLedger, SuperposedMemory};
