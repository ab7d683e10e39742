//! Neural networks whose layers hold several task models in superposition.
//!
//! Dense layers bind their input with the task key before the linear map;
//! convolutional layers bind their kernel. Backpropagation is written out by
//! hand so training through the superposition can be checked against finite
//! differences and against training each model alone.

pub mod equivalence;
pub mod layer;
pub mod loss;
pub mod network;
pub mod sgd;

pub use equivalence::{
    audit_spec, finite_difference_audit, gradient_equivalence_check, readout_trajectory_check,
    EquivalenceConfig, EquivalenceReport,
};
pub use layer::{Activation, ContextSel, ConvGeometry, Layer, LayerGrads, PspConv, PspDense};
pub use loss::{complex_readout, mean_squared_error, softmax_cross_entropy};
pub use network::{build_model, load_model, score, LayerSpec, Model, Network, NetworkSpec};
pub use sgd::{sgd_step, SgdConfig};
