//! Dense networks, spectral normalization, Adam and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layer;
pub mod mlp;

pub use adam::AdamState;
pub use gradcheck::grad_check;
pub use layer::{Activation, DenseLayer, LayerGrads, LEAKY_SLOPE};
pub use mlp::{spectral_norm_exact, ForwardCache, LayerSpec, Mlp, MlpGrads};
