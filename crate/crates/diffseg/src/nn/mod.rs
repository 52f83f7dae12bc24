//! Minimal layer toolkit with hand-written backward passes over ndarray.
//!
//! There is deliberately no general autodiff: the architecture is fixed,
//! every layer returns a cache from `forward` that its `backward` consumes,
//! and all parameters live in one flat [`Params`] store, which keeps
//! optimizer updates, clipping, and checkpoints bit-exact and simple.

pub mod act;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod params;

pub use act::{sigmoid_backward, sigmoid_forward, silu_backward, silu_forward};
pub use conv::{Conv3d, ConvTranspose3d};
pub use linear::Linear;
pub use norm::GroupNorm;
pub use params::{Grads, ParamId, Params};
