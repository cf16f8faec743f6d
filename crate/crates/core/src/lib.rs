//! Event-guided, exposure-agnostic video frame interpolation at desk scale.
//!
//! The crate covers the whole path from a synthetic latent scene to an
//! interpolated sharp frame:
//!
//! * [`events`]: event streams, temporal stacks and signed integration.
//! * [`sim`]: moving scenes, a contrast-threshold event model, blur synthesis
//!   and blind exposure sampling.
//! * [`edi`]: closed-form latent recovery from a blurry frame plus events.
//! * [`tensor`]: a small reverse-mode autodiff kernel with finite-difference
//!   checking.
//! * [`net`]: the interpolation network (target-adaptive event sampling,
//!   importance mapping, adaptive blending, decoder, Charbonnier loss).
//! * [`pipeline`]: training, inference, evaluation and analysis.

pub mod edi;
pub mod events;
pub mod frame;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod tensor;
