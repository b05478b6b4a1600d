//! Log-domain tensor arithmetic with reverse-mode differentiation.

pub mod gradcheck;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport};
pub use params::{Gradients, ParamStore};
pub use tape::{CustomOp, GradSink, Tape, Var};
