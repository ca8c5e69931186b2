//! Joint monocular vehicle velocity and inter-vehicle distance estimation.
//!
//! The pipeline estimates, for every vehicle visible in a pair of monocular
//! frames, its planar position, scalar distance, and relative velocity in the
//! camera frame. Three feature streams (motion, context, spatial) are fused by
//! an attention block and decoded by a small regression head; training uses a
//! robust regression loss, an edge-aware flow smoothness loss, and a global
//! relative constraint that couples vehicles of the same frame.
//!
//! The crate ships its own synthetic scene generator with exact ground truth,
//! so the whole stack is trainable and testable on a single CPU.

// Validation guards are written as negated comparisons (`!(x > 0.0)`) on
// purpose: unlike `x <= 0.0`, they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod scenegen;
pub mod streams;
pub mod tape;
