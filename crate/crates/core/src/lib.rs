//! Recursive cross-view 3D box estimation from RGB-D data.
//!
//! A 2D detection on the camera image seeds a frustum of points. The points
//! are rendered into two orthographic pseudo-views, detected again, and the
//! two 2D boxes are fused into a 3D box. Each step re-estimates the object
//! axes from the surviving points and repeats until the box stops changing.

// `!(x <= tol)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod axes;
pub mod boxops;
pub mod crossview;
pub mod detect;
pub mod geometry;
pub mod io;
pub mod recursion;
pub mod synthscene;
pub mod views;

#[cfg(test)]
mod testutil;

pub use geometry::*;
