//! Time-slicing solver for nonlinear parabolic equations of Leray-Lions type
//! on time-dependent, possibly jumping, spatial domains.
//!
//! The space-time domain is cut into slabs `[t_k, t_{k+1}) x Omega(t_k)`. On
//! each slab the domain is frozen and the equation is integrated by implicit
//! Euler; at each knot the state is copied on the overlap of consecutive
//! sections and reset to the boundary data on newly created region.

pub mod expr;
pub mod geometry;
pub mod flux;
pub mod slice_solver;
pub mod stitcher;
pub mod diagnostics;
pub mod io;
