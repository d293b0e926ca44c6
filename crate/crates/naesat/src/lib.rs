//! Desk-scale laboratory for random regular k-NAE-SAT clusters.
//!
//! The model: n variables of degree d, m = nd/k clauses of width k, wired by
//! a uniform matching of half-edges with i.i.d. literal signs. Solutions are
//! assignments where no clause sees all-equal literal values. The crate
//! implements the cluster encoding (frozen, message, and coloring
//! configurations), exact enumeration oracles, the truncated belief
//! propagation fixed point, and the 1RSB constants derived from it.

pub mod bp;
pub mod coloring;
pub mod exact;
pub mod firstmoment;
pub mod freetree;
pub mod frozen;
pub mod instance;
pub mod oracle;

pub use instance::{Assignment, Instance};
