//! Explicit-state model checker for tree-shaped 2PC with dynamic
//! participant addition, and conformance replay of simulator traces
//! against the same transition relation.

pub mod actions;
pub mod explore;
pub mod replay;
pub mod state;
